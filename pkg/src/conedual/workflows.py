"""Orchestration of the solve / simulate / verify / oracle / gap runs.

Each ``run_*`` returns a :class:`RunResult` holding a JSON-ready report,
a pass flag for the mathematical checks and any tables to be written as
CSV.  Reported numbers are tagged with where they come from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cone_qrm, fbsde, oracle, sde_sim
from .config import RunConfig, build_cone, build_cost, build_grid, build_market
from .cones import describe
from .conjugates import QuadraticCost
from .market import MarketModel

CLOSED_FORM = "closed_form"
MONTE_CARLO = "monte_carlo"
ORACLE = "oracle"


def tagged(value, provenance: str) -> dict:
    return {"value": float(value) + 0.0, "provenance": provenance}  # + 0.0 folds -0.0


@dataclass
class RunResult:
    report: dict
    passed: bool = True
    tables: dict = field(default_factory=dict)  # file name -> (header, rows)


@dataclass(frozen=True)
class Setup:
    config: RunConfig
    grid: object
    market: object
    cone: object
    cost: object

    @property
    def x0(self) -> float:
        return self.config.problem.x0

    @property
    def a(self) -> float:
        return self.config.problem.cost.a

    def problem(self, market=None) -> cone_qrm.ConeQRMProblem:
        return cone_qrm.ConeQRMProblem(market or self.market, self.cone, self.a, self.x0)

    def refined(self, factor: int = 2) -> "Setup":
        """Same coefficients on a grid with each interval split ``factor`` times."""
        grid = self.grid.refine(factor)
        m = self.market
        market = MarketModel(grid, *(np.repeat(t, factor, axis=0) for t in (m.r, m.b, m.sigma)), m.nondegeneracy_k)
        c = self.cost
        cost = QuadraticCost(*(np.repeat(t, factor, axis=0) for t in (c.Q, c.S, c.R)), c.a, c.c)
        return Setup(self.config, grid, market, self.cone, cost)


def build(config: RunConfig) -> Setup:
    spec = config.problem
    grid = build_grid(spec)
    market = build_market(spec, grid)
    cone = build_cone(spec, market.dim)
    cost = build_cost(spec, market.dim)
    if cost.has_running_cost or cost.c != 0:
        raise ValueError("the closed-form workflows cover terminal cost a X(T)^2 / 2 only (Q = S = R = 0, c = 0)")
    return Setup(config, grid, market, cone, cost)


def _sim_config(config: RunConfig, n_paths: int | None = None) -> sde_sim.SimConfig:
    s = config.sim
    return sde_sim.SimConfig(n_paths or s.n_paths, s.seed, s.scheme, s.antithetic)


def _header(setup: Setup, mode: str) -> dict:
    spec = setup.config.problem
    return {
        "mode": mode,
        "schema_version": setup.config.schema_version,
        "problem": {"T": spec.T, "n_steps": spec.n_steps, "x0": spec.x0, "a": spec.cost.a,
                    "dim": setup.market.dim, "cone": describe(setup.cone)},
    }


def run_solve(setup: Setup) -> RunResult:
    sol = cone_qrm.solve(setup.problem())
    report = _header(setup, "solve")
    report["results"] = {
        "y_hat": tagged(sol.y_hat, CLOSED_FORM),
        "J_star": tagged(sol.J_star, CLOSED_FORM),
        "Psi_star": tagged(sol.Psi_star, CLOSED_FORM),
        "P_hat_0": tagged(sol.P_hat[0], CLOSED_FORM),
        "xi_hat_0": [tagged(v, CLOSED_FORM) for v in sol.xi_hat[0]],
    }
    report["checks"] = dict(sol.checks)
    report["passed"] = sol.all_checks_pass
    return RunResult(report, sol.all_checks_pass, {"solution.csv": sol.table()})


def _mc_kernel(setup: Setup, sol, scheme):
    market, grid = setup.market, setup.grid

    def kernel(noise, start):
        if setup.x0 == 0:
            X = sde_sim.simulate_wealth(market, 0.0, noise, pi=np.zeros((grid.n_steps, market.dim)), scheme=scheme)
        else:
            X = sde_sim.simulate_wealth(market, setup.x0, noise, xi=sol.xi_hat, scheme=scheme)
        Y = sde_sim.simulate_dual(market, sol.y_hat, noise, eta=sol.eta, scheme=scheme)
        primal = sde_sim.primal_cost_samples(X, None, setup.cost, grid)
        dual = sde_sim.dual_cost_samples(setup.x0, Y, None, None, setup.cost, setup.cone, grid, gamma=sol.gamma_hat)
        return {"X_T": X[:, -1], "Y_T": Y[:, -1], "primal": primal, "dual": dual}

    return kernel


def _monte_carlo(setup: Setup):
    sol = cone_qrm.solve(setup.problem())
    cfg = _sim_config(setup.config)
    out = sde_sim.run_batched(cfg, setup.grid, setup.market.dim, _mc_kernel(setup, sol, cfg.scheme),
                              setup.config.sim.batch_size, setup.config.sim.workers)
    return sol, cfg, out


def _paths_table(out) -> tuple[list[str], np.ndarray]:
    n = out["X_T"].shape[0]
    rows = np.column_stack([np.arange(n), out["X_T"], out["Y_T"], out["primal"], out["dual"]])
    return ["path", "X_T", "Y_T", "primal_cost", "dual_cost"], rows


def _sim_block(cfg: sde_sim.SimConfig) -> dict:
    return {"n_paths": cfg.n_paths, "seed": cfg.seed, "scheme": cfg.scheme, "antithetic": cfg.antithetic}


def run_simulate(setup: Setup) -> RunResult:
    sol, cfg, out = _monte_carlo(setup)
    report = _header(setup, "simulate")
    report["sim"] = _sim_block(cfg)
    report["results"] = {
        "primal_cost": sde_sim.Estimate.from_samples(out["primal"]).to_dict(),
        "dual_cost": sde_sim.Estimate.from_samples(out["dual"]).to_dict(),
        "J_star": tagged(sol.J_star, CLOSED_FORM),
        "Psi_star": tagged(sol.Psi_star, CLOSED_FORM),
    }
    tables = {"paths.csv": _paths_table(out)} if setup.config.output.per_path_csv else {}
    return RunResult(report, True, tables)


def gap_within(gap: sde_sim.GapEstimate, sigmas: float) -> bool:
    """``|gap| <= sigmas * stderr`` with a rounding floor for zero-variance estimates."""
    floor = 1e-12 * (1.0 + abs(gap.primal.mean))
    return abs(gap.gap) <= sigmas * gap.stderr + floor


def run_gap(setup: Setup) -> RunResult:
    sol, cfg, out = _monte_carlo(setup)
    gap = sde_sim.duality_gap(out["primal"], out["dual"])
    sigmas = setup.config.tolerances.gap_sigmas
    passed = gap_within(gap, sigmas)
    report = _header(setup, "gap")
    report["sim"] = _sim_block(cfg)
    report["results"] = {"duality_gap": gap.to_dict(), "J_star": tagged(sol.J_star, CLOSED_FORM)}
    report["checks"] = {"gap_within_sigmas": passed, "sigmas": sigmas}
    report["passed"] = passed
    tables = {"paths.csv": _paths_table(out)} if setup.config.output.per_path_csv else {}
    return RunResult(report, passed, tables)


def certified_bundle(setup: Setup, n_paths: int):
    """Closed-form dual paths mapped to the primal side, on fresh seeded noise."""
    sol = cone_qrm.solve(setup.problem())
    cfg = _sim_config(setup.config, n_paths)
    dW = sde_sim.simulate_brownian(cfg, setup.grid, setup.market.dim)
    bundle = fbsde.dual_bundle_from_solution(sol, dW)
    return sol, fbsde.dual_to_primal_map(bundle, setup.market)


def run_verify(setup: Setup) -> RunResult:
    tol = setup.config.tolerances.check
    n_paths = setup.config.sim.n_paths
    _, bundle = certified_bundle(setup, n_paths)
    primal = fbsde.primal_condition_check(bundle, setup.market, setup.cost, setup.cone, tol)
    dual = fbsde.dual_condition_check(bundle, setup.market, setup.cost, setup.cone, setup.x0, tol)
    fine = setup.refined()
    _, fine_bundle = certified_bundle(fine, n_paths)
    residuals = {}
    for name, fn in (("primal_bsde", fbsde.primal_bsde_residual), ("dual_bsde", fbsde.dual_bsde_residual)):
        coarse = fn(bundle, setup.market, setup.cost)
        refined = fn(fine_bundle, fine.market, fine.cost)
        ratio = coarse.l2 / refined.l2 if refined.l2 > 0 else math.nan
        residuals[name] = {"n_steps": coarse.to_dict(), "2n_steps": refined.to_dict(), "l2_ratio": ratio}
    passed = primal.passed and dual.passed
    report = _header(setup, "verify")
    report["sim"] = {"n_paths": n_paths, "seed": setup.config.sim.seed}
    report["results"] = {
        "primal_condition": primal.to_dict(),
        "dual_condition": dual.to_dict(),
        "residuals": residuals,
        "provenance": MONTE_CARLO,
    }
    report["passed"] = passed
    return RunResult(report, passed)


def run_oracle(setup: Setup) -> RunResult:
    sol = cone_qrm.solve(setup.problem())
    ospec = setup.config.oracle
    dp_cfg = oracle.DPConfig(ospec.n_steps, ospec.noise, ospec.gh_nodes)
    sign = -1.0 if setup.x0 < 0 else 1.0
    P, controls = oracle.dp_value_recursion(setup.market, setup.cone, setup.a, dp_cfg, wealth_sign=sign)
    rel = abs(P[0] - sol.P_hat[0]) / sol.P_hat[0]
    results = {
        "P_hat_0": tagged(sol.P_hat[0], CLOSED_FORM),
        "P_0_dp": tagged(P[0], ORACLE),
        "P_0_relative_delta": tagged(rel, ORACLE),
        "J_star": tagged(sol.J_star, CLOSED_FORM),
        "J_dp": tagged(0.5 * P[0] * setup.x0**2, ORACLE),
    }
    if setup.x0 != 0 and controls.shape[0] == sol.xi_hat.shape[0]:
        results["feedback_max_abs_delta"] = tagged(np.max(np.abs(controls - sol.xi_hat)), ORACLE)
    passed = bool(rel <= setup.config.tolerances.oracle_rel)
    report = _header(setup, "oracle")
    report["oracle"] = {"n_steps": controls.shape[0], "noise": ospec.noise or "auto"}
    report["results"] = results
    report["checks"] = {"P_0_within_tolerance": passed, "tolerance": setup.config.tolerances.oracle_rel}
    report["passed"] = passed
    return RunResult(report, passed)


RUNNERS = {
    "solve": run_solve,
    "simulate": run_simulate,
    "verify": run_verify,
    "oracle": run_oracle,
    "gap": run_gap,
}


def run(config: RunConfig, mode: str | None = None) -> RunResult:
    return RUNNERS[mode or config.mode](build(config))
