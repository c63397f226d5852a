"""Command-line entry point: ``conedual {solve,simulate,verify,oracle,gap} --config FILE``.

Exit codes: 0 success, 2 a mathematical check failed, 1 operational error
(a JSON description goes to stderr).
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import MODES, RunConfig, load_config
from .errors import SchemaError
from .workflows import run

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conedual", description=__doc__.splitlines()[0])
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", help="output directory (overrides output.dir)")
    parser.add_argument("--seed", type=int, help="RNG seed, unsigned 64-bit")
    parser.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    parser.add_argument("--steps", type=int, help="number of time steps")
    parser.add_argument("--tol", type=float, help="tolerance for the pathwise condition checks")
    return parser


def apply_overrides(config: RunConfig, args) -> RunConfig:
    data = config.model_dump()
    if args.seed is not None:
        data["sim"]["seed"] = args.seed
    if args.paths is not None:
        data["sim"]["n_paths"] = args.paths
    if args.steps is not None:
        data["problem"]["n_steps"] = args.steps
    if args.tol is not None:
        data["tolerances"]["check"] = args.tol
    if args.out is not None:
        data["output"]["dir"] = args.out
    data["mode"] = args.mode
    return RunConfig.model_validate(data)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default, allow_nan=True) + "\n"


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in np.asarray(rows, dtype=float):
            writer.writerow([repr(float(v)) for v in row])


def _error_payload(exc: Exception) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, SchemaError):
        payload["path"] = exc.path
    residual = getattr(exc, "residual", None)
    if residual is not None:
        payload["residual"] = residual
    return payload


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = apply_overrides(load_config(args.config), args)
        result = run(config)
        out = Path(config.output.dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.mode}.json").write_text(dumps(result.report), encoding="utf-8")
        for name, (header, rows) in result.tables.items():
            write_csv(out / name, header, rows)
        metadata = {
            "version": __version__,
            "mode": args.mode,
            "config": str(args.config),
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "files": sorted([f"{args.mode}.json", *result.tables]),
        }
        (out / "metadata.json").write_text(dumps(metadata), encoding="utf-8")
    except Exception as exc:  # reported as machine-readable JSON
        sys.stderr.write(json.dumps(_error_payload(exc), sort_keys=True) + "\n")
        return EXIT_ERROR
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
