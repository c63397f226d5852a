import numpy as np
import pytest

from conedual import market as mk
from conedual.errors import DimensionMismatch, SingularVolatility


def test_grid_points_and_refine():
    grid = mk.TimeGrid(1.0, 4)
    assert grid.dt == 0.25
    np.testing.assert_array_equal(grid.points, [0, 0.25, 0.5, 0.75, 1.0])
    assert grid.refine(2).n_steps == 8
    assert mk.TimeGrid(0.3, 7).points[-1] == 0.3


@pytest.mark.parametrize("horizon, steps", [(0.0, 3), (-1.0, 3), (1.0, 0), (1.0, 2.5)])
def test_grid_rejects_bad_input(horizon, steps):
    with pytest.raises(ValueError):
        mk.TimeGrid(horizon, steps)


def test_market_price_of_risk_solves_linear_system():
    grid = mk.TimeGrid(1.0, 3)
    sigma = np.array([[0.2, 0.0], [0.1, 0.3]])
    model = mk.MarketModel.constant(grid, 0.01, [0.05, 0.08], sigma)
    theta = mk.market_price_of_risk(model, 1)
    np.testing.assert_allclose(sigma @ theta, [0.04, 0.07], atol=1e-14)
    np.testing.assert_allclose(model.theta[2], theta)


def test_from_theta_roundtrip():
    grid = mk.TimeGrid(1.0, 2)
    model = mk.MarketModel.from_theta(grid, 0.02, [0.3, -0.1], [[1.0, 0.2], [0.0, 0.7]])
    np.testing.assert_allclose(model.theta[0], [0.3, -0.1], atol=1e-14)


def test_singular_volatility():
    grid = mk.TimeGrid(1.0, 2)
    model = mk.MarketModel.constant(grid, 0.0, [0.1, 0.1], [[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(SingularVolatility):
        model.theta


def test_shape_checks():
    grid = mk.TimeGrid(1.0, 3)
    with pytest.raises(DimensionMismatch):
        mk.MarketModel(grid, np.zeros(3), np.zeros((3, 2)), np.zeros((2, 2, 2)))
    with pytest.raises(DimensionMismatch):
        mk.MarketModel(grid, np.zeros(2), np.zeros((3, 2)), np.tile(np.eye(2), (3, 1, 1)))


def test_tables_are_read_only():
    model = mk.MarketModel.constant(mk.TimeGrid(1.0, 2), 0.0, [0.1], [[1.0]])
    with pytest.raises(ValueError):
        model.r[0] = 1.0


def test_nondegeneracy_report():
    grid = mk.TimeGrid(1.0, 2)
    good = mk.MarketModel.constant(grid, 0.0, [0.1, 0.1], np.diag([1.0, 0.5]))
    rep = mk.validate_nondegeneracy(good)
    assert rep.passed and rep.minimum == pytest.approx(0.25)
    bad = mk.MarketModel.constant(grid, 0.0, [0.1, 0.1], np.diag([1.0, 1e-5]), nondegeneracy_k=1e-8)
    rep = mk.validate_nondegeneracy(bad)
    assert not rep.passed and rep.minimum == pytest.approx(1e-10)


def test_state_price_density_constant_coefficients():
    grid = mk.TimeGrid(1.0, 50)
    model = mk.MarketModel.from_theta(grid, 0.03, [0.4], [[1.0]])
    rng = np.random.default_rng(1)
    dW = rng.normal(size=(20_000, 50, 1)) * np.sqrt(grid.dt)
    gamma = mk.state_price_density_path(model, dW)
    assert np.all(gamma[:, 0] == 1.0)
    # Gamma(T) = exp(-(r + |theta|^2/2) T - theta W(T)) exactly
    expected = np.exp(-(0.03 + 0.08) - 0.4 * dW.sum(axis=(1, 2)))
    np.testing.assert_allclose(gamma[:, -1], expected, rtol=1e-12)
    mean = gamma[:, -1].mean()
    se = gamma[:, -1].std() / np.sqrt(gamma.shape[0])
    assert abs(mean - np.exp(-0.03)) < 4 * se


def test_hat_H_with_zero_gamma_is_gamma_bitwise():
    grid = mk.TimeGrid(1.0, 10)
    model = mk.MarketModel.from_theta(grid, 0.01, [0.2, -0.3], [[1.0, 0.1], [0.0, 0.9]])
    dW = np.random.default_rng(2).normal(size=(5, 10, 2)) * np.sqrt(grid.dt)
    a = mk.state_price_density_path(model, dW)
    b = mk.hat_H_path(model, np.zeros((10, 2)), dW)
    assert np.array_equal(a, b)


def test_noise_shape_checked():
    model = mk.MarketModel.constant(mk.TimeGrid(1.0, 3), 0.0, [0.1], [[1.0]])
    with pytest.raises(DimensionMismatch):
        mk.state_price_density_path(model, np.zeros((4, 2, 1)))


def test_per_path_tables():
    grid = mk.TimeGrid(1.0, 2)
    rng = np.random.default_rng(3)
    sigma = np.eye(1)[None, None] * rng.uniform(0.5, 1.5, size=(4, 2, 1, 1))
    b = rng.normal(size=(4, 2, 1))
    model = mk.MarketModel(grid, np.full((4, 2), 0.01), b, sigma)
    assert not model.deterministic and model.n_paths == 4
    np.testing.assert_allclose(model.theta[..., 0], (b[..., 0] - 0.01) / sigma[..., 0, 0])


def test_theta_examples():
    grid = mk.TimeGrid(1.0, 1)
    zero = mk.MarketModel.constant(grid, 0.0, [0.0, 0.0], [[0.3, 0.1], [0.2, 0.5]])
    np.testing.assert_array_equal(mk.market_price_of_risk(zero, 0), [0.0, 0.0])
    ident = mk.MarketModel.constant(grid, 0.02, [0.10, 0.20], np.eye(2))
    np.testing.assert_allclose(mk.market_price_of_risk(ident, 0), [0.08, 0.18], atol=1e-15)
    sigma = np.array([[0.2, 0.05], [0.0, 0.3]])
    model = mk.MarketModel.constant(grid, 0.02, [0.08, 0.11], sigma)
    resid = sigma @ mk.market_price_of_risk(model, 0) - np.array([0.06, 0.09])
    assert np.linalg.norm(resid) <= 1e-12


def test_nondegeneracy_examples():
    grid = mk.TimeGrid(1.0, 1)
    rep = mk.validate_nondegeneracy(mk.MarketModel.constant(grid, 0, [0, 0], np.eye(2), nondegeneracy_k=0.5))
    assert rep.passed and rep.minimum == pytest.approx(1.0)
    rep = mk.validate_nondegeneracy(mk.MarketModel.constant(grid, 0, [0, 0], np.diag([0.1, 0.5]), nondegeneracy_k=0.02))
    assert not rep.passed and rep.minimum == pytest.approx(0.01)


def test_nondegeneracy_matches_2x2_closed_form():
    rng = np.random.default_rng(4)
    grid = mk.TimeGrid(1.0, 1)
    for _ in range(50):
        sigma = rng.normal(size=(2, 2)) + 2 * np.eye(2)
        g = sigma @ sigma.T
        tr, det = np.trace(g), np.linalg.det(g)
        smallest = tr / 2 - np.sqrt(tr * tr / 4 - det)
        rep = mk.validate_nondegeneracy(mk.MarketModel.constant(grid, 0, [0, 0], sigma))
        assert rep.minimum == pytest.approx(smallest, rel=1e-9)


def test_gamma_zero_theta_and_single_path_formula():
    grid = mk.TimeGrid(2.0, 8)
    flat = mk.MarketModel.constant(grid, 0.05, [0.05], [[0.7]])
    dW = np.random.default_rng(5).normal(size=(3, 8, 1))
    np.testing.assert_allclose(mk.state_price_density_path(flat, dW)[:, -1], np.exp(-0.1), rtol=1e-14)
    model = mk.MarketModel.from_theta(grid, 0.0, [0.5], [[1.0]])
    w = dW[0].sum()
    assert mk.state_price_density_path(model, dW[0])[-1] == pytest.approx(np.exp(-0.125 * 2.0 - 0.5 * w), rel=1e-13)


def test_hat_H_with_full_hedge_is_discount_factor():
    grid = mk.TimeGrid(1.0, 5)
    sigma = np.array([[1.0, 0.2], [0.1, 0.8]])
    model = mk.MarketModel.from_theta(grid, 0.03, [0.3, -0.1], sigma)
    gamma = np.tile(sigma @ np.array([0.3, -0.1]), (5, 1))
    dW = np.random.default_rng(6).normal(size=(4, 5, 2))
    np.testing.assert_allclose(mk.hat_H_path(model, gamma, dW)[:, -1], np.exp(-0.03), rtol=1e-12)


def test_hat_H_lognormal_mean():
    grid = mk.TimeGrid(1.0, 20)
    model = mk.MarketModel.from_theta(grid, 0.02, [0.4], [[1.0]])
    gamma = np.full((20, 1), 0.1)  # loading 0.1 - 0.4 = -0.3
    dW = np.random.default_rng(7).normal(size=(40_000, 20, 1)) * np.sqrt(grid.dt)
    h = mk.hat_H_path(model, gamma, dW)[:, -1]
    se = h.std() / np.sqrt(h.size)
    assert abs(h.mean() - np.exp(-0.02)) < 4 * se
