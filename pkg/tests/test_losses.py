import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qrlesion import losses
from qrlesion.nn import make_rng, numeric_grad, relative_error

levels = st.floats(0.01, 0.99)


def test_pinball_branches():
    assert losses.pinball([0.0], [2.0], 0.15).value == pytest.approx(0.30)
    assert losses.pinball([0.0], [-2.0], 0.15).value == pytest.approx(1.70)


def test_pinball_kink_subgradient_zero():
    lv = losses.pinball([1.0, 2.0], [1.0, 2.0], 0.3)
    assert lv.value == 0.0
    np.testing.assert_array_equal(lv.grad, [0.0, 0.0])


def test_pinball_median_of_one_to_ten():
    y = np.arange(1.0, 11.0)
    grid = np.linspace(0, 11, 1101)
    vals = np.array([losses.pinball(np.full(10, c), y, 0.5).value for c in grid])
    best = grid[np.isclose(vals, vals.min(), rtol=0, atol=1e-9)]
    assert best.min() == pytest.approx(5.0) and best.max() == pytest.approx(6.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=1, max_size=15), levels)
def test_pinball_minimiser_is_empirical_quantile(ys, alpha):
    # on integer data the objective is piecewise linear with kinks at the data,
    # so scanning the data points themselves finds a minimiser
    y = np.array(ys, dtype=float)
    cands = np.unique(y)
    vals = np.array([losses.pinball(np.full(y.size, c), y, alpha).value for c in cands])
    c = cands[np.argmin(vals)]
    # empirical alpha-quantile: at least alpha of mass at or below, 1-alpha at or above
    assert np.mean(y <= c) >= alpha - 1e-12
    assert np.mean(y >= c) >= 1 - alpha - 1e-12


def test_pinball_shape_and_level_errors():
    with pytest.raises(ValueError):
        losses.pinball(np.zeros(3), np.zeros(4), 0.5)
    with pytest.raises(ValueError):
        losses.pinball(np.zeros(3), np.zeros(3), 1.0)


def _fd_check(fn, x, grad):
    num = numeric_grad(fn, x, 1e-5)
    assert relative_error(grad, num).max() < 1e-6


def _fd_check_separable(loss, x, grad):
    # elementwise losses: difference each term on its own so round-off from
    # the other terms of the sum does not swamp small derivatives
    num = np.array([numeric_grad(lambda p: loss(p, i), x[i:i + 1], 1e-5)[0]
                    for i in range(x.size)])
    assert relative_error(grad, num).max() < 1e-6


def test_pinball_gradient_away_from_kink():
    rng = make_rng(0)
    y = rng.standard_normal(30)
    f = y + rng.choice([-1, 1], 30) * rng.uniform(1e-3, 2, 30)
    lv = losses.pinball(f, y, 0.15)
    _fd_check(lambda p: losses.pinball(p, y, 0.15).value, f, lv.grad)


def test_joint_loss_zero_and_additive():
    rng = make_rng(1)
    y = rng.standard_normal(8)
    assert losses.joint_quantile_loss({"L": y, "H": y}, y, 0.15, 0.5).value == 0.0
    lo, hi = rng.standard_normal(8), rng.standard_normal(8)
    lv = losses.joint_quantile_loss({"L": lo, "H": hi}, y, 0.15, 0.5)
    assert lv.value == pytest.approx(losses.pinball(lo, y, 0.15).value
                                     + losses.pinball(hi, y, 0.5).value)


def test_joint_loss_rejects_order():
    with pytest.raises(ValueError):
        losses.joint_quantile_loss({"L": [0.0], "H": [0.0]}, [0.0], 0.5, 0.15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3))
def test_joint_loss_no_cross_coupling(seed, shift):
    rng = make_rng(seed)
    y, lo, hi = rng.standard_normal((3, 6))
    a = losses.joint_quantile_loss({"L": lo, "H": hi}, y, 0.15, 0.5)
    b = losses.joint_quantile_loss({"L": lo + shift, "H": hi}, y, 0.15, 0.5)
    np.testing.assert_array_equal(a.grad["H"], b.grad["H"])


def test_gaussian_nll_values():
    x = np.zeros(4)
    assert losses.gaussian_nll(x, x, x).value == 0.0
    assert losses.gaussian_nll(x + 1, x, x).value == pytest.approx(2.0)


def test_gaussian_nll_gradients():
    rng = make_rng(2)
    x, mu, lv = rng.standard_normal((3, 10))
    g = losses.gaussian_nll(x, mu, lv).grad
    _fd_check(lambda m: losses.gaussian_nll(x, m, lv).value, mu, g["mu"])
    _fd_check(lambda s: losses.gaussian_nll(x, mu, s).value, lv, g["logvar"])


def test_variance_shrinks_without_bound_at_perfect_fit():
    # x == mu: the likelihood keeps rewarding smaller variance
    x = np.full(5, 0.3)
    lv = np.zeros(5)
    trace = []
    for _ in range(100):
        lv = lv - 0.1 * losses.gaussian_nll(x, x, lv).grad["logvar"]
        trace.append(lv[0])
    assert np.all(np.diff(trace) < 0)
    # d/d(logvar) is exactly 1/2 when the residual is zero
    assert trace[-1] == pytest.approx(-5.0)


def test_kl_values():
    z = np.zeros(3)
    assert losses.kl_diag_gaussian(z, z).value == 0.0
    assert losses.kl_diag_gaussian(z + 1, z).value == pytest.approx(1.5)


def test_kl_matches_monte_carlo():
    rng = make_rng(3)
    mu = np.array([0.4, -0.8, 1.2])
    lv = np.array([-0.5, 0.3, -1.0])
    sd = np.exp(0.5 * lv)
    z = mu + sd * rng.standard_normal((1_000_000, 3))
    log_q = -0.5 * ((z - mu) / sd) ** 2 - np.log(sd)
    log_p = -0.5 * z ** 2
    mc = float(np.mean(np.sum(log_q - log_p, axis=1)))
    assert losses.kl_diag_gaussian(mu, lv).value == pytest.approx(mc, rel=0.01)


def test_kl_gradients_and_nonnegative():
    rng = make_rng(4)
    mu, lv = rng.standard_normal((2, 7))
    k = losses.kl_diag_gaussian(mu, lv)
    assert k.value >= 0
    _fd_check(lambda m: losses.kl_diag_gaussian(m, lv).value, mu, k.grad["mu"])
    _fd_check(lambda s: losses.kl_diag_gaussian(mu, s).value, lv, k.grad["logvar"])


def test_bqr_objective_values():
    y = np.array([0.0, 1.0, 1.0])
    lv = losses.bqr_objective(np.zeros(3), y, 0.375)
    assert lv.value == pytest.approx(-0.5 * np.sum(y - 0.625))
    big = losses.bqr_objective([40.0], [1.0], 0.875)
    assert -big.value == pytest.approx(0.875)


def test_bqr_objective_rejects_non_binary():
    with pytest.raises(ValueError):
        losses.bqr_objective([0.0, 0.0], [0.0, 0.5], 0.5)


def test_bqr_gradient():
    rng = make_rng(5)
    f = rng.standard_normal(12) * 2
    y = (rng.uniform(size=12) < 0.5).astype(float)
    lv = losses.bqr_objective(f, y, 0.625)
    _fd_check(lambda p: losses.bqr_objective(p, y, 0.625).value, f, lv.grad)


def _best_constant_logit(rate, tau, n=1000):
    y = np.zeros(n)
    y[:int(round(rate * n))] = 1.0
    grid = np.linspace(-10, 10, 401)
    vals = [losses.bqr_objective(np.full(n, c), y, tau).value for c in grid]
    return grid[int(np.argmin(vals))]


@pytest.mark.parametrize("tau,sign", [(0.125, -1), (0.375, 1), (0.875, 1)])
def test_bqr_constant_logit_sign_at_rate_07(tau, sign):
    # optimal sign is positive exactly when 0.7 > 1 - tau
    assert np.sign(_best_constant_logit(0.7, tau)) == sign


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 19), st.integers(1, 19))
def test_bqr_sign_flips_at_one_minus_tau(k_rate, k_tau):
    rate, tau = k_rate / 20, k_tau / 20
    if np.isclose(rate, 1 - tau):
        return
    assert (_best_constant_logit(rate, tau, 200) > 0) == (rate > 1 - tau)


def test_weighted_bce_values():
    assert losses.weighted_bce(np.zeros(4), np.array([0, 1, 0, 1.0])).value == pytest.approx(
        4 * np.log(2))
    assert losses.weighted_bce([40.0], [1.0], 3.0).value < 1e-15
    with pytest.raises(ValueError):
        losses.weighted_bce([0.0], [1.0], 0.0)


def test_weighted_bce_gradient():
    rng = make_rng(6)
    f = rng.standard_normal(15) * 3
    y = (rng.uniform(size=15) < 0.3).astype(float)
    lv = losses.weighted_bce(f, y, 166.0)
    _fd_check_separable(lambda p, i: losses.weighted_bce(p, y[i:i + 1], 166.0).value, f, lv.grad)


def test_weighted_bce_stable_for_extreme_logits():
    lv = losses.weighted_bce(np.array([-800.0, 800.0]), np.array([1.0, 0.0]), 2.0)
    assert np.isfinite(lv.value) and lv.value == pytest.approx(2 * 800 + 800)
