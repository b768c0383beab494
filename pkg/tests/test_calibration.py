import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hurdlecast.calibration import (
    DEConfig,
    Hurdles,
    apply_thresholds,
    calibrate,
    calibration_loss,
    differential_evolution,
    plateau_search,
    threshold_loss_surface,
)


def _month(n=200, seed=0):
    rng = np.random.default_rng(seed)
    pi1 = np.repeat(rng.random(n // 10), 10)  # country-level gate
    pi2 = rng.random(n)
    lam = rng.gamma(2.0, 1.5, n) + 0.05
    y = np.where(rng.random(n) < pi1 * pi2, 1 + rng.poisson(lam), 0)
    return pi1, pi2, lam, y.astype(float)


def _grid_losses(pi1, pi2, lam, y, step=0.001):
    g = np.round(np.arange(0.0, 1.0 + step / 2, step), 12)
    taus = np.column_stack([np.repeat(g, g.size), np.tile(g, g.size)])
    return taus, threshold_loss_surface(pi1, pi2, lam, y, taus)


def _brute_loss(pi1, pi2, lam, y, t1, t2):
    yhat = [l if (a >= t1 and b >= t2) else 0.0 for a, b, l in zip(pi1, pi2, lam)]
    return abs(sum(math.log1p(v) for v in yhat) - sum(math.log1p(v) for v in y))


# ---------------------------------------------------------------------------
# thresholds and loss


def test_apply_thresholds_contract():
    h = Hurdles(0.563, 0.263)
    assert apply_thresholds([0.6], [0.3], [2.5], h)[0] == 2.5
    assert apply_thresholds([0.6], [0.3], [2.5], Hurdles(0.563, 0.31))[0] == 0.0
    assert apply_thresholds([0.5], [0.9], [2.5], h)[0] == 0.0
    # equality clears the hurdle
    assert apply_thresholds([0.563], [0.263], [1.0], h)[0] == 1.0


def test_apply_thresholds_edges():
    pi = np.array([0.0, 0.4, 1.0])
    lam = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(apply_thresholds(pi, pi, lam, Hurdles(0.0, 0.0)), lam)
    np.testing.assert_array_equal(apply_thresholds(pi, pi, lam, Hurdles(1.0, 1.0)), [0, 0, 3.0])


def test_apply_thresholds_rejects_bad_input():
    h = Hurdles(0.5, 0.5)
    with pytest.raises(ValueError, match="pi1"):
        apply_thresholds([1.2], [0.5], [1.0], h)
    with pytest.raises(ValueError, match="shape"):
        apply_thresholds([0.5, 0.5], [0.5], [1.0], h)
    with pytest.raises(ValueError, match="lambda"):
        apply_thresholds([0.5], [0.5], [np.nan], h)
    with pytest.raises(ValueError, match="tau2"):
        Hurdles(0.5, -0.1)


def test_calibration_loss_examples():
    assert calibration_loss([1.0, 0.0], [0.0, 3.0]) == pytest.approx(math.log(2.0), abs=1e-15)
    assert calibration_loss([7.0], [0.0]) == pytest.approx(math.log(8.0), abs=1e-15)
    assert calibration_loss([0.0, 0.0], [0.0, 0.0]) == 0.0
    with pytest.raises(ValueError):
        calibration_loss([-1.0], [0.0])


def test_loss_surface_matches_brute_force():
    pi1, pi2, lam, y = _month(40, 3)
    rng = np.random.default_rng(4)
    taus = rng.random((25, 2))
    got = threshold_loss_surface(pi1, pi2, lam, y, taus)
    want = [_brute_loss(pi1, pi2, lam, y, a, b) for a, b in taus]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


@given(
    pi=arrays(np.float64, 30, elements=st.floats(0, 1)),
    t=st.floats(0, 1), lo=st.floats(0, 1), hi=st.floats(0, 1),
)
def test_open_set_shrinks_with_threshold(pi, t, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    lam = np.linspace(0.5, 3.0, pi.size)
    a = apply_thresholds(pi, pi, lam, Hurdles(t, lo)) > 0
    b = apply_thresholds(pi, pi, lam, Hurdles(t, hi)) > 0
    # raising a threshold can only close cells
    assert np.all(b <= a)
    a = apply_thresholds(pi, pi, lam, Hurdles(lo, t)) > 0
    b = apply_thresholds(pi, pi, lam, Hurdles(hi, t)) > 0
    assert np.all(b <= a)


# ---------------------------------------------------------------------------
# optimisers


def test_de_finds_convex_minimum():
    def objective(x):
        return (x[:, 0] - 0.3) ** 2 + (x[:, 1] - 0.7) ** 2

    cfg = DEConfig(population=30, generations=300, patience=60)
    best, loss, gens, evals, history = differential_evolution(objective, 2, cfg, seed=1)
    np.testing.assert_allclose(best, [0.3, 0.7], atol=1e-4)
    assert evals == 30 * (gens + 1)
    assert len(history) == gens + 1
    assert np.all(np.diff(history) <= 0)


def test_de_respects_bounds():
    seen = []

    def objective(x):
        seen.append(x.copy())
        return -x.sum(axis=1)  # pushes towards the upper corner

    differential_evolution(objective, 2, DEConfig(population=10, generations=40), seed=0)
    allx = np.vstack(seen)
    assert allx.min() >= 0.0 and allx.max() <= 1.0


def test_de_config_validation():
    with pytest.raises(ValueError):
        DEConfig(population=3)
    with pytest.raises(ValueError):
        DEConfig(mutation=0.0)
    with pytest.raises(ValueError):
        DEConfig(crossover=1.5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_plateau_search_is_exact(seed):
    pi1, pi2, lam, y = _month(200, seed)
    gain = np.log1p(lam)
    target = float(np.log1p(y).sum())
    tau, loss = plateau_search(pi1, pi2, gain, target)
    assert _brute_loss(pi1, pi2, lam, y, *tau) == pytest.approx(loss, abs=1e-9)
    # every threshold pair sits on some plateau pair, so no grid point beats it
    _, grid = _grid_losses(pi1, pi2, lam, y, step=0.01)
    assert loss <= grid.min() + 1e-12
    # brute force over all observed value pairs
    v1 = np.append(np.unique(pi1), 1.0 + 1e-9)
    v2 = np.append(np.unique(pi2), 1.0 + 1e-9)
    open1 = pi1[None, :] >= v1[:, None]
    best = np.inf
    for b in v2:
        sel = open1 & (pi2 >= b)[None, :]
        best = min(best, float(np.min(np.abs(sel @ gain - target))))
    assert loss == pytest.approx(best, abs=1e-9)


def test_calibrate_beats_fine_grid():
    pi1, pi2, lam, y = _month(300, 5)
    res = calibrate(pi1, pi2, lam, y, seed=3)
    _, grid = _grid_losses(pi1, pi2, lam, y)
    assert res.loss <= grid.min() + 1e-9
    assert 0.0 <= res.hurdles.tau1 <= 1.0 and 0.0 <= res.hurdles.tau2 <= 1.0
    got = calibration_loss(apply_thresholds(pi1, pi2, lam, res.hurdles), y)
    assert got == pytest.approx(res.loss, abs=1e-9)


def test_calibrate_all_zero_truth_closes_everything():
    pi1, pi2, lam, _ = _month(100, 6)
    res = calibrate(pi1, pi2, lam, np.zeros(100), seed=0)
    assert res.loss == 0.0
    assert not apply_thresholds(pi1, pi2, lam, res.hurdles).any()


def test_calibrate_is_reproducible():
    pi1, pi2, lam, y = _month(200, 7)
    cfg = DEConfig(polish=False)
    a = calibrate(pi1, pi2, lam, y, cfg, seed=np.random.SeedSequence([1, 2, 3]))
    b = calibrate(pi1, pi2, lam, y, cfg, seed=np.random.SeedSequence([1, 2, 3]))
    assert a.hurdles == b.hurdles and a.history == b.history


def test_calibrate_input_errors():
    with pytest.raises(ValueError, match="empty"):
        calibrate([], [], [], [])
    with pytest.raises(ValueError, match="shape"):
        calibrate([0.5], [0.5, 0.5], [1.0], [0.0])
    with pytest.raises(ValueError, match="non-negative"):
        calibrate([0.5], [0.5], [1.0], [-1.0])
