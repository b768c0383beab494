import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hurdlecast.basis import absorb_constraint, pspline_term
from hurdlecast.glm import (
    BERNOULLI,
    ZTPOISSON,
    ConvergenceError,
    Design,
    FitConfig,
    FittedStage,
    fit_stage,
    loglik_bernoulli,
    penalized_loglik,
    penalized_score,
    predict_eta,
    ztpoisson_logpdf,
    ztpoisson_mean,
    ztpoisson_variance,
)


def test_bernoulli_loglik_examples():
    assert loglik_bernoulli(1, 0.0) == pytest.approx(-math.log(2), abs=1e-15)
    assert loglik_bernoulli(0, 0.0) == pytest.approx(-math.log(2), abs=1e-15)
    # -log(1 + e^-30) ~ -9.357623e-14
    assert abs(loglik_bernoulli(1, 30.0)) < 1e-12
    assert loglik_bernoulli(1, 30.0) == pytest.approx(-math.log1p(math.exp(-30.0)), rel=1e-12)
    assert np.isfinite(loglik_bernoulli(0, 800.0))


@pytest.mark.parametrize("lam", [0.1, 1.0, 3.0, 5.0, 20.0])
def test_ztpoisson_normalises(lam):
    y = np.arange(1, 201)
    assert abs(np.exp(ztpoisson_logpdf(y, lam)).sum() - 1.0) < 1e-10


def test_ztpoisson_logpdf_formula():
    want = -1.0 - math.log(1.0 - math.exp(-1.0))
    assert ztpoisson_logpdf(1, 1.0) == pytest.approx(want, abs=1e-14)
    with pytest.raises(ValueError):
        ztpoisson_logpdf(0, 1.0)
    # tiny lambda stays finite: P(y=1) -> 1
    assert ztpoisson_logpdf(1, 1e-12) == pytest.approx(0.0, abs=1e-11)


def test_ztpoisson_mean_examples():
    y = np.arange(1, 201)
    brute = float(np.sum(y * np.exp(ztpoisson_logpdf(y, 1.0))))
    assert ztpoisson_mean(1.0) == pytest.approx(brute, abs=1e-7)
    assert ztpoisson_mean(1.0) == pytest.approx(1.581977, abs=1e-6)
    brute20 = float(np.sum(y * np.exp(ztpoisson_logpdf(y, 20.0))))
    assert ztpoisson_mean(20.0) == pytest.approx(brute20, abs=1e-7)
    assert ztpoisson_mean(1e-9) == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(ValueError):
        ztpoisson_mean(0.0)


@given(lam=st.floats(1e-6, 50.0))
def test_ztpoisson_mean_variance_match_sums(lam):
    y = np.arange(1, 400)
    p = np.exp(ztpoisson_logpdf(y, lam))
    m = float(np.sum(y * p))
    assert ztpoisson_mean(lam) == pytest.approx(m, rel=1e-9, abs=1e-12)
    v = float(np.sum((y - m) ** 2 * p))
    assert ztpoisson_variance(lam) == pytest.approx(v, rel=1e-6, abs=1e-12)


# ---------------------------------------------------------------------------
# gradient check


def _smooth_design(n, seed):
    rng = np.random.default_rng(seed)
    x1 = rng.normal(size=n)
    z = rng.uniform(0, 1, n)
    term = absorb_constraint(pspline_term("z", z, n_basis=8))
    design = Design(np.column_stack([np.ones(n), x1]), ["intercept", "x1"],
                    [("z", term.basis)], [term.penalty])
    return design, rng


@pytest.mark.parametrize("family", [BERNOULLI, ZTPOISSON], ids=lambda f: f.name)
def test_score_matches_finite_differences(family):
    design, rng = _smooth_design(300, 1)
    x = design.matrix()
    p = x.shape[1]
    if family is BERNOULLI:
        y = (rng.random(300) < 0.4).astype(float)
    else:
        y = 1.0 + rng.poisson(2.0, 300)
    w = rng.uniform(0.5, 2.0, 300)
    s = np.zeros((p, p))
    s[2:, 2:] = 3.0 * design.penalties[0]
    h = 1e-5
    for _ in range(20):
        beta = rng.normal(0, 0.3, p)
        g = penalized_score(beta, x, y, w, family, s)
        fd = np.empty(p)
        for j in range(p):
            e = np.zeros(p)
            e[j] = h
            fd[j] = (penalized_loglik(beta + e, x, y, w, family, s)
                     - penalized_loglik(beta - e, x, y, w, family, s)) / (2 * h)
        rel = np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(g)))
        assert rel < 1e-5


# ---------------------------------------------------------------------------
# fitting


def _textbook_irls(x, y, tol=1e-13, iters=100):
    """Unpenalised logistic regression by plain iteratively reweighted least squares."""
    beta = np.zeros(x.shape[1])
    for _ in range(iters):
        eta = x @ beta
        mu = 1.0 / (1.0 + np.exp(-eta))
        wts = mu * (1.0 - mu)
        z = eta + (y - mu) / wts
        new = np.linalg.solve(x.T @ (wts[:, None] * x), x.T @ (wts * z))
        if np.max(np.abs(new - beta)) < tol:
            return new
        beta = new
    return beta


def test_logistic_matches_textbook_irls():
    rng = np.random.default_rng(5)
    n = 800
    x = np.column_stack([np.ones(n), rng.normal(size=n), rng.uniform(-1, 1, n)])
    y = (rng.random(n) < 1 / (1 + np.exp(-(x @ [-0.3, 0.8, -1.1])))).astype(float)
    fit = fit_stage(Design(x, ["intercept", "a", "b"]), y, np.ones(n), BERNOULLI)
    np.testing.assert_allclose(fit.coefficients, _textbook_irls(x, y), atol=1e-8)
    assert fit.report["gradient_norm"] <= 1e-6 * n


def test_weights_act_as_replication():
    rng = np.random.default_rng(8)
    n = 200
    x = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = (rng.random(n) < 0.4).astype(float)
    w = rng.integers(1, 4, n).astype(float)
    rep = np.repeat(np.arange(n), w.astype(int))
    a = fit_stage(Design(x, ["intercept", "a"]), y, w, BERNOULLI)
    b = fit_stage(Design(x[rep], ["intercept", "a"]), y[rep], np.ones(rep.size), BERNOULLI)
    np.testing.assert_allclose(a.coefficients, b.coefficients, atol=1e-10)


def test_huge_lambda_collapses_smooth_to_line():
    rng = np.random.default_rng(9)
    n = 400
    z = rng.uniform(0, 1, n)
    y = (rng.random(n) < 1 / (1 + np.exp(-np.sin(6 * z)))).astype(float)
    term = absorb_constraint(pspline_term("z", z, n_basis=10))
    design = Design(np.ones((n, 1)), ["intercept"], [("z", term.basis)], [term.penalty])
    fit = fit_stage(design, y, np.ones(n), BERNOULLI, FitConfig(select_lambda=False),
                    lambdas={"z": 1e10})
    f = term.basis @ fit.coef("z")
    line = np.polyval(np.polyfit(z, f, 1), z)
    assert np.max(np.abs(f - line)) < 1e-6


def test_ztpoisson_recovery_within_3se():
    rng = np.random.default_rng(10)
    n = 5000
    x = np.column_stack([np.ones(n), rng.normal(size=n), rng.uniform(0, 1, n)])
    beta = np.array([0.4, 0.5, -0.7])
    lam = np.exp(x @ beta)
    y = rng.poisson(lam)
    while np.any(y == 0):
        zero = y == 0
        y[zero] = rng.poisson(lam[zero])
    fit = fit_stage(Design(x, ["intercept", "a", "b"]), y.astype(float), np.ones(n), ZTPOISSON)
    z = np.abs(fit.coefficients - beta) / fit.std_errors
    assert np.all(z < 3), z


def test_gcv_fit_is_deterministic_and_monotone():
    design, rng = _smooth_design(500, 3)
    y = (rng.random(500) < 0.3).astype(float)
    a = fit_stage(design, y, np.ones(500), BERNOULLI)
    b = fit_stage(design, y, np.ones(500), BERNOULLI)
    assert a.coefficients.tobytes() == b.coefficients.tobytes()
    assert a.smoothing_params == b.smoothing_params
    # penalised deviance never increases within a Newton run (step halving)
    trace = np.array(a.report["trace"])
    runs = np.split(trace, np.nonzero(np.diff(trace[:, 0]) < 0)[0] + 1)
    for run in runs:
        assert np.all(np.diff(run[:, 1]) <= 1e-9 * np.abs(run[:-1, 1]) + 1e-9)


def test_fit_input_errors():
    x = Design(np.ones((3, 1)), ["intercept"])
    with pytest.raises(ValueError, match="positive"):
        fit_stage(x, np.array([0.0, 1, 0]), np.array([1.0, 0, 1]), BERNOULLI)
    with pytest.raises(ValueError, match="0/1"):
        fit_stage(x, np.array([0.0, 2, 0]), np.ones(3), BERNOULLI)
    with pytest.raises(ValueError, match=">= 1"):
        fit_stage(x, np.array([0.0, 2, 1]), np.ones(3), ZTPOISSON)


def test_convergence_error_carries_trace():
    rng = np.random.default_rng(0)
    x = np.column_stack([np.ones(50), rng.normal(size=50)])
    y = (rng.random(50) < 0.5).astype(float)
    with pytest.raises(ConvergenceError) as err:
        fit_stage(Design(x, ["intercept", "a"]), y, np.ones(50), BERNOULLI, FitConfig(max_iter=1))
    assert len(err.value.trace) == 1


def test_separation_is_reported():
    x = np.column_stack([np.ones(40), np.r_[-np.ones(20), np.ones(20)]])
    y = np.r_[np.zeros(20), np.ones(20)]
    fit = fit_stage(Design(x, ["intercept", "a"]), y, np.ones(40), BERNOULLI, FitConfig(max_iter=200))
    assert fit.report["separation_warning"]


def test_aliased_linear_column_is_dropped():
    rng = np.random.default_rng(1)
    a = rng.normal(size=100)
    x = np.column_stack([np.ones(100), a, 2 * a])
    y = (rng.random(100) < 0.5).astype(float)
    fit = fit_stage(Design(x, ["intercept", "a", "a2"]), y, np.ones(100), BERNOULLI)
    assert fit.aliased == ["a2"] and fit.coef("a2")[0] == 0.0


def test_predict_eta_examples():
    stage = FittedStage(BERNOULLI, np.array([1.0, 2.0]), {}, {"intercept": slice(0, 1), "x": slice(1, 2)},
                        ["intercept", "x"])
    assert predict_eta(stage, Design(np.array([[1.0, 3.0]]), ["intercept", "x"]))[0] == 7.0
    null = FittedStage(BERNOULLI, np.zeros(2), {}, {}, [])
    eta = predict_eta(null, np.array([[1.0, 5.0]]))
    assert eta[0] == 0.0 and BERNOULLI.mean(eta)[0] == 0.5
    with pytest.raises(ValueError, match="columns"):
        predict_eta(stage, np.ones((1, 3)))


def test_in_sample_eta_matches_fit():
    design, rng = _smooth_design(200, 2)
    y = (rng.random(200) < 0.5).astype(float)
    fit = fit_stage(design, y, np.ones(200), BERNOULLI)
    np.testing.assert_array_equal(predict_eta(fit, design), design.matrix() @ fit.coefficients)
