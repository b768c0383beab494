"""Penalised GLM stages: Bernoulli-logit and zero-truncated Poisson.

A stage maximises ``sum_i w_i l_i(beta) - 1/2 sum_k lambda_k beta' S_k beta``
by Newton's method with step halving. Smoothing parameters are chosen by
generalised cross-validation of the working linear model at convergence,
one term at a time over a log10 grid, alternating with refits until the
selection stops changing.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit, gammaln

logger = logging.getLogger(__name__)

# a fit counts as separated when |eta| exceeds SEPARATION_ETA on this share of rows
SEPARATION_ETA = 30.0
SEPARATION_SHARE = 0.01
# consecutive iterations with a negligible objective change that end a run
STALL_ITERATIONS = 5

__all__ = [
    "Family",
    "BERNOULLI",
    "ZTPOISSON",
    "family_by_name",
    "Design",
    "FitConfig",
    "FittedStage",
    "ConvergenceError",
    "loglik_bernoulli",
    "ztpoisson_logpdf",
    "ztpoisson_mean",
    "ztpoisson_variance",
    "penalized_loglik",
    "penalized_score",
    "fit_stage",
    "predict_eta",
]

LAMBDA_GRID = 10.0 ** np.linspace(-4.0, 6.0, 21)


class ConvergenceError(RuntimeError):
    """Newton iterations hit the iteration cap; ``trace`` holds the history."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# per-observation densities


def loglik_bernoulli(y, eta):
    """Bernoulli log-likelihood ``y*eta - log(1 + exp(eta))`` without overflow."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return y * eta - np.logaddexp(0.0, eta)


def _log1mexp_neg(lam):
    # log(1 - exp(-lam)) for lam > 0
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore"):  # np.where evaluates both branches
        return np.where(lam > np.log(2.0), np.log1p(-np.exp(-lam)), np.log(-np.expm1(-lam)))


def ztpoisson_logpdf(y, lam):
    """Log-density of the zero-truncated Poisson with untruncated mean ``lam``."""
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(y < 1):
        raise ValueError("zero-truncated Poisson support is y >= 1")
    if np.any(lam <= 0):
        raise ValueError("lambda must be positive")
    return y * np.log(lam) - lam - gammaln(y + 1.0) - _log1mexp_neg(lam)


def ztpoisson_mean(lam):
    """Mean ``lam / (1 - exp(-lam))`` of the zero-truncated Poisson."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("lambda must be positive")
    small = lam < 1e-6
    safe = np.where(small, 1.0, lam)
    direct = safe / -np.expm1(-safe)
    series = 1.0 + lam / 2.0 + lam**2 / 12.0
    out = np.where(small, series, direct)
    return out if out.ndim else float(out)


def ztpoisson_variance(lam):
    """Variance ``m (1 + lam - m)`` of the zero-truncated Poisson, ``m`` its mean."""
    lam = np.asarray(lam, dtype=float)
    small = lam < 1e-3
    safe = np.where(small, 1.0, lam)
    m = safe / -np.expm1(-safe)
    direct = m * (1.0 + safe - m)
    series = lam / 2.0 + lam**2 / 6.0 - lam**4 / 180.0
    out = np.where(small, series, direct)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Family:
    """Exponential-family stage likelihood with its canonical log/logit link.

    ``score`` is d loglik / d eta and ``weight`` is -d^2 loglik / d eta^2
    (observed equals expected information for both families).
    """

    name: str

    def mean(self, eta):
        if self.name == "bernoulli-logit":
            return expit(eta)
        return np.exp(eta)

    def loglik(self, y, eta):
        if self.name == "bernoulli-logit":
            return loglik_bernoulli(y, eta)
        lam = np.exp(eta)
        return y * eta - lam - gammaln(y + 1.0) - _log1mexp_neg(lam)

    def score(self, y, eta):
        if self.name == "bernoulli-logit":
            return y - expit(eta)
        return y - ztpoisson_mean(np.exp(eta))

    def weight(self, eta):
        if self.name == "bernoulli-logit":
            mu = expit(eta)
            return mu * (1.0 - mu)
        return ztpoisson_variance(np.exp(eta))

    def check_response(self, y):
        if self.name == "bernoulli-logit":
            if not np.all((y == 0) | (y == 1)):
                raise ValueError("bernoulli stage needs a 0/1 response")
        elif np.any(y < 1) or np.any(y != np.round(y)):
            raise ValueError("zero-truncated Poisson stage needs integer responses >= 1")

    def initial_intercept(self, y, w):
        ybar = np.average(y, weights=w)
        if self.name == "bernoulli-logit":
            ybar = min(max(ybar, 1e-4), 1 - 1e-4)
            return float(np.log(ybar / (1 - ybar)))
        return float(np.log(max(ybar - 0.5, 0.1)))


BERNOULLI = Family("bernoulli-logit")
ZTPOISSON = Family("ztpoisson-log")


def family_by_name(name):
    for fam in (BERNOULLI, ZTPOISSON):
        if fam.name == name:
            return fam
    raise ValueError(f"unknown family {name!r}")


# ---------------------------------------------------------------------------
# design and fitted stage


@dataclass
class Design:
    """Stage design: unpenalised linear columns followed by penalised blocks.

    ``blocks`` pairs each smooth term name with its (already constrained)
    design block; ``penalties`` gives the matching penalty matrices.
    """

    linear: np.ndarray
    linear_names: list
    blocks: list = field(default_factory=list)
    penalties: list = field(default_factory=list)

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=float)
        if self.linear.ndim != 2:
            raise ValueError("linear block must be two-dimensional (rows x columns)")
        if self.linear.shape[1] != len(self.linear_names):
            raise ValueError("linear_names does not match the linear block width")
        if len(self.blocks) != len(self.penalties):
            raise ValueError("every smooth block needs a penalty")
        for name, block in self.blocks:
            if block.shape[0] != self.linear.shape[0]:
                raise ValueError(f"block {name!r} has the wrong number of rows")

    @property
    def n_rows(self):
        return self.linear.shape[0]

    def layout(self):
        """Column span of every named component in the stacked coefficient vector."""
        spans = {}
        pos = 0
        for name in self.linear_names:
            spans[name] = slice(pos, pos + 1)
            pos += 1
        for name, block in self.blocks:
            spans[name] = slice(pos, pos + block.shape[1])
            pos += block.shape[1]
        return spans

    @property
    def n_coef(self):
        return self.linear.shape[1] + sum(b.shape[1] for _, b in self.blocks)

    def matrix(self):
        return np.hstack([self.linear] + [b for _, b in self.blocks])

    def penalty_blocks(self):
        """Full-size ``(name, S_k)`` penalty matrices embedded in coefficient space."""
        p = self.n_coef
        out = []
        spans = self.layout()
        for (name, _), pen in zip(self.blocks, self.penalties):
            s = np.zeros((p, p))
            sl = spans[name]
            s[sl, sl] = pen
            out.append((name, s))
        return out


@dataclass
class FitConfig:
    max_iter: int = 100
    grad_tol: float = 1e-6
    step_tol: float = 1e-9
    lambda_grid: np.ndarray = field(default_factory=lambda: LAMBDA_GRID.copy())
    sweeps: int = 2
    max_outer: int = 10
    select_lambda: bool = True
    polish_steps: int = 2


@dataclass
class FittedStage:
    """Coefficients and smoothing parameters of one fitted stage."""

    family: Family
    coefficients: np.ndarray
    smoothing_params: dict
    layout: dict
    linear_names: list
    std_errors: np.ndarray | None = None
    aliased: list = field(default_factory=list)
    report: dict = field(default_factory=dict)

    def coef(self, name):
        return self.coefficients[self.layout[name]]

    def linear_coefficients(self):
        return {n: float(self.coefficients[self.layout[n]][0]) for n in self.linear_names}

    def linear_std_errors(self):
        if self.std_errors is None:
            return {}
        return {n: float(self.std_errors[self.layout[n]][0]) for n in self.linear_names}


def predict_eta(stage, design):
    """Linear predictor: linear part plus every smooth part."""
    x = design.matrix() if isinstance(design, Design) else np.asarray(design, dtype=float)
    if x.shape[1] != stage.coefficients.shape[0]:
        raise ValueError(
            f"design has {x.shape[1]} columns, stage expects {stage.coefficients.shape[0]}"
        )
    return x @ stage.coefficients


# ---------------------------------------------------------------------------
# penalised likelihood pieces (also used by the gradient checks)


def _penalty_matrix(pen_blocks, lambdas, p):
    s = np.zeros((p, p))
    for (name, sk) in pen_blocks:
        s += lambdas[name] * sk
    return s


def penalized_loglik(beta, x, y, w, family, s_lambda):
    eta = x @ beta
    return float(np.dot(w, family.loglik(y, eta)) - 0.5 * beta @ s_lambda @ beta)


def penalized_score(beta, x, y, w, family, s_lambda):
    eta = x @ beta
    return x.T @ (w * family.score(y, eta)) - s_lambda @ beta


def _penalty_root(s):
    """``R`` with ``R.T @ R == s`` for a symmetric PSD penalty (zero rows dropped)."""
    vals, vecs = linalg.eigh(s)
    keep = vals > vals.max(initial=0.0) * 1e-12
    return np.sqrt(vals[keep])[:, None] * vecs[:, keep].T


def _score_extended(family, y, eta):
    # score in extended precision; eta is np.longdouble
    if family.name == "bernoulli-logit":
        with np.errstate(over="ignore"):
            return y - 1.0 / (1.0 + np.exp(-eta))
    lam = np.exp(eta)
    small = lam < 1e-6
    safe = np.where(small, 1.0, lam)
    m = np.where(small, 1.0 + lam / 2.0, safe / -np.expm1(-safe))
    return y - m


def _polish(x, y, w, family, beta, s, chol, steps, chunk=20000):
    """Newton steps whose gradient is accumulated in extended precision.

    Double-precision gradients leave ``beta`` with rounding noise of order
    ``eps * cond(H)``; summing in long double removes most of it, so fits of
    algebraically identical problems (e.g. duplicated rows with fractional
    weights) agree far more closely.
    """
    ld = np.longdouble
    s_ld = s.astype(ld)
    for _ in range(steps):
        b = beta.astype(ld)
        g = -(s_ld @ b)
        for i in range(0, x.shape[0], chunk):
            xc = x[i:i + chunk].astype(ld)
            u = w[i:i + chunk].astype(ld) * _score_extended(family, y[i:i + chunk].astype(ld), xc @ b)
            g += xc.T @ u
        beta = beta + linalg.cho_solve(chol, np.asarray(g, dtype=float), check_finite=False)
    return beta


def _aliased_columns(x_lin, w):
    """Indices of linear columns that are (numerically) spanned by earlier ones."""
    sw = np.sqrt(w)[:, None]
    xs = x_lin * sw
    g = xs.T @ xs
    kept = []
    aliased = []
    chol = np.zeros((0, 0))
    for j in range(g.shape[0]):
        gjj = g[j, j]
        if gjj <= 0:
            aliased.append(j)
            continue
        if kept:
            col = linalg.solve_triangular(chol, g[kept, j], lower=True)
            resid = gjj - col @ col
        else:
            col = np.zeros(0)
            resid = gjj
        if resid <= 1e-9 * gjj:
            aliased.append(j)
            continue
        k = len(kept)
        new = np.zeros((k + 1, k + 1))
        new[:k, :k] = chol
        new[k, :k] = col
        new[k, k] = np.sqrt(resid)
        chol = new
        kept.append(j)
    return aliased


def _damped_cholesky(hess, tries=10):
    """Cholesky factor of ``hess``, adding a growing ridge if it is singular.

    Separated rows have weights that underflow to zero, which can leave an
    unpenalised direction without curvature; the ridge turns the Newton step
    into a damped one along that direction.
    """
    try:
        return linalg.cho_factor(hess, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    scale = max(float(np.max(np.abs(np.diag(hess)), initial=0.0)), 1.0)
    eye = np.eye(hess.shape[0])
    for k in range(tries):
        try:
            return linalg.cho_factor(hess + scale * 10.0 ** (k - 12) * eye, lower=True,
                                     check_finite=False)
        except linalg.LinAlgError:
            continue
    raise linalg.LinAlgError("penalised Hessian is not positive definite; the design is rank deficient")


class _Newton:
    """Newton iterations for a fixed penalty."""

    def __init__(self, x, y, w, family, config):
        self.x = x
        self.y = y
        self.w = w
        self.family = family
        self.config = config
        self.scale = max(1.0, float(np.sum(w)))

    roots = None  # [(lambda_k, R_k)] with S_k = R_k' R_k, set by fit_stage

    def objective(self, beta, s):
        if self.roots is None:
            return penalized_loglik(beta, self.x, self.y, self.w, self.family, s)
        # sum of squares avoids the cancellation in beta' S beta for large lambda
        pen = sum(lam * float(np.sum((r @ beta) ** 2)) for lam, r in self.roots)
        ll = float(np.dot(self.w, self.family.loglik(self.y, self.x @ beta)))
        return ll - 0.5 * pen

    def run(self, beta, s):
        fam = self.family
        trace = []
        obj = self.objective(beta, s)
        stalled = 0
        for it in range(1, self.config.max_iter + 1):
            eta = self.x @ beta
            u = self.w * fam.score(self.y, eta)
            v = self.w * fam.weight(eta)
            grad = self.x.T @ u - s @ beta
            hess = (self.x.T * v) @ self.x + s
            cf = _damped_cholesky(hess)
            delta = linalg.cho_solve(cf, grad, check_finite=False)
            gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
            grad_ok = gnorm <= self.config.grad_tol * self.scale
            separated = np.mean(np.abs(eta) > SEPARATION_ETA) > SEPARATION_SHARE
            if separated and grad_ok:
                # the remaining ascent only pushes saturated fits further out
                trace.append((it, -2.0 * obj, gnorm))
                logger.debug("newton iter=%d stopped under separation", it)
                return beta, trace, cf, True
            small_step = np.max(np.abs(delta), initial=0.0) <= self.config.step_tol * (
                1.0 + np.max(np.abs(beta), initial=0.0)
            )
            # Newton decrement below the objective's rounding floor also counts
            flat = float(grad @ delta) <= 1e-12 * (1.0 + abs(obj))
            if (small_step or flat) and grad_ok:
                beta = beta + delta
                obj = self.objective(beta, s)
                trace.append((it, -2.0 * obj, gnorm))
                logger.debug("newton iter=%d deviance=%.12g grad=%.3e", it, -2.0 * obj, gnorm)
                return beta, trace, cf, True
            alpha = 1.0
            for _ in range(40):
                cand = beta + alpha * delta
                cand_obj = self.objective(cand, s)
                if np.isfinite(cand_obj) and cand_obj >= obj - 1e-12 * abs(obj):
                    break
                if alpha == 1.0 and grad_ok:
                    # gradient already small and the full step fails: the step
                    # is rounding noise along a nearly flat direction
                    trace.append((it, -2.0 * obj, gnorm))
                    logger.debug("newton iter=%d stopped at noise floor", it)
                    return beta, trace, cf, True
                alpha *= 0.5
            else:
                cand_obj = -np.inf
            if separated and not cand_obj > obj + 1e-12 * abs(obj):
                # no representable ascent left along the divergent direction
                trace.append((it, -2.0 * obj, gnorm))
                logger.debug("newton iter=%d stopped at noise floor under separation", it)
                return beta, trace, cf, True
            if not np.isfinite(cand_obj):
                trace.append((it, -2.0 * obj, gnorm))
                raise ConvergenceError(
                    f"penalised Newton stalled at iteration {it}: no ascent step found", trace
                )
            stalled = stalled + 1 if cand_obj - obj <= 1e-10 * (1.0 + abs(obj)) else 0
            beta, obj = cand, cand_obj
            trace.append((it, -2.0 * obj, gnorm))
            logger.debug("newton iter=%d deviance=%.12g grad=%.3e", it, -2.0 * obj, gnorm)
            if stalled >= STALL_ITERATIONS and gnorm <= 100.0 * self.config.grad_tol * self.scale:
                # ill-conditioned but flat: the deviance no longer moves
                logger.debug("newton iter=%d stopped on a flat objective", it)
                return beta, trace, cf, True
        raise ConvergenceError(
            f"penalised Newton did not converge in {self.config.max_iter} iterations", trace
        )


def _gcv_select(x, y, w, family, beta, pen_blocks, lambdas, config):
    """Coordinate-wise GCV search on the working linear model at ``beta``."""
    eta = x @ beta
    h = family.weight(eta)
    sv = np.sqrt(w * h)
    # working response times sqrt(weight); rows with underflowed weight drop out
    step = np.divide(family.score(y, eta), np.sqrt(h), out=np.zeros_like(eta), where=h > 0)
    q, r = linalg.qr(x * sv[:, None], mode="economic", check_finite=False)
    zw = eta * sv + np.sqrt(w) * step
    f = q.T @ zw
    r0 = max(float(zw @ zw - f @ f), 0.0)
    n = float(np.sum(w))
    m = r.T @ r
    rtf = r.T @ f
    p = x.shape[1]

    def gcv(lam):
        s = _penalty_matrix(pen_blocks, lam, p)
        try:
            c = linalg.cholesky(m + s, lower=True, check_finite=False)
        except linalg.LinAlgError:
            return np.inf
        b = linalg.cho_solve((c, True), rtf, check_finite=False)
        resid = f - r @ b
        rss = float(resid @ resid) + r0
        a = linalg.solve_triangular(c, r.T, lower=True, check_finite=False)
        edf = float(np.sum(a * a))
        denom = n - edf
        if denom <= 0:
            return np.inf
        return n * rss / denom**2

    current = dict(lambdas)
    best = gcv(current)
    for _ in range(config.sweeps):
        for name, _ in pen_blocks:
            for val in config.lambda_grid:
                trial = dict(current)
                trial[name] = float(val)
                score = gcv(trial)
                if score < best:
                    best = score
                    current = trial
    return current, best


def fit_stage(design, y, weights, family, config=None, lambdas=None):
    """Fit one penalised GLM stage.

    Parameters
    ----------
    design : Design
        Linear columns and constrained smooth blocks.
    y : array_like
        Response (0/1 for Bernoulli, counts >= 1 for zero-truncated Poisson).
    weights : array_like
        Positive per-row likelihood weights.
    family : Family
    config : FitConfig, optional
    lambdas : dict, optional
        Fixed smoothing parameters; with ``config.select_lambda`` they are the
        starting point of the GCV search, otherwise they are used as given.

    Returns
    -------
    FittedStage
    """
    config = config or FitConfig()
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    n = design.n_rows
    if y.shape != (n,) or w.shape != (n,):
        raise ValueError("design, y and weights must have the same number of rows")
    if n == 0:
        raise ValueError("cannot fit a stage on zero rows")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be positive and finite")
    family.check_response(y)

    x_full = design.matrix()
    if not np.all(np.isfinite(x_full)):
        raise ValueError("design contains non-finite values")
    layout = design.layout()
    p_full = x_full.shape[1]

    aliased_idx = _aliased_columns(design.linear, w)
    keep = np.ones(p_full, dtype=bool)
    keep[aliased_idx] = False
    aliased = [design.linear_names[j] for j in aliased_idx]
    x = x_full[:, keep]
    pen_blocks = [(name, s[np.ix_(keep, keep)]) for name, s in design.penalty_blocks()]
    p = x.shape[1]

    lam = {name: 1.0 for name, _ in pen_blocks}
    if lambdas:
        lam.update({k: float(v) for k, v in lambdas.items() if k in lam})

    beta = np.zeros(p)
    kept_names = [nm for j, nm in enumerate(design.linear_names) if keep[j]]
    if "intercept" in kept_names:
        beta[kept_names.index("intercept")] = family.initial_intercept(y, w)

    roots = [(name, _penalty_root(sk)) for name, sk in pen_blocks]
    solver = _Newton(x, y, w, family, config)
    history = []
    outer = 0
    gcv_score = None
    while True:
        outer += 1
        s = _penalty_matrix(pen_blocks, lam, p)
        solver.roots = [(lam[name], r) for name, r in roots]
        beta, trace, chol, _ = solver.run(beta, s)
        history.extend(trace)
        if not (config.select_lambda and pen_blocks) or outer > config.max_outer:
            break
        new_lam, gcv_score = _gcv_select(x, y, w, family, beta, pen_blocks, lam, config)
        logger.debug("gcv outer=%d score=%.10g lambdas=%s", outer, gcv_score, new_lam)
        if new_lam == lam:
            break
        lam = new_lam

    s = _penalty_matrix(pen_blocks, lam, p)
    if config.polish_steps:
        beta = _polish(x, y, w, family, beta, s, chol, config.polish_steps)
    grad = penalized_score(beta, x, y, w, family, s)
    cov_diag = np.diag(linalg.cho_solve(chol, np.eye(p), check_finite=False))

    coef = np.zeros(p_full)
    coef[keep] = beta
    se = np.zeros(p_full)
    se[keep] = np.sqrt(np.maximum(cov_diag, 0.0))

    eta = x @ beta
    lam_max = float(np.max(config.lambda_grid))
    separation = bool(
        np.mean(np.abs(eta) > SEPARATION_ETA) > SEPARATION_SHARE
        and (not lam or any(v >= lam_max for v in lam.values()))
    )
    if separation:
        logger.warning("possible separation: |eta| > 30 on more than 1% of rows")
    report = {
        "iterations": len(history),
        "outer_iterations": outer,
        "gradient_norm": float(np.max(np.abs(grad), initial=0.0)),
        "penalized_deviance": float(-2.0 * penalized_loglik(beta, x, y, w, family, s)),
        "gcv": gcv_score,
        "separation_warning": separation,
        "trace": [list(t) for t in history],
        "n_rows": int(n),
        "weight_total": float(np.sum(w)),
    }
    return FittedStage(
        family=family,
        coefficients=coef,
        smoothing_params=lam,
        layout=layout,
        linear_names=list(design.linear_names),
        std_errors=se,
        aliased=aliased,
        report=report,
    )
