"""Hurdle thresholds and their calibration by differential evolution.

A cell is predicted positive only when both gates clear their thresholds:
``yhat = 0`` if ``pi1 < tau1`` or ``pi2 < tau2``, else ``lambda3``. The
thresholds are chosen so that the summed ``log(1 + yhat)`` of a calibration
month matches the observed ``sum log(1 + y)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels

__all__ = [
    "Hurdles",
    "DEConfig",
    "CalibrationResult",
    "apply_thresholds",
    "calibration_loss",
    "threshold_loss_surface",
    "differential_evolution",
    "plateau_search",
    "calibrate",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hurdles:
    tau1: float
    tau2: float

    def __post_init__(self):
        for name, v in (("tau1", self.tau1), ("tau2", self.tau2)):
            if not (np.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v!r}")


@dataclass(frozen=True)
class DEConfig:
    """DE/rand/1/bin settings; stops after ``patience`` generations without improvement.

    With ``polish`` the DE answer is replaced by the exact plateau search
    result when that is strictly better (see :func:`plateau_search`).
    """

    population: int = 40
    generations: int = 200
    mutation: float = 0.8
    crossover: float = 0.9
    patience: int = 30
    polish: bool = True

    def __post_init__(self):
        if self.population < 4:
            raise ValueError("DE needs a population of at least 4")
        if self.generations < 1 or self.patience < 1:
            raise ValueError("generations and patience must be positive")
        if not 0.0 < self.mutation <= 2.0:
            raise ValueError("mutation factor must lie in (0, 2]")
        if not 0.0 <= self.crossover <= 1.0:
            raise ValueError("crossover rate must lie in [0, 1]")


@dataclass
class CalibrationResult:
    hurdles: Hurdles
    loss: float
    generations: int
    evaluations: int
    history: list = field(default_factory=list)


def _as_probs(p, name):
    p = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError(f"{name} must contain probabilities in [0, 1]")
    return p


def apply_thresholds(pi1, pi2, lam, hurdles):
    """Thresholded point prediction; ``pi == tau`` counts as clearing the hurdle."""
    pi1 = _as_probs(pi1, "pi1")
    pi2 = _as_probs(pi2, "pi2")
    lam = np.asarray(lam, dtype=float)
    if not (pi1.shape == pi2.shape == lam.shape):
        raise ValueError("pi1, pi2 and lambda must have the same shape")
    if np.any(~np.isfinite(lam)) or np.any(lam < 0):
        raise ValueError("lambda must be finite and non-negative")
    keep = (pi1 >= hurdles.tau1) & (pi2 >= hurdles.tau2)
    return np.where(keep, lam, 0.0)


def calibration_loss(yhat, y):
    """``|sum log1p(yhat) - sum log1p(y)|``."""
    yhat = np.asarray(yhat, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(yhat < 0) or np.any(y < 0):
        raise ValueError("calibration loss needs non-negative predictions and outcomes")
    return float(abs(np.sum(np.log1p(yhat)) - np.sum(np.log1p(y))))


def threshold_loss_surface(pi1, pi2, lam, y, taus):
    """Calibration loss at each row ``(tau1, tau2)`` of ``taus``."""
    pi1 = np.ascontiguousarray(_as_probs(pi1, "pi1"))
    pi2 = np.ascontiguousarray(_as_probs(pi2, "pi2"))
    gain = np.ascontiguousarray(np.log1p(np.asarray(lam, dtype=float)))
    target = float(np.sum(np.log1p(np.asarray(y, dtype=float))))
    taus = np.ascontiguousarray(np.asarray(taus, dtype=float).reshape(-1, 2))
    return kernels.threshold_losses(pi1, pi2, gain, target, taus)


def _reflect(v, lo=0.0, hi=1.0):
    # mirror at the box edges until inside
    v = v.copy()
    for _ in range(8):
        below = v < lo
        above = v > hi
        if not (below.any() or above.any()):
            break
        v[below] = 2 * lo - v[below]
        v[above] = 2 * hi - v[above]
    return np.clip(v, lo, hi)


def differential_evolution(objective, dim, config=None, seed=None, bounds=(0.0, 1.0)):
    """Minimise a vectorised ``objective`` over a box with DE/rand/1/bin.

    ``objective`` maps an (m, dim) array of candidates to m losses. Trial
    vectors replace their parent when not worse, which lets the population
    drift across flat regions of a piecewise-constant loss.

    Returns
    -------
    best : ndarray
    best_loss : float
    generations : int
    evaluations : int
    history : list of float
        Best loss after initialisation and after every generation.
    """
    cfg = config or DEConfig()
    rng = np.random.default_rng(seed)
    lo, hi = bounds
    npop = cfg.population
    pop = lo + (hi - lo) * rng.random((npop, dim))
    fit = np.asarray(objective(pop), dtype=float)
    evals = npop
    ibest = int(np.argmin(fit))
    best, best_loss = pop[ibest].copy(), float(fit[ibest])
    history = [best_loss]
    stall = 0
    gen = 0
    idx = np.arange(npop)
    for gen in range(1, cfg.generations + 1):
        # three distinct donors per target, all different from the target
        r = np.empty((npop, 3), dtype=np.int64)
        for i in range(npop):
            r[i] = rng.choice(np.delete(idx, i), 3, replace=False)
        mutant = pop[r[:, 0]] + cfg.mutation * (pop[r[:, 1]] - pop[r[:, 2]])
        mutant = _reflect(mutant, lo, hi)
        cross = rng.random((npop, dim)) < cfg.crossover
        cross[idx, rng.integers(0, dim, npop)] = True
        trial = np.where(cross, mutant, pop)
        tfit = np.asarray(objective(trial), dtype=float)
        evals += npop
        better = tfit <= fit
        pop[better] = trial[better]
        fit[better] = tfit[better]
        ibest = int(np.argmin(fit))
        if fit[ibest] < best_loss:
            best, best_loss = pop[ibest].copy(), float(fit[ibest])
            stall = 0
        else:
            stall += 1
        history.append(best_loss)
        logger.debug("de gen=%d best=%.12g", gen, best_loss)
        if stall >= cfg.patience:
            break
    return best, best_loss, gen, evals, history


def _plateaus(p):
    """Distinct values of ``p`` in descending order with the midpoints below them.

    A threshold anywhere in ``(next lower value, value]`` opens the same rows,
    so the midpoint represents the whole plateau; ``0`` stands in for the
    lowest one.
    """
    v = np.unique(p)[::-1]
    lower = np.append(v[1:], 0.0)
    mids = np.where(v > lower, 0.5 * (v + lower), v)
    return v, mids


def plateau_search(pi1, pi2, gain, target):
    """Exact minimiser of the threshold loss over every plateau pair.

    For each ``tau1`` plateau the open rows are scanned in decreasing
    ``pi2`` with a cumulative sum of ``gain``, which gives the loss on every
    ``tau2`` plateau at once. Cost is O(U1 * n) for U1 distinct ``pi1``
    values. The empty selection (both thresholds above all probabilities)
    is included when it is reachable inside [0, 1].
    """
    order = np.argsort(-pi2, kind="stable")
    p2s = pi2[order]
    p1s = pi1[order]
    gs = gain[order]
    ends = np.nonzero(np.append(p2s[1:] != p2s[:-1], True))[0]
    _, mids2 = _plateaus(p2s)

    _, mids1 = _plateaus(pi1)
    v1 = np.unique(pi1)[::-1]
    best_tau = None
    best = np.inf
    if pi1.max() < 1.0 or pi2.max() < 1.0:
        best = abs(target)
        best_tau = (0.5 * (pi1.max() + 1.0) if pi1.max() < 1.0 else 1.0,
                    0.5 * (pi2.max() + 1.0) if pi2.max() < 1.0 else 1.0)
    for v, m1 in zip(v1, mids1):
        cum = np.cumsum(np.where(p1s >= v, gs, 0.0))[ends]
        losses = np.abs(cum - target)
        k = int(np.argmin(losses))
        if losses[k] < best:
            best, best_tau = float(losses[k]), (float(m1), float(mids2[k]))
    return np.array(best_tau, dtype=float), float(best)


def calibrate(pi1, pi2, lam, y, config=None, seed=0):
    """Choose ``(tau1, tau2)`` on a calibration month by differential evolution.

    Deterministic for a fixed ``seed``.
    """
    pi1 = _as_probs(pi1, "pi1")
    pi2 = _as_probs(pi2, "pi2")
    lam = np.asarray(lam, dtype=float)
    y = np.asarray(y, dtype=float)
    if pi1.size == 0:
        raise ValueError("calibration set is empty")
    if not (pi1.shape == pi2.shape == lam.shape == y.shape):
        raise ValueError("pi1, pi2, lambda and y must have the same shape")
    if np.any(y < 0) or np.any(~np.isfinite(y)):
        raise ValueError("outcomes must be finite and non-negative")
    pi1, pi2 = np.ascontiguousarray(pi1), np.ascontiguousarray(pi2)
    gain = np.ascontiguousarray(np.log1p(lam))
    target = float(np.sum(np.log1p(y)))

    def objective(taus):
        return kernels.threshold_losses(pi1, pi2, gain, target, np.ascontiguousarray(taus))

    config = config or DEConfig()
    best, loss, gens, evals, history = differential_evolution(objective, 2, config, seed)
    if config.polish:
        exact, _ = plateau_search(pi1, pi2, gain, target)
        eloss = float(objective(exact[None, :])[0])
        if eloss < loss:
            best, loss = exact, eloss
    return CalibrationResult(Hurdles(float(best[0]), float(best[1])), loss, gens, evals, history)
