"""NumPy implementations of the compiled kernels in ``_kernels.pyx``."""
import numpy as np

_CHUNK = 4096


def bspline_design(x, knots, degree):
    """Dense B-spline design matrix for an already-extended knot vector.

    Caller guarantees every ``x`` lies in ``[knots[degree], knots[-degree - 1]]``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    knots = np.ascontiguousarray(knots, dtype=np.float64)
    n_basis = knots.shape[0] - degree - 1
    left = np.searchsorted(knots, x, side="right") - 1
    left = np.clip(left, degree, n_basis - 1)

    n = x.shape[0]
    work = np.zeros((n, degree + 1))
    work[:, 0] = 1.0
    for i in range(1, degree + 1):
        tmp = work[:, :i].copy()
        work[:, 0] = 0.0
        for j in range(1, i + 1):
            rk = knots[left + j]
            lk = knots[left + j - i]
            span = rk - lk
            safe = np.where(span > 0, span, 1.0)
            factor = np.where(span > 0, tmp[:, j - 1] / safe, 0.0)
            work[:, j - 1] += factor * (rk - x)
            work[:, j] = factor * (x - lk)

    out = np.zeros((n, n_basis))
    rows = np.arange(n)
    for j in range(degree + 1):
        out[rows, left - degree + j] = work[:, j]
    return out


def threshold_losses(pi1, pi2, gain, target, taus):
    """Loss ``|sum(gain[open]) - target|`` for each row ``(tau1, tau2)`` of ``taus``.

    A cell is open when ``pi1 >= tau1`` and ``pi2 >= tau2``.
    """
    pi1 = np.asarray(pi1, dtype=np.float64)
    pi2 = np.asarray(pi2, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64).reshape(-1, 2)
    out = np.empty(taus.shape[0])
    for start in range(0, taus.shape[0], _CHUNK):
        block = taus[start:start + _CHUNK]
        open_ = (pi1[None, :] >= block[:, :1]) & (pi2[None, :] >= block[:, 1:])
        out[start:start + _CHUNK] = np.abs(open_ @ gain - target)
    return out
