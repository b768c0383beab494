# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: B-spline design rows and the threshold loss sweep."""
import numpy as np

cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef inline Py_ssize_t _find_interval(const double[::1] knots, int degree,
                                      double x, Py_ssize_t n_basis) noexcept nogil:
    # knots[l] <= x < knots[l + 1], with the right boundary folded into the last span
    cdef Py_ssize_t lo = degree
    cdef Py_ssize_t hi = n_basis
    cdef Py_ssize_t mid
    if x >= knots[n_basis]:
        return n_basis - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if x < knots[mid]:
            hi = mid
        else:
            lo = mid
    return lo


cdef void _de_boor(const double[::1] knots, double x, int degree,
                   Py_ssize_t left, double* work, double* tmp) noexcept nogil:
    cdef int i, j
    cdef double lk, rk, factor
    work[0] = 1.0
    for i in range(1, degree + 1):
        for j in range(i):
            tmp[j] = work[j]
        work[0] = 0.0
        for j in range(1, i + 1):
            rk = knots[left + j]
            lk = knots[left + j - i]
            if rk == lk:
                work[j] = 0.0
                continue
            factor = tmp[j - 1] / (rk - lk)
            work[j - 1] += factor * (rk - x)
            work[j] = factor * (x - lk)


def bspline_design(const double[::1] x, const double[::1] knots, int degree):
    """Dense B-spline design matrix for an already-extended knot vector.

    Caller guarantees every ``x`` lies in ``[knots[degree], knots[-degree - 1]]``.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t n_basis = knots.shape[0] - degree - 1
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, n_basis), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double[::1] work = np.zeros(degree + 1, dtype=np.float64)
    cdef double[::1] tmp = np.zeros(degree + 1, dtype=np.float64)
    cdef Py_ssize_t r, left
    cdef int j
    with nogil:
        for r in range(n):
            left = _find_interval(knots, degree, x[r], n_basis)
            _de_boor(knots, x[r], degree, left, &work[0], &tmp[0])
            for j in range(degree + 1):
                ov[r, left - degree + j] = work[j]
    return out


def threshold_losses(const double[::1] pi1, const double[::1] pi2,
                     const double[::1] gain, double target,
                     const double[:, ::1] taus):
    """Loss ``|sum(gain[open]) - target|`` for each row ``(tau1, tau2)`` of ``taus``.

    A cell is open when ``pi1 >= tau1`` and ``pi2 >= tau2``.
    """
    cdef Py_ssize_t n = pi1.shape[0]
    cdef Py_ssize_t m = taus.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(m, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t k, i
    cdef double t1, t2, acc
    with nogil:
        for k in range(m):
            t1 = taus[k, 0]
            t2 = taus[k, 1]
            acc = 0.0
            for i in range(n):
                # branch-free: adding 0.0 for closed cells leaves the sum unchanged
                acc = acc + gain[i] * <double>((pi1[i] >= t1) & (pi2[i] >= t2))
            ov[k] = fabs(acc - target)
    return out
