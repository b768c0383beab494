"""Design columns and roughness penalties for the smooth model terms.

Every smooth term is a penalised basis expansion: univariate P-splines
(cubic B-splines with a difference penalty), a P-spline temporal trend, a
tensor-product P-spline over (lon, lat), and a ridge-penalised random
effect. Month-of-year dummies are returned as plain unpenalised columns.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from . import kernels

__all__ = [
    "KnotGrid",
    "SmoothTerm",
    "BasisDomainError",
    "bspline_basis",
    "difference_matrix",
    "difference_penalty",
    "pspline_term",
    "tensor_spatial",
    "temporal_trend",
    "month_dummies",
    "random_effect_block",
    "absorb_constraint",
]

_RANGE_SLACK = 1e-10


class BasisDomainError(ValueError):
    """Raised when a basis is evaluated outside the range it was built for."""


@dataclass(frozen=True)
class KnotGrid:
    """Breakpoints of a B-spline basis.

    ``knots`` holds the strictly increasing breakpoints including the two
    boundary knots; ``degree`` more knots are appended on each side (with the
    boundary spacing) before evaluation. The basis has
    ``len(knots) + degree - 1`` functions, i.e. #interior + degree + 1.
    ``order`` is the order of the difference penalty paired with the basis.
    """

    knots: tuple
    degree: int = 3
    order: int = 2

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.ndim != 1 or k.size < 2:
            raise ValueError("a knot grid needs at least the two boundary knots")
        if not np.all(np.isfinite(k)):
            raise ValueError("knots must be finite")
        if np.any(np.diff(k) <= 0):
            raise ValueError("knots must be strictly increasing")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.order < 1:
            raise ValueError("penalty order must be >= 1")
        object.__setattr__(self, "knots", tuple(float(v) for v in k))

    @classmethod
    def equispaced(cls, lower, upper, n_basis, degree=3, order=2):
        """Grid with ``n_basis`` functions over ``[lower, upper]``."""
        n_knots = n_basis - degree + 1
        if n_knots < 2:
            raise ValueError(f"n_basis={n_basis} too small for degree {degree}")
        if not upper > lower:
            raise ValueError(f"degenerate range [{lower}, {upper}]")
        return cls(tuple(np.linspace(lower, upper, n_knots)), degree, order)

    @property
    def lower(self):
        return self.knots[0]

    @property
    def upper(self):
        return self.knots[-1]

    @property
    def n_basis(self):
        return len(self.knots) + self.degree - 1

    def extended(self):
        k = np.asarray(self.knots)
        d = self.degree
        left = k[0] - (k[1] - k[0]) * np.arange(d, 0, -1)
        right = k[-1] + (k[-1] - k[-2]) * np.arange(1, d + 1)
        return np.concatenate([left, k, right])


def bspline_basis(x, grid):
    """Evaluate the B-spline basis of ``grid`` at ``x`` (Cox-de Boor).

    Parameters
    ----------
    x : array_like, shape (n,)
        Evaluation points; must lie within ``[grid.lower, grid.upper]``.
    grid : KnotGrid

    Returns
    -------
    numpy.ndarray, shape (n, grid.n_basis)
        Nonnegative rows summing to one, at most ``degree + 1`` nonzeros each.

    Raises
    ------
    BasisDomainError
        If any point lies outside the grid range; extrapolation is refused.
    """
    x = np.ascontiguousarray(np.atleast_1d(np.asarray(x, dtype=float)))
    if x.ndim != 1:
        raise ValueError("x must be one-dimensional")
    if not np.all(np.isfinite(x)):
        raise BasisDomainError("non-finite value passed to a B-spline basis")
    lo, hi = grid.lower, grid.upper
    slack = _RANGE_SLACK * max(1.0, hi - lo)
    if x.size and (x.min() < lo - slack or x.max() > hi + slack):
        raise BasisDomainError(
            f"values in [{x.min():.6g}, {x.max():.6g}] fall outside the basis range "
            f"[{lo:.6g}, {hi:.6g}]; extrapolation is not supported"
        )
    x = np.clip(x, lo, hi)
    return kernels.bspline_design(x, np.ascontiguousarray(grid.extended()), grid.degree)


def difference_matrix(n_basis, order):
    """The ``order``-th difference operator, shape ``(n_basis - order, n_basis)``."""
    if order < 1:
        raise ValueError("difference order must be >= 1")
    if n_basis <= order:
        raise ValueError(f"need more basis functions ({n_basis}) than the penalty order ({order})")
    return np.diff(np.eye(n_basis), n=order, axis=0)


def difference_penalty(n_basis, order):
    """Eilers-Marx roughness penalty ``D.T @ D``; rank ``n_basis - order``."""
    d = difference_matrix(n_basis, order)
    return d.T @ d


@dataclass
class SmoothTerm:
    """A penalised block of design columns.

    ``basis`` is the design block on the rows the term was built from and
    ``penalty`` the matching quadratic penalty. ``constraint`` is the
    sum-to-zero row vector (column sums of the unconstrained basis), and
    ``null_basis`` is set once the constraint has been absorbed.
    """

    name: str
    kind: str
    basis: np.ndarray
    penalty: np.ndarray
    constraint: np.ndarray | None = None
    grids: tuple = ()
    levels: np.ndarray | None = None
    null_basis: np.ndarray | None = field(default=None, repr=False)

    @property
    def absorbed(self):
        return self.null_basis is not None

    @property
    def n_coef(self):
        return self.basis.shape[1]

    def raw_basis(self, *inputs):
        """Unconstrained basis at new data (same argument order as construction)."""
        if self.kind in ("pspline", "temporal"):
            (x,) = inputs
            return bspline_basis(x, self.grids[0])
        if self.kind == "tensor":
            lon, lat = inputs
            return _row_kron(bspline_basis(lon, self.grids[0]), bspline_basis(lat, self.grids[1]))
        if self.kind == "random-effect":
            (ids,) = inputs
            return _indicators(ids, self.levels)
        raise ValueError(f"unknown smooth kind {self.kind!r}")

    def evaluate(self, *inputs):
        """Design block at new data, in the coefficient space of this term."""
        b = self.raw_basis(*inputs)
        return b @ self.null_basis if self.absorbed else b


def _row_kron(a, b):
    n = a.shape[0]
    return (a[:, :, None] * b[:, None, :]).reshape(n, a.shape[1] * b.shape[1])


def _indicators(ids, levels):
    ids = np.asarray(ids)
    pos = np.searchsorted(levels, ids)
    pos_c = np.clip(pos, 0, len(levels) - 1)
    unseen = levels[pos_c] != ids
    if np.any(unseen):
        bad = sorted(set(ids[unseen].tolist()))
        raise KeyError(f"country ids {bad} were not present when the random effect was fit")
    out = np.zeros((ids.shape[0], len(levels)))
    out[np.arange(ids.shape[0]), pos_c] = 1.0
    return out


def _sum_to_zero(basis):
    return basis.sum(axis=0)[None, :]


def pspline_term(name, x, n_basis=10, degree=3, order=2, lower=None, upper=None, kind="pspline"):
    """Univariate P-spline term with equispaced knots and a sum-to-zero constraint.

    The knot range defaults to the observed range of ``x``; pass ``lower`` and
    ``upper`` to cover prediction rows as well.
    """
    x = np.asarray(x, dtype=float)
    lo = np.min(x) if lower is None else lower
    hi = np.max(x) if upper is None else upper
    if not hi > lo:
        raise ValueError(f"covariate {name!r} is constant; a smooth effect is not identifiable")
    grid = KnotGrid.equispaced(lo, hi, n_basis, degree, order)
    basis = bspline_basis(x, grid)
    return SmoothTerm(
        name=name,
        kind=kind,
        basis=basis,
        penalty=difference_penalty(grid.n_basis, order),
        constraint=_sum_to_zero(basis),
        grids=(grid,),
    )


def temporal_trend(t, n_basis, lower=None, upper=None, name="trend", order=1):
    """Cubic P-spline trend over the month index, sum-to-zero constrained.

    The default first-order difference penalty shrinks towards a constant.
    Forecast months past the knot range are not extrapolated here; the stage
    design clamps them to the last fitted month, which carries the final
    level forward.
    """
    t = np.asarray(t, dtype=float)
    if n_basis < 5:
        raise ValueError("temporal trend needs at least 5 basis functions")
    n_unique = np.unique(t).size
    if n_unique < 2:
        raise ValueError("temporal trend needs a non-constant month index")
    if n_unique < n_basis:
        raise ValueError(
            f"only {n_unique} distinct months for {n_basis} trend basis functions; "
            f"use n_basis <= {n_unique}"
        )
    return pspline_term(name, t, n_basis=n_basis, order=order, lower=lower, upper=upper,
                        kind="temporal")


def tensor_spatial(lon, lat, grid_lon, grid_lat, name="spatial"):
    """Tensor-product P-spline over coordinates.

    The basis is the row-wise Kronecker product of the marginal bases and the
    penalty ``S_lon (x) I + I (x) S_lat`` (one smoothing parameter).
    """
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if lon.shape != lat.shape:
        raise ValueError("lon and lat must have the same length")
    if np.ptp(lon) == 0 or np.ptp(lat) == 0:
        raise ValueError("degenerate coordinates: lon or lat is constant")
    basis = _row_kron(bspline_basis(lon, grid_lon), bspline_basis(lat, grid_lat))
    k1, k2 = grid_lon.n_basis, grid_lat.n_basis
    penalty = np.kron(difference_penalty(k1, grid_lon.order), np.eye(k2)) + np.kron(
        np.eye(k1), difference_penalty(k2, grid_lat.order)
    )
    return SmoothTerm(
        name=name,
        kind="tensor",
        basis=basis,
        penalty=penalty,
        constraint=_sum_to_zero(basis),
        grids=(grid_lon, grid_lat),
    )


def month_dummies(t):
    """Month-of-year indicators for February..December (January is the reference).

    Month indices count from January, so the calendar month is ``t mod 12``.
    """
    moy = np.asarray(t, dtype=np.int64) % 12
    out = np.zeros((moy.shape[0], 11))
    rows = np.nonzero(moy > 0)[0]
    out[rows, moy[rows] - 1] = 1.0
    return out


def random_effect_block(country_id, n, name="country"):
    """Country indicator columns with an identity (ridge) penalty.

    ``n`` is either the number of countries (ids ``1..n``) or the explicit
    sequence of level ids.
    """
    if np.ndim(n) == 0:
        levels = np.arange(1, int(n) + 1)
    else:
        levels = np.unique(np.asarray(n))
    basis = _indicators(np.asarray(country_id), levels)
    return SmoothTerm(
        name=name,
        kind="random-effect",
        basis=basis,
        penalty=np.eye(levels.size),
        levels=levels,
    )


def absorb_constraint(term):
    """Reparameterise ``term`` onto the null space of its linear constraint.

    With ``c`` the constraint row, the QR decomposition of ``c.T`` gives an
    orthonormal ``Z`` (the trailing K-1 columns of Q) with ``c @ Z = 0``; the
    basis becomes ``B @ Z`` and the penalty ``Z.T @ S @ Z``.
    """
    if term.absorbed:
        raise ValueError(f"constraint of term {term.name!r} is already absorbed")
    if term.constraint is None:
        raise ValueError(f"term {term.name!r} carries no constraint")
    c = np.asarray(term.constraint, dtype=float).reshape(1, -1)
    if not np.any(c):
        raise ValueError(f"constraint of term {term.name!r} is identically zero")
    z = null_space_basis(c)
    return replace(
        term,
        basis=term.basis @ z,
        penalty=np.ascontiguousarray(z.T @ term.penalty @ z),
        null_basis=z,
    )


def null_space_basis(c):
    """Orthonormal basis (K x K-1) of the null space of the row vector ``c``."""
    q, _ = linalg.qr(np.asarray(c, dtype=float).reshape(-1, 1), mode="full")
    # C order, so a model reloaded from JSON multiplies bit-identically
    return np.ascontiguousarray(q[:, 1:])
