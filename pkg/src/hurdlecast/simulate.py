"""Synthetic cell-month panels drawn from the three-stage hurdle model.

Covariates are exogenous: country-level series (GDP, population, military
expenditure, polity, arms-import sums) and cell-level attributes
(population, GDP, night lights, infant mortality, distance to the capital).
Stage linear predictors use the covariates of month ``t - lag`` transformed
as in the default covariate spec, plus a Gaussian country effect in stage 1.
Lagged-outcome terms (``c_sb_any`` in stage 1, ``sb_any`` in stages 2 and 3,
from month ``t - lag``) make conflict persistent. Each country-month draws
its incidence; if positive, every cell draws its gate and, when open, a
zero-truncated Poisson count.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from .covspec import default_spec
from .panel import Panel, arms_import_sums, transform_covariate

__all__ = ["SimulationConfig", "SimulationResult", "simulate_panel", "linear_predictors", "sample_month"]

# lagged-outcome terms the simulator understands, per stage
HISTORY_TERMS = {1: ("c_sb_any", "c_sb_count"), 2: ("sb_any", "sb_count"), 3: ("sb_any",)}

RAW_COVARIATES = (
    "gdp_country", "pop_country", "milexp", "polity", "mcw_st", "mcw_lt",
    "gdp_cell", "pop_cell", "nightlights", "imr", "capdist",
)


def _default_coefficients():
    return {
        1: {"intercept": -2.5, "c_sb_any": 4.0, "milexp": 0.35, "mcw_st": 0.12, "mcw_lt": -0.08,
            "polity": -0.05, "gdp_country": -0.3},
        2: {"intercept": -2.8, "sb_any": 3.5, "nightlights": 0.8, "capdist": 0.35, "polity": -0.04,
            "mcw_lt": 0.08, "mcw_lt:capdist": -0.03},
        3: {"intercept": -0.5, "sb_any": 0.4, "capdist": 0.1, "milexp": 0.15, "imr": 0.004,
            "mcw_lt": 0.06},
    }


@dataclass
class SimulationConfig:
    """Dimensions, true coefficients and seed of a synthetic panel.

    ``coefficients[k]`` maps design-term names of stage ``k`` (``intercept``,
    raw covariate names, or ``a:b`` interactions) to true values on the
    transformed scale used by the default spec. ``re_sd`` is the standard
    deviation of the stage-1 country effect.
    """

    n_countries: int = 5
    cells_per_country: int = 20
    n_months: int = 60
    seed: int = 0
    lag: int = 2
    start_month: int = 0
    coefficients: dict = field(default_factory=_default_coefficients)
    re_sd: float = 0.4
    os_rate: float = 0.03
    ns_rate: float = 0.02

    def to_dict(self):
        d = asdict(self)
        d["coefficients"] = {str(k): dict(v) for k, v in self.coefficients.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["coefficients"] = {int(k): dict(v) for k, v in d["coefficients"].items()}
        return cls(**d)


@dataclass
class SimulationResult:
    panel: Panel
    config: SimulationConfig
    country_effects: np.ndarray

    def manifest(self):
        return {
            "config": self.config.to_dict(),
            "country_effects": [float(u) for u in self.country_effects],
        }


def _transforms():
    out = {1: {}, 2: {}, 3: {}}
    for e in default_spec():
        if e.effect in ("linear", "p-spline"):
            for s in e.stages:
                out[s][e.name] = e.transform
    return out


def _term_values(name, stage, values, transforms):
    parts = name.split(":")
    out = None
    for p in parts:
        if p not in RAW_COVARIATES:
            raise ValueError(f"simulator coefficient {name!r}: {p!r} is not an exogenous covariate")
        v = transform_covariate(values[p], transforms[stage].get(p, "identity"), p)
        out = v if out is None else out * v
    return out


def _draw_covariates(cfg, rng):
    nc, nk, T = cfg.n_countries, cfg.cells_per_country, cfg.n_months
    months = cfg.start_month + np.arange(T)

    def ar1(shape, rho, sd):
        x = np.zeros(shape)
        x[0] = rng.normal(0.0, sd / np.sqrt(1 - rho**2), shape[1:])
        for t in range(1, shape[0]):
            x[t] = rho * x[t - 1] + rng.normal(0.0, sd, shape[1:])
        return x

    country = {}
    country["gdp_country"] = np.exp(rng.normal(7.5, 0.8, nc)[None, :] + ar1((T, nc), 0.97, 0.05))
    country["pop_country"] = np.exp(rng.normal(16.0, 0.8, nc)[None, :] + 0.002 * np.arange(T)[:, None])
    country["milexp"] = np.exp(rng.normal(5.0, 1.0, nc)[None, :] + ar1((T, nc), 0.95, 0.1))
    polity = np.zeros((T, nc))
    polity[0] = rng.integers(-8, 9, nc)
    for t in range(1, T):
        jump = rng.random(nc) < 0.03
        polity[t] = np.clip(polity[t - 1] + jump * rng.integers(-3, 4, nc), -10, 10)
    country["polity"] = polity

    years = months // 12
    y_lo, y_hi = int(years.min()) - 10, int(years.max())
    st = np.zeros((T, nc))
    lt = np.zeros((T, nc))
    for j in range(nc):
        scale = rng.normal(3.0, 0.8)
        tiv = {}
        for y in range(y_lo, y_hi + 1):
            tiv[y] = 0.0 if rng.random() < 0.35 else float(np.exp(rng.normal(scale, 1.0)))
        for i, y in enumerate(years):
            st[i, j], lt[i, j] = arms_import_sums(tiv, int(y))
    country["mcw_st"] = st
    country["mcw_lt"] = lt

    side = int(np.ceil(np.sqrt(nk)))
    a = np.arange(nk) % side
    b = np.arange(nk) // side
    lon = np.zeros((nc, nk))
    lat = np.zeros((nc, nk))
    # countries on a near-square grid, at most 8 per row
    width = min(8, int(np.ceil(np.sqrt(nc))))
    for j in range(nc):
        lon[j] = 4.0 * (j % width) + 0.5 * a
        lat[j] = 4.0 * (j // width) + 0.5 * b
    cap = rng.integers(0, nk, nc)
    dist = 1.11 * np.hypot(lon - lon[np.arange(nc), cap][:, None], lat - lat[np.arange(nc), cap][:, None])
    cell = {}
    cell["capdist"] = np.broadcast_to(dist.reshape(1, -1), (T, nc * nk)).copy()
    night0 = rng.normal(0.0, 1.0, nc * nk) - 0.3 * dist.reshape(-1)
    cell["nightlights"] = night0[None, :] + rng.normal(0.0, 0.1, (T, nc * nk))
    cell["imr"] = np.broadcast_to(rng.normal(60.0, 20.0, nc * nk)[None, :], (T, nc * nk)).copy()
    cell["pop_cell"] = np.exp(rng.normal(10.0, 1.0, nc * nk)[None, :] + 0.002 * np.arange(T)[:, None])
    gdp_share = rng.normal(-3.0, 0.5, nc * nk)
    cell["gdp_cell"] = np.exp(np.log(np.repeat(country["gdp_country"], nk, axis=1)) + gdp_share[None, :])
    return months, country, cell, lon.reshape(-1), lat.reshape(-1)


def linear_predictors(cfg, country, cell, u):
    """Exogenous parts of the stage linear predictors.

    Returns ``eta1`` (T x countries, including the country effect) and
    ``eta2``, ``eta3`` (T x cells). History terms are added month by month in
    :func:`simulate_panel`.
    """
    nc, nk, T, s = cfg.n_countries, cfg.cells_per_country, cfg.n_months, cfg.lag
    src = np.maximum(np.arange(T) - s, 0)
    transforms = _transforms()
    country_cell = {k: np.repeat(v, nk, axis=1) for k, v in country.items()}
    values_c = {k: v[src] for k, v in country.items()}
    values_p = {**{k: v[src] for k, v in country_cell.items()}, **{k: v[src] for k, v in cell.items()}}

    def linpred(stage, values, shape):
        eta = np.zeros(shape)
        for name, coef in cfg.coefficients.get(stage, {}).items():
            if name == "intercept":
                eta = eta + coef
                continue
            if name in HISTORY_TERMS[stage]:
                continue
            if stage == 1 and any(p not in country for p in name.split(":")):
                raise ValueError(f"stage-1 coefficient {name!r} must use country-level covariates")
            term = _term_values(name, stage, values, transforms)
            if not np.all(np.isfinite(term)):
                raise ValueError(f"non-finite linear predictor from covariate {name!r}")
            eta = eta + coef * term
        return eta

    eta1 = linpred(1, values_c, (T, nc)) + u[None, :]
    eta2 = linpred(2, values_p, (T, nc * nk))
    eta3 = linpred(3, values_p, (T, nc * nk))
    for k, e in ((1, eta1), (2, eta2), (3, eta3)):
        if not np.all(np.isfinite(e)):
            raise ValueError(f"non-finite linear predictor in stage {k}")
    return eta1, eta2, eta3


def _ztpoisson_draw(lam, rng):
    out = rng.poisson(lam)
    zero = out == 0
    while np.any(zero):
        out[zero] = rng.poisson(lam[zero])
        zero = out == 0
    return out


def sample_month(pi1, pi2, lam, cells_per_country, rng):
    """Draw one month of cell counts given stage parameters.

    ``pi1`` has one entry per country; ``pi2`` and ``lam`` one per cell with
    cells grouped by country. A positive country-month whose cells all drew
    closed gates is redrawn until at least one cell is positive, the only
    configurations the joint model gives mass to.
    """
    nc = pi1.shape[0]
    nk = cells_per_country
    y_tilde = rng.random(nc) < pi1
    gates = (rng.random(nc * nk) < pi2) & np.repeat(y_tilde, nk)
    empty = y_tilde & ~gates.reshape(nc, nk).any(axis=1)
    while np.any(empty):
        cols = (np.nonzero(empty)[0][:, None] * nk + np.arange(nk)[None, :]).ravel()
        gates[cols] = rng.random(cols.size) < pi2[cols]
        empty = y_tilde & ~gates.reshape(nc, nk).any(axis=1)
    counts = np.zeros(nc * nk, dtype=np.int64)
    counts[gates] = _ztpoisson_draw(lam[gates], rng)
    return y_tilde, counts


def _history_terms(cfg, prev, nk):
    """History contributions to the three linear predictors from counts ``prev``."""
    cell_any = (prev > 0).astype(float)
    country_total = prev.reshape(-1, nk).sum(axis=1)
    feats = {
        1: {"c_sb_any": (country_total > 0).astype(float),
            "c_sb_count": np.log1p(country_total)},
        2: {"sb_any": cell_any, "sb_count": np.log1p(prev)},
        3: {"sb_any": cell_any},
    }
    out = []
    for k in (1, 2, 3):
        eta = 0.0
        for name in HISTORY_TERMS[k]:
            coef = cfg.coefficients.get(k, {}).get(name)
            if coef is not None:
                eta = eta + coef * feats[k][name]
        out.append(eta)
    return out


def simulate_panel(config):
    """Draw a synthetic panel; reproducible for a fixed ``config.seed``."""
    cfg = config
    if cfg.n_countries < 1 or cfg.cells_per_country < 1 or cfg.n_months < 1:
        raise ValueError("panel dimensions must be positive")
    rng = np.random.default_rng(cfg.seed)
    months, country, cell, lon, lat = _draw_covariates(cfg, rng)
    u = rng.normal(0.0, cfg.re_sd, cfg.n_countries)
    eta1, eta2, eta3 = linear_predictors(cfg, country, cell, u)

    T, nk, nc = cfg.n_months, cfg.cells_per_country, cfg.n_countries
    sb = np.zeros((T, nc * nk), dtype=np.int64)
    for t in range(T):
        # months before the first source month see an empty history
        prev = sb[t - cfg.lag] if t >= cfg.lag else np.zeros(nc * nk, dtype=np.int64)
        h1, h2, h3 = _history_terms(cfg, prev, nk)
        _, sb[t] = sample_month(expit(eta1[t] + h1), expit(eta2[t] + h2),
                                np.exp(eta3[t] + h3), nk, rng)
    shape = (T, nc * nk)
    os_ = (rng.random(shape) < cfg.os_rate) * (1 + rng.poisson(1.0, shape))
    ns_ = (rng.random(shape) < cfg.ns_rate) * (1 + rng.poisson(1.0, shape))

    cell_ids = np.arange(1, nc * nk + 1)
    country_ids = np.repeat(np.arange(1, nc + 1), nk)
    data = {
        "cell_id": np.tile(cell_ids, T),
        "country_id": np.tile(country_ids, T),
        "month": np.repeat(months, nc * nk),
        "sb_fatalities": sb.reshape(-1),
        "os_fatalities": os_.reshape(-1).astype(np.int64),
        "ns_fatalities": ns_.reshape(-1).astype(np.int64),
        "lon": np.tile(lon, T),
        "lat": np.tile(lat, T),
    }
    for k in RAW_COVARIATES:
        if k in country:
            data[k] = np.repeat(country[k], nk, axis=1).reshape(-1)
        else:
            data[k] = cell[k].reshape(-1)
    frame = pd.DataFrame(data)
    frame = frame.sort_values(["country_id", "cell_id", "month"], kind="mergesort").reset_index(drop=True)
    return SimulationResult(Panel(frame, RAW_COVARIATES), cfg, u)
