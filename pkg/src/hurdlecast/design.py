"""Stage row selection and design-matrix recipes.

A :class:`StageRecipe` is built once from the rows a stage is fit on (plus a
wider domain frame that fixes knot ranges) and then evaluates the identical
design on any later frame, which is what makes prediction reproducible.
"""
from __future__ import annotations

import numpy as np
import pandas as pd

from .basis import (
    KnotGrid,
    SmoothTerm,
    absorb_constraint,
    month_dummies,
    pspline_term,
    random_effect_block,
    temporal_trend,
    tensor_spatial,
)
from .covspec import CovariateSpec, parse_spec, spec_for_stage
from .glm import BERNOULLI, ZTPOISSON, Design
from .panel import PanelError, transform_covariate

__all__ = [
    "STAGE_FAMILIES",
    "DEFAULT_PSPLINE_K",
    "DEFAULT_TREND_K",
    "DEFAULT_TENSOR_K",
    "StageRecipe",
    "cm_frame",
    "stage_rows",
    "stage_weights_level1",
    "level1_pgm_rows",
]

STAGE_FAMILIES = {1: BERNOULLI, 2: BERNOULLI, 3: ZTPOISSON}
DEFAULT_PSPLINE_K = 10
DEFAULT_TREND_K = 10
DEFAULT_TENSOR_K = 6
_MONTHS = ("Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")
_CALENDAR = {"month", "trend"}


def _stage1_columns(entries):
    cols = []
    for e in entries:
        if e.effect in ("dummy-set", "temporal-trend", "random-effect"):
            continue
        names = list(e.coords) if e.effect == "tensor-spatial" else [e.name]
        if e.other:
            names.append(e.other)
        cols.extend(n for n in names if n not in cols)
    return cols


def cm_frame(frame, entries):
    """Country-month rows for stage 1.

    Stage-1 covariates must be constant within a country-month; the target
    ``y_cm`` is the country total (NaN for future months) and ``n_cells`` the
    number of cell rows behind it.
    """
    cols = _stage1_columns(entries)
    missing = [c for c in cols if c not in frame]
    if missing:
        raise PanelError(f"stage-1 covariates {missing} are not in the panel")
    keys = ["country_id", "month"]
    g = frame.groupby(keys, sort=True)
    if cols:
        spread = g[cols].max() - g[cols].min()
        varying = [c for c in cols if (spread[c] > 0).any()]
        if varying:
            raise PanelError(
                f"stage-1 covariates {varying} vary within a country-month; "
                "stage 1 needs country-level values"
            )
    out = g[cols + ["source_month"]].first() if cols else g[["source_month"]].first()
    out["y_cm"] = g["sb_fatalities"].sum(min_count=1)
    unknown = frame["sb_fatalities"].isna().groupby([frame[k] for k in keys], sort=True).any()
    out.loc[unknown.to_numpy(), "y_cm"] = np.nan
    out["n_cells"] = g.size()
    return out.reset_index()


def stage_rows(frame, stage, entries=None):
    """Rows, response and weights a stage is fit on (observed targets only)."""
    frame = frame.loc[frame["sb_fatalities"].notna()]
    if stage == 1:
        cm = cm_frame(frame, entries or [])
        return cm, (cm["y_cm"].to_numpy() > 0).astype(float), np.ones(len(cm))
    if stage == 2:
        total = frame.groupby(["country_id", "month"])["sb_fatalities"].transform("sum")
        rows = frame.loc[total > 0].reset_index(drop=True)
        return rows, (rows["sb_fatalities"].to_numpy() > 0).astype(float), np.ones(len(rows))
    if stage == 3:
        rows = frame.loc[frame["sb_fatalities"] > 0].reset_index(drop=True)
        return rows, rows["sb_fatalities"].to_numpy(dtype=float), np.ones(len(rows))
    raise ValueError(f"unknown stage {stage}")


def stage_weights_level1(panel, entries):
    """Deduplicated country-month rows for stage 1, each with weight one."""
    cm, _, w = stage_rows(panel.frame, 1, entries)
    return cm, w


def level1_pgm_rows(panel, entries):
    """Cell-month rows carrying stage-1 covariates, weighted ``1 / n_j``.

    Algebraically equivalent to :func:`stage_weights_level1`; kept as the
    second route of that equivalence.
    """
    frame = panel.frame.loc[panel.frame["sb_fatalities"].notna()].reset_index(drop=True)
    cm_frame(frame, entries)  # constancy check
    g = frame.groupby(["country_id", "month"])["sb_fatalities"]
    total = g.transform("sum")
    n_j = g.transform("size")
    rows = frame.copy()
    rows["y_cm"] = total
    return rows, (total.to_numpy() > 0).astype(float), 1.0 / n_j.to_numpy(dtype=float)


class StageRecipe:
    """Column recipe of one stage: linear names, smooth terms and transforms."""

    def __init__(self, stage, entries, linear_names, terms, transforms):
        self.stage = stage
        self.entries = list(entries)
        self.linear_names = list(linear_names)
        self.terms = list(terms)
        self.transforms = dict(transforms)

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, stage, spec, fit_frame, domain_frame=None):
        entries = spec_for_stage(spec, stage)
        transforms = {}
        for e in entries:
            if e.effect in ("linear", "p-spline"):
                transforms.setdefault(e.name, e.transform)
        domain = fit_frame if domain_frame is None else pd.concat(
            [fit_frame, domain_frame], ignore_index=True, sort=False
        )

        linear_names = ["intercept"]
        terms = []
        for e in entries:
            if e.effect == "linear":
                linear_names.append(e.name)
            elif e.effect == "interaction":
                linear_names.append(e.key)
            elif e.effect == "dummy-set":
                linear_names.extend(f"{e.name}[{m}]" for m in _MONTHS)
            elif e.effect == "p-spline":
                x = _transformed(fit_frame, e.name, e.transform)
                xd = _transformed(domain, e.name, e.transform)
                term = pspline_term(
                    e.name, x, n_basis=e.k or DEFAULT_PSPLINE_K,
                    lower=float(np.min(xd)), upper=float(np.max(xd)),
                )
                terms.append(absorb_constraint(term))
            elif e.effect == "temporal-trend":
                # knots span the fitted months only; later months are clamped
                # to the last one in term_inputs (flat carry-forward)
                t = fit_frame["month"].to_numpy(dtype=float)
                term = temporal_trend(t, e.k or DEFAULT_TREND_K, name=e.name)
                terms.append(absorb_constraint(term))
            elif e.effect == "tensor-spatial":
                cx, cy = e.coords
                k = e.k or DEFAULT_TENSOR_K
                grids = []
                for c in (cx, cy):
                    v = domain[c].to_numpy(dtype=float)
                    if np.ptp(v) == 0:
                        raise ValueError(f"degenerate coordinates: {c!r} is constant")
                    grids.append(KnotGrid.equispaced(float(v.min()), float(v.max()), k))
                term = tensor_spatial(
                    fit_frame[cx].to_numpy(dtype=float), fit_frame[cy].to_numpy(dtype=float),
                    grids[0], grids[1], name=e.name,
                )
                terms.append(absorb_constraint(term))
            elif e.effect == "random-effect":
                ids = fit_frame[e.name].to_numpy()
                terms.append(random_effect_block(ids, np.unique(ids), name=e.name))
            else:
                raise ValueError(f"unsupported effect {e.effect!r}")
        stripped = [_strip(t) for t in terms]
        return cls(stage, entries, linear_names, stripped, transforms)

    # -- evaluation ----------------------------------------------------------

    def _entry(self, kind, key):
        for e in self.entries:
            if e.key == key and (kind is None or e.effect == kind):
                return e
        raise KeyError(key)

    def linear_block(self, frame):
        n = len(frame)
        cols = [np.ones(n)]
        for e in self.entries:
            if e.effect == "linear":
                cols.append(_transformed(frame, e.name, e.transform))
            elif e.effect == "interaction":
                a = _transformed(frame, e.name, self.transforms.get(e.name, "identity"))
                b = _transformed(frame, e.other, self.transforms.get(e.other, "identity"))
                cols.append(a * b)
            elif e.effect == "dummy-set":
                d = month_dummies(frame["month"].to_numpy())
                cols.extend(d.T)
        return np.column_stack(cols) if cols else np.zeros((n, 0))

    def term_inputs(self, term, frame):
        e = self._entry(None, term.name)
        if term.kind == "pspline":
            return (_transformed(frame, e.name, e.transform),)
        if term.kind == "temporal":
            lo, hi = term.grids[0].knots[0], term.grids[0].knots[-1]
            return (np.clip(frame["month"].to_numpy(dtype=float), lo, hi),)
        if term.kind == "tensor":
            return tuple(frame[c].to_numpy(dtype=float) for c in e.coords)
        if term.kind == "random-effect":
            return (frame[e.name].to_numpy(),)
        raise ValueError(term.kind)

    def design(self, frame):
        """Evaluate the stage design on ``frame`` (fit rows or new rows)."""
        linear = self.linear_block(frame)
        blocks = [(t.name, t.evaluate(*self.term_inputs(t, frame))) for t in self.terms]
        return Design(linear, list(self.linear_names), blocks, [t.penalty for t in self.terms])

    # -- serialisation -------------------------------------------------------

    def to_dict(self):
        terms = []
        for t in self.terms:
            terms.append({
                "name": t.name,
                "kind": t.kind,
                "grids": [{"knots": list(g.knots), "degree": g.degree, "order": g.order}
                          for g in t.grids],
                "levels": None if t.levels is None else [int(v) for v in t.levels],
                "null_basis": None if t.null_basis is None else t.null_basis.tolist(),
                "penalty": t.penalty.tolist(),
            })
        return {
            "stage": self.stage,
            "entries": [e.to_line() for e in self.entries],
            "linear_names": self.linear_names,
            "transforms": self.transforms,
            "terms": terms,
        }

    @classmethod
    def from_dict(cls, d):
        entries = parse_spec("\n".join(d["entries"]))
        terms = []
        for t in d["terms"]:
            grids = tuple(KnotGrid(tuple(g["knots"]), g["degree"], g["order"]) for g in t["grids"])
            nb = None if t["null_basis"] is None else np.asarray(t["null_basis"], dtype=float)
            pen = np.asarray(t["penalty"], dtype=float)
            k = pen.shape[0]
            terms.append(SmoothTerm(
                name=t["name"], kind=t["kind"], basis=np.zeros((0, k)), penalty=pen,
                constraint=None, grids=grids,
                levels=None if t["levels"] is None else np.asarray(t["levels"]),
                null_basis=nb,
            ))
        return cls(d["stage"], entries, d["linear_names"], terms, d["transforms"])


def _strip(term):
    term.basis = np.zeros((0, term.basis.shape[1]))
    return term


def _transformed(frame, name, transform):
    if name not in frame:
        raise PanelError(f"covariate column {name!r} is not in the panel")
    return np.asarray(transform_covariate(frame[name].to_numpy(dtype=float), transform, name))
