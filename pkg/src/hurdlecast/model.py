"""Three-stage hurdle model: fitting, stage predictions and model files.

Stage 1 is a Bernoulli-logit model of any state-based fatality in a
country-month, stage 2 a Bernoulli-logit model of a fatality in a cell given a
positive country-month, stage 3 a zero-truncated Poisson model of the count
in a positive cell.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .covspec import format_spec, parse_spec, spec_hash
from .design import STAGE_FAMILIES, StageRecipe, cm_frame, level1_pgm_rows, stage_rows
from .glm import (
    FitConfig,
    FittedStage,
    family_by_name,
    fit_stage,
    predict_eta,
    ztpoisson_logpdf,
    ztpoisson_mean,
)

__all__ = [
    "FORMAT_VERSION",
    "HurdleModel",
    "StageFit",
    "ModelFileError",
    "ModelVersionError",
    "StageDataError",
    "DegenerateFitError",
    "fit_hurdle",
    "fit_stage1_cell_weighted",
    "predict_stages",
    "joint_probability",
    "marginal_mean",
    "save_model",
    "load_model",
]

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
STAGE_NAMES = {1: "stage 1 (country-month incidence)",
               2: "stage 2 (cell incidence in positive country-months)",
               3: "stage 3 (positive cell counts)"}


class ModelFileError(ValueError):
    pass


class ModelVersionError(ModelFileError):
    pass


class StageDataError(ValueError):
    """A stage has no rows to be fit on."""


class DegenerateFitError(StageDataError):
    """A fitted stage gives non-finite predictions (too few rows for its columns)."""


@dataclass
class StageFit:
    recipe: StageRecipe
    fit: FittedStage

    def eta(self, frame):
        return predict_eta(self.fit, self.recipe.design(frame))


@dataclass
class HurdleModel:
    """Fitted stages plus the lag and covariate spec they were built with."""

    stages: dict
    lag: int
    spec: list
    meta: dict = field(default_factory=dict)

    @property
    def spec_hash(self):
        return spec_hash(self.spec)


def joint_probability(pi1, pi2, lam, y, y_tilde):
    """Joint probability of a cell count ``y`` and country incidence ``y_tilde``.

    ``1 - pi1`` for (0, 0), ``pi1 (1 - pi2)`` for (0, 1), ``pi1 pi2 f(y)`` for
    ``y >= 1`` with ``y_tilde = 1`` (``f`` the zero-truncated Poisson pmf) and
    zero for a positive count in a zero country-month. Broadcasts.
    """
    pi1, pi2, lam, y, y_tilde = np.broadcast_arrays(
        np.asarray(pi1, float), np.asarray(pi2, float), np.asarray(lam, float),
        np.asarray(y), np.asarray(y_tilde),
    )
    out = np.zeros(pi1.shape)
    zero = y == 0
    on = y_tilde == 1
    out[zero & ~on] = 1.0 - pi1[zero & ~on]
    m = zero & on
    out[m] = pi1[m] * (1.0 - pi2[m])
    m = (y >= 1) & on
    if np.any(m):
        out[m] = pi1[m] * pi2[m] * np.exp(ztpoisson_logpdf(y[m], lam[m]))
    return out if out.ndim else float(out)


def marginal_mean(pi1, pi2, lam):
    """Unconditional expected cell count ``pi1 pi2 lam / (1 - exp(-lam))``."""
    return np.asarray(pi1) * np.asarray(pi2) * ztpoisson_mean(lam)


def _check_lagged(panel, lag):
    if panel.lag is None:
        raise ValueError("the training panel must be lagged (see lag_covariates)")
    if lag is not None and panel.lag != lag:
        raise ValueError(f"panel is lagged by {panel.lag}, model lag is {lag}")


def fit_hurdle(train_panel, spec, lag=None, domain=None, config=None):
    """Fit the three stages on a lagged training panel.

    Parameters
    ----------
    train_panel : Panel
        Output of ``lag_covariates``; rows with unknown targets are ignored.
    spec : list of CovariateSpec
    lag : int, optional
        Expected lag; checked against the panel.
    domain : Panel, optional
        Extra lagged rows (e.g. the forecast rows) whose covariate ranges the
        smooth bases must cover.
    config : FitConfig, optional
    """
    _check_lagged(train_panel, lag)
    config = config or FitConfig()
    frame = train_panel.frame
    dom = domain.frame if domain is not None else None
    stages = {}
    for k in (1, 2, 3):
        entries = [e for e in spec if k in e.stages]
        rows, y, w = stage_rows(frame, k, entries)
        if len(rows) == 0:
            raise StageDataError(f"{STAGE_NAMES[k]} has no training rows")
        if k == 1:
            dom_k = cm_frame(dom, entries) if dom is not None else None
        else:
            dom_k = dom
        recipe = StageRecipe.build(k, spec, rows, dom_k)
        fit = fit_stage(recipe.design(rows), y, w, STAGE_FAMILIES[k], config)
        logger.info("fitted %s: %d rows, %d iterations", STAGE_NAMES[k], len(rows),
                    fit.report["iterations"])
        stages[k] = StageFit(recipe, fit)
    months = frame.loc[frame["sb_fatalities"].notna(), "month"]
    meta = {
        "train_months": [int(months.min()), int(months.max())],
        "max_source_month": int(frame["source_month"].max()),
        "n_rows": int(len(frame)),
    }
    return HurdleModel(stages, train_panel.lag, list(spec), meta)


def fit_stage1_cell_weighted(train_panel, spec, recipe, config=None):
    """Fit stage 1 on cell-month rows with weights ``1 / n_j``.

    Uses the column recipe of the country-month fit, so the result should
    match ``model.stages[1].fit`` up to rounding.
    """
    _check_lagged(train_panel, None)
    entries = [e for e in spec if 1 in e.stages]
    rows, y, w = level1_pgm_rows(train_panel, entries)
    return fit_stage(recipe.design(rows), y, w, STAGE_FAMILIES[1], config or FitConfig())


def predict_stages(model, panel):
    """Per cell-month ``pi1``, ``pi2`` and ``lambda3`` for a lagged panel.

    ``pi1`` is computed per country-month and broadcast to its cells.
    """
    _check_lagged(panel, model.lag)
    frame = panel.frame
    entries1 = [e for e in model.spec if 1 in e.stages]
    cm = cm_frame(frame, entries1)
    cm["pi1"] = _expit(model.stages[1].eta(cm))
    out = frame[["cell_id", "country_id", "month", "source_month"]].copy()
    out = out.merge(cm[["country_id", "month", "pi1"]], on=["country_id", "month"], how="left")
    out["pi2"] = _expit(model.stages[2].eta(frame))
    with np.errstate(over="ignore"):
        out["lambda3"] = np.exp(model.stages[3].eta(frame))
    if not np.all(np.isfinite(out["lambda3"])):
        fit3 = model.stages[3].fit
        raise DegenerateFitError(
            f"stage 3 intensity overflows on {int((~np.isfinite(out['lambda3'])).sum())} rows; "
            f"{fit3.report.get('n_rows', '?')} positive cells are too few for "
            f"{fit3.coefficients.size} columns"
        )
    return out


def _expit(eta):
    return expit(np.asarray(eta, dtype=float))


# ---------------------------------------------------------------------------
# model files


def _stage_to_dict(sf):
    f = sf.fit
    return {
        "recipe": sf.recipe.to_dict(),
        "family": f.family.name,
        "coefficients": f.coefficients.tolist(),
        "std_errors": None if f.std_errors is None else f.std_errors.tolist(),
        "smoothing_params": f.smoothing_params,
        "layout": {k: [v.start, v.stop] for k, v in f.layout.items()},
        "linear_names": f.linear_names,
        "aliased": f.aliased,
        "report": {k: v for k, v in f.report.items() if k != "trace"},
    }


def _stage_from_dict(d):
    fit = FittedStage(
        family=family_by_name(d["family"]),
        coefficients=np.asarray(d["coefficients"], dtype=float),
        smoothing_params=dict(d["smoothing_params"]),
        layout={k: slice(a, b) for k, (a, b) in d["layout"].items()},
        linear_names=list(d["linear_names"]),
        std_errors=None if d["std_errors"] is None else np.asarray(d["std_errors"], dtype=float),
        aliased=list(d["aliased"]),
        report=dict(d["report"]),
    )
    return StageFit(StageRecipe.from_dict(d["recipe"]), fit)


def _checksum(payload):
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_model(model, path):
    """Write ``model`` as versioned, checksummed JSON."""
    payload = {
        "lag": model.lag,
        "spec": format_spec(model.spec),
        "spec_hash": model.spec_hash,
        "meta": model.meta,
        "stages": {str(k): _stage_to_dict(v) for k, v in model.stages.items()},
    }
    doc = {
        "format": "hurdlecast-model",
        "format_version": FORMAT_VERSION,
        "checksum": _checksum(payload),
        "payload": payload,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def load_model(path):
    """Read a model file written by :func:`save_model`."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFileError(f"{path}: not a readable model file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != "hurdlecast-model":
        raise ModelFileError(f"{path}: not a hurdlecast model file")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelVersionError(
            f"{path}: model format version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    payload = doc.get("payload")
    if payload is None or doc.get("checksum") != _checksum(payload):
        raise ModelFileError(f"{path}: checksum mismatch; the model file is corrupted")
    try:
        stages = {int(k): _stage_from_dict(v) for k, v in payload["stages"].items()}
        spec = parse_spec(payload["spec"])
        return HurdleModel(stages, int(payload["lag"]), spec, dict(payload["meta"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"{path}: malformed model payload ({exc})") from exc

