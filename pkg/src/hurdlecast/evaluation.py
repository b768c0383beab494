"""Expanding-window evaluation, true forecasts, and the MSE/TADDA scores.

For an evaluation month ``t`` and step ``s`` the forecast origin is
``t - s``: data after ``t`` is dropped, covariates are lagged by ``s``, the
model is pre-fit on targets up to ``t - s - 1``, thresholds are calibrated
on month ``t - s``, the model is refit on targets up to ``t - s`` and month
``t`` is predicted. Predictions and deltas are stored on the log(1 + y)
scale.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .calibration import DEConfig, Hurdles, apply_thresholds, calibrate
from .model import StageDataError, fit_hurdle, predict_stages
from .panel import PanelError, lag_covariates, split_periodisation

__all__ = [
    "TaddaConfig",
    "LeakageError",
    "PairRecord",
    "EvaluationRun",
    "FORECAST_STEPS",
    "PREDICTION_COLUMNS",
    "delta_transform",
    "mse_score",
    "tadda_score",
    "assert_no_leakage",
    "score_predictions",
    "forecast_pair",
    "run_evaluation",
    "run_forecast",
]

logger = logging.getLogger(__name__)

FORECAST_STEPS = tuple(range(2, 8))
PREDICTION_COLUMNS = [
    "month", "s", "cell_id", "country_id", "pi1", "pi2", "lambda3",
    "yhat", "y", "y_origin", "delta_hat", "delta_true",
]


@dataclass(frozen=True)
class TaddaConfig:
    epsilon: float = 0.048

    def __post_init__(self):
        if not (np.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError("epsilon must be a non-negative number")


class LeakageError(AssertionError):
    """A fit or prediction consumed data from after the forecast origin."""


# ---------------------------------------------------------------------------
# metrics


def delta_transform(y_t, y_tminus_s):
    """``log(1 + y_t) - log(1 + y_{t-s})`` elementwise."""
    a = np.asarray(y_t, dtype=float)
    b = np.asarray(y_tminus_s, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("fatality counts must be non-negative")
    return np.log1p(a) - np.log1p(b)


def _per_month(pred_by_t, true_by_t):
    if len(pred_by_t) != len(true_by_t):
        raise ValueError("predictions and truths cover different numbers of months")
    if len(pred_by_t) == 0:
        raise ValueError("no months to score")
    pairs = []
    for p, y in zip(pred_by_t, true_by_t):
        p = np.asarray(p, dtype=float)
        y = np.asarray(y, dtype=float)
        if p.shape != y.shape:
            raise ValueError("prediction and truth of a month are not aligned")
        if p.size == 0:
            raise ValueError("a month has no observations")
        pairs.append((p, y))
    return pairs


def mse_score(yhat_by_t, y_by_t):
    """Mean over months of the within-month mean squared error."""
    return float(np.mean([np.mean((p - y) ** 2) for p, y in _per_month(yhat_by_t, y_by_t)]))


def tadda_score(dhat_by_t, d_by_t, cfg=None):
    """TADDA: absolute delta error plus a sign-mismatch penalty.

    Per observation ``|d - dhat| + |dhat| * [sign(dhat) != sign(d)] *
    [|dhat - d| > epsilon]``, averaged within each month and then across
    months. ``sign(0) = 0``, so zero agrees only with zero.
    """
    cfg = cfg or TaddaConfig()
    per = []
    for p, y in _per_month(dhat_by_t, d_by_t):
        gap = np.abs(y - p)
        penalty = np.abs(p) * (np.sign(p) != np.sign(y)) * (gap > cfg.epsilon)
        per.append(np.mean(gap + penalty))
    return float(np.mean(per))


def score_predictions(predictions, cfg=None, baseline=False):
    """MSE and TADDA per step from a stacked prediction table.

    ``predictions`` needs ``month``, ``s``, ``yhat``, ``y`` and ``y_origin``.
    With ``baseline`` the forecasts are replaced by zeros.
    """
    rows = []
    for s, df in predictions.groupby("s", sort=True):
        months = sorted(df["month"].unique())
        yh, yt, dh, dt = [], [], [], []
        for t in months:
            d = df.loc[df["month"] == t]
            yhat = np.zeros(len(d)) if baseline else d["yhat"].to_numpy(dtype=float)
            y = d["y"].to_numpy(dtype=float)
            y0 = d["y_origin"].to_numpy(dtype=float)
            yh.append(np.log1p(yhat))
            yt.append(np.log1p(y))
            dh.append(delta_transform(yhat, y0))
            dt.append(delta_transform(y, y0))
        rows.append({
            "s": int(s),
            "mse": mse_score(yh, yt),
            "tadda": tadda_score(dh, dt, cfg),
            "n_months": len(months),
        })
    return pd.DataFrame(rows, columns=["s", "mse", "tadda", "n_months"])


# ---------------------------------------------------------------------------
# one (t, s) pair


def assert_no_leakage(frame, origin, what, targets=True):
    """Raise :class:`LeakageError` if ``frame`` uses data after ``origin``.

    Every row's covariates must come from ``source_month <= origin``; when
    ``targets`` is set the rows are fit on, so their target month must not
    exceed ``origin`` either.
    """
    if len(frame) == 0:
        return
    src = int(frame["source_month"].max())
    if src > origin:
        raise LeakageError(f"{what}: covariates from month {src} after origin {origin}")
    if targets:
        observed = frame.loc[frame["sb_fatalities"].notna(), "month"]
        if len(observed) and int(observed.max()) > origin:
            raise LeakageError(
                f"{what}: targets from month {int(observed.max())} after origin {origin}"
            )


@dataclass
class PairRecord:
    t: int
    s: int
    status: str
    reason: str = ""
    hurdles: Hurdles | None = None
    calibration_loss: float | None = None
    predictions: pd.DataFrame | None = None
    seconds: float = 0.0


def _pair_seed(seed, t, s):
    return np.random.SeedSequence([int(seed), int(t), int(s)])


def _origin_counts(frame):
    return frame["sb_count"].to_numpy(dtype=float)


def forecast_pair(lagged, t, s, spec, de_config=None, seed=0, fit_config=None, epoch=None):
    """Algorithm steps 2-5 for one evaluation month and step on a lagged panel."""
    start = time.perf_counter()
    origin = t - s
    split = split_periodisation(lagged, t, s, epoch)
    epoch = split.periods.pre_train[0]
    domain = lagged.select_months(epoch, t)
    assert_no_leakage(domain.frame, origin, f"domain rows (t={t}, s={s})", targets=False)
    assert_no_leakage(split.pre_train.frame, origin - 1, f"pre-training rows (t={t}, s={s})")
    assert_no_leakage(split.train.frame, origin, f"training rows (t={t}, s={s})")
    assert_no_leakage(split.test.frame, origin, f"test rows (t={t}, s={s})", targets=False)
    if len(split.calibration) == 0 or len(split.test) == 0:
        raise PanelError(f"no rows for calibration month {origin} or test month {t}")

    pre = fit_hurdle(split.pre_train, spec, s, domain=domain, config=fit_config)
    calib = predict_stages(pre, split.calibration)
    y_cal = split.calibration.frame["sb_fatalities"].to_numpy(dtype=float)
    result = calibrate(calib["pi1"].to_numpy(), calib["pi2"].to_numpy(),
                       calib["lambda3"].to_numpy(), y_cal, de_config, _pair_seed(seed, t, s))

    model = fit_hurdle(split.train, spec, s, domain=domain, config=fit_config)
    if model.meta["train_months"][1] > origin or model.meta["max_source_month"] > origin:
        raise LeakageError(f"model for t={t}, s={s} was fit beyond origin {origin}")
    test = split.test.frame
    pred = predict_stages(model, split.test)
    yhat = apply_thresholds(pred["pi1"].to_numpy(), pred["pi2"].to_numpy(),
                            pred["lambda3"].to_numpy(), result.hurdles)
    y = test["sb_fatalities"].to_numpy(dtype=float)
    y0 = _origin_counts(test)
    out = pd.DataFrame({
        "month": test["month"].to_numpy(dtype=np.int64),
        "s": np.full(len(test), s, dtype=np.int64),
        "cell_id": test["cell_id"].to_numpy(dtype=np.int64),
        "country_id": test["country_id"].to_numpy(dtype=np.int64),
        "pi1": pred["pi1"].to_numpy(),
        "pi2": pred["pi2"].to_numpy(),
        "lambda3": pred["lambda3"].to_numpy(),
        "yhat": yhat,
        "y": y,
        "y_origin": y0,
    })
    out["delta_hat"] = delta_transform(yhat, y0)
    out["delta_true"] = delta_transform(y, y0) if np.all(np.isfinite(y)) else np.nan
    return PairRecord(t, s, "ok", hurdles=result.hurdles, calibration_loss=result.loss,
                      predictions=out, seconds=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# full runs


@dataclass
class EvaluationRun:
    months: list
    steps: list
    records: list = field(default_factory=list)
    epsilon: float = 0.048

    def record(self, t, s):
        for r in self.records:
            if r.t == t and r.s == s:
                return r
        raise KeyError((t, s))

    @property
    def completed(self):
        return [r for r in self.records if r.status == "ok"]

    @property
    def skipped(self):
        return [r for r in self.records if r.status != "ok"]

    def predictions(self):
        frames = [r.predictions for r in self.completed]
        if not frames:
            return pd.DataFrame(columns=PREDICTION_COLUMNS)
        return pd.concat(frames, ignore_index=True)[PREDICTION_COLUMNS]

    def scores(self):
        return score_predictions(self.predictions(), TaddaConfig(self.epsilon))

    def baseline_scores(self):
        return score_predictions(self.predictions(), TaddaConfig(self.epsilon), baseline=True)

    def thresholds(self):
        rows = [{"month": r.t, "s": r.s, "status": r.status,
                 "tau1": r.hurdles.tau1 if r.hurdles else np.nan,
                 "tau2": r.hurdles.tau2 if r.hurdles else np.nan,
                 "calibration_loss": r.calibration_loss if r.calibration_loss is not None else np.nan,
                 "reason": r.reason}
                for r in self.records]
        return pd.DataFrame(rows)


def _run_pair(args):
    panel, t, s, spec, de_config, seed, fit_config, epoch = args
    truncated = panel.select_months(None, t)
    try:
        lagged = lag_covariates(truncated, s, spec)
        return forecast_pair(lagged, t, s, spec, de_config, seed, fit_config, epoch)
    except (PanelError, StageDataError) as exc:
        logger.warning("skipping t=%d s=%d: %s", t, s, exc)
        return PairRecord(t, s, "skipped", reason=str(exc))


def run_evaluation(panel, spec, months, steps=FORECAST_STEPS, de_config=None, seed=0,
                   fit_config=None, epoch=None, epsilon=0.048, parallel=1):
    """Expanding-window backtest over ``months`` x ``steps``.

    Pairs without enough history are recorded as skipped and excluded from
    the scores. Results do not depend on ``parallel``.
    """
    if panel.lag is not None:
        raise ValueError("run_evaluation expects the unlagged panel")
    months = [int(t) for t in months]
    steps = [int(s) for s in steps]
    if not months or not steps:
        raise ValueError("need at least one evaluation month and one step")
    bad = [s for s in steps if s not in FORECAST_STEPS]
    if bad:
        raise ValueError(f"unsupported steps {bad}; forecasts cover s = 2..7")
    hi = panel.months[1]
    if hi is None or max(months) > hi:
        raise PanelError(f"panel ends at month {hi}, before evaluation month {max(months)}")
    de_config = de_config or DEConfig()
    jobs = [(panel, t, s, spec, de_config, seed, fit_config, epoch) for t in months for s in steps]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            records = list(pool.map(_run_pair, jobs))
    else:
        records = [_run_pair(j) for j in jobs]
    for r in records:
        logger.info("t=%d s=%d %s %.1fs", r.t, r.s, r.status, r.seconds)
    return EvaluationRun(months, steps, records, epsilon)


def run_forecast(panel, spec, steps=FORECAST_STEPS, de_config=None, seed=0, fit_config=None):
    """True forecasts from the last observed month ``T0`` to ``T0 + s``.

    Thresholds are calibrated on ``T0`` with a model pre-fit on targets up to
    ``T0 - 1``; the final model uses every target up to ``T0``.
    """
    steps = [int(s) for s in steps]
    bad = [s for s in steps if s not in FORECAST_STEPS]
    if bad:
        raise ValueError(f"unsupported steps {bad}; forecasts cover s = 2..7")
    if panel.lag is not None:
        raise ValueError("run_forecast expects the unlagged panel")
    t0 = panel.months[1]
    frames = []
    records = []
    for s in steps:
        lagged = lag_covariates(panel, s, spec, horizon=True)
        epoch = lagged.months[0]
        if epoch is None or t0 - 1 < epoch:
            raise PanelError(f"not enough history for s={s}")
        target = t0 + s
        domain = lagged.select_months(epoch, target)
        assert_no_leakage(domain.frame, t0, f"forecast rows (s={s})", targets=False)
        pre_train = lagged.select_months(epoch, t0 - 1)
        calib_panel = lagged.select_months(t0, t0)
        pre = fit_hurdle(pre_train, spec, s, domain=domain, config=fit_config)
        calib = predict_stages(pre, calib_panel)
        result = calibrate(calib["pi1"].to_numpy(), calib["pi2"].to_numpy(), calib["lambda3"].to_numpy(),
                           calib_panel.frame["sb_fatalities"].to_numpy(dtype=float),
                           de_config, _pair_seed(seed, target, s))
        model = fit_hurdle(lagged.select_months(epoch, t0), spec, s, domain=domain, config=fit_config)
        future = lagged.select_months(target, target)
        pred = predict_stages(model, future)
        yhat = apply_thresholds(pred["pi1"].to_numpy(), pred["pi2"].to_numpy(),
                                pred["lambda3"].to_numpy(), result.hurdles)
        y0 = _origin_counts(future.frame)
        frames.append(pd.DataFrame({
            "month": future.frame["month"].to_numpy(dtype=np.int64),
            "s": np.full(len(future), s, dtype=np.int64),
            "cell_id": future.frame["cell_id"].to_numpy(dtype=np.int64),
            "country_id": future.frame["country_id"].to_numpy(dtype=np.int64),
            "pi1": pred["pi1"].to_numpy(),
            "pi2": pred["pi2"].to_numpy(),
            "lambda3": pred["lambda3"].to_numpy(),
            "yhat": yhat,
            "y_origin": y0,
            "delta_hat": delta_transform(yhat, y0),
        }))
        records.append({"s": s, "month": target, "tau1": result.hurdles.tau1,
                        "tau2": result.hurdles.tau2, "calibration_loss": result.loss})
    return pd.concat(frames, ignore_index=True), pd.DataFrame(records)
