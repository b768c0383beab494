"""Command-line front end.

Commands mirror the forecasting pipeline: ``simulate`` writes a synthetic
panel, ``fit`` / ``calibrate`` / ``forecast`` run the pre-fit, threshold
calibration, refit and prediction steps as separate artifacts, ``evaluate``
runs the expanding-window backtest and ``report`` prints a scores table.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import __version__
from .calibration import DEConfig, Hurdles, apply_thresholds, calibrate
from .covspec import SpecError, default_spec, format_spec, load_spec, spec_hash
from .evaluation import (
    FORECAST_STEPS,
    LeakageError,
    TaddaConfig,
    assert_no_leakage,
    delta_transform,
    run_evaluation,
    run_forecast,
)
from .glm import ConvergenceError
from .model import (
    ModelFileError,
    StageDataError,
    fit_hurdle,
    load_model,
    predict_stages,
    save_model,
)
from .panel import PanelError, impute_missing, lag_covariates, load_panel, write_panel
from .simulate import SimulationConfig, simulate_panel

OUT_ENV = "HURDLECAST_OUT"
DEFAULT_OUT = "hurdlecast-out"
HURDLES_FORMAT = "hurdlecast-hurdles"

# failures that become exit code 1 with a one-line message
RUNTIME_ERRORS = (PanelError, SpecError, ModelFileError, StageDataError, ConvergenceError,
                  LeakageError, ValueError, OSError)

logger = logging.getLogger("hurdlecast")


# ---------------------------------------------------------------------------
# helpers


def _file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(out):
    path = Path(out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _read_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise click.ClickException(f"{what} {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise click.ClickException(f"{what} {path} is not valid JSON ({exc})") from None


def _write_csv(frame, path):
    frame.to_csv(path, index=False, lineterminator="\n", na_rep="NA")


def _int_list(text, what):
    """Parse ``"2-7"``, ``"2,4,6"`` or a mix of both into sorted unique ints."""
    out = set()
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part[1:]:
                i = part.index("-", 1)
                lo, hi = int(part[:i]), int(part[i + 1:])
                if hi < lo:
                    raise ValueError
                out.update(range(lo, hi + 1))
            else:
                out.add(int(part))
    except ValueError:
        raise click.BadParameter(f"cannot parse {what} {text!r}; use e.g. 2-7 or 2,3,5") from None
    if not out:
        raise click.BadParameter(f"{what} is empty")
    return sorted(out)


def _load_spec(path):
    return load_spec(path) if path else default_spec()


def _load_input(path, spec):
    panel = load_panel(path, spec)
    if panel.needs_imputation:
        logger.info("imputing missing covariates")
        panel = impute_missing(panel)
    return panel


def _de_config(pop, gens):
    return DEConfig(population=pop, generations=gens)


def _run(fn):
    """Map expected failures to exit code 1 with a readable message."""
    try:
        return fn()
    except click.ClickException:
        raise
    except RUNTIME_ERRORS as exc:
        raise click.ClickException(str(exc)) from exc


def _check_model_input(model, input_hash, spec, path):
    if model.meta.get("input_sha256") not in (None, input_hash):
        raise click.ClickException(
            f"model {path} was fit on a different input file; refit it on this panel"
        )
    if spec is not None and spec_hash(spec) != model.spec_hash:
        raise click.ClickException(
            f"model {path} was fit with a different covariate spec "
            f"(model {model.spec_hash[:12]}, given {spec_hash(spec)[:12]}); refit it"
        )


def _format_scores(scores, baseline=None, epsilon=0.048):
    lines = [f"MSE on the log(1 + y) scale; TADDA with epsilon = {epsilon:g}",
             f"{'s':>3} {'MSE':>10} {'TADDA':>10}" + (f" {'zero MSE':>10} {'zero TADDA':>10}"
                                                      if baseline is not None else "")]
    base = baseline.set_index("s") if baseline is not None else None
    for row in scores.itertuples(index=False):
        line = f"{int(row.s):>3} {row.mse:>10.4f} {row.tadda:>10.4f}"
        if base is not None:
            b = base.loc[int(row.s)]
            line += f" {b['mse']:>10.4f} {b['tadda']:>10.4f}"
        lines.append(line)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands


@click.group()
@click.version_option(__version__, prog_name="hurdlecast")
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
def main(verbose):
    """Three-stage hurdle regression for sparse conflict-fatality forecasts."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--countries", type=click.IntRange(1), default=5, show_default=True)
@click.option("--cells", type=click.IntRange(1), default=20, show_default=True,
              help="Cells per country.")
@click.option("--months", type=click.IntRange(3), default=60, show_default=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help=f"Output directory (default ${OUT_ENV} or ./{DEFAULT_OUT}).")
def simulate(countries, cells, months, seed, out):
    """Write a synthetic panel CSV and its true-parameter manifest."""
    def go():
        cfg = SimulationConfig(n_countries=countries, cells_per_country=cells,
                               n_months=months, seed=seed)
        result = simulate_panel(cfg)
        d = _out_dir(out)
        write_panel(result.panel, d / "panel.csv")
        _write_json(d / "simulation.json", result.manifest())
        click.echo(f"wrote {len(result.panel)} rows to {d / 'panel.csv'}")
    _run(go)


@main.command()
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Covariate spec file (default: the bundled spec).")
@click.option("--lag", type=click.IntRange(1), required=True, help="Forecast step s.")
@click.option("--end-month", type=int, default=None,
              help="Last target month used for fitting (default: last month of the input).")
@click.option("--out", type=click.Path(file_okay=False), default=None)
def fit(input_path, spec_path, lag, end_month, out):
    """Fit the three stages with covariates lagged by LAG months."""
    def go():
        spec = _load_spec(spec_path)
        panel = _load_input(input_path, spec)
        last = panel.months[1]
        end = last if end_month is None else end_month
        if end > last:
            raise click.ClickException(f"--end-month {end} is after the last month {last}")
        lagged = lag_covariates(panel.select_months(None, end), lag, spec, horizon=True)
        train = lagged.select_months(None, end)
        assert_no_leakage(lagged.frame, end, "fit rows", targets=False)
        model = fit_hurdle(train, spec, lag, domain=lagged, config=None)
        model.meta.update({"input_sha256": _file_hash(input_path), "end_month": int(end)})
        d = _out_dir(out)
        path = d / f"model_s{lag}_m{end}.json"
        save_model(model, path)
        click.echo(f"wrote {path}")
    _run(go)


@main.command(name="calibrate")
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True,
              help="Model from `fit`, fit on targets before the calibration month.")
@click.option("--seed", type=int, required=True)
@click.option("--de-pop", type=click.IntRange(4), default=40, show_default=True)
@click.option("--de-gens", type=click.IntRange(1), default=200, show_default=True)
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def calibrate_cmd(input_path, model_path, seed, de_pop, de_gens, spec_path, out):
    """Calibrate the hurdles on the month after the model's last training month."""
    def go():
        if not Path(model_path).exists():
            raise click.ClickException(
                f"model {model_path} not found; run `hurdlecast fit` before `calibrate`"
            )
        model = load_model(model_path)
        spec = _load_spec(spec_path) if spec_path else None
        _check_model_input(model, _file_hash(input_path), spec, model_path)
        panel = _load_input(input_path, model.spec)
        month = int(model.meta["end_month"]) + 1
        if month > panel.months[1]:
            raise click.ClickException(f"calibration month {month} is not observed in the input")
        lagged = lag_covariates(panel.select_months(None, month), model.lag, model.spec)
        calib = lagged.select_months(month, month)
        pred = predict_stages(model, calib)
        y = calib.frame["sb_fatalities"].to_numpy(dtype=float)
        result = calibrate(pred["pi1"].to_numpy(), pred["pi2"].to_numpy(),
                           pred["lambda3"].to_numpy(), y, _de_config(de_pop, de_gens),
                           np.random.SeedSequence([seed, month, model.lag]))
        doc = {
            "format": HURDLES_FORMAT,
            "tau1": result.hurdles.tau1,
            "tau2": result.hurdles.tau2,
            "loss": result.loss,
            "calibration_month": month,
            "lag": model.lag,
            "seed": seed,
            "de": {"population": de_pop, "generations": de_gens,
                   "generations_run": result.generations},
            "spec_sha256": model.spec_hash,
            "input_sha256": model.meta.get("input_sha256"),
            "model_sha256": _file_hash(model_path),
        }
        d = _out_dir(out)
        path = d / f"hurdles_s{model.lag}_m{month}.json"
        _write_json(path, doc)
        click.echo(f"tau1={result.hurdles.tau1:.6f} tau2={result.hurdles.tau2:.6f} "
                   f"loss={result.loss:.6g}; wrote {path}")
    _run(go)


def _forecast_from_artifacts(input_path, model_path, hurdles_path, spec_path, d):
    if not Path(model_path).exists():
        raise click.ClickException(f"model {model_path} not found; run `hurdlecast fit` first")
    if hurdles_path is None or not Path(hurdles_path).exists():
        raise click.ClickException("forecasting from a model needs --hurdles from `hurdlecast calibrate`")
    model = load_model(model_path)
    spec = _load_spec(spec_path) if spec_path else None
    input_hash = _file_hash(input_path)
    _check_model_input(model, input_hash, spec, model_path)
    h = _read_json(hurdles_path, "hurdles file")
    if h.get("format") != HURDLES_FORMAT:
        raise click.ClickException(f"{hurdles_path} is not a hurdles file")
    if h["spec_sha256"] != model.spec_hash or h["lag"] != model.lag:
        raise click.ClickException(
            f"hurdles {hurdles_path} were calibrated for a different spec or lag than {model_path}"
        )
    if h.get("input_sha256") not in (None, input_hash):
        raise click.ClickException(f"hurdles {hurdles_path} were calibrated on a different input")
    end = int(model.meta["end_month"])
    if h["calibration_month"] != end:
        raise click.ClickException(
            f"hurdles were calibrated on month {h['calibration_month']}, "
            f"but the model's last training month is {end}"
        )
    panel = _load_input(input_path, model.spec)
    target = end + model.lag
    lagged = lag_covariates(panel.select_months(None, end), model.lag, model.spec, horizon=True)
    rows = lagged.select_months(target, target)
    assert_no_leakage(rows.frame, end, f"forecast rows for month {target}", targets=False)
    pred = predict_stages(model, rows)
    yhat = apply_thresholds(pred["pi1"].to_numpy(), pred["pi2"].to_numpy(),
                            pred["lambda3"].to_numpy(), Hurdles(h["tau1"], h["tau2"]))
    y0 = rows.frame["sb_count"].to_numpy(dtype=float)
    table = pd.DataFrame({
        "month": rows.frame["month"].to_numpy(dtype=np.int64),
        "s": model.lag,
        "cell_id": rows.frame["cell_id"].to_numpy(dtype=np.int64),
        "country_id": rows.frame["country_id"].to_numpy(dtype=np.int64),
        "pi1": pred["pi1"].to_numpy(),
        "pi2": pred["pi2"].to_numpy(),
        "lambda3": pred["lambda3"].to_numpy(),
        "yhat": yhat,
        "y_origin": y0,
        "delta_hat": delta_transform(yhat, y0),
    })
    path = d / f"forecast_s{model.lag}_m{target}.csv"
    _write_csv(table, path)
    return path


@main.command()
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--seed", type=int, default=None, help="Required unless --model is given.")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--steps", default="2-7", show_default=True, help="Forecast steps, within 2-7.")
@click.option("--model", "model_path", type=click.Path(dir_okay=False), default=None,
              help="Predict from a fitted model and --hurdles instead of refitting.")
@click.option("--hurdles", "hurdles_path", type=click.Path(dir_okay=False), default=None)
@click.option("--de-pop", type=click.IntRange(4), default=40, show_default=True)
@click.option("--de-gens", type=click.IntRange(1), default=200, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def forecast(input_path, seed, spec_path, steps, model_path, hurdles_path, de_pop, de_gens, out):
    """True forecasts for months after the last observed one."""
    d = None

    def go():
        nonlocal d
        d = _out_dir(out)
        if model_path is not None:
            path = _forecast_from_artifacts(input_path, model_path, hurdles_path, spec_path, d)
            click.echo(f"wrote {path}")
            return
        if seed is None:
            raise click.UsageError("--seed is required when the model is fit here")
        step_list = _int_list(steps, "steps")
        bad = [s for s in step_list if s not in FORECAST_STEPS]
        if bad:
            raise click.UsageError(f"unsupported steps {bad}; forecasts cover s = 2..7")
        spec = _load_spec(spec_path)
        panel = _load_input(input_path, spec)
        start = time.perf_counter()
        table, thresholds = run_forecast(panel, spec, step_list, _de_config(de_pop, de_gens), seed)
        _write_csv(table, d / "forecast.csv")
        _write_csv(thresholds, d / "forecast_thresholds.csv")
        _write_json(d / "forecast_manifest.json", {
            "command": "forecast", "version": __version__, "seed": seed, "steps": step_list,
            "last_observed_month": panel.months[1], "spec_sha256": spec_hash(spec),
            "input_sha256": _file_hash(input_path),
            "de": {"population": de_pop, "generations": de_gens},
            "seconds": round(time.perf_counter() - start, 3),
        })
        click.echo(f"wrote {d / 'forecast.csv'} ({len(table)} rows)")
    _run(go)


@main.command()
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--seed", type=int, required=True)
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--steps", default="2-7", show_default=True)
@click.option("--eval-months", default=None,
              help="Evaluation months, e.g. 54-59 (default: the last 6 months).")
@click.option("--de-pop", type=click.IntRange(4), default=40, show_default=True)
@click.option("--de-gens", type=click.IntRange(1), default=200, show_default=True)
@click.option("--epsilon", type=click.FloatRange(0), default=0.048, show_default=True,
              help="TADDA tolerance.")
@click.option("--parallel", type=click.IntRange(1), default=1, show_default=True,
              help="Worker processes for (t, s) pairs; results do not depend on it.")
@click.option("--report", "show_report", is_flag=True, help="Print the scores table.")
@click.option("--out", type=click.Path(file_okay=False), default=None)
def evaluate(input_path, seed, spec_path, steps, eval_months, de_pop, de_gens, epsilon,
             parallel, show_report, out):
    """Expanding-window backtest with MSE and TADDA per step."""
    def go():
        step_list = _int_list(steps, "steps")
        bad = [s for s in step_list if s not in FORECAST_STEPS]
        if bad:
            raise click.UsageError(f"unsupported steps {bad}; evaluation covers s = 2..7")
        spec = _load_spec(spec_path)
        panel = _load_input(input_path, spec)
        last = panel.months[1]
        months = (_int_list(eval_months, "evaluation months") if eval_months
                  else list(range(last - 5, last + 1)))
        start = time.perf_counter()
        run = run_evaluation(panel, spec, months, step_list, _de_config(de_pop, de_gens), seed,
                             epsilon=epsilon, parallel=parallel)
        if not run.completed:
            raise click.ClickException("every (t, s) pair was skipped: " + "; ".join(
                sorted({r.reason for r in run.skipped})))
        d = _out_dir(out)
        preds = run.predictions()
        pred_dir = d / "predictions"
        pred_dir.mkdir(exist_ok=True)
        for (t, s), part in preds.groupby(["month", "s"], sort=True):
            _write_csv(part, pred_dir / f"pred_t{t}_s{s}.csv")
        _write_csv(preds, d / "predictions.csv")
        scores = run.scores()
        baseline = run.baseline_scores()
        _write_csv(scores, d / "scores.csv")
        _write_csv(baseline, d / "baseline_scores.csv")
        _write_csv(run.thresholds(), d / "thresholds.csv")
        _write_json(d / "manifest.json", {
            "command": "evaluate", "version": __version__, "seed": seed,
            "steps": step_list, "eval_months": months, "epsilon": epsilon,
            "de": {"population": de_pop, "generations": de_gens},
            "spec_sha256": spec_hash(spec), "input_sha256": _file_hash(input_path),
            "score_scale": "log1p",
            "skipped": [{"t": r.t, "s": r.s, "reason": r.reason} for r in run.skipped],
            "pair_seconds": {f"{r.t}:{r.s}": round(r.seconds, 3) for r in run.records},
            "seconds": round(time.perf_counter() - start, 3),
        })
        click.echo(f"wrote results for {len(run.completed)} pairs to {d}")
        if show_report:
            click.echo(_format_scores(scores, baseline, epsilon))
    _run(go)


@main.command()
@click.option("--scores", "scores_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--baseline", "baseline_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Baseline scores CSV to show alongside.")
@click.option("--epsilon", type=click.FloatRange(0), default=0.048, show_default=True)
def report(scores_path, baseline_path, epsilon):
    """Print a plain-text table of the scores CSV (s, MSE, TADDA)."""
    def go():
        scores = pd.read_csv(scores_path)
        missing = {"s", "mse", "tadda"} - set(scores.columns)
        if missing:
            raise click.ClickException(f"{scores_path} lacks columns {sorted(missing)}")
        baseline = pd.read_csv(baseline_path) if baseline_path else None
        click.echo(_format_scores(scores, baseline, epsilon))
    _run(go)


@main.command(name="spec")
def show_spec():
    """Print the bundled covariate spec."""
    click.echo(format_spec(default_spec()), nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
