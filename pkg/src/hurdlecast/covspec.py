"""Declarative covariate specification: which covariate enters which stage, how.

Spec files are plain text, one entry per line::

    # name        key=value ...
    gdp_country   stages=1      effect=linear       transform=log
    sb_count      stages=3      effect=p-spline     transform=log1p  k=10
    mcw_lt        stages=2,3    effect=interaction  with=capdist
    spatial       stages=2,3    effect=tensor-spatial vars=lon,lat k=6

Keys: ``stages`` (comma list from 1,2,3), ``effect``, ``transform``
(default identity), ``lag`` (covariate-specific lag in months, default: the
model lag), ``k`` (basis size of a smooth), ``with`` (second factor of an
interaction) and ``vars`` (coordinate columns of a tensor smooth). Blank
lines and ``#`` comments are ignored.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources

EFFECTS = (
    "linear",
    "dummy-set",
    "p-spline",
    "temporal-trend",
    "tensor-spatial",
    "random-effect",
    "interaction",
)
TRANSFORMS = ("identity", "log", "log1p", "logit-link-target")

__all__ = [
    "CovariateSpec",
    "SpecError",
    "parse_spec",
    "load_spec",
    "format_spec",
    "default_spec",
    "default_spec_text",
    "spec_for_stage",
    "spec_hash",
]


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    stages: tuple
    effect: str
    transform: str = "identity"
    lag_months: int | None = None
    k: int | None = None
    other: str | None = None
    coords: tuple | None = None

    @property
    def key(self):
        """Term label; interactions are named ``a:b``."""
        return f"{self.name}:{self.other}" if self.effect == "interaction" else self.name

    def to_line(self):
        parts = [self.name, "stages=" + ",".join(str(s) for s in self.stages), f"effect={self.effect}"]
        if self.transform != "identity":
            parts.append(f"transform={self.transform}")
        if self.lag_months is not None:
            parts.append(f"lag={self.lag_months}")
        if self.k is not None:
            parts.append(f"k={self.k}")
        if self.other is not None:
            parts.append(f"with={self.other}")
        if self.coords is not None:
            parts.append("vars=" + ",".join(self.coords))
        return "  ".join(parts)


def _parse_line(line, lineno):
    tokens = line.split()
    name, rest = tokens[0], tokens[1:]
    fields = {}
    for tok in rest:
        if "=" not in tok:
            raise SpecError(f"line {lineno}: expected key=value, got {tok!r}")
        key, val = tok.split("=", 1)
        if key in fields:
            raise SpecError(f"line {lineno}: duplicate key {key!r}")
        fields[key] = val
    unknown = set(fields) - {"stages", "effect", "transform", "lag", "k", "with", "vars"}
    if unknown:
        raise SpecError(f"line {lineno}: unknown keys {sorted(unknown)}")
    if "stages" not in fields or "effect" not in fields:
        raise SpecError(f"line {lineno}: 'stages' and 'effect' are required")
    try:
        stages = tuple(sorted({int(s) for s in fields["stages"].split(",")}))
    except ValueError:
        raise SpecError(f"line {lineno}: stages must be integers") from None
    if not stages or any(s not in (1, 2, 3) for s in stages):
        raise SpecError(f"line {lineno}: stages must be a subset of 1,2,3")
    effect = fields["effect"]
    if effect not in EFFECTS:
        raise SpecError(f"line {lineno}: unknown effect {effect!r}")
    transform = fields.get("transform", "identity")
    if transform not in TRANSFORMS:
        raise SpecError(f"line {lineno}: unknown transform {transform!r}")
    try:
        lag = int(fields["lag"]) if "lag" in fields else None
        k = int(fields["k"]) if "k" in fields else None
    except ValueError:
        raise SpecError(f"line {lineno}: lag and k must be integers") from None
    coords = tuple(fields["vars"].split(",")) if "vars" in fields else None
    other = fields.get("with")
    if effect == "interaction" and other is None:
        raise SpecError(f"line {lineno}: interaction needs with=<covariate>")
    if effect == "tensor-spatial" and (coords is None or len(coords) != 2):
        raise SpecError(f"line {lineno}: tensor-spatial needs vars=<x>,<y>")
    return CovariateSpec(name, stages, effect, transform, lag, k, other, coords)


def validate_spec(entries):
    """Check per-stage uniqueness and that interactions reference known covariates."""
    seen = set()
    for e in entries:
        for s in e.stages:
            if (e.key, s) in seen:
                raise SpecError(f"covariate {e.key!r} appears twice in stage {s}")
            seen.add((e.key, s))
    for e in entries:
        if e.effect != "interaction":
            continue
        for s in e.stages:
            for ref in (e.name, e.other):
                if (ref, s) not in seen:
                    raise SpecError(
                        f"interaction {e.key!r} references {ref!r}, which is not in stage {s}"
                    )
    return list(entries)


def parse_spec(text):
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            entries.append(_parse_line(line, lineno))
    return validate_spec(entries)


def load_spec(path):
    with open(path, encoding="utf-8") as fh:
        return parse_spec(fh.read())


def format_spec(entries):
    return "\n".join(e.to_line() for e in entries) + "\n"


def default_spec_text():
    return resources.files("hurdlecast").joinpath("data/default_spec.txt").read_text("utf-8")


def default_spec():
    """Stage/covariate map of the conflict-fatality application."""
    return parse_spec(default_spec_text())


def spec_for_stage(entries, stage):
    return [e for e in entries if stage in e.stages]


def spec_hash(entries):
    return hashlib.sha256(format_spec(entries).encode("utf-8")).hexdigest()
