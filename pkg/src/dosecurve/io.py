"""CSV ingestion and report serialisation.

Output formats
--------------
CSV
    Header row then one row per grid point (and per estimator for
    simulation reports). Columns: ``estimator, t, estimate, variance,
    ci_lo, ci_hi`` and, for simulation reports, ``truth, bias, rmse,
    coverage``. Curves with a uniform band add ``band_lo, band_hi``.
    Floats are written with ``repr`` so they parse back exactly; missing
    values are empty cells.
JSON
    An object matching :data:`REPORT_SCHEMA`: ``kind`` (``"curve"`` or
    ``"simulation"``), ``columns``, ``rows`` (lists in column order, NaN
    written as ``null``) and a ``config`` echo. Keys are sorted, so equal
    inputs give identical bytes.

Standardisation in :func:`load_csv` uses the population standard deviation
(divisor ``n``).
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .crossfit import UniformBand
from .data import DoseCurveError, ObservationSet, ValidationError, validate
from .estimates import CurveEstimate
from .simulation import SimulationReport

CURVE_COLUMNS = ["estimator", "t", "estimate", "variance", "ci_lo", "ci_hi"]
BAND_COLUMNS = ["band_lo", "band_hi"]
SIM_COLUMNS = CURVE_COLUMNS + ["truth", "bias", "rmse", "coverage"]

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["kind", "columns", "rows", "config"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["curve", "simulation"]},
        "columns": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "rows": {
            "type": "array",
            "items": {
                "type": "array",
                "items": {"type": ["number", "string", "null"]},
            },
        },
        "config": {"type": "object"},
    },
}


class ReportWriteError(DoseCurveError, OSError):
    """The output path could not be written."""


def load_csv(
    path: str | Path,
    outcome: str,
    treatment: str,
    covariates: Sequence[str],
    standardize: bool = False,
) -> ObservationSet:
    """Read an observation set from a UTF-8 CSV with a header row.

    With ``standardize`` every selected column is centred and divided by its
    population standard deviation.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header:
        raise ValidationError(f"{path} has no header row")
    header = [h.strip() for h in header]
    wanted = [outcome, treatment, *covariates]
    if not covariates:
        raise ValidationError("at least one covariate column is required")
    missing = [c for c in wanted if c not in header]
    if missing:
        raise ValidationError(f"missing column(s): {', '.join(missing)}")
    pos = [header.index(c) for c in wanted]
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        vals = []
        for j in pos:
            cell = row[j].strip() if j < len(row) else ""
            try:
                vals.append(float(cell))
            except ValueError:
                raise ValidationError(
                    f"line {lineno}, column {header[j]!r}: non-numeric cell {cell!r}"
                ) from None
        rows.append(vals)
    arr = np.array(rows, dtype=float).reshape(-1, len(wanted))
    if standardize:
        arr = standardize_columns(arr, wanted)
    data = ObservationSet(arr[:, 0], arr[:, 1], arr[:, 2:])
    return validate(data)


def standardize_columns(arr: np.ndarray, names: Sequence[str] = ()) -> np.ndarray:
    mean = arr.mean(axis=0)
    sd = arr.std(axis=0)
    bad = ~(sd > 0)
    if bad.any():
        which = [names[j] if j < len(names) else str(j) for j in np.flatnonzero(bad)]
        raise ValidationError(f"zero-variance column(s) cannot be standardised: {which}")
    return (arr - mean) / sd


def _num(x):
    x = float(x)
    return None if math.isnan(x) or math.isinf(x) else x


def _rows(obj) -> tuple[str, list[str], list[list], dict]:
    if isinstance(obj, UniformBand):
        c = obj.curve
        cols = CURVE_COLUMNS + BAND_COLUMNS
        rows = [
            [c.method, *(_num(v) for v in r)]
            for r in zip(c.t, c.estimate, c.variance, c.ci_lower, c.ci_upper, obj.lower, obj.upper)
        ]
        cfg = {"method": c.method, "h": c.h, "n": c.n, "ci_level": c.ci_level,
               "band_quantile": obj.quantile, "bootstrap_B": obj.B, "multiplier_law": obj.law}
        return "curve", cols, rows, cfg
    if isinstance(obj, CurveEstimate):
        rows = [
            [obj.method, *(_num(v) for v in r)]
            for r in zip(obj.t, obj.estimate, obj.variance, obj.ci_lower, obj.ci_upper)
        ]
        cfg = {"method": obj.method, "h": obj.h, "n": obj.n, "ci_level": obj.ci_level}
        return "curve", list(CURVE_COLUMNS), rows, cfg
    if isinstance(obj, SimulationReport):
        reports = [obj]
    elif isinstance(obj, (list, tuple)):
        reports = list(obj)
    else:
        reports = []
    if not reports or not all(isinstance(r, SimulationReport) for r in reports):
        raise ValidationError("emit_report takes a curve, a band or simulation report(s)")
    rows = []
    for rep in reports:
        for r in zip(rep.t, rep.mean_estimate, rep.mean_variance, rep.mean_ci_lower,
                     rep.mean_ci_upper, rep.truth, rep.bias, rep.rmse, rep.coverage):
            rows.append([rep.estimator, *(_num(v) for v in r)])
    cfg = {"reports": [dict(rep.config, label=rep.estimator, R=rep.R, n_failed=rep.n_failed)
                       for rep in reports]}
    return "simulation", list(SIM_COLUMNS), rows, cfg


def render_report(obj, fmt: str = "csv", extra_config: dict | None = None) -> str:
    """Serialise a curve, band or simulation report(s) to text."""
    kind, cols, rows, cfg = _rows(obj)
    if extra_config:
        cfg = dict(cfg, **extra_config)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])
        return buf.getvalue()
    if fmt == "json":
        doc = {"kind": kind, "columns": cols, "rows": rows, "config": cfg}
        return json.dumps(_jsonable(doc), sort_keys=True, indent=1, allow_nan=False) + "\n"
    raise ValidationError(f"unknown format {fmt!r}; use csv or json")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return _num(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def emit_report(obj, path: str | Path, fmt: str = "csv", extra_config: dict | None = None) -> Path:
    """Write :func:`render_report` output to ``path``."""
    text = render_report(obj, fmt, extra_config)
    path = Path(path)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ReportWriteError(f"cannot write {path}: {exc}") from exc
    return path


def read_report(path: str | Path) -> tuple[list[str], list[list]]:
    """Parse a file written by :func:`emit_report` back into columns and rows."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        doc = json.loads(text)
        return doc["columns"], [[math.nan if v is None else v for v in r] for r in doc["rows"]]
    reader = csv.reader(io.StringIO(text))
    cols = next(reader)
    rows = []
    for r in reader:
        rows.append([r[0], *(math.nan if v == "" else float(v) for v in r[1:])])
    return cols, rows
