"""Estimate reports and least-squares fits shared by every module."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

CSV_COLUMNS = ("quantity", "value", "stderr", "n_samples", "lo", "hi")


class FitError(ValueError):
    """Raised when a regression has too few usable points."""


class InsufficientSamplesError(ValueError):
    """Raised when an estimator is handed fewer samples than it requires."""


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r2: float
    slope_se: float
    n_points: int

    def predict(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=float)


def ols(x, y, min_points: int = 2) -> LinearFit:
    """Ordinary least squares ``y = intercept + slope * x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    n = x.size
    if n < max(2, min_points):
        raise FitError(f"need at least {max(2, min_points)} finite points, got {n}")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0.0:
        raise FitError("abscissae are all equal")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    sst = float(np.sum((y - ym) ** 2))
    sse = float(np.sum(resid**2))
    r2 = 1.0 - sse / sst if sst > 0 else 1.0
    slope_se = math.sqrt(sse / (n - 2) / sxx) if n > 2 else math.nan
    return LinearFit(slope, intercept, float(r2), slope_se, n)


def mean_and_se(samples) -> tuple[float, float]:
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        return math.nan, math.nan
    if s.size == 1:
        return float(s[0]), math.nan
    return float(math.fsum(s) / s.size), float(s.std(ddof=1) / math.sqrt(s.size))


@dataclass
class Row:
    quantity: str
    value: float
    stderr: float = math.nan
    n_samples: int = 0
    lo: float = math.nan
    hi: float = math.nan
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass
class EstimateReport:
    """A named collection of estimates plus fit diagnostics.

    ``rows`` are the tabular part (written as CSV), ``fits`` hold regression
    summaries (written as JSON), ``flags`` carry warnings such as censoring or
    out-of-tolerance z-scores.
    """

    name: str
    rows: list[Row] = field(default_factory=list)
    fits: dict[str, dict[str, Any]] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    provenance: dict[str, Any] = field(default_factory=dict)

    def add(self, quantity: str, value: float, stderr: float = math.nan, n_samples: int = 0,
            lo: float = math.nan, hi: float = math.nan, **extra) -> Row:
        row = Row(quantity, float(value), float(stderr), int(n_samples), float(lo), float(hi), dict(extra))
        self.rows.append(row)
        return row

    def add_fit(self, key: str, fit: LinearFit, **extra) -> None:
        self.fits[key] = {**asdict(fit), **extra}

    def row(self, quantity: str) -> Row:
        for r in self.rows:
            if r.quantity == quantity:
                return r
        raise KeyError(quantity)

    def value(self, quantity: str) -> float:
        return self.row(quantity).value

    def values(self, prefix: str = "") -> np.ndarray:
        return np.array([r.value for r in self.rows if r.quantity.startswith(prefix)])

    @property
    def flagged(self) -> bool:
        return bool(self.flags)

    def to_csv(self, path) -> Path:
        path = Path(path)
        prov = _flat_provenance(self.provenance)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(list(CSV_COLUMNS) + list(prov))
            for r in self.rows:
                writer.writerow([r.quantity, _fmt(r.value), _fmt(r.stderr), r.n_samples,
                                 _fmt(r.lo), _fmt(r.hi)] + list(prov.values()))
        return path

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "rows": [asdict(r) for r in self.rows],
            "fits": self.fits,
            "flags": list(self.flags),
            "provenance": self.provenance,
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True))
        return path


def _fmt(v: float) -> str:
    return repr(float(v))


def _flat_provenance(prov: dict[str, Any]) -> dict[str, str]:
    return {k: str(v) for k, v in sorted(prov.items())}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def content_hash(chunks: Iterable[bytes]) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()[:16]
