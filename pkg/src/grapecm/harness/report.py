"""Report helpers: log-bucketed histograms, percentiles, canonical JSON and CSV."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

BUCKETS_PER_DECADE = 4
PERCENTILES = {"p50": 50.0, "p99": 99.0, "p999": 99.9}


def log_histogram(values: Sequence[float], per_decade: int = BUCKETS_PER_DECADE) -> dict:
    """Histogram over log10 buckets; edges are aligned to powers of ten."""
    v = np.asarray(values, dtype=float)
    v = v[v > 0]
    if v.size == 0:
        return {"edges": [], "counts": [], "per-decade": per_decade}
    lo = math.floor(np.log10(v.min()) * per_decade)
    hi = math.floor(np.log10(v.max()) * per_decade) + 1
    exps = np.arange(lo, hi + 1) / per_decade
    counts, _ = np.histogram(np.log10(v), bins=exps)
    return {"edges": [_round(10 ** e) for e in exps], "counts": counts.tolist(),
            "per-decade": per_decade}


def percentiles(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {k: None for k in PERCENTILES}
    return {k: _round(float(np.percentile(v, q))) for k, q in PERCENTILES.items()}


def span_decades(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=float)
    v = v[v > 0]
    return _round(float(np.log10(v.max() / v.min()))) if v.size else 0.0


def _round(x: float, digits: int = 10) -> float:
    # Fixed significant digits keep reports stable across numpy versions.
    return float(f"{x:.{digits}g}")


def _clean(obj):
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        if math.isnan(x):
            return None
        return _round(x)
    return obj


def dumps(report: Mapping) -> str:
    return json.dumps(_clean(report), sort_keys=True, indent=2) + "\n"


def write_report(report: Mapping, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps(report), encoding="utf-8")


def load_report(path: Union[str, Path]) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def histogram_csv(histograms: Mapping[str, dict]) -> str:
    """One row per bucket: series, lower edge, upper edge, count."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["series", "lower", "upper", "count"])
    for name, h in sorted(histograms.items()):
        edges, counts = h.get("edges", []), h.get("counts", [])
        for lo, hi, c in zip(edges, edges[1:], counts):
            w.writerow([name, lo, hi, c])
    return out.getvalue()


def find_histograms(report: Mapping, prefix: str = "") -> dict:
    """Every ``{"edges", "counts"}`` object in a report, keyed by its dotted path."""
    found = {}
    for k, v in report.items():
        if isinstance(v, Mapping):
            path = f"{prefix}{k}"
            if "edges" in v and "counts" in v:
                found[path] = v
            else:
                found.update(find_histograms(v, path + "."))
    return found


def rows_csv(rows: Iterable[Mapping], columns: Sequence[str]) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return out.getvalue()
