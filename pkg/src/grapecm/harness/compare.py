"""Percentage deltas between two reports of the same scenario shape."""

from __future__ import annotations

from typing import Mapping, Optional

from .report import PERCENTILES


class ShapeMismatch(ValueError):
    pass


def pct_delta(a: float, b: float) -> Optional[float]:
    """100 * (a - b) / b; ``b`` is the baseline."""
    if b == 0:
        return 0.0 if a == 0 else None
    return 100.0 * (a - b) / b


def _shape(report: Mapping) -> tuple:
    sc = report.get("scenario", {})
    return (report.get("kind"), sc.get("node_count", 1), tuple(sorted(sc.get("workloads", {}))))


def _scalars(results: Mapping) -> dict:
    return {k: v for k, v in results.items()
            if isinstance(v, (int, float)) and not isinstance(v, bool)}


def compare(a: Mapping, b: Mapping, metric: str) -> dict:
    """Deltas of ``a`` against the baseline ``b`` for one latency block plus scalar totals."""
    if _shape(a) != _shape(b):
        raise ShapeMismatch(f"reports differ in shape: {_shape(a)} vs {_shape(b)}")
    ra, rb = a.get("results", {}), b.get("results", {})
    if metric not in ra or metric not in rb:
        raise ShapeMismatch(f"metric {metric!r} missing from one of the reports")
    ma, mb = ra[metric], rb[metric]
    out: dict = {"metric": metric, "a": a.get("name"), "b": b.get("name")}
    if isinstance(ma, Mapping) and isinstance(mb, Mapping):
        for q in PERCENTILES:
            if ma.get(q) is not None and mb.get(q) is not None:
                out[q] = {"a": ma[q], "b": mb[q], "delta_pct": pct_delta(ma[q], mb[q])}
    elif isinstance(ma, (int, float)) and isinstance(mb, (int, float)):
        out["value"] = {"a": ma, "b": mb, "delta_pct": pct_delta(ma, mb)}
    else:
        raise ShapeMismatch(f"metric {metric!r} is neither a latency block nor a number")
    sa, sb = _scalars(ra), _scalars(rb)
    out["totals"] = {k: {"a": sa[k], "b": sb[k], "delta_pct": pct_delta(sa[k], sb[k])}
                     for k in sorted(sa.keys() & sb.keys())}
    return out
