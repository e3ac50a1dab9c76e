"""Eager-vs-demand paging classification from a binary's run history."""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import fmean
from typing import Optional


@dataclass(frozen=True)
class RunRecord:
    paging_mode: str                       # "demand", "eager" or "passive"
    latency_p50: Optional[float] = None
    alloc_latency_delta: Optional[float] = None
    mem_bloat: Optional[float] = None
    latency_gain: Optional[float] = None   # modeled gain from a passive run


@dataclass
class ProcessHistory:
    process: str
    runs: list = field(default_factory=list)

    def append(self, run: RunRecord) -> None:
        self.runs.append(run)


@dataclass(frozen=True)
class Thresholds:
    latency_gain: float = 0.05
    mem_bloat: float = 0.10
    alloc_delta: float = 0.05


@dataclass(frozen=True)
class PagingDecision:
    mode: str                   # "eager" or "demand"
    needs_observation: bool = False
    latency_gain: Optional[float] = None


def _mean(values):
    values = [v for v in values if v is not None]
    return fmean(values) if values else None


def classify_paging(h: ProcessHistory, thresholds: Thresholds = Thresholds()) -> PagingDecision:
    demand = [r for r in h.runs if r.paging_mode == "demand" and r.latency_p50]
    eager = [r for r in h.runs if r.paging_mode == "eager" and r.latency_p50 is not None]
    passive = [r for r in h.runs if r.paging_mode == "passive"]

    if demand and eager:
        gain = 1 - fmean(r.latency_p50 for r in eager) / fmean(r.latency_p50 for r in demand)
        costs = eager
    else:
        gain = _mean(r.latency_gain for r in passive)
        costs = passive
    bloat = _mean(r.mem_bloat for r in costs)
    alloc = _mean(r.alloc_latency_delta for r in costs)
    if gain is None or bloat is None or alloc is None:
        return PagingDecision("demand", needs_observation=True)

    eager_ok = (gain >= thresholds.latency_gain and bloat <= thresholds.mem_bloat
                and alloc <= thresholds.alloc_delta)
    return PagingDecision("eager" if eager_ok else "demand", latency_gain=gain)
