"""Cluster-wide staggering of kernel background tasks such as compaction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from ..policy import CompactionSchedule


class InfeasibleSchedule(ValueError):
    pass


@dataclass(frozen=True)
class Window:
    start: float      # offset into the period, seconds
    duration: float
    period: float
    max_cpu: float = 0.02

    def active(self, t: float) -> bool:
        return (t - self.start) % self.period < self.duration


def _order(nodes, anti_affinity):
    if not anti_affinity:
        return list(nodes)
    # Interleave groups so members of one group land in different slots.
    rank = {}
    for group in anti_affinity:
        for i, n in enumerate(group):
            rank[n] = i
    return sorted(nodes, key=lambda n: (rank.get(n, 0), nodes.index(n)))


def schedule_background(nodes: Sequence[str], duration: float, cap: int, period: float,
                        limits: Optional[CompactionSchedule] = None,
                        anti_affinity: Sequence[Sequence[str]] = ()) -> dict[str, Window]:
    """Give every node one window per period with at most ``cap`` nodes in-window at once.

    Nodes are packed ``cap`` to a slot and slots are spread evenly over the
    period.  When whole slots do not fit, windows are laid end to end on
    ``cap`` lanes and may wrap around the period boundary.
    """
    nodes = list(nodes)
    n = len(nodes)
    if cap < 1:
        raise InfeasibleSchedule("cap must be at least 1")
    if n * duration > cap * period:
        raise InfeasibleSchedule(
            f"N*duration = {n * duration:g} exceeds cap*period = {cap * period:g}")
    if duration > period:
        raise InfeasibleSchedule(f"duration {duration:g} exceeds period {period:g}")
    max_cpu = 0.02
    if limits is not None:
        if duration > limits.max_duration:
            raise InfeasibleSchedule(
                f"duration {duration:g} exceeds the preset's max_duration {limits.max_duration:g}")
        max_cpu = limits.max_cpu
    if n == 0:
        return {}

    ordered = _order(nodes, anti_affinity)
    slots = math.ceil(n / cap)
    windows = {}
    if slots * duration <= period:
        spacing = period / slots
        for i, node in enumerate(ordered):
            windows[node] = Window((i // cap) * spacing, duration, period, max_cpu)
    else:
        for i, node in enumerate(ordered):
            windows[node] = Window((i * duration) % period, duration, period, max_cpu)

    for group in anti_affinity:
        ws = [windows[g] for g in group if g in windows]
        for i, a in enumerate(ws):
            if any(a.active(b.start) or b.active(a.start) for b in ws[i + 1:]):
                raise InfeasibleSchedule(f"anti-affinity group {list(group)} overlaps in time")
    return windows


def max_concurrency(windows: dict[str, Window], period: float) -> int:
    """Exact peak number of nodes in-window over one period (sweep over all boundaries)."""
    points = {0.0}
    for w in windows.values():
        points.add(w.start % period)
        points.add((w.start + w.duration) % period)
    return max((sum(w.active(t) for w in windows.values()) for t in sorted(points)), default=0)
