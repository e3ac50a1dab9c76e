"""Adaptive metrics collection under a fleet bandwidth budget."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class MetricSchedule:
    size_bytes: int
    staleness_bound: float
    interval: float
    last_change_rate: float = 0.0


@dataclass
class CollectionSchedule:
    """Per-metric report intervals shared by a homogeneous fleet of ``node_count`` nodes."""

    node_count: int
    budget_bytes_per_s: float
    interval_min: float = 1.0
    drift_threshold: float = 0.01
    metrics: dict = field(default_factory=dict)

    def add(self, name: str, size_bytes: int, staleness_bound: float):
        if staleness_bound < self.interval_min:
            raise ValueError(f"{name}: staleness bound below interval_min")
        self.metrics[name] = MetricSchedule(size_bytes, staleness_bound, self.interval_min)

    def bandwidth(self) -> float:
        return self.node_count * sum(m.size_bytes / m.interval for m in self.metrics.values())

    def floor_bandwidth(self) -> float:
        return self.node_count * sum(m.size_bytes / m.staleness_bound for m in self.metrics.values())

    def enforce_budget(self) -> None:
        """Relax the largest relaxable intervals until the fleet fits the budget."""
        if self.floor_bandwidth() > self.budget_bytes_per_s:
            raise ValueError(
                f"budget {self.budget_bytes_per_s:.0f} B/s cannot be met within staleness bounds "
                f"(minimum {self.floor_bandwidth():.0f} B/s)")
        while self.bandwidth() > self.budget_bytes_per_s:
            eligible = [(m.interval, name) for name, m in self.metrics.items()
                        if m.interval < m.staleness_bound]
            _, name = max(eligible, key=lambda x: (x[0], x[1]))
            m = self.metrics[name]
            m.interval = min(2 * m.interval, m.staleness_bound)


def adapt_interval(s: CollectionSchedule, metric: str, observed_change_rate: float) -> float:
    """Double a stable metric's interval (up to its staleness bound), halve a drifting one."""
    m = s.metrics[metric]
    m.last_change_rate = observed_change_rate
    if observed_change_rate < s.drift_threshold:
        m.interval = min(2 * m.interval, m.staleness_bound)
    else:
        m.interval = max(m.interval / 2, s.interval_min)
    s.enforce_budget()
    return m.interval
