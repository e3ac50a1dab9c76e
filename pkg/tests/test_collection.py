import math

import pytest

from grapecm.cm import CollectionSchedule, adapt_interval


def fleet(budget=10e6, n=1000):
    s = CollectionSchedule(n, budget)
    s.add("fault-latency", 4000, 1.0)
    s.add("inventory", 4000, 900.0)
    return s


def test_stable_metric_doubles_to_its_bound():
    s = fleet(budget=1e9)
    steps = 0
    while s.metrics["inventory"].interval < 900:
        adapt_interval(s, "inventory", 0.0)
        steps += 1
    assert steps == math.ceil(math.log2(900))
    assert s.metrics["inventory"].interval == 900


def test_drifting_metric_halves_to_minimum():
    s = fleet(budget=1e9)
    for _ in range(5):
        adapt_interval(s, "inventory", 0.0)
    for _ in range(10):
        adapt_interval(s, "inventory", 0.5)
    assert s.metrics["inventory"].interval == 1.0


def test_oscillating_metric_never_leaves_floor_region():
    s = fleet(budget=1e9)
    seen = [adapt_interval(s, "inventory", r) for r in [0.5, 0.0] * 20]
    assert max(seen) <= 2.0


def test_budget_enforced_within_staleness():
    s = fleet()
    s.enforce_budget()
    assert s.bandwidth() <= 10e6
    for m in s.metrics.values():
        assert m.interval <= m.staleness_bound


def test_infeasible_budget_raises():
    s = fleet(budget=1e6)
    with pytest.raises(ValueError, match="cannot be met"):
        s.enforce_budget()


def test_bound_below_minimum_rejected():
    with pytest.raises(ValueError):
        CollectionSchedule(1, 1e6).add("x", 10, 0.5)


def test_adapt_keeps_budget():
    s = fleet()
    for _ in range(20):
        adapt_interval(s, "inventory", 0.5)
        assert s.bandwidth() <= 10e6
