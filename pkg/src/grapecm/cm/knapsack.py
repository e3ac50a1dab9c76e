"""Budgeted huge-page promotion: exact 0/1 knapsack over fragmentation cost."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .search import RegionEstimate

DEFAULT_QUANTUM = 4096


@dataclass(frozen=True)
class PromotionSet:
    regions: tuple
    total_benefit: float
    total_frag: int


def select_promotion_set(estimates: Sequence[RegionEstimate], frag_budget: int,
                         quantum: int = DEFAULT_QUANTUM) -> PromotionSet:
    """Pick the regions maximizing summed mean benefit within ``frag_budget`` bytes.

    Costs are rounded up to whole quanta, so a selection never exceeds the
    budget; the result is exact when costs are quantum multiples.  Ties go to
    fewer regions, then to the lexicographically smallest list of starts.
    """
    items = sorted((e for e in estimates if e.mean_benefit > 0),
                   key=lambda e: e.region.start, reverse=True)
    capacity = max(int(frag_budget) // quantum, -1)
    if not items or capacity < 0:
        return PromotionSet((), 0.0, 0)

    weights = [-(-int(e.frag_cost) // quantum) for e in items]
    value = np.zeros(capacity + 1)
    count = np.zeros(capacity + 1, dtype=np.int64)
    take = np.zeros((len(items), capacity + 1), dtype=bool)
    # Items run in descending start order, so taking the current item on an
    # exact tie always yields the lexicographically smaller start list.
    for i, (e, w) in enumerate(zip(items, weights)):
        if w > capacity:
            continue
        cand_v = value[: capacity + 1 - w] + e.mean_benefit
        cand_c = count[: capacity + 1 - w] + 1
        cur_v, cur_c = value[w:], count[w:]
        better = (cand_v > cur_v) | ((cand_v == cur_v) & (cand_c <= cur_c))
        take[i, w:] = better
        value[w:] = np.where(better, cand_v, cur_v)
        count[w:] = np.where(better, cand_c, cur_c)

    chosen = []
    w = capacity
    for i in range(len(items) - 1, -1, -1):
        if take[i, w]:
            chosen.append(items[i])
            w -= weights[i]
    chosen.sort(key=lambda e: e.region.start)
    total = 0.0
    for e in sorted(chosen, key=lambda e: e.region.start, reverse=True):
        total += e.mean_benefit
    return PromotionSet(tuple(e.region for e in chosen), total,
                        int(sum(e.frag_cost for e in chosen)))
