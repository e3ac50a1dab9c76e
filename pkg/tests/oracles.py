"""Independent reference implementations used to check the optimized code."""

import numpy as np


def brute_force_knapsack(items, budget):
    """Best subset by exhaustive enumeration of every bitmask.

    ``items`` are (start, benefit, cost) triples; only positive-benefit items
    are considered.  Returns (benefit, item count, starts) of an optimal
    subset with the fewest items.
    """
    items = [it for it in items if it[1] > 0]
    n = len(items)
    if n == 0:
        return 0.0, 0, ()
    masks = np.arange(1 << n, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(n)) & 1).astype(np.int8)
    cost = bits @ np.array([c for _, _, c in items], dtype=np.int64)
    value = bits @ np.array([b for _, b, _ in items])
    count = bits.sum(axis=1)
    value[cost > budget] = -1.0
    best = value.max()
    tied = np.flatnonzero(value >= best - 1e-12)
    pick = tied[np.argmin(count[tied])]
    starts = tuple(sorted(items[i][0] for i in range(n) if bits[pick, i]))
    return float(value[pick]), int(count[pick]), starts
