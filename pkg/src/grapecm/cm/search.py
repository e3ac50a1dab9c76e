"""Round-based huge-page experiment planning with region narrowing.

Round 0 splits the address space into K chunks.  Each later round prunes
chunks whose benefit is not significantly above ``epsilon``, picks the best
``ceil(K/2)`` splittable chunks and splits them so that K cohorts are filled
again.  Chunks not picked this round stay in the surviving set and are split
later, so no region with real benefit is ever discarded by ranking alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..policy import AddressRegion
from ..wire import CM_ID, ExperimentAssignment, ExperimentResult

DEFAULT_EPSILON = 0.001


@dataclass(frozen=True)
class RegionEstimate:
    region: AddressRegion
    mean_benefit: float
    stderr: float
    samples: int
    frag_cost: int = 0

    def prunable(self, epsilon: float) -> bool:
        return self.mean_benefit - 2 * self.stderr <= epsilon


@dataclass(frozen=True)
class Cohort:
    assignment: ExperimentAssignment
    machine_count: int


@dataclass(frozen=True)
class ExperimentPlan:
    round: int
    cohorts: tuple
    control: Optional[Cohort]
    surviving_regions: tuple
    carried: tuple = ()          # surviving estimates not re-measured this round
    done: bool = False

    @property
    def machines(self) -> int:
        used = sum(c.machine_count for c in self.cohorts)
        return used + (self.control.machine_count if self.control else 0)

    def region_of(self, experiment_id: str) -> Optional[AddressRegion]:
        for c in self.cohorts:
            if c.assignment.experiment_id == experiment_id:
                regions = c.assignment.promote_regions
                return regions[0] if regions else None
        return None


def split_region(r: AddressRegion, parts: int) -> list[AddressRegion]:
    parts = max(1, min(parts, r.length))
    sizes = [len(a) for a in np.array_split(np.arange(r.length), parts)]
    out, start = [], r.start
    for n in sizes:
        out.append(AddressRegion(start, n))
        start += n
    return out


def _experiment_id(process: str, rnd: int, region: Optional[AddressRegion]) -> str:
    where = "control" if region is None else f"{region.start:x}+{region.length:x}"
    return f"{process}/r{rnd}/{where}"


def plan_round(prior: Sequence[RegionEstimate], space: AddressRegion, rnd: int,
               machines: int, branching: int, epsilon: float = DEFAULT_EPSILON,
               process: str = "", duration: float = 900) -> ExperimentPlan:
    if machines < branching + 1:
        raise ValueError(f"need at least K + 1 = {branching + 1} machines, got {machines}")

    if rnd == 0:
        chunks = split_region(space, branching)
        carried: list[RegionEstimate] = []
        surviving = chunks
    else:
        alive = [e for e in prior if not e.prunable(epsilon)]
        surviving = sorted((e.region for e in alive), key=lambda r: r.start)
        splittable = [e for e in alive if e.region.length > 1]
        if not splittable:
            return ExperimentPlan(rnd, (), None, tuple(surviving), tuple(alive), done=True)
        splittable.sort(key=lambda e: (-e.mean_benefit, e.region.start))
        chosen = splittable[: math.ceil(branching / 2)]
        chosen_regions = {e.region for e in chosen}
        carried = [e for e in alive if e.region not in chosen_regions]
        parts = max(2, branching // len(chosen))
        chunks = [piece for e in sorted(chosen, key=lambda e: e.region.start)
                  for piece in split_region(e.region, parts)]

    # Every estimate is taken against the shared control, so the control gets
    # ~sqrt(k) times a cohort's machines and all leftovers.
    k = len(chunks)
    per_cohort = max(1, int(machines // (k + math.sqrt(k))))
    control_count = machines - k * per_cohort
    cohorts = tuple(
        Cohort(ExperimentAssignment(CM_ID, _experiment_id(process, rnd, c), process, (c,), duration),
               per_cohort)
        for c in chunks)
    control = Cohort(ExperimentAssignment(CM_ID, _experiment_id(process, rnd, None), process, (),
                                          duration), control_count)
    return ExperimentPlan(rnd, cohorts, control, tuple(surviving), tuple(carried))


def update_estimates(prior: Sequence[RegionEstimate], results: Sequence[ExperimentResult],
                     plan: ExperimentPlan,
                     control_pool: Sequence[ExperimentResult] = ()) -> list[RegionEstimate]:
    """Fold one round of results into estimates, measured against the control cohort.

    Estimates for regions measured this round replace older ones; carried
    estimates are kept as they are.  Invalid results are dropped.
    ``control_pool`` holds control results from earlier rounds of the same
    search; controls promote nothing, so they pool with this round's.
    """
    control_id = plan.control.assignment.experiment_id if plan.control else None
    by_id: dict[str, list[ExperimentResult]] = {}
    for r in results:
        if r.valid:
            by_id.setdefault(r.experiment_id, []).append(r)

    control = [r.runtime_delta for r in control_pool if r.valid] + \
        [r.runtime_delta for r in by_id.get(control_id, [])]
    groups = {}
    for cohort in plan.cohorts:
        rs = by_id.get(cohort.assignment.experiment_id)
        if rs:
            groups[cohort.assignment.promote_regions[0]] = rs

    # Run-to-run noise is the same for every assignment, so the variance is
    # pooled over all cohorts and the control (pooled two-sample t).
    samples = [[r.runtime_delta for r in rs] for rs in groups.values()]
    if len(control) > 0:
        samples.append(control)
    dof = sum(len(v) - 1 for v in samples if len(v) > 1)
    pooled = sum(float(np.var(v, ddof=1)) * (len(v) - 1) for v in samples if len(v) > 1) / dof \
        if dof else math.inf
    base_mean = float(np.mean(control)) if control else 0.0
    base_term = 1 / len(control) if control else 0.0

    fresh = {}
    for region, rs in groups.items():
        n = len(rs)
        mean = float(np.mean([r.runtime_delta for r in rs]))
        se = math.sqrt(pooled * (1 / n + base_term)) if n > 1 else math.inf
        fresh[region] = RegionEstimate(region, mean - base_mean, se, n,
                                       int(round(np.mean([r.fragmentation_bytes for r in rs]))))
    merged = {e.region: e for e in prior}
    for e in plan.carried:
        merged.setdefault(e.region, e)
    measured = [cohort.assignment.promote_regions[0] for cohort in plan.cohorts]
    for parent in list(merged):
        # A parent split this round is superseded by its pieces.
        if parent not in fresh and any(parent.contains(m) and parent != m for m in measured):
            del merged[parent]
    merged.update(fresh)
    return sorted(merged.values(), key=lambda e: e.region.start)


@dataclass
class SearchOutcome:
    surviving: list
    estimates: list
    rounds: int
    machine_experiments: int
    plans: list = field(default_factory=list)


def run_search(execute: Callable[[Sequence[tuple]], Sequence[ExperimentResult]],
               space: AddressRegion, machines: int = 64, branching: int = 8,
               epsilon: float = DEFAULT_EPSILON, process: str = "",
               max_rounds: int = 32) -> SearchOutcome:
    """Drive plan/measure/update rounds until no surviving chunk can be split.

    ``execute`` receives ``(assignment, machine_count)`` pairs and returns
    every result produced.
    """
    estimates: list[RegionEstimate] = []
    controls: list[ExperimentResult] = []
    plans = []
    used = 0
    rnd = 0
    while rnd < max_rounds:
        plan = plan_round(estimates, space, rnd, machines, branching, epsilon, process)
        plans.append(plan)
        if plan.done:
            break
        work = [(c.assignment, c.machine_count) for c in plan.cohorts]
        if plan.control:
            work.append((plan.control.assignment, plan.control.machine_count))
        used += plan.machines
        results = execute(work)
        estimates = update_estimates(
            [e for e in estimates if e.region in set(plan.surviving_regions)], results, plan,
            controls)
        control_id = plan.control.assignment.experiment_id
        controls.extend(r for r in results if r.experiment_id == control_id)
        rnd += 1
    final = plans[-1]
    surviving = list(final.surviving_regions) if final.done else \
        [e.region for e in estimates if not e.prunable(epsilon)]
    return SearchOutcome(surviving, estimates, rnd, used, plans)
