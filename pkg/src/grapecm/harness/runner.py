"""Scenario drivers.  Each builds a fleet, wires it to a cluster manager and returns a report dict."""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from ..agent import US, NodeAgent
from ..cm import (
    DEFAULT_RULES, ClusterManager, CollectionSchedule, CompactionDecision, PromotionDecision,
    RunRecord, adapt_interval, compile_preset, max_concurrency, run_search, schedule_background,
    select_promotion_set,
)
from ..cm.search import RegionEstimate
from ..policy import AddressRegion, CompactionSchedule, PresetPolicy
from ..wire import (
    CM_ID, ExperimentAssignment, InProcessTransport, TcpServer, TcpTransport, decode, encode,
    encode_region,
)
from ..workloads import get_model
from . import report as rpt
from .scenario import Scenario

class Fleet:
    """A cluster manager plus ``n`` node agents connected over the scenario's transport."""

    def __init__(self, sc: Scenario, n: Optional[int] = None, preset: Optional[PresetPolicy] = None,
                 **agent_kwargs):
        self.cm = ClusterManager(rules=sc.rules if sc.rules is not None else DEFAULT_RULES)
        self.server = None
        if sc.transport == "socket":
            self.server = TcpServer(self.cm).start()
        self.preset = preset if preset is not None else sc.base_preset()
        self.agents: list[NodeAgent] = []
        for i in range(sc.node_count if n is None else n):
            transport = TcpTransport("127.0.0.1", self.server.port) if self.server \
                else InProcessTransport(self.cm)
            kw = dict(agent_kwargs)
            kw.setdefault("hardware_class", "std")
            self.agents.append(NodeAgent(f"node-{i:04d}", self.preset, transport,
                                         seed=[sc.seed, i], cm_rtt_us=sc.cm_rtt_us, **kw))

    def push_experiment(self, i: int, assignment) -> float:
        result = decode(encode(self.cm.push(self.agents[i].node_id, assignment)))
        return result.runtime_delta

    def register(self):
        for a in self.agents:
            self.cm.register_agent(a.hello(), a.handle)

    def close(self):
        for a in self.agents:
            if isinstance(a.transport, TcpTransport):
                a.transport.close()
        if self.server is not None:
            self.server.stop()


def _only_model(sc: Scenario):
    name, nodes = next(iter(sc.workloads.items()))
    return name, nodes


# --- fault latency ------------------------------------------------------------

def run_fault_latency(sc: Scenario) -> dict:
    """Sample page-fault latencies under either the stock-kernel mixture or a preset."""
    name, nodes = _only_model(sc)
    p = sc.params
    fleet = Fleet(sc, mode=sc.baseline_mode,
                  huge_alloc_fail_prob=float(p.get("huge_alloc_fail_prob", 0.0)),
                  report_interval=p.get("report_interval"))
    try:
        for i in nodes:
            fleet.agents[i].start_process(get_model(name), priority=1)
        fleet.register()
        target = int(p.get("faults", 0))
        end = int(sc.duration * US)
        active = [fleet.agents[i] for i in nodes]
        for a in active:
            a.step(end)
        # Top up in one-second steps until the requested fault count is reached.
        extra = 0
        while target and sum(a.counters["faults"] for a in active) < target:
            extra += 1
            if extra > 3600:
                raise RuntimeError("workload produced too few faults to reach the target")
            for a in active:
                a.step(end + extra * US)
        lat = np.concatenate([np.frombuffer(a.latencies) for a in active])
        if target:
            lat = lat[:target]
        for a in active:
            a.check_conservation()
        counters = {k: int(sum(a.counters[k] for a in active))
                    for k in ("faults", "fallbacks", "cm-unreachable", "huge-alloc-failures")}
        classes = {k[len("fault."):]: int(sum(a.counters[k] for a in active))
                   for k in active[0].counters if k.startswith("fault.")}
        faults = max(counters["faults"], 1)
        return {
            "faults_sampled": int(lat.size),
            "latency_us": {**rpt.percentiles(lat), "histogram": rpt.log_histogram(lat),
                           "min": float(lat.min()), "max": float(lat.max())},
            "span_decades": rpt.span_decades(lat),
            "fraction_above_1ms": float((lat > 1e3).mean()),
            "fallback_share": counters["fallbacks"] / faults,
            "counters": counters,
            "fault_classes": classes,
            "cm": {"queries": fleet.cm.queries, "alerts": len(fleet.cm.alerts)},
            "virtual_seconds": active[0].clock / US,
        }
    finally:
        fleet.close()


# --- promotion benefit curves -------------------------------------------------

def _budget_bytes(budget, full_frag: int) -> Optional[int]:
    if budget is None:
        return None
    if isinstance(budget, str):
        return int(full_frag * float(budget[:-1]) / 100)
    return int(budget)


def _measured_estimates(fleet: Fleet, model, process: str):
    """One singleton experiment per candidate region on every node."""
    control = ExperimentAssignment(CM_ID, f"{process}/profile/control", process, (), 900)
    base = np.array([fleet.push_experiment(i, control) for i in range(len(fleet.agents))])
    out = []
    for r in model.candidates():
        a = ExperimentAssignment(CM_ID, f"{process}/profile/{encode_region(r.region)}", process,
                                 (r.region,), 900)
        deltas = np.array([fleet.push_experiment(i, a) for i in range(len(fleet.agents))])
        n = len(deltas)
        se = math.sqrt(deltas.var(ddof=1) / n + base.var(ddof=1) / n) if n > 1 else math.inf
        out.append(RegionEstimate(r.region, float(deltas.mean() - base.mean()), se, n, r.frag_cost))
    return out


def run_promotion_curve(sc: Scenario) -> dict:
    """Runtime and page-walk gains as a growing share of candidate regions is promoted."""
    name, nodes = _only_model(sc)
    model = get_model(name)
    fleet = Fleet(sc, noise_sigma=sc.search.noise_sigma)
    try:
        for i in range(len(fleet.agents)):
            fleet.agents[i].start_process(get_model(name))
        fleet.register()
        cands = [r.region for r in model.candidates()]
        order = np.random.default_rng(np.random.SeedSequence([sc.seed, 0xF3])).permutation(len(cands))
        points = int(sc.params.get("points", 11))
        rows = []
        for j, frac in enumerate(np.linspace(0.0, 1.0, points)):
            k = int(round(frac * len(cands)))
            regions = tuple(sorted(cands[i] for i in order[:k]))
            a = ExperimentAssignment(CM_ID, f"{name}/curve/{j}", name, regions, 900)
            results = [decode(encode(fleet.cm.push(ag.node_id, a))) for ag in fleet.agents]
            rows.append({
                "fraction": float(frac), "regions": k,
                "runtime_gain": float(np.mean([r.runtime_delta for r in results])),
                "load_walk_reduction": float(np.mean([r.load_page_walk_delta for r in results])),
                "store_walk_reduction": float(np.mean([r.store_page_walk_delta for r in results])),
                "frag_bytes": int(results[0].fragmentation_bytes),
            })
        out = {
            "model": name, "candidates": len(cands), "nodes": len(fleet.agents),
            "curve": rows,
            "full_promotion": {"runtime_gain": rows[-1]["runtime_gain"],
                               "walk_reduction": rows[-1]["load_walk_reduction"],
                               "model_benefit": model.total_benefit,
                               "frag_bytes": model.total_frag},
        }
        budget = _budget_bytes(sc.frag_budget, model.total_frag)
        if budget is not None:
            estimates = _measured_estimates(fleet, model, name)
            chosen = select_promotion_set(estimates, budget)
            true_benefit, _, true_frag = model.promotion_effect(chosen.regions)
            out["promotion_set"] = {
                "frag_budget_bytes": budget,
                "regions": [encode_region(r) for r in chosen.regions],
                "estimated_benefit": chosen.total_benefit,
                "benefit_fraction": true_benefit / model.total_benefit,
                "frag_fraction": true_frag / model.total_frag,
                "frag_saving": 1 - true_frag / model.total_frag,
            }
        return out
    finally:
        fleet.close()


# --- eager vs demand paging ---------------------------------------------------

def run_paging(sc: Scenario) -> dict:
    """Request latency of a fault-sensitive service under the preset's paging mode."""
    name, nodes = _only_model(sc)
    p = sc.params
    requests = int(p.get("requests", 2000))
    base_ms = float(p.get("base_latency_ms", 17.0))
    sigma = float(p.get("latency_sigma", 0.05))
    fleet = Fleet(sc, mode="preset-only", record_latencies=False)
    try:
        rows, all_lat = [], []
        for i in nodes:
            agent = fleet.agents[i]
            model = get_model(name)
            action = agent.start_process(model)
            eager = action.kind == "alloc-eager"
            # Demand faults stall a request by base * g / (1 - g) on average, so that
            # eager paging removes the fraction g of a demand-paged request's latency.
            g = model.paging.eager_latency_gain
            stall_us = base_ms * 1e3 * g / (1 - g)
            per_request = 0 if eager else int(round(stall_us / agent.latency_model.mean("fast-base")))
            rng = np.random.default_rng(np.random.SeedSequence([sc.seed, i, 0x9A]))
            service = base_ms * rng.lognormal(0.0, sigma, requests)
            stall = np.array([agent.fault_batch(name, r % model.address_space, per_request).sum()
                              for r in range(requests)]) / 1e3 if per_request else np.zeros(requests)
            lat = service + stall
            all_lat.append(lat)
            footprint = model.footprint_bytes
            bloat = (agent.mem_used - footprint) / footprint if eager else 0.0
            run = RunRecord("eager" if eager else "demand", float(np.median(lat)),
                            model.paging.eager_alloc_penalty if eager else 0.0, bloat)
            fleet.cm.record_run(name, run)
            if not eager:
                fleet.cm.record_run(name, RunRecord("passive", None, model.paging.eager_alloc_penalty,
                                                    model.paging.eager_bloat, g))
            rows.append({"node": agent.node_id, "mode": run.paging_mode, "p50_ms": run.latency_p50,
                         "faults": int(agent.counters["faults"]), "mem_bloat": bloat})
        lat = np.concatenate(all_lat)
        decision = fleet.cm.classify(name)
        return {
            "model": name, "requests": int(lat.size),
            "latency_ms": {**rpt.percentiles(lat), "histogram": rpt.log_histogram(lat)},
            "nodes": rows,
            "classifier": {"mode": decision.mode, "needs_observation": decision.needs_observation,
                           "latency_gain": decision.latency_gain},
        }
    finally:
        fleet.close()


# --- region search ------------------------------------------------------------

def run_search_scenario(sc: Scenario) -> dict:
    """Region-narrowing search for planted hot regions, then budgeted promotion."""
    name, nodes = _only_model(sc)
    p = sc.params
    kwargs = {}
    if "planted" in p:
        kwargs["hot"] = tuple(p["planted"])
    model = get_model(name, **kwargs)
    planted = sorted(r.region for r in model.regions if r.benefit >= float(p.get("hot_threshold", 0.01)))
    sp = sc.search
    machines = [nodes[i % len(nodes)] for i in range(sp.M)] if len(nodes) < sp.M else nodes[:sp.M]
    fleet = Fleet(sc, noise_sigma=sp.noise_sigma)
    try:
        for i in sorted(set(machines)):
            fleet.agents[i].start_process(get_model(name, **kwargs))
        fleet.register()

        def execute(work):
            out, k = [], 0
            for assignment, count in work:
                for _ in range(count):
                    agent = fleet.agents[machines[k % len(machines)]]
                    out.append(decode(encode(fleet.cm.push(agent.node_id, assignment))))
                    k += 1
            return out

        outcome = run_search(execute, AddressRegion(0, model.address_space), machines=sp.M,
                             branching=sp.K, epsilon=sp.epsilon, process=name,
                             max_rounds=sp.max_rounds)
        fleet.cm.set_estimates(name, outcome.estimates)
        alive = [e for e in outcome.estimates if not e.prunable(sp.epsilon)]
        report = {
            "model": name,
            "planted": [encode_region(r) for r in planted],
            "surviving": [encode_region(r) for r in outcome.surviving],
            "found": sorted(outcome.surviving) == planted,
            "rounds": outcome.rounds,
            "machine_experiments": outcome.machine_experiments,
            "round_plans": [{"round": pl.round, "cohorts": len(pl.cohorts),
                             "chunk_regions": sorted({c.assignment.promote_regions[0].length
                                                      for c in pl.cohorts}),
                             "machines": pl.machines, "surviving": len(pl.surviving_regions)}
                            for pl in outcome.plans],
            "estimates": [{"region": encode_region(e.region), "mean": e.mean_benefit,
                           "stderr": e.stderr, "samples": e.samples} for e in alive],
        }
        budget = _budget_bytes(sc.frag_budget, model.total_frag)
        if budget is not None:
            chosen = select_promotion_set(alive, budget)
            benefit, _, frag = model.promotion_effect(chosen.regions)
            preset = compile_preset(fleet.preset, [PromotionDecision(name, chosen.regions)])
            sent = fleet.cm.broadcast_preset("std", preset)
            report["promotion_set"] = {
                "regions": [encode_region(r) for r in chosen.regions],
                "benefit_fraction": benefit / model.total_benefit,
                "frag_fraction": frag / model.total_frag,
                "preset_version": preset.version, "nodes_updated": sent,
            }
        return report
    finally:
        fleet.close()


# --- background-task coordination ---------------------------------------------

def _merge(intervals):
    out = []
    for s, e in sorted(intervals):
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return out


def _stalled(intervals, t):
    if not intervals:
        return np.zeros(t.shape, dtype=bool)
    starts = np.array([s for s, _ in intervals])
    ends = np.array([e for _, e in intervals])
    idx = np.searchsorted(starts, t, side="right") - 1
    ok = idx >= 0
    res = np.zeros(t.shape, dtype=bool)
    res[ok] = t[ok] < ends[idx[ok]]
    return res


def _peak(intervals_by_node) -> int:
    edges = sorted([(s, 1) for iv in intervals_by_node for s, _ in iv] +
                   [(e, -1) for iv in intervals_by_node for _, e in iv])
    cur = peak = 0
    for _, d in edges:       # ends sort before starts at equal times (closed-open windows)
        cur += d
        peak = max(peak, cur)
    return peak


def run_coordination(sc: Scenario) -> dict:
    """Fan-out request tail latency while nodes run compaction, with or without the CM's schedule.

    Nodes ``i`` and ``i + N/2`` replicate one shard.  A request fans out to
    every shard and each shard answers from its faster replica; a replica
    inside a compaction window answers ``stall_ms`` late.
    """
    c = sc.schedules["compaction"]
    n = sc.node_count
    if n % 2:
        raise ValueError("coordination scenarios need an even node_count (replica pairs)")
    d, period, cap = float(c["duration"]), float(c["period"]), int(c["cap"])
    coordinated = bool(c.get("coordinated", True))
    stall_ms = float(c.get("stall_ms", 50.0))
    req = sc.params
    rate = float(req.get("request_rate", 10.0))
    base_ms = float(req.get("base_latency_ms", 2.0))
    sigma = float(req.get("latency_sigma", 0.25))
    horizon = sc.duration
    names = [f"node-{i:04d}" for i in range(n)]
    pairs = [(names[i], names[i + n // 2]) for i in range(n // 2)]

    out: dict = {"coordinated": coordinated, "nodes": n, "cap": cap, "period_s": period,
                 "window_s": d}
    if coordinated:
        base = PresetPolicy(version=1, page_compaction=CompactionSchedule(0, d, 0.02, period))
        windows = schedule_background(names, d, cap, period, limits=base.page_compaction,
                                      anti_affinity=pairs)
        out["scheduled_peak"] = max_concurrency(windows, period)
        fleet = Fleet(sc, preset=base, reclaim_interval=0, promotion_interval=0)
        try:
            for a in fleet.agents:
                a.hardware_class = a.node_id
            fleet.register()
            for a in fleet.agents:
                preset = compile_preset(base, [CompactionDecision(windows[a.node_id])])
                fleet.cm.broadcast_preset(a.node_id, preset)
            intervals = []
            for a in fleet.agents:
                events = a.step(int(horizon * US))
                intervals.append(_merge(
                    (e["t"] / US, e["t"] / US + e.get("duration", d)) for e in events
                    if e["kind"] == "decision" and e["point"] == "compaction-tick"
                    and e["action"] == "run-task"))
        finally:
            fleet.close()
    else:
        # Each node's own daemon picks an independent random time in every period.
        intervals = []
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence([sc.seed, i, 0xC0]))
            k = int(math.ceil(horizon / period))
            starts = np.arange(k) * period + rng.uniform(0, period - d, k)
            intervals.append(_merge((s, s + d) for s in starts if s < horizon))

    out["windows_run"] = sum(len(iv) for iv in intervals)
    out["measured_peak"] = _peak(intervals)

    rng = np.random.default_rng(np.random.SeedSequence([sc.seed, 0x5EED]))
    count = int(rng.poisson(rate * horizon))
    times = np.sort(rng.uniform(0, horizon, count))
    lat = np.empty(count)
    half = n // 2
    for lo in range(0, count, 4096):
        t = times[lo:lo + 4096]
        stalled = np.stack([_stalled(iv, t) for iv in intervals], axis=1)
        replica = base_ms * rng.lognormal(0.0, sigma, (t.size, n)) + stall_ms * stalled
        shard = np.minimum(replica[:, :half], replica[:, half:])
        lat[lo:lo + 4096] = shard.max(axis=1)
    out["requests"] = count
    out["latency_ms"] = {**rpt.percentiles(lat), "histogram": rpt.log_histogram(lat)}
    out["requests_stalled"] = float((lat >= stall_ms).mean())
    return out


# --- adaptive metrics collection ------------------------------------------------

def _change_rate(spec: dict, t0: float, t1: float, rng) -> float:
    kind = spec.get("change", "stable")
    if kind == "stable":
        return abs(float(rng.normal(0, 0.001)))
    if kind == "volatile":
        return 0.05 + abs(float(rng.normal(0, 0.01)))
    if kind == "burst":
        lo, hi = spec.get("burst", [200, 300])
        return 0.05 if t0 < hi and t1 > lo else abs(float(rng.normal(0, 0.001)))
    raise ValueError(f"unknown change model {kind!r}")


def run_metrics_budget(sc: Scenario) -> dict:
    """Adapt per-metric collection intervals for a fleet and audit bandwidth and staleness."""
    mb = sc.metric_budget
    n = sc.node_count
    size = int(mb.get("report_bytes", 4000))
    every = float(mb.get("adapt_every", 30.0))
    sched = CollectionSchedule(n, float(mb["bytes_per_s"]), float(mb.get("interval_min", 1.0)),
                               float(mb.get("drift_threshold", 0.01)))
    specs = {}
    for m in mb["metrics"]:
        for j in range(int(m.get("count", 1))):
            name = m["name"] if m.get("count", 1) == 1 else f"{m['name']}.{j}"
            sched.add(name, int(m.get("size_bytes", size)), float(m["staleness_bound"]))
            specs[name] = m
    raw = sched.bandwidth()
    sched.enforce_budget()
    rng = np.random.default_rng(np.random.SeedSequence([sc.seed, 0x3E7]))

    phase = np.arange(n) / n
    last = {k: (phase - 1) * m.interval for k, m in sched.metrics.items()}
    nxt = {k: phase * m.interval for k, m in sched.metrics.items()}
    worst_gap = {k: 0.0 for k in sched.metrics}
    windows = []
    t = 0.0
    while t < sc.duration - 1e-9:
        t1 = min(t + every, sc.duration)
        sent = 0
        for k, m in sched.metrics.items():
            lt, nt = last[k], nxt[k]
            while True:
                due = nt < t1
                if not due.any():
                    break
                worst_gap[k] = max(worst_gap[k], float((nt - lt)[due].max()))
                sent += int(due.sum())
                lt = np.where(due, nt, lt)
                nt = np.where(due, nt + m.interval, nt)
            last[k], nxt[k] = lt, nt
        windows.append({"start": t, "end": t1, "scheduled_bytes_per_s": sched.bandwidth(),
                        "measured_bytes_per_s": sent * size / (t1 - t)})
        for k in sched.metrics:
            adapt_interval(sched, k, _change_rate(specs[k], t, t1, rng))
        for k, m in sched.metrics.items():
            # Re-time the pending report against the new interval; never later than the bound allows.
            nxt[k] = np.maximum(np.minimum(nxt[k], last[k] + m.interval), t1)
        t = t1

    bounds = {k: m.staleness_bound for k, m in sched.metrics.items()}
    return {
        "nodes": n, "metrics": len(sched.metrics), "raw_demand_bytes_per_s": raw,
        "budget_bytes_per_s": sched.budget_bytes_per_s,
        "max_scheduled_bytes_per_s": max(w["scheduled_bytes_per_s"] for w in windows),
        "max_measured_bytes_per_s": max(w["measured_bytes_per_s"] for w in windows),
        "windows": windows,
        "intervals": {k: m.interval for k, m in sched.metrics.items()},
        "worst_gap_s": worst_gap,
        "staleness_ok": all(worst_gap[k] <= bounds[k] + 1e-9 for k in bounds),
    }


DRIVERS: dict[str, Callable[[Scenario], dict]] = {
    "fault-latency": run_fault_latency,
    "promotion-curve": run_promotion_curve,
    "paging": run_paging,
    "search": run_search_scenario,
    "coordination": run_coordination,
    "metrics-budget": run_metrics_budget,
}


def run(sc: Scenario) -> dict:
    """Run one scenario; the report echoes the full config and seed."""
    results = DRIVERS[sc.kind](sc)
    return {"scenario": sc.source, "name": sc.name, "kind": sc.kind, "seed": sc.seed,
            "description": sc.description, "results": results}
