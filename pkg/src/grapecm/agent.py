"""Discrete-event simulated kernel that delegates every policy to presets and the CM."""

from __future__ import annotations

import heapq
import logging
from array import array
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from itertools import accumulate
from typing import Optional

import numpy as np

from . import policy as pol
from .policy import (
    Action, ActiveModification, AddressRegion, DecisionContext, Fallback,
    PresetPolicy, apply_modification, evaluate, seconds_to_us,
)
from .wire import (
    ExperimentAssignment, ExperimentResult, Hello, Message, MetricsReport,
    PolicyQuery, PolicyResponse, PresetDownload, PresetUpdate, ProcessInfo,
    ProtocolError,
)
from .workloads import FAULT_CLASSES, LINUX_BASELINE, FaultLatencyModel, WorkloadModel

log = logging.getLogger(__name__)

US = 1_000_000
LATENCY_EDGES = (1.0, 10.0, 100.0, 1e3, 1e4, 1e5)
LATENCY_BUCKETS = ("lat.le-1us", "lat.le-10us", "lat.le-100us", "lat.le-1ms",
                   "lat.le-10ms", "lat.le-100ms", "lat.gt-100ms")
DAEMON_TASKS = ("page-zeroing", "page-compaction", "dirty-access-bit-scan", "mem-reclaim")

ACTION_CLASS = {
    "alloc-huge-page": "huge-alloc",
    "share-cow": "cow-share",
    "break-cow": "cow-share",
}

QUERY_TYPES = {
    "cow-break": "cow-unspecified",
    "mem-alloc": "mem-alloc-unspecified",
    "oom": "oom-unspecified",
    "reclaim-tick": "reclaim-unspecified",
    "compaction-tick": "compaction-unspecified",
    "zeroing-tick": "zeroing-unspecified",
    "promotion-tick": "promotion-unspecified",
    "page-fault": "fault-unspecified",
}

MODES = ("preset-only", "linux-model")


class SimulationError(RuntimeError):
    pass


@dataclass
class FaultOutcome:
    action: str
    latency_us: float
    klass: str
    fallback: bool = False


@dataclass
class ProcessRun:
    model: WorkloadModel
    started_us: int
    ends_us: int
    priority: int = 0
    eager: bool = False
    stream: "_FaultStream" = None


class _Uniforms:
    """Fixed-size refills keep consumption independent of how steps are split."""

    def __init__(self, rng: np.random.Generator, block: int = 1 << 14):
        self.rng = rng
        self.block = block
        self.buf: list = []
        self.i = 0

    def __call__(self) -> float:
        if self.i >= len(self.buf):
            self.buf = self.rng.random(self.block).tolist()
            self.i = 0
        u = self.buf[self.i]
        self.i += 1
        return u


class _FaultStream:
    """Poisson fault arrivals for one process, drawn in fixed blocks."""

    BLOCK = 4096

    def __init__(self, model: WorkloadModel, rng: np.random.Generator, start_us: int,
                 end_us: int, rate: float, cow_fraction: float):
        self.model = model
        self.rng = rng
        self.rate = rate
        self.cow_fraction = cow_fraction
        self.end_us = end_us
        self.t = float(start_us)
        self.pending: list = []   # (t_us, unit, cow) not yet consumed

    def _refill(self):
        n = self.BLOCK
        gaps = self.rng.exponential(US / self.rate, n)
        times = self.t + np.cumsum(gaps)
        self.t = float(times[-1])
        units = self.model.touched_units[self.rng.integers(0, len(self.model.touched_units), n)]
        cow = self.rng.random(n) < self.cow_fraction
        self.pending.extend(zip(np.floor(times).astype(np.int64).tolist(),
                                units.tolist(), cow.tolist()))

    def take_until(self, until_us: int) -> list:
        if self.rate <= 0:
            return []
        limit = min(until_us, self.end_us - 1)
        out = []
        while True:
            if not self.pending:
                if self.t > limit:
                    break
                self._refill()
            idx = bisect_right(self.pending, (limit, float("inf"), True))
            out.extend(self.pending[:idx])
            del self.pending[:idx]
            if self.pending:
                break
        return out


class NodeAgent:
    """One simulated kernel.

    All policy comes from the downloaded preset plus active temporary
    modifications; anything the preset leaves open is sent to the cluster
    manager through ``transport``.  ``mode="linux-model"`` instead samples
    fault outcomes from the stock kernel's latency mixture.
    """

    def __init__(self, node_id: str, preset: Optional[PresetPolicy] = None, transport=None,
                 seed: int = 0, mode: str = "preset-only",
                 latency_model: FaultLatencyModel = LINUX_BASELINE, cm_rtt_us: float = 50.0,
                 huge_alloc_fail_prob: float = 0.0, report_interval: Optional[float] = None,
                 hardware_class: str = "std", noise_sigma: float = 0.003,
                 reclaim_interval: float = 60.0, promotion_interval: float = 10.0,
                 fail_fast_action: str = "alloc-base-page", check_invariants: bool = False,
                 record_latencies: bool = True):
        if mode not in MODES:
            raise ValueError(f"unknown node mode: {mode}")
        self.node_id = node_id
        self.hardware_class = hardware_class
        self.transport = transport
        self.mode = mode
        self.latency_model = latency_model
        self.cm_rtt_us = cm_rtt_us
        self.huge_alloc_fail_prob = huge_alloc_fail_prob
        self.report_interval = report_interval
        self.noise_sigma = noise_sigma
        self.reclaim_interval = reclaim_interval
        self.promotion_interval = promotion_interval
        self.fail_fast_action = fail_fast_action
        self.check_invariants = check_invariants
        self.record_latencies = record_latencies

        self.seed_seq = np.random.SeedSequence(seed)
        fault_ss, exp_ss, batch_ss, self._proc_ss = self.seed_seq.spawn(4)
        self.uniform = _Uniforms(np.random.default_rng(fault_ss))
        self.exp_rng = np.random.default_rng(exp_ss)
        self.batch_rng = np.random.default_rng(batch_ss)

        self.clock = 0
        self.preset = preset if preset is not None else PresetPolicy()
        self.mods: list[ActiveModification] = []
        self.processes: dict[str, ProcessRun] = {}
        self.base_bytes: dict[str, int] = {}
        self.promoted: dict[str, dict[AddressRegion, int]] = {}
        self.mem_used = 0
        self.counters: dict[str, float] = {}
        self.cpu_seconds = {t: 0.0 for t in DAEMON_TASKS}
        self.latencies = array("d")
        self.events: list[dict] = []
        self.outbox: list[Message] = []
        self._heap: list = []
        self._seq = 0
        self._decisions: dict = {}
        self._decisions_valid_until = 0
        self._last_report_us = 0
        self._linux_cum = None
        self._reset_counters()
        self._schedule_ticks()

    # --- bookkeeping ------------------------------------------------------

    def _reset_counters(self):
        names = ["faults"] + [f"fault.{c}" for c in FAULT_CLASSES] + list(LATENCY_BUCKETS) + [
            "fallbacks", "cm-unreachable", "huge-alloc-failures", "mem-used"] + [
            f"cpu.{t}" for t in DAEMON_TASKS]
        self.counters = {n: 0 for n in names}

    def _push(self, t_us: int, kind: str, data=None):
        heapq.heappush(self._heap, (t_us, self._seq, kind, data))
        self._seq += 1

    def _schedule_ticks(self):
        self._heap = [e for e in self._heap if e[2] in ("exit",)]
        heapq.heapify(self._heap)
        p = self.preset
        if isinstance(p.page_zeroing, pol.PeriodicTask):
            self._push(self.clock + seconds_to_us(p.page_zeroing.interval), "zeroing-tick")
        if isinstance(p.dirty_access_bit_scan, pol.PeriodicTask):
            self._push(self.clock + seconds_to_us(p.dirty_access_bit_scan.interval), "scan")
        if isinstance(p.page_compaction, pol.CompactionSchedule):
            self._push(self._next_compaction(self.clock + 1), "compaction-tick")
        if self.reclaim_interval:
            self._push(self.clock + seconds_to_us(self.reclaim_interval), "reclaim-tick")
        if self.promotion_interval:
            self._push(self.clock + seconds_to_us(self.promotion_interval), "promotion-tick")
        if self.report_interval:
            self._push(max(self._last_report_us + seconds_to_us(self.report_interval), self.clock),
                       "report")

    def _next_compaction(self, after_us: int) -> int:
        c = self.preset.page_compaction
        period, when = seconds_to_us(c.period), seconds_to_us(c.when)
        k = -(-(after_us - when) // period)
        return when + max(k, 0) * period

    def set_preset(self, preset: PresetPolicy):
        problems = pol.validate_preset(preset)
        if problems:
            raise ValueError("invalid preset: " + "; ".join(problems))
        self.preset = preset
        self._decisions.clear()
        self._schedule_ticks()

    def apply_modification(self, m: pol.PresetModification, now: Optional[int] = None):
        now = self.clock if now is None else now
        self.mods = apply_modification(self.preset, self.mods, m, now)
        self._decisions.clear()

    def closed_form_mem_used(self) -> int:
        return sum(self.base_bytes.values()) + sum(
            f for regions in self.promoted.values() for f in regions.values())

    def check_conservation(self):
        expected = self.closed_form_mem_used()
        if expected != self.mem_used:
            raise SimulationError(
                f"{self.node_id}: mem_used {self.mem_used} != closed form {expected}")

    # --- processes --------------------------------------------------------

    def start_process(self, model: WorkloadModel, priority: int = 0,
                      region: Optional[AddressRegion] = None) -> Action:
        if model.name in self.processes:
            raise ValueError(f"process {model.name} already running on {self.node_id}")
        n = len(self.processes)
        rng = np.random.default_rng(self._proc_ss.spawn(n + 1)[n])
        ends = self.clock + seconds_to_us(model.runtime_base)
        ctx = self._context("mem-alloc", model.name, region or AddressRegion(0, 1))
        action = self.decide(ctx)
        eager = action.kind == "alloc-eager"
        rate = model.fault_rate * (model.cow_fraction if eager else 1.0)
        cow = 1.0 if eager else model.cow_fraction
        run = ProcessRun(model, self.clock, ends, priority, eager,
                         _FaultStream(model, rng, self.clock, ends, rate, cow))
        self.processes[model.name] = run
        self.base_bytes.setdefault(model.name, 0)
        self.promoted.setdefault(model.name, {})
        if eager:
            self._alloc(model.name, int(model.footprint_bytes * (1 + model.paging.eager_bloat)))
        self._push(ends, "exit", model.name)
        self.events.append({"t": self.clock, "kind": "start", "process": model.name,
                            "action": action.kind})
        return action

    def _alloc(self, process: str, nbytes: int):
        self.base_bytes[process] = self.base_bytes.get(process, 0) + nbytes
        self.mem_used += nbytes

    def _promote(self, process: str, region: AddressRegion):
        regions = self.promoted.setdefault(process, {})
        if region in regions:
            return
        run = self.processes.get(process)
        frag = 0
        if run is not None and run.model.covers(region):
            frag = run.model.promotion_effect([region])[2]
        regions[region] = frag
        self.mem_used += frag

    def hello(self) -> Hello:
        manifest = tuple(ProcessInfo(name, run.priority) for name, run in self.processes.items())
        return Hello(self.node_id, self.node_id, self.hardware_class, manifest)

    # --- decisions --------------------------------------------------------

    def _context(self, point: str, process: str, region=None, t_us=None) -> DecisionContext:
        return DecisionContext(point, process, region, self.mem_used, 0.0,
                               self.clock if t_us is None else t_us)

    def decide(self, ctx: DecisionContext) -> Action:
        """Evaluate the preset; on fallback ask the CM and apply what it returns."""
        result = evaluate(self.preset, self.mods, ctx)
        if isinstance(result, Action):
            return result
        self.counters["fallbacks"] += 1
        qtype = "bad-context" if result.reason == "bad-context" else QUERY_TYPES[ctx.decision_point]
        return self.query(qtype, ctx.process, {"error": "unspecified-policy"}, ctx.virtual_time)

    def query(self, qtype: str, process: str, context: dict, t_us: int) -> Action:
        ctx = {**context, "current-mem-usage": round(self.mem_used / (1 << 30), 3),
               "cpu-usage": 0.0}
        q = PolicyQuery(self.node_id, qtype, process, ctx)
        try:
            if self.transport is None:
                raise ConnectionError("no cluster manager attached")
            reply = self.transport.request(q)
            if not isinstance(reply, PolicyResponse):
                raise ProtocolError(f"expected policy-response, got {reply.msg_type}")
        except (ConnectionError, OSError, ProtocolError) as exc:
            self.counters["cm-unreachable"] += 1
            self.events.append({"t": t_us, "kind": "cm-unreachable", "type": qtype,
                                "error": str(exc)})
            return Action(self.fail_fast_action)
        for m in reply.temporary_modify_preset:
            try:
                self.mods = apply_modification(self.preset, self.mods, m, t_us)
            except ValueError as exc:
                log.warning("%s: rejected modification: %s", self.node_id, exc)
        if reply.temporary_modify_preset:
            self._decisions.clear()
        self.events.append({"t": t_us, "kind": "query", "type": qtype, "process": process,
                            "action": reply.action.kind,
                            "mods": len(reply.temporary_modify_preset)})
        return reply.action

    def _cached_fault_decision(self, process: str, unit: int, cow: bool, t_us: int):
        if t_us >= self._decisions_valid_until:
            self._decisions.clear()
            live = [a.expires_at for a in self.mods if a.expires_at > t_us]
            self._decisions_valid_until = min(live, default=1 << 62)
            if any(a.applied_at > t_us for a in self.mods):
                self._decisions_valid_until = min(self._decisions_valid_until,
                                                  min(a.applied_at for a in self.mods if a.applied_at > t_us))
        key = (process, unit, cow)
        hit = self._decisions.get(key)
        if hit is None:
            point = "cow-break" if cow else "page-fault"
            hit = evaluate(self.preset, self.mods,
                           DecisionContext(point, process, AddressRegion(unit, 1), 0, 0.0, t_us))
            self._decisions[key] = hit
        return hit

    # --- faults -----------------------------------------------------------

    def _sample(self, klass: str) -> float:
        _, lo, hi = self.latency_model.classes[klass]
        return lo * (hi / lo) ** self.uniform()

    def _linux_class(self) -> str:
        if self._linux_cum is None:
            names = [c for c in FAULT_CLASSES if c != "cow-share"]
            probs = [self.latency_model.classes[c][0] for c in names]
            total = sum(probs)
            self._linux_cum = (names, list(accumulate(p / total for p in probs)))
        names, cum = self._linux_cum
        return names[min(bisect_left(cum, self.uniform()), len(names) - 1)]

    def on_page_fault(self, process: str, region: AddressRegion, cow: bool = False,
                      t_us: Optional[int] = None) -> FaultOutcome:
        if process not in self.processes:
            raise ValueError(f"process {process} is not running on {self.node_id}")
        return self._fault(process, region.start, cow, self.clock if t_us is None else t_us,
                           region)

    def _fault(self, process, unit, cow, t_us, region=None) -> FaultOutcome:
        fallback = False
        if self.mode == "linux-model":
            klass = "cow-share" if cow else self._linux_class()
            latency = self._sample(klass)
            kind = {"huge-alloc": "alloc-huge-page", "cow-share": "break-cow"}.get(klass, "alloc-base-page")
            if klass == "huge-alloc":
                self._promote(process, AddressRegion(unit, 1))
        else:
            if region is None or region.length == 1:
                decision = self._cached_fault_decision(process, unit, cow, t_us)
            else:
                decision = evaluate(self.preset, self.mods, DecisionContext(
                    "cow-break" if cow else "page-fault", process, region, 0, 0.0, t_us))
            latency = 0.0
            if isinstance(decision, Fallback):
                fallback = True
                self.counters["fallbacks"] += 1
                qtype = "bad-context" if decision.reason == "bad-context" else \
                    QUERY_TYPES["cow-break" if cow else "page-fault"]
                decision = self.query(qtype, process, {"error": "unspecified-policy"}, t_us)
                latency += self.cm_rtt_us
            if decision.kind == "alloc-huge-page" and self.uniform() < self.huge_alloc_fail_prob:
                # Fail fast: no local compaction or reclaim, hand the case to the CM.
                fallback = True
                self.counters["fallbacks"] += 1
                self.counters["huge-alloc-failures"] += 1
                latency += self._sample("fast-base") + self.cm_rtt_us
                decision = self.query("alloc-failure", process,
                                      {"error": "page-fault-huge-page-alloc"}, t_us)
            kind = decision.kind
            klass = ACTION_CLASS.get(kind, "fast-base")
            latency += self._sample(klass)
            if kind == "alloc-huge-page":
                self._promote(process, decision.args.get("region", AddressRegion(unit, 1)))
        self._alloc(process, self.preset.page_size_default)
        self._record(klass, latency)
        return FaultOutcome(kind, latency, klass, fallback)

    def _record(self, klass: str, latency: float):
        c = self.counters
        c["faults"] += 1
        c["fault." + klass] += 1
        c[LATENCY_BUCKETS[bisect_left(LATENCY_EDGES, latency)]] += 1
        if self.record_latencies:
            self.latencies.append(latency)

    def fault_batch(self, process: str, unit: int, n: int) -> np.ndarray:
        """Latencies of ``n`` demand faults at one region, vectorized when the preset decides locally."""
        decision = self._cached_fault_decision(process, unit, False, self.clock)
        if self.mode != "preset-only" or not isinstance(decision, Action) \
                or decision.kind == "alloc-huge-page":
            return np.array([self._fault(process, unit, False, self.clock).latency_us
                             for _ in range(n)])
        klass = ACTION_CLASS.get(decision.kind, "fast-base")
        _, lo, hi = self.latency_model.classes[klass]
        lat = lo * (hi / lo) ** self.batch_rng.random(n)
        self.counters["faults"] += n
        self.counters["fault." + klass] += n
        for b, cnt in zip(*np.unique(np.searchsorted(LATENCY_EDGES, lat), return_counts=True)):
            self.counters[LATENCY_BUCKETS[b]] += int(cnt)
        self._alloc(process, n * self.preset.page_size_default)
        return lat

    # --- event loop -------------------------------------------------------

    def step(self, until_us: int) -> list[dict]:
        """Run every event with timestamp <= ``until_us``; returns the events emitted."""
        if until_us < self.clock:
            raise ValueError("cannot step backwards in virtual time")
        first = len(self.events)
        faults = []
        for order, (name, run) in enumerate(self.processes.items()):
            if run.stream is not None:
                faults.extend((t, order, unit, cow, name)
                              for t, unit, cow in run.stream.take_until(until_us))
        faults.sort()
        fi, nf = 0, len(faults)
        heap = self._heap
        while True:
            t_heap = heap[0][0] if heap and heap[0][0] <= until_us else None
            if fi < nf and (t_heap is None or faults[fi][0] < t_heap):
                t, _, unit, cow, name = faults[fi]
                fi += 1
                self.clock = t
                self._fault(name, unit, cow, t)
            elif t_heap is not None:
                t, _, kind, data = heapq.heappop(heap)
                self.clock = t
                self._handle_event(kind, data)
            else:
                break
            if self.check_invariants:
                self.check_conservation()
        self.clock = until_us
        return self.events[first:]

    def _tick(self, point: str) -> Action:
        action = self.decide(self._context(point, "kernel"))
        ev = {"t": self.clock, "kind": "decision", "point": point, "action": action.kind}
        if action.kind == "run-task":
            task = action.args.get("task")
            ev["task"] = task
            if "max-duration" in action.args:
                ev["duration"] = action.args["max-duration"]
        self.events.append(ev)
        return action

    def _handle_event(self, kind: str, data):
        p = self.preset
        if kind == "zeroing-tick":
            action = self._tick(kind)
            if action.kind == "run-task" and isinstance(p.page_zeroing, pol.PeriodicTask):
                self.cpu_seconds["page-zeroing"] += p.page_zeroing.interval * p.page_zeroing.max_cpu
            if isinstance(p.page_zeroing, pol.PeriodicTask):
                self._push(self.clock + seconds_to_us(p.page_zeroing.interval), kind)
        elif kind == "compaction-tick":
            action = self._tick(kind)
            if action.kind == "run-task":
                self.cpu_seconds["page-compaction"] += (
                    action.args.get("max-duration", 0) * action.args.get("max-cpu", 0))
            if isinstance(p.page_compaction, pol.CompactionSchedule):
                self._push(self._next_compaction(self.clock + 1), kind)
        elif kind == "scan":
            s = p.dirty_access_bit_scan
            if isinstance(s, pol.PeriodicTask):
                self.cpu_seconds["dirty-access-bit-scan"] += s.interval * s.max_cpu
                self._push(self.clock + seconds_to_us(s.interval), kind)
        elif kind == "reclaim-tick":
            action = self._tick(kind)
            if action.kind in ("run-task", "reclaim-from"):
                self.cpu_seconds["mem-reclaim"] += self.reclaim_interval * 0.01
            if action.kind == "reclaim-from":
                self._reclaim(action.args.get("process"), action.args.get("region"))
            self._push(self.clock + seconds_to_us(self.reclaim_interval), kind)
        elif kind == "promotion-tick":
            self._tick(kind)
            self._push(self.clock + seconds_to_us(self.promotion_interval), kind)
        elif kind == "report":
            report = self.report_metrics(self.clock)
            self.outbox.append(report)
            self._send(report)
            self._push(self.clock + seconds_to_us(self.report_interval), kind)
        elif kind == "exit":
            self._exit(data)
        else:
            raise SimulationError(f"unknown event kind {kind!r}")

    def _reclaim(self, process, region):
        promoted = self.promoted.get(process, {})
        for r in [r for r in promoted if region is not None and region.overlaps(r)]:
            self.mem_used -= promoted.pop(r)

    def _exit(self, name: str):
        run = self.processes.get(name)
        if run is None:
            return
        report = self.report_metrics(self.clock, final=name)
        self.outbox.append(report)
        self._send(report)
        run.stream = None
        self.events.append({"t": self.clock, "kind": "exit", "process": name})

    def _send(self, m: Message):
        if self.transport is None:
            return
        try:
            self.transport.send(m)
        except (ConnectionError, OSError):
            self.counters["cm-unreachable"] += 1

    # --- metrics and experiments -----------------------------------------

    def report_metrics(self, now: int, final: Optional[str] = None) -> MetricsReport:
        elapsed = max(now / US, 1e-9)
        counters = dict(self.counters)
        counters["mem-used"] = self.mem_used
        for t in DAEMON_TASKS:
            counters[f"cpu.{t}"] = round(self.cpu_seconds[t] / elapsed, 6)
        if final is not None:
            run = self.processes[final]
            benefit, walk, _ = run.model.promotion_effect(self.promoted.get(final, {}))
            counters["runtime-s"] = round(run.model.runtime_base * (1 - benefit), 6)
            counters["load-walks"] = round(1 - walk, 6)
            counters["store-walks"] = round(1 - walk, 6)
        interval = self.report_interval or (now - self._last_report_us) / US
        self._last_report_us = now
        self.events.append({"t": now, "kind": "report", "final": final is not None})
        return MetricsReport(self.node_id, self.node_id, now, counters, interval)

    def run_experiment(self, a: ExperimentAssignment, model: Optional[WorkloadModel] = None) -> ExperimentResult:
        """Promote the assigned regions for one workload run and report the measured deltas."""
        if model is None:
            run = self.processes.get(a.process)
            if run is None:
                raise ValueError(f"process {a.process} is not running on {self.node_id}")
            model = run.model
        sigma = self.noise_sigma
        noise = self.exp_rng.normal(0.0, sigma, 3) if sigma > 0 else np.zeros(3)
        try:
            benefit, walk, frag = model.promotion_effect(a.promote_regions)
        except KeyError:
            return ExperimentResult(self.node_id, a.experiment_id, self.node_id,
                                    0.0, 0.0, 0.0, 0, valid=False)
        return ExperimentResult(self.node_id, a.experiment_id, self.node_id,
                                float(benefit + noise[0]), float(walk + noise[1]),
                                float(walk + noise[2]), int(frag))

    def handle(self, m: Message) -> Optional[Message]:
        """Apply a message pushed by the cluster manager."""
        if isinstance(m, PresetDownload):
            self.set_preset(m.preset)
        elif isinstance(m, PresetUpdate):
            self.apply_modification(m.modification)
        elif isinstance(m, ExperimentAssignment):
            result = self.run_experiment(m)
            self._send(result)
            return result
        else:
            raise ProtocolError(f"node cannot handle {m.msg_type}")
        return None
