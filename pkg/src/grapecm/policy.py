"""Preset policies and the local decision engine.

A preset is a match-action table the cluster manager downloads into a node.
``evaluate`` is total: every (preset, modifications, context) triple yields
either an :class:`Action` or a :class:`Fallback` telling the node to ask the
cluster manager.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping, Optional, Sequence, Union

UNSPECIFIED = "unspecified"

MEM_ALLOC_MODES = frozenset({"demand-paging", "eager", UNSPECIFIED})
COW_MODES = frozenset({"on", "no-cow", UNSPECIFIED})
NUMA_MODES = frozenset({"local", "interleave", UNSPECIFIED})
OOM_MODES = frozenset({"kill-lowest-priority", UNSPECIFIED})
RECLAIM_MODES = frozenset({"on", "off", UNSPECIFIED})
ON_OFF = frozenset({"on", "off", UNSPECIFIED})

DECISION_POINTS = frozenset({
    "page-fault", "mem-alloc", "cow-break", "oom",
    "reclaim-tick", "compaction-tick", "zeroing-tick", "promotion-tick",
})
REGION_POINTS = frozenset({"page-fault", "mem-alloc", "cow-break"})

ACTION_KINDS = frozenset({
    "alloc-base-page", "alloc-huge-page", "alloc-eager", "share-cow",
    "break-cow", "run-task", "skip-task", "kill-process", "reclaim-from",
})

# Error vocabulary carried in a query context's "error" field.
QUERY_ERRORS = frozenset({
    "page-fault-huge-page-alloc", "unspecified-policy", "bad-context",
})

DEFAULT_ADDRESS_SPACE = 1 << 20
DAY_S = 86400


@dataclass(frozen=True, order=True)
class AddressRegion:
    """Half-open range ``[start, start + length)`` of abstract region indices."""

    start: int
    length: int = 1

    @property
    def end(self) -> int:
        return self.start + self.length

    def contains(self, other: "AddressRegion") -> bool:
        return self.start <= other.start and other.end <= self.end

    def overlaps(self, other: "AddressRegion") -> bool:
        return self.start < other.end and other.start < self.end

    def __str__(self) -> str:
        return f"{self.start:#x}-{self.end:#x}"


@dataclass(frozen=True)
class CompactionSchedule:
    # `when` is the offset into each period; 0 is midnight for the daily default.
    when: float = 0
    max_duration: float = 1
    max_cpu: float = 0.02
    period: float = DAY_S

    def in_window(self, t_s: float) -> bool:
        return (t_s - self.when) % self.period < self.max_duration


@dataclass(frozen=True)
class PeriodicTask:
    interval: float
    max_cpu: float


@dataclass(frozen=True)
class ReclaimTarget:
    """A `mem-reclaim` value naming the process and range to reclaim from."""

    process: str
    region: AddressRegion


@dataclass(frozen=True)
class PresetPolicy:
    version: int = 0
    mem_alloc_default: str = "demand-paging"
    mem_alloc_exceptions: Mapping[str, str] = field(default_factory=dict)
    copy_on_write: str = UNSPECIFIED
    copy_on_write_exceptions: Mapping[str, str] = field(default_factory=dict)
    page_size_default: int = 4096
    use_huge_pages: Mapping[str, tuple] = field(default_factory=dict)
    numa_balancing: str = "local"
    out_of_memory: str = UNSPECIFIED
    mem_reclaim: Union[str, ReclaimTarget] = "off"
    page_compaction: Union[str, CompactionSchedule] = field(default_factory=CompactionSchedule)
    page_zeroing: Union[str, PeriodicTask] = field(default_factory=lambda: PeriodicTask(30, 0.02))
    huge_page_promotion_async: str = "off"
    dirty_access_bit_scan: Union[str, PeriodicTask] = field(default_factory=lambda: PeriodicTask(30, 0.10))


PRESET_FIELDS = tuple(f.name for f in fields(PresetPolicy))
OVERLAY_FIELDS = frozenset(PRESET_FIELDS) - {"version"}


@dataclass(frozen=True)
class DecisionContext:
    decision_point: str
    process: str
    faulting_region: Optional[AddressRegion] = None
    current_mem_usage: int = 0
    cpu_usage: float = 0.0
    virtual_time: int = 0  # microseconds


@dataclass(frozen=True)
class Action:
    kind: str
    args: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Fallback:
    reason: str


@dataclass(frozen=True)
class PresetModification:
    ttl: float  # seconds of virtual time
    overlay: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ActiveModification:
    modification: PresetModification
    applied_at: int  # microseconds
    expires_at: int
    seq: int

    def active_at(self, t_us: int) -> bool:
        return self.applied_at <= t_us < self.expires_at


def seconds_to_us(s: float) -> int:
    return int(round(s * 1_000_000))


# --- validation -----------------------------------------------------------

def _check_regions(name, regions, address_space, out):
    prev_end = None
    for r in regions:
        if not isinstance(r, AddressRegion):
            out.append(f"{name}: not an address region: {r!r}")
            return
        if r.length < 1 or r.start < 0:
            out.append(f"{name}: empty or negative region {r}")
        elif r.end > address_space:
            out.append(f"{name}: region {r} exceeds address space")
        if prev_end is not None and r.start < prev_end:
            out.append(f"{name}: regions overlap or are unsorted at {r}")
        prev_end = r.end


def _check_periodic(name, value, out):
    if value == UNSPECIFIED:
        return
    if isinstance(value, CompactionSchedule):
        if not value.period > 0:
            out.append(f"{name}.period must be positive")
        if not 0 < value.max_duration <= value.period:
            out.append(f"{name}.max_duration out of range")
        if not 0 <= value.when < value.period:
            out.append(f"{name}.when out of range")
    elif isinstance(value, PeriodicTask):
        if not value.interval > 0:
            out.append(f"{name}.interval must be positive")
    else:
        out.append(f"{name}: bad schedule {value!r}")
        return
    if not 0 < value.max_cpu <= 1:
        out.append(f"{name}.max_cpu out of range")


def _check_choice(name, value, allowed, out):
    if value not in allowed:
        out.append(f"{name}: invalid value {value!r}")


def _check_exceptions(name, default, exceptions, allowed, out):
    for proc, value in exceptions.items():
        if value not in allowed:
            out.append(f"{name}[{proc}]: invalid value {value!r}")
        elif value == default:
            out.append(f"non-canonical exception: {name}[{proc}] equals the default")


def validate_preset(p: PresetPolicy, address_space: int = DEFAULT_ADDRESS_SPACE) -> list[str]:
    """Return every invariant violation of ``p``; an empty list means ok."""
    out: list[str] = []
    if not isinstance(p.version, int) or p.version < 0:
        out.append("version must be a non-negative integer")
    _check_choice("mem_alloc_default", p.mem_alloc_default, MEM_ALLOC_MODES, out)
    _check_exceptions("mem_alloc_exceptions", p.mem_alloc_default,
                      p.mem_alloc_exceptions, MEM_ALLOC_MODES, out)
    _check_choice("copy_on_write", p.copy_on_write, COW_MODES, out)
    _check_exceptions("copy_on_write_exceptions", p.copy_on_write,
                      p.copy_on_write_exceptions, COW_MODES, out)
    if not isinstance(p.page_size_default, int) or p.page_size_default <= 0 \
            or p.page_size_default & (p.page_size_default - 1):
        out.append("page_size_default must be a positive power of two")
    for proc, regions in p.use_huge_pages.items():
        _check_regions(f"use_huge_pages[{proc}]", regions, address_space, out)
    _check_choice("numa_balancing", p.numa_balancing, NUMA_MODES, out)
    _check_choice("out_of_memory", p.out_of_memory, OOM_MODES, out)
    if isinstance(p.mem_reclaim, ReclaimTarget):
        _check_regions("mem_reclaim", [p.mem_reclaim.region], address_space, out)
    else:
        _check_choice("mem_reclaim", p.mem_reclaim, RECLAIM_MODES, out)
    _check_periodic("page_compaction", p.page_compaction, out)
    if isinstance(p.page_compaction, PeriodicTask):
        out.append("page_compaction needs a compaction schedule")
    _check_periodic("page_zeroing", p.page_zeroing, out)
    _check_choice("huge_page_promotion_async", p.huge_page_promotion_async, ON_OFF, out)
    _check_periodic("dirty_access_bit_scan", p.dirty_access_bit_scan, out)
    return out


def validate_overlay(base: PresetPolicy, overlay: Mapping[str, Any],
                     address_space: int = DEFAULT_ADDRESS_SPACE) -> list[str]:
    unknown = sorted(set(overlay) - OVERLAY_FIELDS)
    if unknown:
        return [f"unknown overlay field: {name}" for name in unknown]
    # Exceptions are checked against the overlaid default, so canonical form
    # is judged on the merged preset.
    return validate_preset(replace(base, **overlay), address_space)


# --- modifications --------------------------------------------------------

def apply_modification(base: PresetPolicy, mods: Sequence[ActiveModification],
                       m: PresetModification, now: int) -> list[ActiveModification]:
    """Activate ``m`` at ``now`` (µs) for ``[now, now + ttl)`` and prune expired mods.

    Overlays touching the same field resolve to the most recently applied one.
    """
    if not m.ttl > 0:
        raise ValueError("modification ttl must be positive")
    problems = validate_overlay(base, m.overlay)
    if problems:
        raise ValueError("invalid overlay: " + "; ".join(problems))
    kept = [a for a in mods if a.expires_at > now]
    seq = max((a.seq for a in mods), default=-1) + 1
    kept.append(ActiveModification(m, now, now + seconds_to_us(m.ttl), seq))
    return kept


def active_overlays(mods: Sequence[ActiveModification], t_us: int) -> list[Mapping[str, Any]]:
    """Overlays active at ``t_us``, newest first."""
    live = sorted((a for a in mods if a.active_at(t_us)), key=lambda a: -a.seq)
    return [a.modification.overlay for a in live]


def effective_preset(p: PresetPolicy, mods: Sequence[ActiveModification], t_us: int) -> PresetPolicy:
    merged: dict[str, Any] = {}
    for overlay in active_overlays(mods, t_us):
        for k, v in overlay.items():
            merged.setdefault(k, v)
    return replace(p, **merged) if merged else p


def _resolve(p, overlays, default_name, exc_name, process):
    # Newest overlay first; an overlaid default beats older exceptions, and the
    # newest overlaid exceptions map shadows the base map.
    exceptions_seen = False
    for overlay in overlays:
        if exc_name in overlay and not exceptions_seen:
            exceptions_seen = True
            if process in overlay[exc_name]:
                return overlay[exc_name][process]
        if default_name in overlay:
            return overlay[default_name]
    if not exceptions_seen and process in getattr(p, exc_name):
        return getattr(p, exc_name)[process]
    return getattr(p, default_name)


def _field(p, overlays, name):
    for overlay in overlays:
        if name in overlay:
            return overlay[name]
    return getattr(p, name)


# --- evaluation -----------------------------------------------------------

def _context_ok(ctx: DecisionContext) -> bool:
    if ctx.decision_point not in DECISION_POINTS:
        return False
    if not isinstance(ctx.process, str) or not ctx.process:
        return False
    has_region = ctx.faulting_region is not None
    if has_region != (ctx.decision_point in REGION_POINTS):
        return False
    if has_region:
        r = ctx.faulting_region
        if not isinstance(r, AddressRegion) or r.length < 1 or r.start < 0:
            return False
    if not isinstance(ctx.virtual_time, int) or ctx.virtual_time < 0:
        return False
    try:
        return ctx.current_mem_usage >= 0 and 0.0 <= ctx.cpu_usage <= 1.0
    except TypeError:
        return False


def _task(name, schedule):
    if schedule == UNSPECIFIED:
        return Fallback(UNSPECIFIED)
    args = {"task": name, "max-cpu": schedule.max_cpu}
    if isinstance(schedule, CompactionSchedule):
        args["max-duration"] = schedule.max_duration
    return Action("run-task", args)


def evaluate(p: PresetPolicy, mods: Sequence[ActiveModification],
             ctx: DecisionContext) -> Union[Action, Fallback]:
    if not _context_ok(ctx):
        return Fallback("bad-context")
    overlays = active_overlays(mods, ctx.virtual_time)
    point, proc = ctx.decision_point, ctx.process

    if point == "page-fault":
        huge = _field(p, overlays, "use_huge_pages").get(proc, ())
        for region in huge:
            if region.contains(ctx.faulting_region):
                return Action("alloc-huge-page", {"region": region})
        return Action("alloc-base-page")

    if point == "mem-alloc":
        mode = _resolve(p, overlays, "mem_alloc_default", "mem_alloc_exceptions", proc)
        if mode == "eager":
            return Action("alloc-eager")
        if mode == "demand-paging":
            return Action("alloc-base-page")
        return Fallback(UNSPECIFIED)

    if point == "cow-break":
        mode = _resolve(p, overlays, "copy_on_write", "copy_on_write_exceptions", proc)
        if mode == "on":
            return Action("share-cow")
        if mode == "no-cow":
            return Action("break-cow")
        return Fallback(UNSPECIFIED)

    if point == "oom":
        if _field(p, overlays, "out_of_memory") == "kill-lowest-priority":
            return Action("kill-process", {"target": "lowest-priority"})
        return Fallback(UNSPECIFIED)

    if point == "reclaim-tick":
        value = _field(p, overlays, "mem_reclaim")
        if isinstance(value, ReclaimTarget):
            return Action("reclaim-from", {"process": value.process, "region": value.region})
        if value == "on":
            return Action("run-task", {"task": "mem-reclaim"})
        if value == "off":
            return Action("skip-task", {"task": "mem-reclaim"})
        return Fallback(UNSPECIFIED)

    if point == "compaction-tick":
        schedule = _field(p, overlays, "page_compaction")
        if schedule == UNSPECIFIED:
            return Fallback(UNSPECIFIED)
        if not schedule.in_window(ctx.virtual_time / 1_000_000):
            return Action("skip-task", {"task": "page-compaction"})
        return _task("page-compaction", schedule)

    if point == "zeroing-tick":
        return _task("page-zeroing", _field(p, overlays, "page_zeroing"))

    # promotion-tick
    value = _field(p, overlays, "huge_page_promotion_async")
    if value == "on":
        return Action("run-task", {"task": "huge-page-promotion"})
    if value == "off":
        return Action("skip-task", {"task": "huge-page-promotion"})
    return Fallback(UNSPECIFIED)


def listing_preset() -> PresetPolicy:
    """The sample preset from the design discussion, in abstract region units.

    Hex addresses are mapped to 2 MiB region indices (``addr >> 21``).
    """
    return PresetPolicy(
        version=1,
        mem_alloc_default="demand-paging",
        mem_alloc_exceptions={"memcached": "eager"},
        copy_on_write=UNSPECIFIED,
        copy_on_write_exceptions={"redis-snapshot": "no-cow"},
        page_size_default=4096,
        use_huge_pages={
            "memcached": (AddressRegion(0x435a0000 >> 21, 1),),
            "vid-encoder": (AddressRegion(0x7ff000000 >> 21, 1),),
        },
        numa_balancing="local",
        out_of_memory=UNSPECIFIED,
        mem_reclaim="off",
        page_compaction=CompactionSchedule(when=0, max_duration=1, max_cpu=0.02),
        page_zeroing=PeriodicTask(30, 0.02),
        huge_page_promotion_async="off",
        dirty_access_bit_scan=PeriodicTask(30, 0.10),
    )
