"""Compile CM decisions into the preset template."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Union

from ..policy import CompactionSchedule, PresetPolicy, validate_preset
from .coordination import Window


class PresetConflict(ValueError):
    pass


@dataclass(frozen=True)
class PromotionDecision:
    process: str
    regions: tuple


@dataclass(frozen=True)
class PagingModeDecision:
    process: str
    mode: str       # "eager" or "demand"


@dataclass(frozen=True)
class CompactionDecision:
    window: Window


Decision = Union[PromotionDecision, PagingModeDecision, CompactionDecision]

_MODE = {"eager": "eager", "demand": "demand-paging", "demand-paging": "demand-paging"}


def _merge(seen: dict, key, value, what: str):
    if key in seen and seen[key] != value:
        raise PresetConflict(f"conflicting {what} decisions for {key}: {seen[key]!r} vs {value!r}")
    seen[key] = value


def compile_preset(base: PresetPolicy, decisions: Iterable[Decision] = ()) -> PresetPolicy:
    """Fill the template with promotion lists, paging modes and a compaction window.

    The version always advances, even when there is nothing new to say.
    """
    promotions: dict = {}
    modes: dict = {}
    windows: dict = {}
    for d in decisions:
        if isinstance(d, PromotionDecision):
            _merge(promotions, d.process, tuple(sorted(d.regions)), "promotion")
        elif isinstance(d, PagingModeDecision):
            if d.mode not in _MODE:
                raise ValueError(f"unknown paging mode {d.mode!r}")
            _merge(modes, d.process, _MODE[d.mode], "paging")
        elif isinstance(d, CompactionDecision):
            _merge(windows, "compaction", d.window, "compaction")
        else:
            raise TypeError(f"not a preset decision: {d!r}")

    huge = dict(base.use_huge_pages)
    for proc, regions in promotions.items():
        if regions:
            huge[proc] = regions
        else:
            huge.pop(proc, None)

    exceptions = dict(base.mem_alloc_exceptions)
    for proc, mode in modes.items():
        if mode == base.mem_alloc_default:
            exceptions.pop(proc, None)
        else:
            exceptions[proc] = mode

    compaction = base.page_compaction
    if "compaction" in windows:
        w = windows["compaction"]
        compaction = CompactionSchedule(w.start, w.duration, w.max_cpu, w.period)

    out = replace(base, version=base.version + 1, use_huge_pages=huge,
                  mem_alloc_exceptions=exceptions, page_compaction=compaction)
    problems = validate_preset(out)
    if problems:
        raise PresetConflict("compiled preset is invalid: " + "; ".join(problems))
    return out
