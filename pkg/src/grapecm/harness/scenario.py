"""Scenario files: JSON documents describing one seeded end-to-end run.

Every scenario has a ``kind`` selecting the experiment driver, a
``description`` naming the claim it models, and the fleet setup.  Unknown
top-level keys are rejected so typos surface as validation errors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from ..policy import PresetPolicy, validate_preset
from ..wire import ProtocolError, preset_from_json, preset_to_json
from ..workloads import MODELS

KINDS = ("fault-latency", "promotion-curve", "paging", "search", "coordination", "metrics-budget")
TRANSPORTS = ("in-process", "socket")
BASELINE_MODES = ("linux-model", "preset-only")

BUNDLED_DIR = Path(__file__).resolve().parent.parent / "scenarios"


class ScenarioError(ValueError):
    """Validation failure; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class SearchParams:
    K: int = 8
    M: int = 64
    epsilon: float = 0.001
    noise_sigma: float = 0.003
    max_rounds: int = 32


@dataclass
class Scenario:
    name: str
    description: str
    kind: str
    seed: int = 0
    node_count: int = 1
    transport: str = "in-process"
    cm_rtt_us: float = 50.0
    baseline_mode: str = "preset-only"
    duration: float = 60.0
    workloads: dict = field(default_factory=dict)      # model name -> list of node indices
    search: SearchParams = SearchParams()
    frag_budget: Any = None                            # bytes, or "58%" of full promotion
    metric_budget: dict = field(default_factory=dict)
    schedules: dict = field(default_factory=dict)
    preset: Optional[dict] = None                      # wire-format preset
    rules: Optional[list] = None                       # CM rule table override
    params: dict = field(default_factory=dict)         # kind-specific knobs
    source: dict = field(default_factory=dict)         # original document, echoed in reports

    def base_preset(self) -> PresetPolicy:
        return build_preset(self.preset)

    def nodes_for(self, model: str) -> list[int]:
        return list(self.workloads.get(model, []))

    def with_seed(self, seed: int) -> "Scenario":
        doc = dict(self.source, seed=seed)
        return from_dict(doc)


def build_preset(partial: Optional[dict]) -> PresetPolicy:
    """A wire-format preset where omitted keys take the default preset's values."""
    if partial is None:
        return PresetPolicy(version=1)
    return preset_from_json({**preset_to_json(PresetPolicy(version=1)), **partial})


_FIELDS = {"name", "description", "kind", "seed", "node_count", "transport", "cm_rtt_us",
           "baseline_mode", "duration", "workloads", "search", "frag_budget", "metric_budget",
           "schedules", "preset", "rules", "params"}


def _need(cond: bool, field_name: str, message: str):
    if not cond:
        raise ScenarioError(field_name, message)


def _number(doc, key, default, lo=None, hi=None, integer=False, strict_lo=False):
    v = doc.get(key, default)
    _need(isinstance(v, (int, float)) and not isinstance(v, bool), key, "must be a number")
    if integer:
        _need(float(v).is_integer(), key, "must be an integer")
        v = int(v)
    if lo is not None:
        _need(v > lo if strict_lo else v >= lo, key, f"must be {'>' if strict_lo else '>='} {lo}")
    if hi is not None:
        _need(v <= hi, key, f"must be <= {hi}")
    return v


def _workloads(raw, node_count: int) -> dict:
    _need(isinstance(raw, dict), "workloads", "must map model names to node sets")
    out = {}
    for model, nodes in raw.items():
        key = f"workloads.{model}"
        _need(model in MODELS, key, f"unknown workload model (known: {', '.join(sorted(MODELS))})")
        if nodes == "all":
            nodes = list(range(node_count))
        _need(isinstance(nodes, list) and all(isinstance(n, int) and not isinstance(n, bool)
                                              for n in nodes), key,
              'must be "all" or a list of node indices')
        bad = [n for n in nodes if not 0 <= n < node_count]
        _need(not bad, key, f"node indices out of range: {bad}")
        out[model] = sorted(set(nodes))
    return out


def _frag_budget(v):
    if v is None:
        return None
    if isinstance(v, str):
        _need(v.endswith("%"), "frag_budget", 'must be bytes or a percentage like "58%"')
        try:
            pct = float(v[:-1])
        except ValueError:
            raise ScenarioError("frag_budget", f"bad percentage {v!r}") from None
        _need(0 <= pct <= 100, "frag_budget", "percentage must be within 0..100")
        return v
    _need(isinstance(v, int) and not isinstance(v, bool) and v >= 0, "frag_budget",
          "must be a non-negative byte count")
    return v


def from_dict(doc: dict) -> Scenario:
    _need(isinstance(doc, dict), "scenario", "must be a JSON object")
    unknown = sorted(set(doc) - _FIELDS)
    _need(not unknown, unknown[0] if unknown else "", "unknown field")
    for key in ("name", "description", "kind"):
        _need(isinstance(doc.get(key), str) and doc[key].strip(), key, "required non-empty string")
    _need(doc["kind"] in KINDS, "kind", f"must be one of {', '.join(KINDS)}")

    node_count = _number(doc, "node_count", 1, lo=1, integer=True)
    seed = _number(doc, "seed", 0, lo=0, integer=True)
    duration = _number(doc, "duration", 60.0, lo=0, strict_lo=True)
    cm_rtt = _number(doc, "cm_rtt_us", 50.0, lo=0)
    transport = doc.get("transport", "in-process")
    _need(transport in TRANSPORTS, "transport", f"must be one of {', '.join(TRANSPORTS)}")
    mode = doc.get("baseline_mode", "preset-only")
    _need(mode in BASELINE_MODES, "baseline_mode", f"must be one of {', '.join(BASELINE_MODES)}")
    workloads = _workloads(doc.get("workloads", {}), node_count)

    raw_search = doc.get("search", {})
    _need(isinstance(raw_search, dict), "search", "must be an object")
    s_unknown = sorted(set(raw_search) - {"K", "M", "epsilon", "noise_sigma", "max_rounds"})
    _need(not s_unknown, f"search.{s_unknown[0]}" if s_unknown else "search", "unknown field")
    search = SearchParams(
        K=_number(raw_search, "K", 8, lo=2, integer=True),
        M=_number(raw_search, "M", 64, lo=1, integer=True),
        epsilon=_number(raw_search, "epsilon", 0.001, lo=0),
        noise_sigma=_number(raw_search, "noise_sigma", 0.003, lo=0),
        max_rounds=_number(raw_search, "max_rounds", 32, lo=1, integer=True))
    if doc["kind"] == "search":
        _need(search.M >= search.K + 1, "search.M", "must be at least K + 1")

    preset = doc.get("preset")
    if preset is not None:
        _need(isinstance(preset, dict), "preset", "must be an object")
        try:
            problems = validate_preset(build_preset(preset))
        except (ProtocolError, ValueError, KeyError, TypeError) as exc:
            raise ScenarioError("preset", str(exc)) from None
        _need(not problems, "preset", "; ".join(problems))
    rules = doc.get("rules")
    _need(rules is None or isinstance(rules, list), "rules", "must be a list of rules")

    for key in ("metric_budget", "schedules", "params"):
        _need(isinstance(doc.get(key, {}), dict), key, "must be an object")

    sc = Scenario(
        name=doc["name"], description=doc["description"], kind=doc["kind"], seed=seed,
        node_count=node_count, transport=transport, cm_rtt_us=cm_rtt, baseline_mode=mode,
        duration=duration, workloads=workloads, search=search,
        frag_budget=_frag_budget(doc.get("frag_budget")),
        metric_budget=dict(doc.get("metric_budget", {})), schedules=dict(doc.get("schedules", {})),
        preset=preset, rules=rules, params=dict(doc.get("params", {})), source=dict(doc))
    _check_kind(sc)
    return sc


def _check_kind(sc: Scenario):
    if sc.kind in ("fault-latency", "promotion-curve", "paging", "search"):
        _need(len(sc.workloads) == 1, "workloads", f"a {sc.kind} scenario runs exactly one model")
        _need(len(next(iter(sc.workloads.values()))) > 0, "workloads", "no nodes assigned")
    if sc.kind == "coordination":
        c = sc.schedules.get("compaction")
        _need(isinstance(c, dict), "schedules.compaction", "required for coordination scenarios")
        for key in ("duration", "period", "cap"):
            _need(key in c, f"schedules.compaction.{key}", "required")
        _need(isinstance(c.get("coordinated", True), bool), "schedules.compaction.coordinated",
              "must be true or false")
    if sc.kind == "metrics-budget":
        mb = sc.metric_budget
        _need("bytes_per_s" in mb, "metric_budget.bytes_per_s", "required")
        _need(isinstance(mb.get("metrics"), list) and mb["metrics"], "metric_budget.metrics",
              "required non-empty list")
        for i, m in enumerate(mb["metrics"]):
            _need(isinstance(m, dict) and "name" in m and "staleness_bound" in m,
                  f"metric_budget.metrics[{i}]", "needs name and staleness_bound")


def load(path: Union[str, Path]) -> Scenario:
    p = Path(path)
    if not p.exists() and not p.suffix and (BUNDLED_DIR / f"{p.name}.json").exists():
        p = BUNDLED_DIR / f"{p.name}.json"
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ScenarioError("scenario", f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError("scenario", f"malformed JSON: {exc}") from None
    return from_dict(doc)


def bundled() -> list[Path]:
    return sorted(BUNDLED_DIR.glob("*.json"))
