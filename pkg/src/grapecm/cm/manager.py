"""The cluster manager: answers fallbacks, keeps fleet state, distributes presets."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Union

from ..policy import Action, PresetModification, PresetPolicy, ReclaimTarget
from ..wire import (
    CM_ID, ExperimentResult, Hello, Message, MetricsReport, PolicyQuery, PolicyResponse,
    PresetDownload, ProtocolError, decode, decode_region, encode, encode_region,
    modification_from_json, preset_from_json, preset_to_json,
)
from .paging import PagingDecision, ProcessHistory, RunRecord, Thresholds, classify_paging
from .search import RegionEstimate

log = logging.getLogger(__name__)

LOWEST_PRIORITY = "$lowest-priority"

# Rules use the wire vocabulary so they can live in scenario files unchanged.
DEFAULT_RULES = (
    {
        "match": {"type": "alloc-failure", "error": "page-fault-huge-page-alloc"},
        "action": "alloc-base-page",
        "temporary-modify-preset": [
            {"for": "1h", "use-huge-pages": []},
            {"for": "1h", "mem-reclaim": {"from": LOWEST_PRIORITY}},
        ],
    },
)


class EventLog:
    """Append-only newline-delimited JSON log; optionally mirrored to a file."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.entries: list[dict] = []

    def append(self, event: str, /, **data) -> dict:
        entry = {"event": event, **data}
        self.entries.append(entry)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry


def _estimate_json(e: RegionEstimate) -> dict:
    return {"region": encode_region(e.region), "mean": e.mean_benefit,
            "stderr": e.stderr if e.stderr != float("inf") else "inf",
            "samples": e.samples, "frag": e.frag_cost}


def _estimate_from_json(d: dict) -> RegionEstimate:
    return RegionEstimate(decode_region(d["region"]), d["mean"], float(d["stderr"]),
                          d["samples"], d["frag"])


class ClusterManager:
    def __init__(self, rules: Iterable[dict] = DEFAULT_RULES,
                 default_action: str = "alloc-base-page",
                 thresholds: Thresholds = Thresholds(),
                 log_path: Optional[Union[str, Path]] = None):
        self.rules = [copy.deepcopy(r) for r in rules]
        for r in self.rules:
            for m in r.get("temporary-modify-preset", []):
                modification_from_json({k: v for k, v in m.items() if k != "mem-reclaim"})
        self.default_action = default_action
        self.thresholds = thresholds
        self.log = EventLog(log_path)
        self.nodes: dict[str, Hello] = {}
        self.agents: dict[str, Callable[[Message], Any]] = {}
        self.metrics: dict[str, MetricsReport] = {}
        self.metric_bytes = 0
        self.results: list[ExperimentResult] = []
        self.estimates: dict[str, list[RegionEstimate]] = {}
        self.histories: dict[str, ProcessHistory] = {}
        self.presets: dict[str, PresetPolicy] = {}
        self.alerts: list[dict] = []
        self.queries = 0

    # --- transport entry points -----------------------------------------

    def handle_line(self, line: bytes) -> Optional[bytes]:
        try:
            msg = decode(line)
        except ProtocolError as exc:
            self.alert("bad-message", error=str(exc))
            return None
        if isinstance(msg, MetricsReport):
            self.metric_bytes += len(line)
        reply = self.handle_message(msg)
        return encode(reply) if reply is not None else None

    def handle_message(self, msg: Message) -> Optional[Message]:
        if isinstance(msg, PolicyQuery):
            return self.handle_query(msg)
        if isinstance(msg, Hello):
            self.nodes[msg.node_id] = msg
            self.log.append("hello", node=msg.node_id, hardware_class=msg.hardware_class)
        elif isinstance(msg, MetricsReport):
            self.metrics[msg.node_id] = msg
        elif isinstance(msg, ExperimentResult):
            self.results.append(msg)
        else:
            self.alert("unexpected-message", type=msg.msg_type, sender=msg.sender)
        return None

    def register_agent(self, hello: Hello, deliver: Callable[[Message], Any]) -> None:
        self.handle_message(hello)
        self.agents[hello.node_id] = deliver

    def alert(self, kind: str, **data) -> None:
        entry = self.log.append("alert", kind=kind, **data)
        self.alerts.append(entry)
        log.warning("operator alert: %s %s", kind, data)

    # --- fallback queries -------------------------------------------------

    def _match(self, q: PolicyQuery) -> Optional[dict]:
        for rule in self.rules:
            m = rule.get("match", {})
            if m.get("type") != q.type:
                continue
            if "error" in m and q.context.get("error") != m["error"]:
                continue
            if "process" in m and q.process != m["process"]:
                continue
            return rule
        return None

    def _lowest_priority_target(self, node: Hello, process: str) -> Optional[ReclaimTarget]:
        others = [p for p in node.software_manifest if p.name != process and p.region is not None]
        if not others:
            return None
        victim = min(others, key=lambda p: (p.priority, p.name))
        return ReclaimTarget(victim.name, victim.region)

    def handle_query(self, q: PolicyQuery) -> PolicyResponse:
        """Answer one fallback with a definite action and optional temporary overlays."""
        self.queries += 1
        node = self.nodes.get(q.sender)
        known = node is not None and any(p.name == q.process for p in node.software_manifest)
        rule = self._match(q) if known else None
        mods: list[PresetModification] = []
        if rule is None:
            action = Action(self.default_action)
            self.alert("unknown-process" if not known else "no-rule", node=q.sender,
                       process=q.process, type=q.type)
        else:
            action = Action(rule["action"], dict(rule.get("args", {})))
            for spec in rule.get("temporary-modify-preset", []):
                reclaim = spec.get("mem-reclaim")
                if isinstance(reclaim, dict) and reclaim.get("from") == LOWEST_PRIORITY:
                    target = self._lowest_priority_target(node, q.process)
                    if target is None:
                        continue
                    m = modification_from_json({k: v for k, v in spec.items() if k != "mem-reclaim"})
                    mods.append(PresetModification(m.ttl, {**m.overlay, "mem_reclaim": target}))
                else:
                    mods.append(modification_from_json(spec))
        self.log.append("query", node=q.sender, type=q.type, process=q.process,
                        context=dict(q.context), action=action.kind, mods=len(mods))
        return PolicyResponse(CM_ID, action, tuple(mods))

    # --- stores ---------------------------------------------------------

    def record_run(self, process: str, run: RunRecord) -> None:
        self.histories.setdefault(process, ProcessHistory(process)).append(run)
        self.log.append("history", process=process, run=asdict(run))

    def classify(self, process: str) -> PagingDecision:
        decision = classify_paging(self.histories.get(process, ProcessHistory(process)),
                                   self.thresholds)
        self.log.append("classification", process=process, mode=decision.mode,
                        needs_observation=decision.needs_observation)
        return decision

    def set_estimates(self, process: str, estimates: list[RegionEstimate]) -> None:
        self.estimates[process] = list(estimates)
        self.log.append("estimates", process=process,
                        estimates=[_estimate_json(e) for e in estimates])

    def issue_preset(self, node_class: str, preset: PresetPolicy) -> PresetDownload:
        previous = self.presets.get(node_class)
        if previous is not None and preset.version <= previous.version:
            raise ValueError("preset versions must increase")
        self.presets[node_class] = preset
        self.log.append("preset", node_class=node_class, preset=preset_to_json(preset))
        return PresetDownload(CM_ID, preset)

    def broadcast_preset(self, node_class: str, preset: PresetPolicy) -> int:
        """Issue ``preset`` and push it to every registered node of ``node_class``."""
        msg = self.issue_preset(node_class, preset)
        line = encode(msg)
        sent = 0
        for node_id, deliver in self.agents.items():
            hello = self.nodes.get(node_id)
            if hello is not None and hello.hardware_class == node_class:
                deliver(decode(line))
                sent += 1
        return sent

    def push(self, node_id: str, msg: Message):
        return self.agents[node_id](decode(encode(msg)))

    # --- persistence ------------------------------------------------------

    @classmethod
    def replay(cls, source: Union[str, Path, Iterable[str]], **kwargs) -> "ClusterManager":
        """Rebuild histories, estimates and issued presets from an event log."""
        lines = Path(source).read_text().splitlines() if isinstance(source, (str, Path)) else source
        cm = cls(**kwargs)
        for line in lines:
            if not line.strip():
                continue
            e = json.loads(line)
            kind = e["event"]
            if kind == "history":
                cm.histories.setdefault(e["process"], ProcessHistory(e["process"])).append(
                    RunRecord(**e["run"]))
            elif kind == "estimates":
                cm.estimates[e["process"]] = [_estimate_from_json(d) for d in e["estimates"]]
            elif kind == "preset":
                cm.presets[e["node_class"]] = preset_from_json(e["preset"])
            elif kind == "alert":
                cm.alerts.append(e)
            cm.log.entries.append(e)
        return cm
