"""Newline-delimited JSON messages between node agents and the cluster manager.

Every line is one JSON object carrying ``msg`` (the message type), ``version``
and ``from`` (sender identity) alongside the message fields.  Field names are
kebab-case.  Unknown keys are ignored on decode so older agents keep working
when the protocol grows.
"""

from __future__ import annotations

import json
import math
import re
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, ClassVar, Iterable, Iterator, Mapping, Optional

from .policy import (
    ACTION_KINDS, UNSPECIFIED, Action, AddressRegion, CompactionSchedule,
    PeriodicTask, PresetModification, PresetPolicy, ReclaimTarget, DAY_S,
)

PROTOCOL_VERSION = "grapecm/1"
CM_ID = "cm"


class ProtocolError(ValueError):
    pass


class EncodeError(ProtocolError):
    pass


# --- scalar codecs --------------------------------------------------------

_DURATION = re.compile(r"^([0-9.eE+-]+)(us|ms|s|m|h|d)?$")
_UNIT_S = {"us": 1e-6, "ms": 1e-3, "s": 1, "m": 60, "h": 3600, "d": 86400, None: 1}


def format_duration(seconds: float) -> str:
    if not math.isfinite(seconds):
        raise EncodeError("non-finite duration")
    if float(seconds).is_integer():
        n = int(seconds)
        if n and n % 3600 == 0:
            return f"{n // 3600}h"
        if n and n % 60 == 0:
            return f"{n // 60}m"
        return f"{n}s"
    return f"{float(seconds)!r}s"


def parse_duration(value) -> float:
    if isinstance(value, bool):
        raise ProtocolError(f"bad duration: {value!r}")
    if isinstance(value, (int, float)):
        return value
    m = _DURATION.match(str(value).strip())
    if not m:
        raise ProtocolError(f"bad duration: {value!r}")
    num, unit = m.groups()
    try:
        x = float(num)
    except ValueError:
        raise ProtocolError(f"bad duration: {value!r}") from None
    if not math.isfinite(x):
        raise ProtocolError(f"bad duration: {value!r}")
    scaled = x * _UNIT_S[unit]
    return int(scaled) if unit in (None, "s", "m", "h", "d") and float(scaled).is_integer() else scaled


def encode_region(r: AddressRegion) -> str:
    return f"{r.start:#x}-{r.end:#x}"


def decode_region(text) -> AddressRegion:
    try:
        lo, hi = str(text).split("-")
        start, end = int(lo, 16), int(hi, 16)
    except ValueError:
        raise ProtocolError(f"bad address range: {text!r}") from None
    return AddressRegion(start, end - start)


# --- preset mapping -------------------------------------------------------

def _enc_schedule(value):
    if value == UNSPECIFIED:
        return UNSPECIFIED
    if isinstance(value, CompactionSchedule):
        out = {"when": "midnight" if value.when == 0 else format_duration(value.when),
               "max-duration": format_duration(value.max_duration),
               "max-cpu": value.max_cpu}
        if value.period != DAY_S:
            out["period"] = format_duration(value.period)
        return out
    return {"interval": format_duration(value.interval), "max-cpu": value.max_cpu}


def _dec_compaction(obj):
    if obj == UNSPECIFIED:
        return UNSPECIFIED
    when = obj.get("when", "midnight")
    return CompactionSchedule(
        when=0 if when == "midnight" else parse_duration(when),
        max_duration=parse_duration(_req(obj, "max-duration")),
        max_cpu=_req(obj, "max-cpu"),
        period=parse_duration(obj.get("period", DAY_S)),
    )


def _dec_periodic(obj):
    if obj == UNSPECIFIED:
        return UNSPECIFIED
    return PeriodicTask(parse_duration(_req(obj, "interval")), _req(obj, "max-cpu"))


def _enc_huge(mapping):
    return [{proc: [encode_region(r) for r in regions]} for proc, regions in mapping.items()]


def _dec_huge(value):
    items = value.items() if isinstance(value, dict) else \
        (kv for entry in value for kv in entry.items())
    return {proc: tuple(decode_region(r) for r in regions) for proc, regions in items}


def _enc_reclaim(value):
    if isinstance(value, ReclaimTarget):
        return {"from": value.process, "addr": encode_region(value.region)}
    return value


def _dec_reclaim(value):
    if isinstance(value, dict):
        return ReclaimTarget(_req(value, "from"), decode_region(_req(value, "addr")))
    return value


def _ident(x):
    return x


def _dict(x):
    return dict(x)


# attribute name -> (wire key, encoder, decoder)
PRESET_CODEC: dict[str, tuple[str, Callable, Callable]] = {
    "version": ("version", _ident, _ident),
    "mem_alloc_default": ("mem-alloc-default", _ident, _ident),
    "mem_alloc_exceptions": ("mem-alloc-exceptions", _dict, _dict),
    "copy_on_write": ("copy-on-write", _ident, _ident),
    "copy_on_write_exceptions": ("copy-on-write-exceptions", _dict, _dict),
    "page_size_default": ("page-size-default", _ident, _ident),
    "use_huge_pages": ("use-huge-pages", _enc_huge, _dec_huge),
    "numa_balancing": ("numa-balancing", _ident, _ident),
    "out_of_memory": ("out-of-memory", _ident, _ident),
    "mem_reclaim": ("mem-reclaim", _enc_reclaim, _dec_reclaim),
    "page_compaction": ("page-compaction", _enc_schedule, _dec_compaction),
    "page_zeroing": ("page-zeroing", _enc_schedule, _dec_periodic),
    "huge_page_promotion_async": ("huge-page-promotion-async", _ident, _ident),
    "dirty_access_bit_scan": ("dirty-access-bit-scan", _enc_schedule, _dec_periodic),
}
_WIRE_TO_ATTR = {key: attr for attr, (key, _, _) in PRESET_CODEC.items()}


def preset_to_json(p: PresetPolicy) -> dict:
    return {key: enc(getattr(p, attr)) for attr, (key, enc, _) in PRESET_CODEC.items()}


def preset_from_json(obj: Mapping) -> PresetPolicy:
    kwargs = {}
    for attr, (key, _, dec) in PRESET_CODEC.items():
        kwargs[attr] = dec(_req(obj, key))
    return PresetPolicy(**kwargs)


def overlay_to_json(overlay: Mapping[str, Any]) -> dict:
    out = {}
    for attr, value in overlay.items():
        key, enc, _ = PRESET_CODEC[attr]
        out[key] = enc(value)
    return out


def overlay_from_json(obj: Mapping) -> dict:
    out = {}
    for key, value in obj.items():
        attr = _WIRE_TO_ATTR.get(key)
        if attr is not None and attr != "version":
            out[attr] = PRESET_CODEC[attr][2](value)
    return out


def modification_to_json(m: PresetModification) -> dict:
    return {"for": format_duration(m.ttl), **overlay_to_json(m.overlay)}


def modification_from_json(obj: Mapping) -> PresetModification:
    return PresetModification(parse_duration(_req(obj, "for")), overlay_from_json(obj))


def _enc_args(args: Mapping) -> dict:
    return {k: encode_region(v) if isinstance(v, AddressRegion) else v for k, v in args.items()}


def _dec_args(obj: Mapping) -> dict:
    return {k: decode_region(v) if k == "region" else v for k, v in obj.items()}


def action_to_json(a: Action) -> dict:
    out = {"action": a.kind}
    if a.args:
        out["args"] = _enc_args(a.args)
    return out


def action_from_json(obj: Mapping) -> Action:
    return Action(_req(obj, "action"), _dec_args(obj.get("args", {})))


# --- messages -------------------------------------------------------------

def _req(obj: Mapping, key: str):
    if not isinstance(obj, Mapping):
        raise ProtocolError(f"expected an object holding {key}")
    try:
        return obj[key]
    except KeyError:
        raise ProtocolError(f"missing field: {key}") from None


@dataclass(frozen=True)
class ProcessInfo:
    name: str
    priority: int = 0
    region: Optional[AddressRegion] = None


@dataclass(frozen=True)
class Message:
    msg_type: ClassVar[str] = ""
    sender: str

    def body(self) -> dict:
        raise NotImplementedError

    @classmethod
    def from_body(cls, sender: str, obj: Mapping) -> "Message":
        raise NotImplementedError


@dataclass(frozen=True)
class Hello(Message):
    msg_type: ClassVar[str] = "hello"
    node_id: str = ""
    hardware_class: str = ""
    software_manifest: tuple = ()

    def body(self):
        manifest = []
        for p in self.software_manifest:
            entry = {"name": p.name, "priority": p.priority}
            if p.region is not None:
                entry["region"] = encode_region(p.region)
            manifest.append(entry)
        return {"node-id": self.node_id, "hardware-class": self.hardware_class,
                "software-manifest": manifest}

    @classmethod
    def from_body(cls, sender, obj):
        manifest = tuple(
            ProcessInfo(_req(e, "name"), e.get("priority", 0),
                        decode_region(e["region"]) if "region" in e else None)
            for e in _req(obj, "software-manifest"))
        return cls(sender, _req(obj, "node-id"), _req(obj, "hardware-class"), manifest)


@dataclass(frozen=True)
class PresetDownload(Message):
    msg_type: ClassVar[str] = "preset-download"
    preset: PresetPolicy = field(default_factory=PresetPolicy)

    def body(self):
        return {"preset": preset_to_json(self.preset)}

    @classmethod
    def from_body(cls, sender, obj):
        return cls(sender, preset_from_json(_req(obj, "preset")))


@dataclass(frozen=True)
class PresetUpdate(Message):
    msg_type: ClassVar[str] = "preset-update"
    modification: PresetModification = field(default_factory=lambda: PresetModification(1))

    def body(self):
        return {"temporary-modify-preset": modification_to_json(self.modification)}

    @classmethod
    def from_body(cls, sender, obj):
        return cls(sender, modification_from_json(_req(obj, "temporary-modify-preset")))


@dataclass(frozen=True)
class MetricsReport(Message):
    msg_type: ClassVar[str] = "metrics-report"
    node_id: str = ""
    virtual_time: int = 0
    counters: Mapping[str, float] = field(default_factory=dict)
    interval: float = 1.0

    def body(self):
        return {"node-id": self.node_id, "virtual-time": self.virtual_time,
                "counters": dict(self.counters), "interval": self.interval}

    @classmethod
    def from_body(cls, sender, obj):
        return cls(sender, _req(obj, "node-id"), _req(obj, "virtual-time"),
                   dict(_req(obj, "counters")), _req(obj, "interval"))


@dataclass(frozen=True)
class PolicyQuery(Message):
    msg_type: ClassVar[str] = "policy-query"
    type: str = ""
    process: str = ""
    context: Mapping[str, Any] = field(default_factory=dict)

    def body(self):
        return {"type": self.type, "process": self.process, "context": dict(self.context)}

    @classmethod
    def from_body(cls, sender, obj):
        return cls(sender, _req(obj, "type"), _req(obj, "process"), dict(obj.get("context", {})))


@dataclass(frozen=True)
class PolicyResponse(Message):
    msg_type: ClassVar[str] = "policy-response"
    action: Action = field(default_factory=lambda: Action("alloc-base-page"))
    temporary_modify_preset: tuple = ()

    def body(self):
        if self.action.kind not in ACTION_KINDS:
            raise EncodeError(f"response action must be decided, got {self.action.kind!r}")
        return {**action_to_json(self.action),
                "temporary-modify-preset": [modification_to_json(m)
                                            for m in self.temporary_modify_preset]}

    @classmethod
    def from_body(cls, sender, obj):
        action = action_from_json(obj)
        if action.kind not in ACTION_KINDS:
            raise ProtocolError(f"undecided action: {action.kind!r}")
        mods = tuple(modification_from_json(m) for m in obj.get("temporary-modify-preset", []))
        return cls(sender, action, mods)


@dataclass(frozen=True)
class ExperimentAssignment(Message):
    msg_type: ClassVar[str] = "experiment-assignment"
    experiment_id: str = ""
    process: str = ""
    promote_regions: tuple = ()
    duration: float = 900

    def body(self):
        return {"experiment-id": self.experiment_id, "process": self.process,
                "promote-regions": [encode_region(r) for r in self.promote_regions],
                "duration": format_duration(self.duration)}

    @classmethod
    def from_body(cls, sender, obj):
        return cls(sender, _req(obj, "experiment-id"), _req(obj, "process"),
                   tuple(decode_region(r) for r in _req(obj, "promote-regions")),
                   parse_duration(_req(obj, "duration")))


@dataclass(frozen=True)
class ExperimentResult(Message):
    msg_type: ClassVar[str] = "experiment-result"
    experiment_id: str = ""
    node_id: str = ""
    runtime_delta: float = 0.0
    load_page_walk_delta: float = 0.0
    store_page_walk_delta: float = 0.0
    fragmentation_bytes: int = 0
    valid: bool = True

    def body(self):
        return {"experiment-id": self.experiment_id, "node-id": self.node_id,
                "runtime-delta": self.runtime_delta,
                "load-page-walk-delta": self.load_page_walk_delta,
                "store-page-walk-delta": self.store_page_walk_delta,
                "fragmentation-bytes": self.fragmentation_bytes,
                "valid": self.valid}

    @classmethod
    def from_body(cls, sender, obj):
        return cls(sender, _req(obj, "experiment-id"), _req(obj, "node-id"),
                   _req(obj, "runtime-delta"), _req(obj, "load-page-walk-delta"),
                   _req(obj, "store-page-walk-delta"), _req(obj, "fragmentation-bytes"),
                   obj.get("valid", True))


MESSAGE_TYPES = {cls.msg_type: cls for cls in (
    Hello, PresetDownload, PresetUpdate, MetricsReport, PolicyQuery,
    PolicyResponse, ExperimentAssignment, ExperimentResult)}


def encode(m: Message) -> bytes:
    """One UTF-8 JSON line, newline-terminated."""
    obj = {"msg": m.msg_type, "version": PROTOCOL_VERSION, "from": m.sender, **m.body()}
    try:
        text = json.dumps(obj, allow_nan=False, ensure_ascii=False)
    except ValueError as exc:
        raise EncodeError(f"cannot encode {m.msg_type}: {exc}") from None
    return text.encode("utf-8") + b"\n"


def decode(line: bytes) -> Message:
    try:
        obj = json.loads(line)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("malformed JSON: expected an object")
    kind = _req(obj, "msg")
    version = _req(obj, "version")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"version mismatch: {version!r}")
    cls = MESSAGE_TYPES.get(kind)
    if cls is None:
        raise ProtocolError(f"unknown message type: {kind!r}")
    try:
        return cls.from_body(_req(obj, "from"), obj)
    except (TypeError, AttributeError) as exc:
        raise ProtocolError(f"malformed {kind}: {exc}") from None


def iter_lines(chunks: Iterable[bytes]) -> Iterator[bytes]:
    """Reassemble newline-framed lines from arbitrary byte chunks."""
    buf = b""
    for chunk in chunks:
        buf += chunk
        *lines, buf = buf.split(b"\n")
        yield from (line for line in lines if line)
    if buf.strip():
        yield buf


def decode_stream(data: bytes) -> list[Message]:
    return [decode(line) for line in iter_lines([data])]


# --- transports -----------------------------------------------------------

class InProcessTransport:
    """Deterministic node-side channel that still goes through the codec."""

    def __init__(self, cm):
        self.cm = cm
        self.bytes_sent = 0
        self.bytes_received = 0

    def request(self, m: Message) -> Message:
        line = encode(m)
        self.bytes_sent += len(line)
        reply = self.cm.handle_line(line)
        if reply is None:
            raise ProtocolError(f"no reply to {m.msg_type}")
        self.bytes_received += len(reply)
        return decode(reply)

    def send(self, m: Message) -> None:
        line = encode(m)
        self.bytes_sent += len(line)
        self.cm.handle_line(line)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for line in self.rfile:
            if not line.strip():
                continue
            with self.server.lock:
                reply = self.server.cm.handle_line(line)
            if reply is not None:
                self.wfile.write(reply)
                self.wfile.flush()


class TcpServer(socketserver.ThreadingTCPServer):
    """Serves a cluster manager over TCP; one lock serializes all CM mutations."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, cm, host="127.0.0.1", port=0):
        super().__init__((host, port), _Handler)
        self.cm = cm
        self.lock = threading.Lock()
        self._thread = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()


class TcpTransport:
    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("rb")
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, m: Message) -> None:
        line = encode(m)
        try:
            self.sock.sendall(line)
        except OSError as exc:
            raise ConnectionError(str(exc)) from exc
        self.bytes_sent += len(line)

    def request(self, m: Message) -> Message:
        self.send(m)
        reply = self.rfile.readline()
        if not reply:
            raise ConnectionError("cluster manager closed the connection")
        self.bytes_received += len(reply)
        return decode(reply)

    def close(self):
        self.rfile.close()
        self.sock.close()
