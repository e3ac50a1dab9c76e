import json

import pytest
from hypothesis import given, settings

from grapecm.cm import ClusterManager
from grapecm.policy import Action, AddressRegion, PresetModification, ReclaimTarget, listing_preset
from grapecm.wire import (
    EncodeError, Hello, InProcessTransport, MetricsReport, PolicyQuery, PolicyResponse,
    PresetDownload, ProcessInfo, ProtocolError, TcpServer, TcpTransport, decode, decode_stream,
    encode, format_duration, iter_lines, parse_duration, preset_from_json, preset_to_json,
)

from strategies import messages

LISTING_QUERY = PolicyQuery("node-1", "alloc-failure", "memcached",
                            {"error": "page-fault-huge-page-alloc", "current-mem-usage": 103,
                             "cpu-usage": 10})
LISTING_RESPONSE = PolicyResponse("cm", Action("alloc-base-page"), (
    PresetModification(3600, {"use_huge_pages": {}}),
    PresetModification(3600, {"mem_reclaim": ReclaimTarget(
        "my-low-priority-batch-job", AddressRegion(0x8000000, 0xf000000 - 0x8000000))}),
))


@settings(max_examples=300)
@given(messages)
def test_round_trip(m):
    line = encode(m)
    assert line.endswith(b"\n") and line.count(b"\n") == 1
    assert decode(line) == m


def test_listing_query_keys():
    line = encode(LISTING_QUERY)
    assert b'"type": "alloc-failure"' in line
    assert b'"process": "memcached"' in line
    obj = json.loads(line)
    assert obj["context"] == {"error": "page-fault-huge-page-alloc", "current-mem-usage": 103,
                              "cpu-usage": 10}


def test_listing_response_keys():
    obj = json.loads(encode(LISTING_RESPONSE))
    assert obj["action"] == "alloc-base-page"
    assert obj["temporary-modify-preset"] == [
        {"for": "1h", "use-huge-pages": []},
        {"for": "1h", "mem-reclaim": {"from": "my-low-priority-batch-job",
                                      "addr": "0x8000000-0xf000000"}},
    ]
    assert decode(encode(LISTING_RESPONSE)) == LISTING_RESPONSE


def test_listing_preset_keys():
    obj = preset_to_json(listing_preset())
    assert obj["mem-alloc-default"] == "demand-paging"
    assert obj["mem-alloc-exceptions"] == {"memcached": "eager"}
    assert obj["copy-on-write"] == "unspecified"
    assert obj["page-compaction"] == {"when": "midnight", "max-duration": "1s", "max-cpu": 0.02}
    assert obj["page-zeroing"] == {"interval": "30s", "max-cpu": 0.02}
    assert preset_from_json(obj) == listing_preset()


def test_empty_counters_encode():
    line = encode(MetricsReport("n", "n", 0, {}, 1.0))
    assert b'"counters": {}' in line


def test_metrics_report_byte_budget():
    counters = {f"counter-{i:02d}": 4_000_000_000 for i in range(25)}
    line = encode(MetricsReport("node-0001", "node-0001", 10**12, counters, 1.0))
    assert len(line) <= 1200


def test_non_finite_rejected():
    with pytest.raises(EncodeError):
        encode(MetricsReport("n", "n", 0, {"x": float("nan")}, 1.0))
    with pytest.raises(EncodeError):
        encode(MetricsReport("n", "n", 0, {}, float("inf")))


def test_undecided_response_rejected():
    with pytest.raises(EncodeError):
        encode(PolicyResponse("cm", Action("unspecified")))


def test_unknown_key_is_ignored():
    obj = json.loads(encode(LISTING_QUERY))
    obj["shiny-new-field"] = [1, 2, 3]
    assert decode(json.dumps(obj).encode()) == LISTING_QUERY


def test_missing_type_names_field():
    obj = json.loads(encode(LISTING_QUERY))
    del obj["type"]
    with pytest.raises(ProtocolError, match="missing field: type"):
        decode(json.dumps(obj).encode())


@pytest.mark.parametrize("line, needle", [
    (b"{not json", "malformed JSON"),
    (b"[1, 2]", "malformed JSON"),
    (b'{"msg": "hello", "version": "grapecm/0", "from": "x"}', "version mismatch"),
    (b'{"msg": "gossip", "version": "grapecm/1", "from": "x"}', "unknown message type"),
    (b'{"version": "grapecm/1", "from": "x"}', "missing field: msg"),
])
def test_decode_errors(line, needle):
    with pytest.raises(ProtocolError, match=needle):
        decode(line)


def test_framing_over_arbitrary_chunks():
    msgs = [LISTING_QUERY, LISTING_RESPONSE, Hello("n", "n", "std", (ProcessInfo("a", 1),))]
    data = b"".join(encode(m) for m in msgs)
    assert decode_stream(data) == msgs
    chunks = [data[i:i + 7] for i in range(0, len(data), 7)]
    assert [decode(l) for l in iter_lines(chunks)] == msgs


@pytest.mark.parametrize("text, seconds", [("1h", 3600), ("30s", 30), ("5m", 300), ("250ms", 0.25),
                                           ("1d", 86400), (90, 90)])
def test_durations(text, seconds):
    assert parse_duration(text) == seconds


def test_duration_format_round_trip():
    for s in (1, 30, 60, 3600, 7200, 0.25, 1.5, 86400):
        assert parse_duration(format_duration(s)) == s
    with pytest.raises(ProtocolError):
        parse_duration("soon")


def test_in_process_transport_counts_bytes():
    cm = ClusterManager()
    t = InProcessTransport(cm)
    t.send(Hello("node-1", "node-1", "std", (ProcessInfo("memcached", 5),
                                             ProcessInfo("batch", 0, AddressRegion(64, 8)))))
    reply = t.request(LISTING_QUERY)
    assert reply.action.kind == "alloc-base-page"
    assert t.bytes_sent > 0 and t.bytes_received > 0


def test_tcp_transport_round_trip():
    cm = ClusterManager()
    server = TcpServer(cm).start()
    try:
        t = TcpTransport("127.0.0.1", server.port)
        t.send(Hello("node-1", "node-1", "std", (ProcessInfo("memcached", 5),)))
        replies = [t.request(LISTING_QUERY) for _ in range(3)]
        t.close()
    finally:
        server.stop()
    assert all(isinstance(r, PolicyResponse) for r in replies)
    assert replies[0] == replies[1] == replies[2]
    assert cm.queries == 3


def test_preset_download_round_trip():
    m = PresetDownload("cm", listing_preset())
    assert decode(encode(m)).preset == listing_preset()
