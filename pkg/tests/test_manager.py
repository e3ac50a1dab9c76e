import pytest

from grapecm.cm import (
    ClusterManager, CompactionDecision, PagingModeDecision, PresetConflict, PromotionDecision,
    RegionEstimate, RunRecord, Window, compile_preset,
)
from grapecm.policy import AddressRegion, PresetPolicy, ReclaimTarget, listing_preset
from grapecm.wire import Hello, MetricsReport, PolicyQuery, ProcessInfo, encode

NODE = Hello("node-1", "node-1", "std", (ProcessInfo("memcached", 5, AddressRegion(0, 64)),
                                         ProcessInfo("my-low-priority-batch-job", 0,
                                                     AddressRegion(0x40, 0x38))))
ALLOC_FAIL = PolicyQuery("node-1", "alloc-failure", "memcached",
                         {"error": "page-fault-huge-page-alloc", "current-mem-usage": 103,
                          "cpu-usage": 10})


# --- compile_preset -----------------------------------------------------------

def test_compile_fills_template():
    base = PresetPolicy(version=3)
    out = compile_preset(base, [
        PromotionDecision("mcf", (AddressRegion(3001), AddressRegion(1234))),
        PagingModeDecision("memcached", "eager"),
        CompactionDecision(Window(12.0, 1.0, 60.0, 0.02)),
    ])
    assert out.version == 4
    assert out.use_huge_pages["mcf"] == (AddressRegion(1234), AddressRegion(3001))
    assert out.mem_alloc_exceptions == {"memcached": "eager"}
    assert out.page_compaction.when == 12.0 and out.page_compaction.period == 60.0


def test_compile_without_decisions_bumps_version():
    out = compile_preset(listing_preset())
    assert out.version == listing_preset().version + 1
    assert out.use_huge_pages == listing_preset().use_huge_pages


def test_mode_equal_to_default_drops_exception():
    out = compile_preset(listing_preset(), [PagingModeDecision("memcached", "demand")])
    assert "memcached" not in out.mem_alloc_exceptions


def test_empty_promotion_removes_entry():
    out = compile_preset(listing_preset(), [PromotionDecision("memcached", ())])
    assert "memcached" not in out.use_huge_pages


def test_conflicting_decisions_raise():
    with pytest.raises(PresetConflict):
        compile_preset(PresetPolicy(), [PagingModeDecision("a", "eager"),
                                        PagingModeDecision("a", "demand")])
    with pytest.raises(PresetConflict):
        compile_preset(PresetPolicy(), [PromotionDecision("a", (AddressRegion(10, 5),
                                                                AddressRegion(12, 2)))])


# --- handle_query -----------------------------------------------------------------

def test_alloc_failure_gets_listing_response():
    cm = ClusterManager()
    cm.handle_message(NODE)
    r = cm.handle_query(ALLOC_FAIL)
    assert r.action.kind == "alloc-base-page"
    assert [m.ttl for m in r.temporary_modify_preset] == [3600, 3600]
    assert r.temporary_modify_preset[0].overlay == {"use_huge_pages": {}}
    assert r.temporary_modify_preset[1].overlay == {
        "mem_reclaim": ReclaimTarget("my-low-priority-batch-job", AddressRegion(0x40, 0x38))}


def test_unmatched_query_gets_default_and_alert():
    cm = ClusterManager()
    cm.handle_message(NODE)
    r = cm.handle_query(PolicyQuery("node-1", "oom-unspecified", "memcached", {}))
    assert r.action.kind == "alloc-base-page" and r.temporary_modify_preset == ()
    assert cm.alerts[-1]["kind"] == "no-rule"


def test_unknown_process_alerts():
    cm = ClusterManager()
    cm.handle_message(NODE)
    cm.handle_query(PolicyQuery("node-1", "alloc-failure", "ghost", {}))
    assert cm.alerts[-1]["kind"] == "unknown-process"


def test_identical_queries_identical_answers():
    cm = ClusterManager()
    cm.handle_message(NODE)
    assert len({encode(cm.handle_query(ALLOC_FAIL)) for _ in range(5)}) == 1


def test_bad_line_is_alerted_not_raised():
    cm = ClusterManager()
    assert cm.handle_line(b"{nope") is None
    assert cm.alerts[-1]["kind"] == "bad-message"


def test_metric_bytes_counted():
    cm = ClusterManager()
    line = encode(MetricsReport("n", "n", 0, {"faults": 1}, 1.0))
    cm.handle_line(line)
    assert cm.metric_bytes == len(line) and "n" in cm.metrics


def test_preset_versions_must_increase():
    cm = ClusterManager()
    cm.issue_preset("std", PresetPolicy(version=2))
    with pytest.raises(ValueError):
        cm.issue_preset("std", PresetPolicy(version=2))


# --- persistence ----------------------------------------------------------------

def test_replay_rebuilds_state(tmp_path):
    path = tmp_path / "cm.ndjson"
    cm = ClusterManager(log_path=path)
    cm.record_run("memcached", RunRecord("demand", 1.0))
    cm.record_run("memcached", RunRecord("eager", 0.85, 0.0, 0.0))
    cm.set_estimates("mcf", [RegionEstimate(AddressRegion(1234), 0.025, 0.001, 8, 4096),
                             RegionEstimate(AddressRegion(7), 0.0, float("inf"), 1, 0)])
    cm.issue_preset("std", listing_preset())
    cm.alert("test", detail=1)

    again = ClusterManager.replay(path)
    assert again.histories["memcached"].runs == cm.histories["memcached"].runs
    assert again.estimates == cm.estimates
    assert again.presets == cm.presets
    assert again.classify("memcached").mode == cm.classify("memcached").mode == "eager"
    assert len(again.alerts) == 1
