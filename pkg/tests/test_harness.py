import csv
import io
import json

import pytest

from grapecm.cli import main
from grapecm.harness import (
    ScenarioError, ShapeMismatch, bundled, compare, dumps, from_dict, load, pct_delta, run,
)
from grapecm.harness.report import histogram_csv, log_histogram, percentiles, span_decades

SMALL_LATENCY = {
    "name": "tiny-latency", "description": "short fault-latency run", "kind": "fault-latency",
    "seed": 4, "node_count": 1, "duration": 0.5, "workloads": {"mix350": "all"},
    "baseline_mode": "linux-model", "params": {"faults": 2000},
}
SMALL_COORD = {
    "name": "tiny-coord", "description": "small staggering run", "kind": "coordination",
    "seed": 1, "node_count": 10, "duration": 600,
    "schedules": {"compaction": {"duration": 1, "period": 60, "cap": 1, "stall_ms": 50}},
    "params": {"request_rate": 5},
}


def write(tmp_path, doc, name="sc.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


# --- validation ---------------------------------------------------------------------

@pytest.mark.parametrize("change, field", [
    ({"node_count": 0}, "node_count"),
    ({"duration": 0}, "duration"),
    ({"kind": "magic"}, "kind"),
    ({"transport": "carrier-pigeon"}, "transport"),
    ({"workloads": {"nope": "all"}}, "workloads.nope"),
    ({"workloads": {"mix350": [3]}}, "workloads.mix350"),
    ({"colour": "blue"}, "colour"),
    ({"frag_budget": "lots"}, "frag_budget"),
    ({"preset": {"page-size-default": 3000}}, "preset"),
])
def test_validation_names_field(change, field):
    with pytest.raises(ScenarioError) as info:
        from_dict({**SMALL_LATENCY, **change})
    assert info.value.field == field


def test_coordination_needs_schedule():
    doc = {**SMALL_COORD, "schedules": {}}
    with pytest.raises(ScenarioError) as info:
        from_dict(doc)
    assert info.value.field == "schedules.compaction"


def test_bundled_scenarios_validate():
    names = {p.stem for p in bundled()}
    assert {"fig1-baseline", "fig3-ubmk", "fig3-xz", "fig3-mcf", "eager-memcached", "search-mcf",
            "coord-compaction", "metrics-budget"} <= names
    for p in bundled():
        assert load(p).name


def test_load_by_bundled_name():
    assert load("search-mcf").kind == "search"


# --- reports --------------------------------------------------------------------------

def test_log_histogram_buckets():
    h = log_histogram([1.0, 1.5, 10.0, 99.0, 1000.0])
    assert sum(h["counts"]) == 5
    assert h["edges"][0] <= 1.0 and h["edges"][-1] >= 1000.0


def test_percentiles_and_span():
    p = percentiles(list(range(1, 1001)))
    assert p["p50"] == pytest.approx(500.5)
    assert span_decades([0.5, 5000.0]) == pytest.approx(4.0)


def test_histogram_csv_has_header():
    text = histogram_csv({"latency_us": log_histogram([1.0, 10.0, 100.0])})
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["series", "lower", "upper", "count"] and len(rows) > 1


def test_pct_delta():
    assert pct_delta(80, 100) == -20
    assert pct_delta(0, 0) == 0
    assert pct_delta(1, 0) is None


def test_run_is_deterministic_and_seed_sensitive():
    sc = from_dict(SMALL_LATENCY)
    a, b = dumps(run(sc)), dumps(run(sc))
    assert a == b
    assert dumps(run(sc.with_seed(5))) != a


def test_compare_identity_and_shape():
    report = run(from_dict(SMALL_LATENCY))
    out = compare(report, report, "latency_us")
    assert out["p99"]["delta_pct"] == 0
    assert all(v["delta_pct"] in (0, None) for v in out["totals"].values())
    other = run(from_dict({**SMALL_COORD}))
    with pytest.raises(ShapeMismatch):
        compare(report, other, "latency_us")


def test_search_scenario_finds_planted_regions():
    res = run(load("search-mcf"))["results"]
    assert res["found"] and res["rounds"] <= 7 and res["machine_experiments"] <= 448


def test_coordination_reduces_tail():
    coord = run(from_dict(SMALL_COORD))["results"]
    uncoord = run(from_dict({**SMALL_COORD, "schedules": {"compaction": {
        **SMALL_COORD["schedules"]["compaction"], "coordinated": False}}}))["results"]
    assert coord["scheduled_peak"] <= 1
    assert coord["latency_ms"]["p99"] <= uncoord["latency_ms"]["p99"]


# --- CLI ------------------------------------------------------------------------------

def test_cli_run_and_compare(tmp_path, capsys):
    sc = write(tmp_path, SMALL_LATENCY)
    out, hist = tmp_path / "r.json", tmp_path / "h.csv"
    assert main(["run", "--scenario", sc, "--out", str(out), "--csv", str(hist)]) == 0
    assert json.loads(out.read_text())["name"] == "tiny-latency"
    assert hist.read_text().startswith("series,lower,upper,count")
    capsys.readouterr()
    assert main(["compare", "--a", str(out), "--b", str(out), "--metric", "latency_us"]) == 0
    assert json.loads(capsys.readouterr().out)["p50"]["delta_pct"] == 0


def test_cli_seed_override(tmp_path):
    sc = write(tmp_path, SMALL_LATENCY)
    main(["run", "--scenario", sc, "--out", str(tmp_path / "a.json"), "--seed", "9"])
    assert json.loads((tmp_path / "a.json").read_text())["seed"] == 9


def test_cli_validate_ok_and_invalid(tmp_path, capsys):
    assert main(["validate", "--scenario", write(tmp_path, SMALL_LATENCY)]) == 0
    bad = write(tmp_path, {**SMALL_LATENCY, "node_count": 0}, "bad.json")
    assert main(["validate", "--scenario", bad]) == 2
    assert "node_count" in capsys.readouterr().err


def test_cli_missing_file_is_validation_error(tmp_path):
    assert main(["validate", "--scenario", str(tmp_path / "absent.json")]) == 2


def test_cli_runtime_error_exit_code(tmp_path, capsys):
    doc = {**SMALL_COORD, "schedules": {"compaction": {"duration": 10, "period": 60, "cap": 1}}}
    assert main(["run", "--scenario", write(tmp_path, doc), "--out", str(tmp_path / "o.json")]) == 3
    assert "infeasible" in capsys.readouterr().err


def test_cli_compare_shape_mismatch(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["run", "--scenario", write(tmp_path, SMALL_LATENCY), "--out", str(a)])
    main(["run", "--scenario", write(tmp_path, SMALL_COORD, "c.json"), "--out", str(b)])
    assert main(["compare", "--a", str(a), "--b", str(b), "--metric", "latency_us"]) == 2
