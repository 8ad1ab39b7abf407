import copy
import csv
import json

import pytest

from tdmshim import cli
from tdmshim import scenario as s
from tdmshim.errors import FifoUnderrun, ValidationError


@pytest.fixture(scope="module")
def fig14():
    return s.load_preset("fig14_bus")


def _mutate(d, fn):
    d = copy.deepcopy(d)
    fn(d)
    return s.validate(d)


def _has(problems, text):
    return any(text in p for p in problems)


# -- validation --------------------------------------------------------------


@pytest.mark.parametrize("name", s.PRESETS)
def test_presets_validate(name):
    assert s.validate(s.load_preset(name)) == []


def test_reservation_insufficient(fig14):
    probs = _mutate(fig14, lambda d: d["connections"][0].update(rate=1.01e9))
    assert _has(probs, "connections[0]: reservation insufficient")


def test_justification_range(fig14):
    probs = _mutate(fig14, lambda d: d["connections"][0].update(ppm=3000))
    assert _has(probs, "connections[0].ppm: 3000 outside the justification range")


def test_duplicate_labels(fig14):
    assert _has(_mutate(fig14, lambda d: d["connections"][1].update(label=1)), "duplicate labels")


def test_non_linear_topology(fig14):
    probs = _mutate(fig14, lambda d: d["nodes"][1].update(position=0))
    assert _has(probs, "topology is not linear")


def test_node_ppm_limit(fig14):
    assert _has(_mutate(fig14, lambda d: d["nodes"][1].update(ppm=2500)), "nodes[1].ppm")


def test_s_max_range(fig14):
    assert _has(_mutate(fig14, lambda d: d["bus"].update(s_max=300)), "bus.s_max")


@pytest.mark.parametrize("key,value", [("quantum", 0), ("quantum", 1.5), ("start_level", -3)])
def test_fifo_options(fig14, key, value):
    assert _has(_mutate(fig14, lambda d: d["fifo"].update({key: value})), f"fifo.{key}")


def test_schema_version(fig14):
    assert _has(_mutate(fig14, lambda d: d.update(schema="tdmshim/2")), "schema")


def test_rng_stream_type(fig14):
    assert _has(_mutate(fig14, lambda d: d["flows"][0].update(rng_stream=5)), "rng_stream")


def test_json_error_location():
    with pytest.raises(ValidationError) as e:
        s.parse_config('{"a": 1,\n  "b": }', "x.json")
    assert e.value.problems[0].startswith("x.json:2:8:")


def test_run_rejects_invalid(fig14):
    d = copy.deepcopy(fig14)
    d["connections"][1]["label"] = 1
    with pytest.raises(ValidationError):
        s.run(d)


# -- runs --------------------------------------------------------------------


def _files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_fig14_deterministic(fig14, tmp_path):
    s.run(fig14, out=tmp_path / "a", trace="slots")
    s.run(fig14, out=tmp_path / "b", trace="slots")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) >= {"records.csv", "summary.csv", "budget.csv", "telemetry.csv", "slots.csv"}
    assert a == b


def test_seed_changes_records(fig14, tmp_path):
    s.run(fig14, out=tmp_path / "a")
    s.run(fig14, seed=99, out=tmp_path / "b")
    assert (tmp_path / "a/records.csv").read_bytes() != (tmp_path / "b/records.csv").read_bytes()


def test_fig14_report(fig14):
    rep = s.run(fig14)
    assert rep.ok
    assert len(rep.connections) == 8
    assert all(v for v in rep.conservation.values())
    for key, st in rep.flows.items():
        assert st.loss_count == 0
        assert st.p2p_jitter <= 100e-9
    assert set(rep.be) == {"1->2", "2->1", "4->5"}


def test_slot_trace_columns(fig14, tmp_path):
    s.run(fig14, out=tmp_path, trace="slots")
    with open(tmp_path / "slots.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == s.SLOT_TRACE_COLUMNS
    actions = {r["action"] for r in rows}
    assert actions <= {"emit", "add", "reclaim", "transit", "drop", "be"}
    assert {"emit", "add", "drop"} <= actions
    assert {r["direction"] for r in rows} == {"down", "up"}


def test_fig19_path_delay():
    d = s.load_preset("fig19_fieldtrial")
    rep = s.run(d)
    exp = d["expect"]
    assert abs(rep.ptp.mean_path_delay - exp["mean_path_delay_ps"]) <= exp["tolerance_ps"]


def test_fig17_mirrored_offset():
    rep = s.run(s.load_preset("fig17_ptp"))
    assert rep.ptp.count >= 100
    assert abs(rep.ptp.mean_offset) <= 1
    spread = rep.ptp.max_path_delay - rep.ptp.min_path_delay
    assert spread <= rep.flows["m2s:sync"].p2p_jitter * 1e12


# -- sweeps ------------------------------------------------------------------


def test_hop_sweep_exact():
    rows = s.sweep(s.load_preset("fig16_hops"), "hop_count", [3, 0, 2, 1])
    assert [r["value"] for r in rows] == [0, 1, 2, 3]
    base = float(rows[0]["avg_latency_ns"])
    for r in rows:
        assert float(r["avg_latency_ns"]) - base == pytest.approx(500.0 * r["value"], abs=1e-9)
    assert len({r["seed"] for r in rows}) == 1


def test_s_max_sweep_budget():
    rows = s.sweep(s.load_preset("fig16_hops"), "S_max", [160, 800])
    assert [r["slot_cycle_compensation_ns"] for r in rows] == ["1280.000", "6400.000"]


def test_load_sweep_md1(tmp_path):
    rows = s.sweep(s.load_preset("fig3_md1"), "load", [0.5, 0.9], out=tmp_path)
    assert rows[0]["p_ge_1_analytic"] == "5.000000e-01"
    assert rows[1]["p_ge_1_analytic"] == "9.000000e-01"
    header = (tmp_path / "sweep.csv").read_text().splitlines()[0]
    assert "p_ge_80_simulated" in header


def test_parallel_sweep_matches_serial():
    d = s.load_preset("fig16_hops")
    assert s.sweep(d, "hop_count", [0, 1, 2], jobs=2) == s.sweep(d, "hop_count", [0, 1, 2])


def test_sweep_bad_value():
    with pytest.raises(ValidationError) as e:
        s.sweep(s.load_preset("fig16_hops"), "hop_count", [10])
    assert "hop_count 10" in e.value.problems[0]


def test_sweep_unknown_param():
    with pytest.raises(ValidationError):
        s.apply_param(s.load_preset("fig16_hops"), "colour", 1)


# -- command line ------------------------------------------------------------


def test_cli_validate_ok(capsys):
    assert cli.main(["validate", "fig14_bus"]) == cli.EXIT_OK
    assert "ok" in capsys.readouterr().out


def test_cli_validate_invalid(tmp_path, capsys):
    d = s.load_preset("fig14_bus")
    d["connections"][0]["ppm"] = 3000
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    assert cli.main(["validate", str(p)]) == cli.EXIT_INVALID
    assert "justification range" in capsys.readouterr().err


def test_cli_missing_file():
    assert cli.main(["run", "/nonexistent/x.json"]) == cli.EXIT_INVALID


def test_cli_run_summary(tmp_path, capsys):
    assert cli.main(["run", "fig16_hops", "--out", str(tmp_path), "--trace", "summary"]) == cli.EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("rx_port,tx_frames,rx_frames,loss_pct")
    assert (tmp_path / "records.csv").exists()


def test_cli_contract_failure(monkeypatch):
    def underrun(*args, **kw):
        raise FifoUnderrun("FIFO empty at drain 7")

    monkeypatch.setattr(s, "run", underrun)
    assert cli.main(["run", "fig16_hops"]) == cli.EXIT_CONTRACT


def test_cli_failed_report(monkeypatch, tmp_path):
    real = s.run

    def failing(*args, **kw):
        rep = real(*args, **kw)
        rep.failed = "conservation counters do not balance: down"
        return rep

    monkeypatch.setattr(s, "run", failing)
    assert cli.main(["run", "fig16_hops", "--out", str(tmp_path)]) == cli.EXIT_CONTRACT


def test_cli_sweep(tmp_path):
    argv = ["sweep", "fig16_hops", "--param", "hop_count", "--values", "0,1", "--out", str(tmp_path)]
    assert cli.main(argv) == cli.EXIT_OK
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 3


def test_cli_md1(capsys):
    assert cli.main(["md1", "--rho", "0.8", "--nmax", "5"]) == cli.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "rho,n,p"
    assert lines[-1] == "0.8,5,1.546249e-01"
