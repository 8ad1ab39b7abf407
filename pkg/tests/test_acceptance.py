"""Acceptance criteria 1 to 12, one test each.

Every test records a one-line verdict that is printed after the pytest
summary (and by running this file directly).
"""

import copy
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import VERDICTS  # noqa: E402
from fifo_harness import floors, run_fifo  # noqa: E402

from tdmshim import scenario as s  # noqa: E402
from tdmshim.baseline import burst_peaks, collision_duration, md1_simulate, md1_wait_tail  # noqa: E402
from tdmshim.codec import (  # noqa: E402
    chain_mask,
    embed_pointer_array,
    extract_pointer_array,
    jc_fraction_expected,
    justify_tx,
    pos_expansion,
    random_stream,
)

BYTE_PS = 8000  # one client byte time at 1 Gbit/s
JITTER_BOUND = 100e-9


def verdict(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}"
    VERDICTS[n] = line
    print(line)
    assert ok, line


def _write_twice(name, tmp_path):
    a, b = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
    s.run(s.load_preset(name), out=a)
    s.run(s.load_preset(name), out=b)
    return _files(a), _files(b)


def _files(path):
    return {p.name: p.read_bytes() for p in sorted(Path(path).iterdir())}


@pytest.fixture(scope="module")
def fig5_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("fig5") / "a"
    t0 = time.time()
    rep = s.run(s.load_preset("fig5_beat"), out=out)
    return rep, out, time.time() - t0


# -- 1 -----------------------------------------------------------------------


def test_criterion_01_compensation_constant():
    d = s.load_preset("fig14_bus")
    t0 = time.time()
    rep = s.run(d)
    elapsed = time.time() - t0
    comp = {k: c.compensation_ps for k, c in rep.connections.items()}
    worst = max(abs(v - 6_400_000) for v in comp.values())
    simulated = d["duration"] - d["warmup"]
    ok = worst <= BYTE_PS and elapsed < 60 and simulated >= 0.01 and rep.ok
    verdict(
        1, ok,
        f"compensation {min(comp.values()) / 1e3:.3f}..{max(comp.values()) / 1e3:.3f} ns "
        f"over {len(comp)} connections, worst |x - 6400| = {worst / 1e3:.3f} ns (bound 8), "
        f"{simulated * 1e3:.0f} ms simulated in {elapsed:.1f} s",
    )


# -- 2 -----------------------------------------------------------------------


def test_criterion_02_constant_latency():
    d = s.load_preset("fig14_bus")
    d["duration"] = 0.022
    rep = s.run(d)
    sizes, lat = [], []
    for rec in rep.records.values():
        x = rec.latency.astype(float)
        sizes.append(rec.size.astype(float))
        lat.append(x - x.mean())  # pool connections around their own means
    n = sum(len(x) for x in sizes)
    r = float(np.corrcoef(np.concatenate(sizes), np.concatenate(lat))[0, 1])
    jitter = max(st.p2p_jitter for st in rep.flows.values())
    loss = sum(st.loss_count for st in rep.flows.values())
    ok = n >= 10**4 and jitter <= JITTER_BOUND and abs(r) < 0.01 and loss == 0
    verdict(2, ok, f"{n} frames, max p2p jitter {jitter * 1e9:.3f} ns, pooled r = {r:+.4f}, loss {loss}")


# -- 3 -----------------------------------------------------------------------


def test_criterion_03_baseline_contrast():
    rep = s.run(s.load_preset("fig6_rate_transition"))
    tdm = rep.flows["c:f"].p2p_jitter
    base = rep.flows["baseline:f"].p2p_jitter
    ok = base >= 10e-6 and tdm / base <= 0.01
    verdict(3, ok, f"baseline p2p {base * 1e9:.1f} ns, TDM p2p {tdm * 1e9:.3f} ns, ratio {tdm / base:.2e}")


# -- 4 -----------------------------------------------------------------------


def test_criterion_04_hop_scaling():
    d = s.load_preset("fig16_hops")
    rows = s.sweep(d, "hop_count", [0, 1, 2, 3])
    transit = d["nodes"][1]["transit_delay_ps"]
    # avg latencies are printed with ps resolution, so equality is exact
    lat_ps = [round(float(r["avg_latency_ns"]) * 1000) for r in rows]
    steps = [lat_ps[h] - lat_ps[0] for h in range(4)]
    j0, j3 = float(rows[0]["jitter_p2p_ns"]), float(rows[3]["jitter_p2p_ns"])
    ok = steps == [h * transit for h in range(4)] and j3 <= 2 * j0
    verdict(4, ok, f"latency(h) - latency(0) = {steps} ps, jitter {j0:.3f} -> {j3:.3f} ns")


# -- 5 -----------------------------------------------------------------------


def test_criterion_05_beat_collisions(fig5_run):
    rep, _, elapsed = fig5_run
    beat = rep.beat
    res = beat["baseline"]
    times, heights = burst_peaks(res)
    period = float(np.diff(times).mean()) * 1e-12 if len(times) > 1 else float("nan")
    expected = collision_duration(1500, 1e9) * 1e12
    peak_err = float(np.abs(heights - expected).max()) if len(heights) else float("inf")
    tdm_max = max(int(np.abs(x).max()) if len(x) else 0 for _, x in beat["tdm"].values())
    tdm_frames = sum(len(x) for _, x in beat["tdm"].values())
    beats = s.load_preset("fig5_beat")["duration"] / res.beat_period_s
    ok = (
        len(times) >= 2
        and abs(period - 1.25) <= 0.0125
        and peak_err <= BYTE_PS
        and tdm_max == 0
        and tdm_frames > 0
        and beats >= 3
    )
    verdict(
        5, ok,
        f"{len(times)} bursts, recurrence {period:.4f} s, peaks {heights.min() / 1e6:.3f}.."
        f"{heights.max() / 1e6:.3f} us (|err| <= {peak_err:.0f} ps), TDM extra max {tdm_max} ps "
        f"over {tdm_frames} frames, {beats:.2f} beat periods in {elapsed:.0f} s",
    )


# -- 6 -----------------------------------------------------------------------


def test_criterion_06_md1():
    ns = [1, 5, 10, 40, 80]
    worst = 0.0
    for k, rho in enumerate((0.5, 0.8, 0.9)):
        est = md1_simulate(rho, ns, arrivals=10**7, seed=600 + k)
        for n, p, se in zip(ns, est.p, est.stderr):
            worst = max(worst, abs(p - md1_wait_tail(rho, n)) / se)
    exact = all(md1_wait_tail(r, 1) == r for r in (0.5, 0.8, 0.9))
    rng = np.random.default_rng(6)
    mono = 0
    for _ in range(1000):
        rho = float(rng.uniform(0.01, 0.98))
        n = int(rng.integers(1, 80))
        p = md1_wait_tail(rho, n)
        if md1_wait_tail(rho, n + 1) <= p and md1_wait_tail(rho + 0.01, n) >= p:
            mono += 1
    ok = worst <= 3 and exact and mono == 1000
    verdict(6, ok, f"worst |analytic - simulated| = {worst:.2f} sigma at 1e7 arrivals, "
                   f"P(>=1) = rho exact: {exact}, monotone pairs {mono}/1000")


# -- 7 -----------------------------------------------------------------------


def test_criterion_07_controller():
    ratios, mins, amps = [], [], []
    drains = 2**22
    for ppm, drain_ppm in ((100, -100), (-100, 100), (100, 0), (-100, 0)):
        f = run_fifo(ppm, drains, drain_ppm=drain_ppm)  # raises FifoUnderrun on any underrun
        ratios.append(f.stats.steady_violations / (f.stats.drains - f.grace_drains))
        _, minima = floors(ppm, drains, window=256, drain_ppm=drain_ppm)
        mins.append(int(minima.min()))
        amps.append(int(minima.max() - minima.min()))
    ok = all(2**-19 <= r <= 2**-15 for r in ratios) and min(mins) >= 1 and max(amps) <= 4
    verdict(
        7, ok,
        f"{drains} drains per case, violation ratio x 2^17 = "
        f"{', '.join(f'{r * 2**17:.2f}' for r in ratios)}, min pre-arrival fill {min(mins)}, "
        f"limit-cycle amplitude <= {max(amps)} B",
    )


# -- 8 -----------------------------------------------------------------------


def _pointer_roundtrips(count):
    """Embed ``count`` seeded streams; extract them in batches per S_max."""
    groups: dict[int, list] = {100: [], 160: [], 250: []}
    for seed in range(count):
        rng = np.random.default_rng(seed)
        stream = random_stream(rng, int(rng.integers(1, 4)))
        s_max = (100, 160, 250)[seed % 3]
        bodies, anchors = embed_pointer_array(stream, s_max)
        groups[s_max].append((stream, bodies, anchors))
    good = 0
    for s_max, items in groups.items():
        bodies = np.concatenate([b for _, b, _ in items])
        anchors = np.concatenate([a for _, _, a in items])
        chain_mask(bodies, anchors, s_max)  # raises on any malformed chain
        row = 0
        for stream, b, _ in items:
            back = extract_pointer_array(bodies[row: row + len(b)], anchors[row: row + len(b)], s_max, len(stream))
            good += back == stream
            row += len(b)
    return good


def test_criterion_08_codec():
    count = 10**5
    good = _pointer_roundtrips(count)
    payload = np.random.default_rng(8).integers(0, 256, 10**7, dtype=np.uint8).tobytes()
    exp = pos_expansion(payload)
    p = 1e-6
    worst = 0.0
    for ppm in (0, 100, -100, 1000, -1000, 2000, -2000):
        rate = (250 - 0.5) * 8 / p * (1 + ppm * 1e-6)
        jc = justify_tx(rate, p, 250, 10**6)
        worst = max(worst, abs(jc.mean() - jc_fraction_expected(ppm * 1e-6, 250)))
    ok = good == count and abs(exp - 0.0078) <= 0.0005 and worst <= 0.002
    verdict(8, ok, f"{good}/{count} pointer roundtrips, PoS expansion {exp * 100:.4f}%, "
                   f"worst jc-fraction error {worst:.2e}")


# -- 9 -----------------------------------------------------------------------


def _reclaim_config():
    d = s.load_preset("fig16_hops")
    d["nodes"] = d["nodes"][:2]
    d["flows"] = [{"id": "be", "kind": "poisson", "rate": 12e9, "attach": {"be": [1, 2]}}]
    return d


def test_criterion_09_be_reclamation():
    d = _reclaim_config()
    rep = s.run(d)
    c = rep.connections["c"]
    frac = c.reclaimed / c.slots
    free = copy.deepcopy(d)
    free["connections"] = []
    free["bus"]["calendar"]["down"] = [None] * len(d["bus"]["calendar"]["down"])
    ref = s.run(free)
    be, be_ref = rep.be["1->2"].delivered_bytes, ref.be["1->2"].delivered_bytes
    rel = abs(be - be_ref) / be_ref
    sparse = copy.deepcopy(d)
    sparse["flows"].append({"id": "p", "kind": "periodic", "period": 1e-4, "size": ["fixed", 1500],
                            "attach": {"connection": "c"}})
    st = s.run(sparse).flows["c:p"]
    ok = frac >= 0.99 and rel <= 0.01 and st.p2p_jitter <= JITTER_BOUND and st.loss_count == 0 and st.count > 0
    verdict(
        9, ok,
        f"{c.reclaimed}/{c.slots} slots reclaimed ({frac:.2%}), BE {be} vs {be_ref} bytes "
        f"without reservation ({rel:.2%}), sparse frames {st.count} with p2p {st.p2p_jitter * 1e9:.3f} ns",
    )


# -- 10 ----------------------------------------------------------------------


def test_criterion_10_ptp():
    rep = s.run(s.load_preset("fig17_ptp"))
    o = rep.ptp
    spread = o.max_path_delay - o.min_path_delay
    jitter = rep.flows["m2s:sync"].p2p_jitter * 1e12
    d19 = s.load_preset("fig19_fieldtrial")
    o19 = s.run(d19).ptp
    exp = d19["expect"]
    dev = abs(o19.mean_path_delay - exp["mean_path_delay_ps"])
    ok = abs(o.mean_offset) <= 1 and spread <= jitter and dev <= exp["tolerance_ps"]
    verdict(
        10, ok,
        f"{o.count} exchanges, mean offset {o.mean_offset:.3f} ps, path-delay spread {spread / 1e3:.3f} ns "
        f"<= p2p {jitter / 1e3:.3f} ns; field trial path delay {o19.mean_path_delay / 1e6:.3f} us "
        f"(|dev| {dev / 1e6:.3f} us, tolerance {exp['tolerance_ps'] / 1e6:.1f} us)",
    )


# -- 11 ----------------------------------------------------------------------


def _isolation_config():
    d = s.load_preset("fig16_hops")
    d["nodes"] = d["nodes"][:3]
    d["connections"] = [
        {"id": "ca", "label": 1, "src": [1, 1], "dst": [3, 1], "rate": 1_000_000_000, "ppm": 80},
        {"id": "cb", "label": 2, "src": [1, 2], "dst": [3, 2], "rate": 1_000_000_000, "ppm": -60},
    ]
    d["bus"]["calendar"]["down"] = ["ca", "cb"] + [None] * 6
    d["flows"] = [
        {"id": "full", "kind": "random_size_saturating", "load": 1.0, "attach": {"connection": "ca"}},
        {"id": "sparse", "kind": "periodic", "period": 1e-4, "size": ["fixed", 1500],
         "attach": {"connection": "cb"}},
        {"id": "be12", "kind": "poisson", "rate": 12e9, "attach": {"be": [1, 2]}},
        {"id": "be23", "kind": "poisson", "rate": 12e9, "attach": {"be": [2, 3]}},
    ]
    return d


def _flow_lines(path, fid):
    lines = Path(path).read_text().splitlines()
    return [ln for ln in lines[1:] if ln.split(",")[1] == fid]


def test_criterion_11_isolation(tmp_path):
    d = _isolation_config()
    s.run(d, out=tmp_path / "all")
    same, counts = [], []
    for cid, fid in (("ca", "full"), ("cb", "sparse")):
        solo = copy.deepcopy(d)
        solo["connections"] = [c for c in d["connections"] if c["id"] == cid]
        solo["bus"]["calendar"]["down"] = [x if x == cid else None for x in d["bus"]["calendar"]["down"]]
        solo["flows"] = [f for f in d["flows"] if f["id"] == fid]
        s.run(solo, out=tmp_path / cid)
        a = _flow_lines(tmp_path / "all/records.csv", fid)
        b = _flow_lines(tmp_path / cid / "records.csv", fid)
        same.append(a == b and len(a) > 0)
        counts.append(len(a))
    ok = all(same)
    verdict(11, ok, f"records identical to solo runs: full load {same[0]} ({counts[0]} frames), "
                    f"sparse {same[1]} ({counts[1]} frames), with saturated BE on both segments")


# -- 12 ----------------------------------------------------------------------


def test_criterion_12_determinism(tmp_path, fig5_run):
    differ = []
    for name in s.PRESETS:
        if name == "fig5_beat":
            _, first, _ = fig5_run
            s.run(s.load_preset(name), out=tmp_path / "fig5_b")
            a, b = _files(first), _files(tmp_path / "fig5_b")
        else:
            a, b = _write_twice(name, tmp_path)
        if a != b or not a:
            differ.append(name)
    verdict(12, not differ, f"{len(s.PRESETS)} presets run twice, differing: {differ or 'none'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
