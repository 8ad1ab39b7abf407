import hashlib
from collections import deque

import numpy as np
import pytest

from tdmshim.bus import (
    BE,
    AddPort,
    BeReceiver,
    BeSender,
    BusConfig,
    BusNode,
    Calendar,
    DropPort,
    FrameSpans,
    be_transport,
    client_idle_mask,
    headend_emit,
    node_process,
    realign_bus,
    regenerated_idles,
)
from tdmshim.clocks import ClockDomain
from tdmshim.codec import BE_LABEL, NULL, ClientByteStream, SlotFrame, random_stream
from tdmshim.errors import GrossRateMisconfiguration, Misconfiguration

L = 888  # slot frame bytes of the 5 x 160 B configuration
BUS = 1_250_000_000  # 10G in bytes/s


def bus_clock(ppm=0.0, name="n"):
    return ClockDomain(name, BUS, ppm)


def test_config_geometry():
    cfg = BusConfig(s_max=160, units_per_slot=5, mode="subcontainer", pad=64)
    assert cfg.slot_frame_bytes == 888
    assert cfg.slot_time_ps == pytest.approx(710_400)
    assert BusConfig(s_max=160, pad=0).slot_frame_bytes % 8 == 0


def test_headend_labels_cycle():
    cal = Calendar(4, ["C1", BE, "C2", BE])
    got = [s.conn_label for _, s in headend_emit(cal, 8, bus_clock(), L)]
    assert got == ["C1", BE_LABEL, "C2", BE_LABEL] * 2
    pure = headend_emit(Calendar(1, [BE]), 5, bus_clock(), L)
    assert all(s.conn_label == BE_LABEL for _, s in pure)


def test_headend_spacing_follows_clock():
    cal = Calendar(1, [BE])
    ref = np.array([t for t, _ in headend_emit(cal, 10**5, bus_clock(0), L)])
    fast = np.array([t for t, _ in headend_emit(cal, 10**5, bus_clock(50), L)])
    ratio = (fast[-1] - fast[0]) / (ref[-1] - ref[0])
    assert ratio == pytest.approx(1 / 1.00005, abs=1e-9)


def test_calendar_length_checked():
    with pytest.raises(Misconfiguration):
        Calendar(3, ["a", BE])


def _node(nid=1, roles=None, transit=500_000):
    return BusNode(nid, nid, bus_clock(), transit, roles=roles or {})


def test_transit_is_transparent():
    node = _node(roles={"known": {7}})
    slot = SlotFrame(7, 3, 12, True, 0x41, False, bytes(range(160)))
    before = hashlib.sha256(slot.pack()).hexdigest()
    out, t, action = node_process(node, slot, 1_000_000, 160)
    assert action == "transit" and t == 1_500_000
    assert hashlib.sha256(out.pack()).hexdigest() == before


def test_unknown_label_rejected():
    with pytest.raises(Misconfiguration):
        node_process(_node(), SlotFrame(9, 0, body=bytes(160)), 0, 160)


def test_be_slot_with_empty_queue_is_idle_run():
    node = _node()
    out, _, action = node_process(node, SlotFrame(BE_LABEL, 0), 0, 160)
    assert action == "be"
    assert out.anchor == 0
    assert list(out.body[:159]) == list(range(1, 160)) and out.body[159] == NULL


def test_reclaimed_idle_counts():
    assert regenerated_idles(160, True) == 160
    assert regenerated_idles(160, False) == 159


def _add_drop_run(stream, n_slots, s_max=160, ppm=0.0):
    add = AddPort("c", 5, s_max, stream, bytes_per_slot=(s_max - 0.5) * (1 + ppm * 1e-6))
    drop = DropPort("c", s_max)
    src = _node(1, roles={5: ("add", add)})
    dst = _node(2, roles={5: ("drop", drop)})
    src.be_queue.extend([bytes([k]) * 300 for k in range(1, 6)])
    actions = []
    for seq in range(n_slots):
        slot, t, a1 = node_process(src, SlotFrame(5, seq), 0, s_max)
        slot = SlotFrame.unpack(slot.pack(), s_max)  # over the wire
        slot, t, a2 = node_process(dst, slot, t, s_max)
        actions.append((a1, a2))
    return add, drop, dst, actions


def test_add_drop_roundtrip_byte_exact():
    rng = np.random.default_rng(4)
    stream = random_stream(rng, 30)
    n = len(stream) // 159 + 3
    add, drop, _, actions = _add_drop_run(stream, n, ppm=300)
    got = drop.stream()
    assert got.idle[: len(stream)].tolist() == stream.idle.tolist()
    assert got == ClientByteStream(got.values, got.idle)
    data = ~stream.idle
    assert np.array_equal(got.values[: len(stream)][data], stream.values[data])
    assert len(got) == add.pos
    assert ("add", "drop") in actions


def test_idle_jb_stays_idle():
    # a gap that starts exactly at the justification position
    s_max = 160
    vals = np.arange(400, dtype=np.uint8)
    idle = np.zeros(400, bool)
    idle[159:175] = True
    add, drop, _, _ = _add_drop_run(ClientByteStream(vals, idle), 3, s_max, ppm=2000)
    got = drop.stream()
    assert got.idle[:400].tolist() == idle.tolist()


def test_reclaim_regenerates_idles_and_carries_be():
    stream = ClientByteStream.idles(5000)
    add, drop, dst, actions = _add_drop_run(stream, 20)
    assert all(a == ("reclaim", "drop") for a in actions)
    assert len(drop.stream()) == add.pos
    assert drop.stream().idle.all()
    # the five 300-byte BE packets rode in the reclaimed bodies
    assert dst.be_receiver.packets == [bytes([k]) * 300 for k in range(1, 6)]


def test_be_two_packets_one_pointer_byte():
    q = deque([b"\x01" * 70, b"\x02" * 80])
    slots = [SlotFrame(BE_LABEL, 0)]
    s = BeSender(q).next_body(160)
    assert s.idle.tolist() == [False] * 70 + [True] + [False] * 80 + [True] * 9
    got = be_transport(deque([b"\x01" * 70, b"\x02" * 80]), slots + [SlotFrame(BE_LABEL, 1)], 160)
    assert got == [b"\x01" * 70, b"\x02" * 80]


def test_be_packets_span_bodies():
    rng = np.random.default_rng(8)
    pkts = [rng.integers(0, 256, int(n), dtype=np.uint8).tobytes() for n in rng.integers(64, 1519, 40)]
    n_slots = sum(len(p) + 1 for p in pkts) // 160 + 2
    got = be_transport(deque(pkts), [SlotFrame(BE_LABEL, i) for i in range(n_slots)], 160)
    assert got == pkts


def test_be_packet_ending_at_body_boundary():
    sender, receiver = BeSender(deque([b"\x05" * 160, b"\x06" * 10])), BeReceiver()
    a = sender.next_body(160)
    b = sender.next_body(160)
    assert not a.idle.any() and b.idle[0]
    assert receiver.receive(a) == []
    assert receiver.receive(b) == [b"\x05" * 160, b"\x06" * 10]


# -- realignment ---------------------------------------------------------------


def test_realign_locked_is_passthrough():
    arr = np.arange(1000, dtype=np.int64) * L * 800
    times, adj = realign_bus(bus_clock(), arr, L, 12)
    assert times.tolist() == arr.tolist()
    assert not adj.any()


def test_realign_gap_follows_clock_offset():
    head = bus_clock(0, "head")
    n = 200_000
    arr = np.array([head.local_to_global(k * L) for k in range(0, n)], np.int64)
    _, adj = realign_bus(bus_clock(-100), arr, L, 12)
    # a slow node sees the train too fast: it removes idles at 100 ppm of the byte rate
    assert -adj.sum() == pytest.approx(100e-6 * n * L, rel=0.02)
    _, adj = realign_bus(bus_clock(100), arr, L, 12)
    assert adj.sum() == pytest.approx(100e-6 * n * L, rel=0.02)
    assert set(np.unique(adj)) <= {-1, 0, 1}


def test_realign_gap_budget_exceeded():
    arr = np.arange(10, dtype=np.int64) * 700_000  # spacing below one slot frame at 10G
    with pytest.raises(GrossRateMisconfiguration):
        realign_bus(bus_clock(), arr, L, 12)


def test_five_node_chain_random_clocks():
    rng = np.random.default_rng(1)
    head = bus_clock(float(rng.uniform(-100, 100)), "h")
    t = np.array([head.local_to_global(k * L) for k in range(20_000)], np.int64)
    for i in range(4):
        clk = bus_clock(float(rng.uniform(-100, 100)), f"n{i}")
        out, adj = realign_bus(clk, t, L, 12, delay=500_000)
        assert len(out) == len(t)
        d = out - t
        assert d.min() >= 500_000 and d.max() - d.min() <= 2 * 800  # within two byte times
        t = out


# -- spans ---------------------------------------------------------------------


def test_frame_spans_match_mask():
    rng = np.random.default_rng(0)
    starts = np.cumsum(rng.integers(80, 2000, 300))
    sizes = rng.integers(64, 70, 300)
    length = int(starts[-1] + 500)
    spans = FrameSpans(starts, sizes, length)
    mask = client_idle_mask(starts, sizes, length)
    assert np.array_equal(spans.to_mask(), mask)
    probe = rng.integers(0, length, 200)
    assert [spans[int(i)] for i in probe] == mask[probe].tolist()
    cum = np.concatenate([[0], np.cumsum(~mask)])
    assert spans.data_before(probe).tolist() == cum[probe].tolist()
    assert FrameSpans([], [], 10).data_before([3]).tolist() == [0]
