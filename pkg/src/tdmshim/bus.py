"""Slot-synchronous linear bus.

The head-end emits a train of fixed-length slot frames paced by its own clock.
Every downstream node re-times the train to its local byte clock by moving
inter-slot idles, forwards transit slots untouched, drops and adds its own
connections, and refills best-effort capacity from its packet queue.

Two layers live here. The slot-frame functions (:func:`headend_emit`,
:func:`node_process`, :func:`reclaim_idle`, :func:`realign_bus`,
:func:`be_transport`) work on real :class:`~tdmshim.codec.SlotFrame` bodies.
:class:`BusSimulator` runs the same rules on byte counts, which is what long
scenario runs need.
"""

from __future__ import annotations

import hashlib
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .clocks import (
    PS_PER_S,
    ClockDomain,
    first_tick_at_or_after_array,
    global_to_local_array,
    local_to_global_array,
)
from .codec import (
    BE_LABEL,
    DEFAULT_IFG,
    HEADER_BYTES,
    NULL,
    ClientByteStream,
    ClientFrame,
    SlotFrame,
    embed_pointer_array,
    extract_pointer_array,
    justification_range,
)
from .elastic import RxElasticFifo
from .errors import GrossRateMisconfiguration, Misconfiguration, TxUnderflow

BE = None  # calendar entry for best effort
MODES = ("subcontainer", "jcjb")


@dataclass
class Calendar:
    cycle_length: int
    assignment: list  # connection id or None per slot index

    def __post_init__(self):
        if len(self.assignment) != self.cycle_length:
            raise Misconfiguration("calendar assignment length != cycle_length")

    def label(self, seq: int):
        return self.assignment[seq % self.cycle_length]

    def slots_for(self, conn_id) -> list[int]:
        return [i for i, a in enumerate(self.assignment) if a == conn_id]


@dataclass
class Connection:
    id: str
    src: tuple  # (node, port)
    dst: tuple
    client_rate: int  # nominal bits/s
    clock_domain: ClockDomain  # client clock (bit ticks)
    label: int = 0

    @property
    def src_node(self) -> int:
        return self.src[0]

    @property
    def dst_node(self) -> int:
        return self.dst[0]


@dataclass
class BusNode:
    id: int
    position: int
    local_clock: ClockDomain  # bus byte clock of this node
    transit_delay: int = 500_000  # ps
    be_capacity: int = 256  # packets
    roles: dict = field(default_factory=dict)
    be_queue: deque = field(default_factory=deque)
    be_sender: "BeSender" = field(init=False, repr=False)
    be_receiver: "BeReceiver" = field(default_factory=lambda: BeReceiver(), repr=False)

    def __post_init__(self):
        self.be_sender = BeSender(self.be_queue)


@dataclass
class BusConfig:
    gross_rate: int = 10_000_000_000
    s_max: int = 160
    units_per_slot: int = 1
    mode: str = "jcjb"
    ifg: int = DEFAULT_IFG
    pad: int = 0  # extra idle bytes per slot frame, multiple of 8
    bus_phy: int = 500_000  # ps, bus Tx+Rx interfaces once per connection
    link_delay: int = 0  # ps per segment (propagation)
    tx_headroom: int | None = None  # jcjb Tx backlog kept before sending JB

    @property
    def body_bytes(self) -> int:
        return self.s_max * self.units_per_slot

    @property
    def slot_frame_bytes(self) -> int:
        raw = HEADER_BYTES + self.body_bytes + self.ifg
        return -(-raw // 8) * 8 + self.pad

    @property
    def slot_time_ps(self) -> float:
        return self.slot_frame_bytes * 8 * PS_PER_S / self.gross_rate

    def client_bytes_nominal(self) -> float:
        """Client bytes one reserved slot carries at the neutral operating point."""
        if self.mode == "jcjb":
            return self.s_max - 0.5
        return float(self.body_bytes)


# -- slot-frame level operations ---------------------------------------------


def headend_emit(calendar: Calendar, n: int, clock: ClockDomain, frame_bytes: int, start_seq: int = 0):
    """Slot skeletons with emission times: [(t_ps, SlotFrame)]."""
    out = []
    for seq in range(start_seq, start_seq + n):
        label = calendar.label(seq)
        t = clock.local_to_global(seq * frame_bytes)
        out.append((t, SlotFrame(BE_LABEL if label is BE else label, seq & 0xFFFF)))
    return out


def be_bodies(packets: Sequence[bytes], s_max: int, n_slots: int | None = None):
    """Pack packets back to back with one idle (one pointer byte) in between."""
    frames = [ClientFrame(i, len(p), p) for i, p in enumerate(packets)]
    stream = ClientByteStream.from_frames(frames, 1)
    if packets:
        stream = ClientByteStream(stream.values[:-1], stream.idle[:-1])
    bodies, anchors = embed_pointer_array(stream, s_max)
    if n_slots is not None and len(anchors) < n_slots:
        extra = n_slots - len(anchors)
        pad_b, pad_a = embed_pointer_array(ClientByteStream.idles(extra * s_max), s_max)
        bodies = np.vstack([bodies, pad_b])
        anchors = np.concatenate([anchors, pad_a])
    return bodies, anchors


class BeSender:
    """Best-effort packets of one bus segment as a stream over slot bodies.

    Packets may span bodies; back-to-back packets are separated by a single
    idle, which the pointer codec turns into one pointer byte.
    """

    def __init__(self, queue: deque | None = None):
        self.queue = deque() if queue is None else queue
        self.offset = 0  # bytes of queue[0] already sent
        self.separate = False

    def next_body(self, s_max: int) -> ClientByteStream:
        vals = np.zeros(s_max, np.uint8)
        idle = np.ones(s_max, bool)
        pos = 0
        while pos < s_max:
            if self.separate:
                self.separate = False
                pos += 1
                continue
            if not self.queue:
                break
            p = self.queue[0]
            take = min(s_max - pos, len(p) - self.offset)
            vals[pos : pos + take] = np.frombuffer(p, np.uint8, take, self.offset)
            idle[pos : pos + take] = False
            pos += take
            self.offset += take
            if self.offset == len(p):
                self.queue.popleft()
                self.offset = 0
                self.separate = True
        return ClientByteStream(vals, idle)


class BeReceiver:
    """Reassembles packets from the BE bodies of one segment."""

    def __init__(self):
        self.partial = bytearray()
        self.packets: list[bytes] = []

    def receive(self, stream: ClientByteStream) -> list[bytes]:
        done = []
        data = (~stream.idle).astype(np.int8)
        edges = np.diff(np.concatenate([[0], data, [0]]))
        starts = np.flatnonzero(edges == 1).tolist()
        stops = np.flatnonzero(edges == -1).tolist()
        if self.partial and (not starts or starts[0] > 0):
            done.append(bytes(self.partial))
            self.partial = bytearray()
        n = len(stream)
        for a, b in zip(starts, stops):
            self.partial.extend(stream.values[a:b].tobytes())
            if b < n:
                done.append(bytes(self.partial))
                self.partial = bytearray()
        self.packets.extend(done)
        return done


def _be_encode(sender: BeSender, s_max: int) -> tuple[bytes, int]:
    bodies, anchors = embed_pointer_array(sender.next_body(s_max), s_max)
    return bodies[0].tobytes(), int(anchors[0])


def _be_decode(slot: SlotFrame, s_max: int) -> ClientByteStream:
    arr = np.frombuffer(slot.body, np.uint8).reshape(1, s_max)
    return extract_pointer_array(arr, np.array([slot.anchor]), s_max)


def be_transport(be_queue: deque, slots: Sequence[SlotFrame], s_max: int) -> list[bytes]:
    """Fill the given BE slot bodies from ``be_queue`` and reassemble them.

    Returns the packets the receiving node reconstructs; a packet still cut
    at the end of the last slot is not returned.
    """
    sender, receiver = BeSender(be_queue), BeReceiver()
    out = []
    for slot in slots:
        slot.body, slot.anchor = _be_encode(sender, s_max)
        out.extend(receiver.receive(_be_decode(slot, s_max)))
    return out


@dataclass
class AddPort:
    """Tx side of one connection at its add node, on real bytes (jcjb mapping)."""

    conn_id: str
    label: int
    s_max: int
    stream: ClientByteStream
    pos: int = 0
    credit: float = 0.0
    bytes_per_slot: float = 0.0

    def next_chunk(self) -> tuple[ClientByteStream, bool]:
        self.credit += self.bytes_per_slot - (self.s_max - 1)
        jc = False
        if self.credit >= 1.0:
            self.credit -= 1.0
            jc = True
        n = self.s_max - 1 + int(jc)
        a, b = self.pos, self.pos + n
        self.pos = b
        chunk = ClientByteStream(self.stream.values[a:b], self.stream.idle[a:b])
        if len(chunk) < n:  # past the end of the offered stream the client sends idles
            chunk = chunk.concat(ClientByteStream.idles(n - len(chunk)))
        return chunk, jc


@dataclass
class DropPort:
    conn_id: str
    s_max: int
    received: list = field(default_factory=list)  # ClientByteStream chunks

    def stream(self) -> ClientByteStream:
        if not self.received:
            return ClientByteStream.idles(0)
        out = self.received[0]
        for c in self.received[1:]:
            out = out.concat(c)
        return out


def _encode_chunk(chunk: ClientByteStream, jc: bool, s_max: int):
    """Pointer-map ``S_max - 1 + jc`` client symbols into one body.

    The last body position is the justification position: with jc it holds
    the JB symbol inside the pointer chain, so an idle JB stays an idle;
    without jc it is void and outside the chain. Returns (body, anchor, jb)
    where jb mirrors the byte in the justification position.
    """
    n = s_max - 1 + int(jc)
    if len(chunk) != n:
        raise ValueError(f"chunk of {len(chunk)} symbols, expected {n}")
    bodies, anchors = embed_pointer_array(chunk.concat(ClientByteStream.idles(s_max - n)), s_max)
    body = bytearray(bodies[0].tobytes())
    anchor = int(anchors[0])
    if not jc:
        idle_at = np.flatnonzero(chunk.idle)
        if len(idle_at):
            body[int(idle_at[-1])] = NULL
        else:
            anchor = NULL
        body[s_max - 1] = 0
    return bytes(body), anchor, body[s_max - 1] if jc else 0


def _decode_chunk(slot: SlotFrame, s_max: int) -> ClientByteStream:
    arr = np.frombuffer(slot.body, np.uint8).reshape(1, s_max)
    return extract_pointer_array(arr, np.array([slot.anchor]), s_max, s_max - 1 + int(slot.jc))


def reclaim_idle(slot: SlotFrame, jc: bool, sender: BeSender, s_max: int) -> SlotFrame:
    """Give a reserved slot whose client offered only idles to best effort.

    The idle flag is set, jc keeps the justification bookkeeping of the idles
    that were not carried, and the body continues the BE stream of ``sender``.
    """
    slot.idle_flag = True
    slot.jc = jc
    slot.jb = 0
    slot.body, slot.anchor = _be_encode(sender, s_max)
    return slot


def regenerated_idles(s_max: int, jc: bool) -> int:
    """Idles the drop node reconstructs for a reclaimed slot."""
    return s_max - 1 + int(jc)


def node_process(node: BusNode, slot: SlotFrame, t: int, s_max: int):
    """Apply this node's role for ``slot``; returns (slot, t_out, action).

    ``node.roles`` maps a label to ("add", AddPort) or ("drop", DropPort);
    labels listed in ``node.roles['known']`` transit after ``transit_delay``.
    BE slots are drained into ``node.be_receiver`` and refilled from
    ``node.be_queue``. A dropped position continues downstream as best effort,
    and a reclaimed slot's body is best effort for the segment after its add
    node, so the next node consumes it like any BE slot.
    """
    role = node.roles.get(slot.conn_label)
    if slot.conn_label == BE_LABEL or (slot.idle_flag and role is None):
        if slot.body:
            node.be_receiver.receive(_be_decode(slot, s_max))
        if slot.idle_flag:
            # the reservation still runs downstream; only its idle count travels on
            slot.body, slot.anchor = _be_encode(node.be_sender, s_max)
            return slot, t + node.transit_delay, "transit"
        slot.body, slot.anchor = _be_encode(node.be_sender, s_max)
        return slot, t, "be"
    if role is None:
        if slot.conn_label not in node.roles.get("known", ()):
            raise Misconfiguration(f"node {node.id}: unknown label {slot.conn_label}")
        return slot, t + node.transit_delay, "transit"
    kind, port = role
    if kind == "drop":
        if slot.idle_flag:
            port.received.append(ClientByteStream.idles(regenerated_idles(s_max, slot.jc)))
            node.be_receiver.receive(_be_decode(slot, s_max))
        else:
            port.received.append(_decode_chunk(slot, s_max))
        slot.conn_label = BE_LABEL
        slot.idle_flag = False
        slot.jc = False
        slot.jb = 0
        slot.body, slot.anchor = _be_encode(node.be_sender, s_max)
        return slot, t, "drop"
    chunk, jc = port.next_chunk()
    if chunk.idle.all():
        return reclaim_idle(slot, jc, node.be_sender, s_max), t, "reclaim"
    slot.jc = jc
    slot.idle_flag = False
    slot.body, slot.anchor, slot.jb = _encode_chunk(chunk, jc, s_max)
    return slot, t, "add"


def realign_bus(
    node_clock: ClockDomain,
    arrivals: Sequence[int],
    frame_bytes: int,
    ifg: int = DEFAULT_IFG,
    delay: int = 0,
    min_gap: int = 1,
):
    """Re-time a slot train onto ``node_clock`` (byte ticks).

    Each slot leaves at the first local byte tick at or after its arrival plus
    ``delay``. Returns (departure times, per-slot idle adjustment), where the
    adjustment is the gap in front of the next slot minus the nominal ``ifg``:
    positive means idles were inserted, negative removed.
    """
    arr = np.asarray(arrivals, np.int64) + delay
    ticks = first_tick_at_or_after_array(node_clock, arr)
    times = local_to_global_array(node_clock, ticks)
    gaps = np.diff(ticks) - (frame_bytes - ifg)
    if len(gaps) and gaps.min() < min_gap:
        raise GrossRateMisconfiguration(
            f"clock {node_clock.id}: inter-slot gap {int(gaps.min())} below {min_gap} bytes"
        )
    return times, gaps - ifg


# -- count-based simulator ---------------------------------------------------


@dataclass
class TxResult:
    """Per reserved slot of one connection: what was carried."""

    slot_index: np.ndarray  # index into the bus slot train
    dep_ps: np.ndarray  # departure from the add node
    count: np.ndarray  # client bytes carried (incl. regenerated idles)
    jc: np.ndarray
    reclaimed: np.ndarray  # idle_flag set: no client data in the slot
    first_byte: np.ndarray  # client index of the first carried byte


@dataclass
class ConnectionRun:
    conn: Connection
    tx: TxResult
    arrival_ps: np.ndarray
    fifo: RxElasticFifo | None = None
    drain_clock: ClockDomain | None = None


@dataclass
class BeRun:
    node: int
    offered_bytes: int = 0
    delivered_bytes: int = 0
    offered_packets: int = 0
    delivered_packets: int = 0
    dropped_packets: int = 0
    slots_used: int = 0
    capacity_bytes: int = 0


class BusSimulator:
    """One direction of one bus, advanced slot by slot."""

    def __init__(
        self,
        config: BusConfig,
        calendar: Calendar,
        nodes: Sequence[BusNode],
        connections: Sequence[Connection],
        headend: int = 0,
        link_delays: dict | None = None,
    ):
        self.config = config
        self.calendar = calendar
        self.nodes = list(nodes)
        self.connections = {c.id: c for c in connections}
        self.headend = headend
        self.order = [n.id for n in sorted(self.nodes, key=lambda n: n.position)]
        self.node_by_id = {n.id: n for n in self.nodes}
        self.link_delays = dict(link_delays or {})  # incoming segment delay per node id
        self.trace: list[tuple] = []
        self.realign_stats: dict = {}

    # timing -----------------------------------------------------------------

    def slot_count(self, duration_ps: int) -> int:
        head = self.node_by_id[self.order[0]].local_clock
        return head.first_tick_at_or_after(duration_ps) // self.config.slot_frame_bytes + 1

    def slot_times(self, n_slots: int) -> dict[int, np.ndarray]:
        """Departure time of every slot from every node (ps)."""
        cfg = self.config
        L = cfg.slot_frame_bytes
        head = self.node_by_id[self.order[0]]
        out = {}
        prev = local_to_global_array(head.local_clock, np.arange(n_slots, dtype=np.int64) * L)
        out[head.id] = prev
        self.realign_stats[head.id] = (0, 0)
        for nid in self.order[1:]:
            node = self.node_by_id[nid]
            link = self.link_delays.get(nid, cfg.link_delay)
            times, adj = realign_bus(node.local_clock, prev + link, L, cfg.ifg, node.transit_delay)
            self.realign_stats[nid] = (int(adj[adj > 0].sum()), int(-adj[adj < 0].sum()))
            out[nid] = times
            prev = times
        return out

    def arrival_at(self, times: dict, node_id: int) -> np.ndarray:
        """Arrival of each slot at ``node_id`` (before its own forwarding delay)."""
        i = self.order.index(node_id)
        if i == 0:
            return times[node_id]
        up = self.order[i - 1]
        return times[up] + self.link_delays.get(node_id, self.config.link_delay)

    # Tx ---------------------------------------------------------------------

    def run_tx(self, conn: Connection, idle: np.ndarray, dep_ps: Sequence[int], slot_idx: np.ndarray) -> TxResult:
        cfg = self.config
        clk = conn.clock_domain
        n = len(dep_ps)
        count = np.zeros(n, np.int64)
        jcs = np.zeros(n, bool)
        first = np.zeros(n, np.int64)
        total = len(idle)
        spans = idle if isinstance(idle, FrameSpans) else None
        if spans is None:
            data_cum = np.concatenate([[0], np.cumsum(~np.asarray(idle, bool))])
        sent = 0
        started = False
        U = cfg.s_max
        headroom = cfg.tx_headroom if cfg.tx_headroom is not None else U // 2
        dep_arr = np.asarray(dep_ps, np.int64)
        ok = dep_arr >= clk.phase
        ent = np.zeros(n, np.int64)
        ent[ok] = global_to_local_array(clk, dep_arr[ok]) // 8
        ent = np.minimum(ent, total).tolist()
        for i in range(n):
            entered = ent[i]
            first[i] = sent
            if cfg.mode == "subcontainer":
                units = entered // U - sent // U
                k = min(cfg.units_per_slot, units)
                count[i] = k * U
            else:
                avail = entered - sent
                if not started:
                    if avail < U + headroom:
                        continue
                    started = True
                jc = avail >= U + headroom
                need = U - 1 + int(jc)
                if avail < need:
                    raise TxUnderflow(f"{conn.id}: {avail} bytes ready, slot needs {need}")
                jcs[i] = jc
                count[i] = need
            sent += int(count[i])
        if spans is not None:
            carried_data = spans.data_before(first + count) - spans.data_before(first)
        else:
            carried_data = data_cum[first + count] - data_cum[first]
        # a slot without client data (all idle, or no unit ready yet) leaves idle-flagged
        reclaimed = carried_data == 0
        return TxResult(np.asarray(slot_idx), dep_arr, count, jcs, reclaimed, first)

    # BE ---------------------------------------------------------------------

    def be_usable(self, slot_label, seg_from: int, reclaimed: bool, active: bool) -> bool:
        """Can the slot carry BE on the segment leaving node ``seg_from``?"""
        if slot_label is BE:
            return True
        conn = self.connections[slot_label]
        i = self.order.index(seg_from)
        a = self.order.index(conn.src_node)
        d = self.order.index(conn.dst_node)
        if not (a <= i < d):
            return True
        return reclaimed or not active

    def run_be(self, node_id: int, dep_ps, usable: np.ndarray, arrivals_ps: np.ndarray, sizes: np.ndarray) -> BeRun:
        """Serve one node's BE queue (destined to the next node) with its usable slots."""
        node = self.node_by_id[node_id]
        cap_slot = self.config.body_bytes
        res = BeRun(node_id)
        res.offered_packets = len(sizes)
        res.offered_bytes = int(sizes.sum())
        q: deque = deque()  # [remaining bytes, size]
        ai = 0
        n_arr = len(arrivals_ps)
        for j in np.flatnonzero(usable):
            t = dep_ps[j]
            while ai < n_arr and arrivals_ps[ai] <= t:
                if len(q) >= node.be_capacity:
                    res.dropped_packets += 1
                else:
                    q.append([int(sizes[ai]), int(sizes[ai])])
                ai += 1
            room = cap_slot
            res.capacity_bytes += cap_slot
            used = False
            while q and room > 0:
                head = q[0]
                take = min(room, head[0])
                head[0] -= take
                room -= take
                used = True
                if head[0] == 0:
                    q.popleft()
                    res.delivered_packets += 1
                    res.delivered_bytes += head[1]
                    room -= 1  # pointer byte between back-to-back packets
            res.slots_used += int(used)
        # arrivals after the last slot are still counted as offered
        while ai < n_arr:
            if len(q) >= node.be_capacity:
                res.dropped_packets += 1
            else:
                q.append([int(sizes[ai]), int(sizes[ai])])
            ai += 1
        return res


def config_hash(obj) -> str:
    return hashlib.sha256(repr(obj).encode()).hexdigest()[:16]


@dataclass
class PipelineResult:
    conn_id: str
    tx: TxResult
    fifo: RxElasticFifo
    tx_ps: np.ndarray  # first bit of each watched frame entering the add port
    rx_ps: np.ndarray  # first bit leaving the drop port, -1 if not yet emitted
    arrival_ps: np.ndarray
    drain_clock: ClockDomain


class FrameSpans:
    """Idle/data map of a client byte stream, stored as frame spans.

    Indexing gives True for idle bytes, like a dense idle mask, without
    holding one flag per byte.
    """

    def __init__(self, starts, sizes, length: int):
        self.starts = np.asarray(starts, np.int64)
        self.ends = self.starts + np.asarray(sizes, np.int64)
        self.length = int(length)
        self._cum = np.concatenate([[0], np.cumsum(self.ends - self.starts)])
        # plain lists: scalar lookups from the FIFO loop are far cheaper this way
        self._starts = self.starts.tolist()
        self._ends = self.ends.tolist()

    def __len__(self):
        return self.length

    def __getitem__(self, i: int) -> bool:
        k = bisect_right(self._starts, i) - 1
        return not (k >= 0 and i < self._ends[k])

    def data_before(self, k) -> np.ndarray:
        """Number of data bytes at indices below ``k`` (vectorized)."""
        k = np.asarray(k, np.int64)
        if len(self.starts) == 0:
            return np.zeros(k.shape, np.int64)
        j = np.searchsorted(self.starts, k, side="left")  # frames starting before k
        full = self._cum[j]
        last = np.maximum(j - 1, 0)
        over = np.where(j > 0, np.maximum(self.ends[last] - k, 0), 0)
        return full - over

    def to_mask(self) -> np.ndarray:
        return client_idle_mask(self.starts, self.ends - self.starts, self.length)


def client_idle_mask(starts: np.ndarray, sizes: np.ndarray, length: int) -> np.ndarray:
    """Idle mask of a client byte stream with frames at ``starts``."""
    mark = np.zeros(length + 1, np.int64)
    np.add.at(mark, starts, 1)
    np.add.at(mark, np.minimum(starts + sizes, length), -1)
    return np.cumsum(mark[:-1]) == 0


def run_connection(
    sim: BusSimulator,
    conn: Connection,
    times: dict,
    idle,
    frame_starts: np.ndarray,
    drain_ppm: float = 0.0,
    client_phy: int = 1_000_000,
    setpoint: int = 14,
    ki: float = 2.0**-20,
    capacity: int = 4096,
    start_level: int | None = None,
    quantum: int = 1,
    warm_start: bool = True,
    grace_ps: int = 0,
    until_ps: int | None = None,
    telemetry_every: int = 0,
) -> PipelineResult:
    """Carry one connection's client stream across the bus and through its Rx FIFO.

    ``idle`` is a dense idle mask or a :class:`FrameSpans`.
    """
    cfg = sim.config
    n_slots = len(times[sim.order[0]])
    own = np.array([i for i, a in enumerate(sim.calendar.assignment) if a == conn.id], np.int64)
    cyc = sim.calendar.cycle_length
    seqs = (np.arange(0, n_slots + cyc, cyc)[:, None] + own[None, :]).ravel()
    seqs = seqs[seqs < n_slots]
    dep = times[conn.src_node][seqs]
    tx = sim.run_tx(conn, idle, dep, seqs)
    arrival = sim.arrival_at(times, conn.dst_node)[seqs] + cfg.bus_phy
    drain = ClockDomain(f"{conn.id}-drain", conn.client_rate // 8, drain_ppm)
    src = ClockDomain("", conn.client_rate // 8, conn.clock_domain.offset_ppm)
    s0 = 1.0 - src.effective_rate / drain.effective_rate if warm_start else 0.0
    grace = int(grace_ps * drain.effective_rate / PS_PER_S)
    fifo = RxElasticFifo(
        setpoint=setpoint,
        capacity=capacity,
        start_level=start_level,
        ki=ki,
        initial_stuff_rate=s0,
        grace_drains=grace,
        quantum=quantum,
        source_idle=idle,
        watch=frame_starts,
        telemetry_every=telemetry_every,
    )
    sel = tx.count > 0
    fifo.run_schedule(drain, arrival[sel], tx.count[sel], until_ps)
    clk = conn.clock_domain
    tx_ps = local_to_global_array(clk, 8 * np.asarray(frame_starts, np.int64))
    rx_ps = np.full(len(frame_starts), -1, np.int64)
    if fifo.clock is not None:
        done = fifo.watch_ticks >= 0
        rx_ps[done] = local_to_global_array(fifo.clock, fifo.watch_ticks[done]) + client_phy
    return PipelineResult(conn.id, tx, fifo, tx_ps, rx_ps, arrival, fifo.clock or drain)
