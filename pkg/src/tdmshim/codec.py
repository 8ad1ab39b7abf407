"""Client stream embedding into slot bodies.

Three mappings live here:

* the pointer chain: every idle byte of a body holds the offset of the next
  idle byte in the same body, the last one holds NULL, and the slot header
  anchor points at the first one;
* an HDLC/PoS style flag-and-escape byte stream, kept as the comparison codec;
* JC/JB justification, which lets a slot carry ``S_max - 1`` or ``S_max``
  client bytes so the client rate can float around the reserved rate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import CorruptSlot, CorruptStream, UnjustifiableRate

NULL = 255
FLAG = 0x7E
ESCAPE = 0x7D
ESCAPE_MASK = 0x20
MIN_IFG = 5
DEFAULT_IFG = 12
MIN_FRAME = 64
MAX_FRAME = 1518
JUSTIFICATION_PPM = 2000.0
BE_LABEL = 0xFFFF


@dataclass
class ClientFrame:
    id: int
    size: int
    payload: bytes

    @classmethod
    def random(cls, id: int, size: int, rng: np.random.Generator) -> "ClientFrame":
        return cls(id, size, rng.integers(0, 256, size, dtype=np.uint8).tobytes())


@dataclass
class ClientByteStream:
    """DATA/IDLE symbol sequence. ``values`` is meaningless where ``idle`` is set."""

    values: np.ndarray
    idle: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        self.idle = np.asarray(self.idle, dtype=bool)
        if self.values.shape != self.idle.shape:
            raise ValueError("values and idle must have equal length")

    def __len__(self):
        return len(self.idle)

    def __eq__(self, other):
        if not isinstance(other, ClientByteStream):
            return NotImplemented
        if not np.array_equal(self.idle, other.idle):
            return False
        data = ~self.idle
        return bool(np.array_equal(self.values[data], other.values[data]))

    @classmethod
    def idles(cls, n: int) -> "ClientByteStream":
        return cls(np.zeros(n, np.uint8), np.ones(n, bool))

    @classmethod
    def from_frames(
        cls,
        frames: Sequence[ClientFrame],
        gaps: Sequence[int] | int = DEFAULT_IFG,
        lead: int = 0,
    ) -> "ClientByteStream":
        """Frames separated by idle runs; ``gaps[i]`` follows ``frames[i]``."""
        if isinstance(gaps, int):
            gaps = [gaps] * len(frames)
        parts_v, parts_i = [np.zeros(lead, np.uint8)], [np.ones(lead, bool)]
        for frame, gap in zip(frames, gaps):
            parts_v.append(np.frombuffer(frame.payload, np.uint8))
            parts_i.append(np.zeros(frame.size, bool))
            parts_v.append(np.zeros(gap, np.uint8))
            parts_i.append(np.ones(gap, bool))
        return cls(np.concatenate(parts_v), np.concatenate(parts_i))

    def concat(self, other: "ClientByteStream") -> "ClientByteStream":
        return ClientByteStream(
            np.concatenate([self.values, other.values]),
            np.concatenate([self.idle, other.idle]),
        )

    def frame_spans(self) -> list[tuple[int, int]]:
        """(start, stop) index of every maximal DATA run."""
        data = (~self.idle).astype(np.int8)
        edges = np.diff(np.concatenate([[0], data, [0]]))
        starts = np.flatnonzero(edges == 1)
        stops = np.flatnonzero(edges == -1)
        return list(zip(starts.tolist(), stops.tolist()))

    def frames(self) -> list[bytes]:
        return [self.values[a:b].tobytes() for a, b in self.frame_spans()]


def random_stream(
    rng: np.random.Generator,
    n_frames: int,
    size_range=(MIN_FRAME, MAX_FRAME),
    ifg_range=(MIN_IFG, 40),
) -> ClientByteStream:
    sizes = rng.integers(size_range[0], size_range[1] + 1, n_frames)
    gaps = rng.integers(ifg_range[0], ifg_range[1] + 1, n_frames)
    frames = [ClientFrame.random(i, int(s), rng) for i, s in enumerate(sizes)]
    return ClientByteStream.from_frames(frames, [int(g) for g in gaps])


# -- pointer codec ---------------------------------------------------------


@dataclass
class SlotBody:
    body: bytes
    anchor: int


def _check_smax(s_max: int):
    if not 100 <= s_max <= 250:
        raise ValueError(f"S_max={s_max} outside 100..250")


def embed_pointer_array(stream: ClientByteStream, s_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized pointer embedding: (bodies[rows, s_max], anchors[rows])."""
    _check_smax(s_max)
    n = len(stream)
    rows = -(-n // s_max)
    idle = np.ones(rows * s_max, bool)
    idle[:n] = stream.idle
    vals = np.zeros(rows * s_max, np.uint8)
    vals[:n] = stream.values
    idle = idle.reshape(rows, s_max)
    vals = vals.reshape(rows, s_max)

    pos = np.broadcast_to(np.arange(s_max), (rows, s_max))
    marked = np.where(idle, pos, s_max)
    # nearest idle at or to the right of each offset, within the row
    after = np.minimum.accumulate(marked[:, ::-1], axis=1)[:, ::-1]
    nxt = np.full((rows, s_max), s_max)
    nxt[:, :-1] = after[:, 1:]
    ptr = np.where(nxt >= s_max, NULL, nxt)
    bodies = np.where(idle, ptr, vals).astype(np.uint8)
    first = after[:, 0] if rows else np.zeros(0, int)
    anchors = np.where(first >= s_max, NULL, first).astype(np.int64)
    return bodies, anchors


def chain_mask(bodies: np.ndarray, anchors: np.ndarray, s_max: int) -> np.ndarray:
    """Idle mask implied by the pointer chains; raises CorruptSlot on a bad chain."""
    rows = bodies.shape[0]
    if bodies.ndim != 2 or bodies.shape[1] != s_max:
        raise CorruptSlot(f"bodies must be (rows, {s_max})")
    mask = np.zeros((rows, s_max), bool)
    cur = np.asarray(anchors, dtype=np.int64).copy()
    prev = np.full(rows, -1, np.int64)
    active = cur != NULL
    r = np.arange(rows)
    for _ in range(s_max + 1):
        if not active.any():
            return mask
        c = cur[active]
        if (c >= s_max).any() or (c <= prev[active]).any():
            bad = int(r[active][np.flatnonzero((c >= s_max) | (c <= prev[active]))[0]])
            raise CorruptSlot(f"slot {bad}: pointer chain not strictly increasing within body")
        mask[r[active], c] = True
        prev[active] = c
        cur[active] = bodies[r[active], c]
        active = cur != NULL
    raise CorruptSlot("pointer chain does not terminate")


def extract_pointer_array(
    bodies: np.ndarray, anchors: np.ndarray, s_max: int, length: int | None = None
) -> ClientByteStream:
    _check_smax(s_max)
    mask = chain_mask(bodies, anchors, s_max)
    vals = np.where(mask, 0, bodies).astype(np.uint8).ravel()
    idle = mask.ravel()
    if length is not None:
        vals, idle = vals[:length], idle[:length]
    return ClientByteStream(vals, idle)


def embed_pointer(stream: ClientByteStream, s_max: int) -> list[SlotBody]:
    """Cut ``stream`` into ``s_max``-byte bodies carrying the idle pointer chain.

    A final partial body is padded with idles.
    """
    bodies, anchors = embed_pointer_array(stream, s_max)
    return [SlotBody(bodies[r].tobytes(), int(anchors[r])) for r in range(len(anchors))]


def chain_positions(body: bytes, anchor: int, s_max: int) -> list[int]:
    """Offsets visited by the pointer chain; raises CorruptSlot if malformed."""
    if len(body) != s_max:
        raise CorruptSlot(f"body length {len(body)} != S_max {s_max}")
    out = []
    p = anchor
    prev = -1
    while p != NULL:
        if p >= s_max or p <= prev:
            raise CorruptSlot(f"bad pointer {p} after offset {prev}")
        out.append(p)
        prev = p
        p = body[p]
    return out


def extract_pointer(
    bodies: Iterable[SlotBody], s_max: int, length: int | None = None
) -> ClientByteStream:
    """Inverse of :func:`embed_pointer`; ``length`` trims trailing padding."""
    bodies = list(bodies)
    for sb in bodies:
        if len(sb.body) != s_max:
            raise CorruptSlot(f"body length {len(sb.body)} != S_max {s_max}")
    arr = np.frombuffer(b"".join(sb.body for sb in bodies), np.uint8).reshape(-1, s_max)
    anchors = np.array([sb.anchor for sb in bodies], np.int64)
    return extract_pointer_array(arr, anchors, s_max, length)


def validate_chains(bodies: Iterable[SlotBody], s_max: int) -> int:
    """Number of bodies whose chain is malformed or not NULL-terminated."""
    bad = 0
    for sb in bodies:
        try:
            chain = chain_positions(sb.body, sb.anchor, s_max)
        except CorruptSlot:
            bad += 1
            continue
        if chain and sb.body[chain[-1]] != NULL:
            bad += 1
    return bad


# -- PoS / HDLC-like codec ---------------------------------------------------


def _escape(payload: bytes) -> bytearray:
    out = bytearray()
    for b in payload:
        if b == FLAG or b == ESCAPE:
            out.append(ESCAPE)
            out.append(b ^ ESCAPE_MASK)
        else:
            out.append(b)
    return out


def embed_pos(stream: ClientByteStream) -> bytes:
    """Flag-delimited, escaped byte stream.

    Each frame is wrapped in its own opening and closing flag. An idle run is
    carried as extra flag bytes, one per idle, in front of the next frame;
    this is the codec's granularity, so idle runs are not byte exact.
    """
    out = bytearray()
    pending_idle = 0
    spans = stream.frame_spans()
    cursor = 0
    for a, b in spans:
        pending_idle += a - cursor
        out.extend(bytes([FLAG]) * max(pending_idle - 2, 0))
        pending_idle = 0
        out.append(FLAG)
        out.extend(_escape(stream.values[a:b].tobytes()))
        out.append(FLAG)
        cursor = b
    return bytes(out)


def extract_pos(data: bytes) -> ClientByteStream:
    """Inverse of :func:`embed_pos`; runs of flags become idle runs."""
    frames: list[bytes] = []
    gaps: list[int] = []
    lead = 0
    cur = bytearray()
    in_frame = False
    escaped = False
    flags_seen = 0
    for b in data:
        if b == FLAG and not escaped:
            if in_frame:
                frames.append(bytes(cur))
                cur = bytearray()
                in_frame = False
                flags_seen = 1
            else:
                flags_seen += 1
            continue
        if not in_frame:
            if frames:
                gaps.append(flags_seen)
            else:
                lead = max(flags_seen - 1, 0)
            in_frame = True
        if escaped:
            cur.append(b ^ ESCAPE_MASK)
            escaped = False
        elif b == ESCAPE:
            escaped = True
        else:
            cur.append(b)
    if escaped:
        raise CorruptStream("dangling escape at end of input")
    if cur:
        raise CorruptStream("unterminated frame at end of input")
    if frames:
        gaps.append(flags_seen)
    # each flag stands for one idle symbol
    built = [ClientFrame(i, len(f), f) for i, f in enumerate(frames)]
    return ClientByteStream.from_frames(built, gaps, lead=lead)


def pos_expansion(payload: bytes) -> float:
    """Relative growth of a frame body caused by escaping."""
    return (len(_escape(payload)) - len(payload)) / len(payload)


# -- justification -----------------------------------------------------------


class Justifier:
    """Deficit accumulator deciding JC per slot.

    Each slot credits ``client_rate * slot_period / 8`` client bytes; the slot
    always takes ``S_max - 1`` of them and the JB takes one more whenever a
    whole byte of credit remains.
    """

    def __init__(self, client_rate: float, slot_period: float, s_max: int):
        self.s_max = s_max
        nominal = (s_max - 0.5) * 8 / slot_period
        delta = client_rate / nominal - 1.0
        if abs(delta) > justification_range(s_max) + 1e-12:
            raise UnjustifiableRate(
                f"rate offset {delta * 1e6:.1f} ppm exceeds "
                f"±{justification_range(s_max) * 1e6:.0f} ppm"
            )
        self.bytes_per_slot = client_rate * slot_period / 8
        self.credit = 0.0
        self.offered = 0.0

    def next_jc(self) -> bool:
        self.credit += self.bytes_per_slot - (self.s_max - 1)
        if self.credit >= 1.0:
            self.credit -= 1.0
            return True
        return False


def justification_range(s_max: int) -> float:
    """Fractional rate range around nominal that JC/JB can absorb (±)."""
    return 0.5 / (s_max - 0.5)


def justify_tx(
    client_rate_actual: float, slot_period: float, s_max: int, n_slots: int
) -> np.ndarray:
    """JC decision for ``n_slots`` consecutive slots."""
    j = Justifier(client_rate_actual, slot_period, s_max)
    return np.fromiter((j.next_jc() for _ in range(n_slots)), bool, n_slots)


def jc_fraction_expected(delta: float, s_max: int) -> float:
    return 0.5 + delta * (s_max - 0.5)


@dataclass
class JustifiedSlot:
    body: bytes  # S_max - 1 client bytes
    jc: bool
    jb: int = 0


def justify_pack(data: bytes, jcs: Sequence[bool], s_max: int) -> list[JustifiedSlot]:
    """Spread ``data`` over slots according to ``jcs``; stops when data runs out."""
    out = []
    pos = 0
    for jc in jcs:
        need = s_max - 1 + int(jc)
        if pos + need > len(data):
            break
        chunk = data[pos : pos + need]
        if jc:
            out.append(JustifiedSlot(chunk[:-1], True, chunk[-1]))
        else:
            out.append(JustifiedSlot(chunk, False))
        pos += need
    return out


def justify_rx(slots: Iterable[JustifiedSlot]) -> bytes:
    out = bytearray()
    for s in slots:
        out.extend(s.body)
        if s.jc:
            out.append(s.jb)
    return bytes(out)


# -- slot frame serialization ------------------------------------------------

_HEADER = struct.Struct(">HHBBB")


@dataclass
class SlotFrame:
    conn_label: int
    seq: int
    anchor: int = NULL
    jc: bool = False
    jb: int = 0
    idle_flag: bool = False
    body: bytes = field(default=b"")

    def pack(self) -> bytes:
        flags = int(self.jc) | (int(self.idle_flag) << 1)
        return (
            _HEADER.pack(self.conn_label & 0xFFFF, self.seq & 0xFFFF, self.anchor, flags, self.jb)
            + self.body
        )

    @classmethod
    def unpack(cls, raw: bytes, s_max: int) -> "SlotFrame":
        if len(raw) != _HEADER.size + s_max:
            raise CorruptSlot(f"slot of {len(raw)} bytes, expected {_HEADER.size + s_max}")
        label, seq, anchor, flags, jb = _HEADER.unpack_from(raw)
        return cls(label, seq, anchor, bool(flags & 1), jb, bool(flags & 2), raw[_HEADER.size :])


HEADER_BYTES = _HEADER.size


def write_hexdump(path, slots: Iterable[SlotFrame]):
    with open(path, "w") as fh:
        for s in slots:
            fh.write(s.pack().hex() + "\n")


def read_hexdump(path, s_max: int) -> Iterator[SlotFrame]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield SlotFrame.unpack(bytes.fromhex(line), s_max)
