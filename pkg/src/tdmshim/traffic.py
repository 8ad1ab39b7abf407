"""Flow generators bound to clock domains, and latency/jitter measurement."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .clocks import ClockDomain, PS_PER_S
from .codec import DEFAULT_IFG, MAX_FRAME, MIN_FRAME, MIN_IFG
from .errors import NoData

KINDS = ("random_size_saturating", "periodic", "poisson", "ptp_probe")
PTP_PROBE_SIZE = 86


def flow_rng(seed: int, flow_id: str) -> np.random.Generator:
    """Counter-based generator keyed by (seed, flow id), independent of flow order."""
    ss = np.random.SeedSequence([seed, zlib.crc32(flow_id.encode())])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class FlowSpec:
    id: str
    kind: str
    rate_or_period: float  # load fraction, bits/s or seconds depending on kind
    size_dist: tuple = ("uniform", MIN_FRAME, MAX_FRAME)
    clock_domain: ClockDomain | None = None
    attach: tuple = ("", 0)
    seed: int = 0
    start: float = 0.0  # domain-local seconds before the first frame
    phase: float = 0.0  # extra offset of periodic flows, seconds
    rng_stream: str | None = None  # random stream key; defaults to the flow id

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown flow kind {self.kind!r}")

    def sizes(self, rng: np.random.Generator, n: int) -> np.ndarray:
        kind = self.size_dist[0]
        if kind == "fixed":
            return np.full(n, int(self.size_dist[1]), np.int64)
        lo, hi = int(self.size_dist[1]), int(self.size_dist[2])
        return rng.integers(lo, hi + 1, n).astype(np.int64)


@dataclass
class FrameSchedule:
    """Frames of one flow: start positions in the flow clock's byte ticks."""

    flow_id: str
    start_byte: np.ndarray
    size: np.ndarray
    clock: ClockDomain

    def __len__(self):
        return len(self.size)

    def times_ps(self) -> np.ndarray:
        """First-bit times on the global timeline."""
        return np.array([self.clock.local_to_global(8 * int(b)) for b in self.start_byte], np.int64)


def _byte_ticks(seconds: float, clock: ClockDomain) -> int:
    return int(round(seconds * clock.nominal_rate / 8))


def generate(flow: FlowSpec, until: float) -> FrameSchedule:
    """Frames of ``flow`` starting before ``until`` (domain-local seconds).

    Positions are byte ticks of the flow's clock; the clock's ppm offset makes
    the same schedule land at different global times.
    """
    clock = flow.clock_domain
    rng = flow_rng(flow.seed, flow.rng_stream or flow.id)
    end = _byte_ticks(until, clock)
    pos0 = _byte_ticks(flow.start, clock)
    if flow.kind in ("periodic", "ptp_probe"):
        period = flow.rate_or_period
        n = max(int(np.floor((until - flow.start - flow.phase) / period - 1e-12)) + 1, 0)
        k = np.arange(n)
        starts = np.array(
            [_byte_ticks(flow.start + flow.phase + i * period, clock) for i in k], np.int64
        )
        if flow.kind == "ptp_probe":
            sizes = np.full(n, PTP_PROBE_SIZE, np.int64)
        else:
            sizes = flow.sizes(rng, n)
        keep = starts + sizes <= end
        return FrameSchedule(flow.id, starts[keep], sizes[keep], clock)

    # sequential kinds: draw in chunks until the horizon is covered
    line = clock.nominal_rate / 8
    starts, sizes = [], []
    pos = pos0
    if flow.kind == "poisson":
        mean = flow.size_dist[1] if flow.size_dist[0] == "fixed" else (flow.size_dist[1] + flow.size_dist[2]) / 2
        mean_inter = mean * 8 / flow.rate_or_period * line  # byte ticks
        arrival = float(pos0)
    while pos < end:
        chunk = 4096
        sz = flow.sizes(rng, chunk)
        if flow.kind == "random_size_saturating":
            load = flow.rate_or_period
            gaps = np.maximum(DEFAULT_IFG, np.rint(sz / load - sz)).astype(np.int64)
            occ = np.cumsum(sz + gaps)
            st = pos + np.concatenate([[0], occ[:-1]])
            pos = int(pos + occ[-1])
        else:
            # Poisson arrivals; a frame that finds the port busy waits behind
            # the previous one plus the minimum gap
            arr = np.rint(arrival + np.cumsum(rng.exponential(mean_inter, chunk))).astype(np.int64)
            arrival = float(arr[-1])
            c = np.concatenate([[0], np.cumsum(sz + MIN_IFG)[:-1]])
            st = c + np.maximum(np.maximum.accumulate(arr - c), pos)
            pos = int(st[-1] + sz[-1] + MIN_IFG)
        starts.append(st)
        sizes.append(sz)
    st = np.concatenate(starts) if starts else np.zeros(0, np.int64)
    sz = np.concatenate(sizes) if sizes else np.zeros(0, np.int64)
    keep = st + sz <= end
    return FrameSchedule(flow.id, st[keep], sz[keep], clock)


def merge_schedules(fixed: Sequence[FrameSchedule], filler: FrameSchedule | None, ifg: int = DEFAULT_IFG):
    """Interleave flows on one client port.

    Frames of ``fixed`` flows keep their positions; ``filler`` frames that
    would overlap one are pushed behind it, preserving their own gaps
    afterwards. Returns (start, size, flow_index) sorted by start, where
    flow_index counts ``fixed`` first and the filler last.
    """
    items = []
    for fi, sch in enumerate(fixed):
        for s, z in zip(sch.start_byte.tolist(), sch.size.tolist()):
            items.append((s, z, fi))
    items.sort()
    blocked = [(s - ifg, s + z + ifg) for s, z, _ in items]
    out = list(items)
    if filler is not None and len(filler):
        shift = 0
        bi = 0
        fidx = len(fixed)
        st = filler.start_byte.tolist()
        sz = filler.size.tolist()
        for s, z in zip(st, sz):
            s += shift
            while bi < len(blocked) and blocked[bi][1] <= s:
                bi += 1
            if bi < len(blocked) and s + z > blocked[bi][0]:
                new_s = blocked[bi][1]
                shift += new_s - s
                s = new_s
                bi += 1
                while bi < len(blocked) and s + z > blocked[bi][0]:
                    new_s = blocked[bi][1]
                    shift += new_s - s
                    s = new_s
                    bi += 1
            out.append((s, z, fidx))
        out.sort()
    if not out:
        z = np.zeros(0, np.int64)
        return z, z, z
    arr = np.array(out, np.int64)
    return arr[:, 0], arr[:, 1], arr[:, 2]


# -- records and statistics --------------------------------------------------


@dataclass
class LatencyRecord:
    frame_id: int
    flow_id: str
    first_bit_tx: int
    first_bit_rx: int
    size: int

    @property
    def latency(self) -> int:
        return self.first_bit_rx - self.first_bit_tx


@dataclass
class LatencyRecords:
    """Column store of records for one flow."""

    flow_id: str
    frame_id: np.ndarray
    size: np.ndarray
    tx: np.ndarray  # ps
    rx: np.ndarray  # ps
    generated: int = 0

    def __len__(self):
        return len(self.frame_id)

    @property
    def latency(self) -> np.ndarray:
        return self.rx - self.tx

    def records(self) -> list[LatencyRecord]:
        return [
            LatencyRecord(int(f), self.flow_id, int(t), int(r), int(s))
            for f, s, t, r in zip(self.frame_id, self.size, self.tx, self.rx)
        ]

    @classmethod
    def from_records(cls, recs: Sequence[LatencyRecord], generated: int | None = None):
        flow = recs[0].flow_id if recs else ""
        return cls(
            flow,
            np.array([r.frame_id for r in recs], np.int64),
            np.array([r.size for r in recs], np.int64),
            np.array([r.first_bit_tx for r in recs], np.int64),
            np.array([r.first_bit_rx for r in recs], np.int64),
            len(recs) if generated is None else generated,
        )

    def select(self, mask) -> "LatencyRecords":
        return LatencyRecords(
            self.flow_id, self.frame_id[mask], self.size[mask], self.tx[mask], self.rx[mask],
            int(np.count_nonzero(mask)),
        )

    def shifted(self, dt_ps: int) -> "LatencyRecords":
        return LatencyRecords(self.flow_id, self.frame_id, self.size, self.tx, self.rx + dt_ps, self.generated)


@dataclass
class JitterStats:
    count: int
    min: float
    max: float
    mean: float
    p2p_jitter: float
    loss_count: int = 0

    def as_row(self) -> dict:
        return {
            "count": self.count,
            "min_ns": self.min * 1e9,
            "max_ns": self.max * 1e9,
            "mean_ns": self.mean * 1e9,
            "p2p_ns": self.p2p_jitter * 1e9,
            "loss": self.loss_count,
        }


def measure(records, generated: int | None = None) -> JitterStats:
    """Exact min/max/mean latency (seconds) and peak-to-peak jitter."""
    if isinstance(records, LatencyRecords):
        lat = records.latency
        gen = records.generated if generated is None else generated
    else:
        recs = list(records)
        lat = np.array([r.first_bit_rx - r.first_bit_tx for r in recs], np.int64)
        gen = len(recs) if generated is None else generated
    if len(lat) == 0:
        raise NoData("no latency records")
    lo, hi = int(lat.min()), int(lat.max())
    mean_ps = int(lat.sum()) / len(lat)
    return JitterStats(
        count=len(lat),
        min=lo / PS_PER_S,
        max=hi / PS_PER_S,
        mean=mean_ps / PS_PER_S,
        p2p_jitter=(hi - lo) / PS_PER_S,
        loss_count=max(gen - len(lat), 0),
    )


def pearson_size_latency(records: LatencyRecords) -> float:
    lat = records.latency.astype(float)
    size = records.size.astype(float)
    if lat.std() == 0 or size.std() == 0:
        return 0.0
    return float(np.corrcoef(size, lat)[0, 1])


# -- latency budget ----------------------------------------------------------

BUDGET_STAGES = (
    "client_phy",
    "bus_phy",
    "mapping",
    "slot_cycle_compensation",
    "transit",
    "propagation",
)


@dataclass
class LatencyBudget:
    client_phy: float = 0.0
    bus_phy: float = 0.0
    mapping: float = 0.0
    slot_cycle_compensation: float = 0.0
    transit: float = 0.0
    propagation: float = 0.0
    residual: float = 0.0

    @property
    def total(self) -> float:
        return sum(getattr(self, s) for s in BUDGET_STAGES) + self.residual

    def as_row(self) -> dict:
        row = {s: getattr(self, s) for s in BUDGET_STAGES}
        row["residual"] = self.residual
        row["total"] = self.total
        return row


def budget_breakdown(stage_constants: dict, records: LatencyRecords | None = None) -> LatencyBudget:
    """Attribute mean latency to the configured stage constants.

    Whatever the measured mean exceeds the constants by (buffer dwell above
    the minimum, controller margin) lands in ``residual``, so the
    stages always sum to the measured mean.
    """
    b = LatencyBudget(**{k: float(v) for k, v in stage_constants.items() if k in BUDGET_STAGES})
    if records is not None and len(records):
        b.residual = measure(records).mean - b.total
    return b


# -- PTP two-step estimator --------------------------------------------------


@dataclass
class OffsetStats:
    count: int
    mean_offset: float
    min_offset: float
    max_offset: float
    mean_path_delay: float
    min_path_delay: float
    max_path_delay: float

    @property
    def path_delay_spread(self) -> float:
        return self.max_path_delay - self.min_path_delay


def ptp_exchange(t1, t2, t3, t4):
    """Offset and mean path delay of two-step exchanges (same units as input)."""
    t1, t2, t3, t4 = (np.asarray(x, dtype=np.int64) for x in (t1, t2, t3, t4))
    fwd = t2 - t1
    rev = t4 - t3
    return (fwd - rev) / 2, (fwd + rev) / 2


def ptp_offset_estimate(path_fwd, path_rev, true_offset=0) -> OffsetStats:
    """Estimator statistics over paired forward/reverse delays (ps).

    With the slave clock offset by ``true_offset`` the exchange sees
    t2 - t1 = fwd + offset and t4 - t3 = rev - offset.
    """
    fwd = np.asarray(path_fwd, np.int64)
    rev = np.asarray(path_rev, np.int64)
    if len(fwd) == 0 or len(fwd) != len(rev):
        raise NoData("need equal, non-empty delay series")
    off, delay = ptp_exchange(0, fwd + true_offset, 0, rev - true_offset)
    return OffsetStats(
        len(fwd),
        float(off.mean()),
        float(off.min()),
        float(off.max()),
        float(delay.mean()),
        float(delay.min()),
        float(delay.max()),
    )


# -- CSV ---------------------------------------------------------------------

RECORD_COLUMNS = ("frame_id", "flow_id", "size_bytes", "first_bit_tx_ps", "first_bit_rx_ps")
SUMMARY_COLUMNS = (
    "rx_port",
    "tx_frames",
    "rx_frames",
    "loss_pct",
    "avg_latency_ns",
    "min_latency_ns",
    "max_latency_ns",
    "jitter_p2p_ns",
)


def write_records_csv(path, recs: Iterable[LatencyRecords]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in recs:
            for f, s, t, x in zip(r.frame_id.tolist(), r.size.tolist(), r.tx.tolist(), r.rx.tolist()):
                w.writerow((f, r.flow_id, s, t, x))


def read_records_csv(path) -> dict[str, LatencyRecords]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["flow_id"], []).append(
                LatencyRecord(
                    int(row["frame_id"]), row["flow_id"], int(row["first_bit_tx_ps"]),
                    int(row["first_bit_rx_ps"]), int(row["size_bytes"]),
                )
            )
    return {k: LatencyRecords.from_records(v) for k, v in rows.items()}


def _ns(ps: float) -> str:
    return f"{ps / 1000:.3f}"


def summary_row(port: str, recs: LatencyRecords) -> dict:
    lat = recs.latency
    rx = len(recs)
    tx = max(recs.generated, rx)
    row = {"rx_port": port, "tx_frames": tx, "rx_frames": rx, "loss_pct": f"{(tx - rx) / tx * 100 if tx else 0:.6f}"}
    if rx:
        row.update(
            avg_latency_ns=_ns(lat.sum() / rx),
            min_latency_ns=_ns(lat.min()),
            max_latency_ns=_ns(lat.max()),
            jitter_p2p_ns=_ns(lat.max() - lat.min()),
        )
    else:
        row.update(avg_latency_ns="", min_latency_ns="", max_latency_ns="", jitter_p2p_ns="")
    return row
