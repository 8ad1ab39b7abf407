"""Packet-switched comparison path and the M/D/1 queueing model."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import mpmath
import numpy as np

from .clocks import PS_PER_S, ClockDomain, beat_period
from .errors import Misconfiguration, OutOfRange, UnstableQueue
from .traffic import LatencyRecords

STORE_AND_FORWARD = "store_and_forward"
CUT_THROUGH = "cut_through"
HEADER_BYTES = 14  # cut-through decision point
DEFAULT_QUEUE = 100


@dataclass
class SwitchHop:
    input_rate: int
    output_rate: int
    mode: str = STORE_AND_FORWARD
    queue_capacity: int = DEFAULT_QUEUE
    processing_ps: int = 0

    def __post_init__(self):
        if self.mode not in (STORE_AND_FORWARD, CUT_THROUGH):
            raise Misconfiguration(f"unknown switching mode {self.mode!r}")
        if self.mode == CUT_THROUGH and self.output_rate > self.input_rate:
            raise Misconfiguration("cut-through needs output_rate <= input_rate")


@dataclass
class QueueModel:
    load: float
    service_time: float

    def __post_init__(self):
        if not 0 <= self.load < 1:
            raise UnstableQueue(f"load {self.load} has no steady state")


def collision_duration(size: float, rate: float) -> float:
    """Seconds one packet of ``size`` bytes blocks an output of ``rate`` bits/s."""
    if size <= 0 or rate <= 0:
        raise OutOfRange("size and rate must be positive")
    return size * 8 / rate


def _ser_ps(size, rate) -> np.ndarray:
    # integer ps serialization time, rounded up
    return -(-np.asarray(size, np.int64) * 8 * PS_PER_S // rate)


def simulate_switch_path(hops: Sequence[SwitchHop], flows: Sequence[tuple]) -> dict[str, LatencyRecords]:
    """Per-frame latency through a chain of output-queued switch hops.

    ``flows`` holds (flow_id, first_bit_tx_ps, sizes) triples; each flow
    enters the first hop on its own input link. Returns records per flow;
    dropped frames are missing from them but counted in ``generated``.
    """
    if not hops:
        raise Misconfiguration("empty hop chain")
    for a, b in zip(hops, hops[1:]):
        if a.output_rate != b.input_rate:
            raise Misconfiguration("hop chain rates do not connect")
    fids, txs, sizes = [], [], []
    for fid, tx, sz in flows:
        tx = np.asarray(tx, np.int64)
        fids.append(np.arange(len(tx)))
        txs.append(tx)
        sizes.append(np.asarray(sz, np.int64))
    flow_idx = np.concatenate([np.full(len(t), k) for k, t in enumerate(txs)]) if txs else np.zeros(0, np.int64)
    frame_id = np.concatenate(fids) if fids else np.zeros(0, np.int64)
    tx = np.concatenate(txs) if txs else np.zeros(0, np.int64)
    size = np.concatenate(sizes) if sizes else np.zeros(0, np.int64)

    t = tx.copy()  # first bit arriving at the current hop
    alive = np.ones(len(t), bool)
    for hop in hops:
        ser_in = _ser_ps(size, hop.input_rate)
        ser_out = _ser_ps(size, hop.output_rate)
        if hop.mode == STORE_AND_FORWARD:
            ready = t + ser_in
        else:
            ready = t + _ser_ps(np.minimum(size, HEADER_BYTES), hop.input_rate)
        ready = ready + hop.processing_ps
        order = np.lexsort((np.arange(len(t)), ready))
        free = 0
        waiting: deque = deque()  # start times of queued frames
        out = np.full(len(t), -1, np.int64)
        for i in order:
            if not alive[i]:
                continue
            r = int(ready[i])
            while waiting and waiting[0] <= r:
                waiting.popleft()
            if len(waiting) >= hop.queue_capacity:
                alive[i] = False
                continue
            start = max(r, free)
            if hop.mode == CUT_THROUGH:
                # the output must not run ahead of the input
                start = max(start, int(t[i] + ser_in[i] - ser_out[i]))
            free = start + int(ser_out[i])
            if start > r:
                waiting.append(start)
            out[i] = start
        t = np.where(alive, out, -1)
    out = {}
    for k, (fid, _, _) in enumerate(flows):
        sel = flow_idx == k
        keep = sel & alive
        out[fid] = LatencyRecords(fid, frame_id[keep], size[keep], tx[keep], t[keep], int(sel.sum()))
    return out


# -- M/D/1 -------------------------------------------------------------------


def md1_wait_tail(rho: float, n: int) -> float:
    """P(an arriving packet finds >= n packets in the system), M/D/1.

    Uses the embedded departure-epoch chain; by Poisson arrivals seeing time
    averages this is also the arrival-epoch distribution.
    """
    if rho >= 1:
        raise UnstableQueue(f"rho={rho} >= 1")
    if rho < 0 or n < 0:
        raise OutOfRange("rho and n must be non-negative")
    if n == 0:
        return 1.0
    if rho == 0:
        return 0.0
    # the tail is 1 - sum(pi), so digits cancel; widen until it clears the noise
    dps = 30 + 2 * n
    while True:
        tail = _md1_tail(mpmath.mpf(rho), n, dps)
        if tail > mpmath.mpf(10) ** (25 - dps) or dps > 20_000:
            return float(max(tail, mpmath.mpf(0)))
        dps *= 2


def _md1_tail(r, n: int, dps: int):
    with mpmath.workdps(dps):
        a = [mpmath.exp(-r)]
        for k in range(1, n + 1):
            a.append(a[-1] * r / k)
        pi = [1 - r]
        # pi_j = pi_0 a_j + sum_{i=1}^{j+1} pi_i a_{j-i+1}
        for j in range(n - 1):
            s = pi[j] - pi[0] * a[j]
            for i in range(1, j + 1):
                s -= pi[i] * a[j - i + 1]
            pi.append(s / a[0])
        return +(1 - mpmath.fsum(pi[:n]))


@dataclass
class Md1Estimate:
    rho: float
    n: np.ndarray
    p: np.ndarray
    stderr: np.ndarray
    arrivals: int


def md1_simulate(rho: float, ns: Sequence[int], arrivals: int = 10**7, seed: int = 0, batches: int = 100) -> Md1Estimate:
    """Discrete-event M/D/1 oracle: queue length seen by each arrival.

    Service time is 1; waiting times follow Lindley's recursion in closed
    form. Standard errors come from batch means.
    """
    if rho >= 1:
        raise UnstableQueue(f"rho={rho} >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    inter = rng.exponential(1.0 / rho, arrivals)
    arr = np.cumsum(inter)
    # W_i = U_i - min_{j<=i} U_j with U_i = i*D - A_i (A_0 = first arrival)
    u = np.arange(arrivals, dtype=np.float64) - (arr - arr[0])
    w = u - np.minimum.accumulate(np.minimum(u, 0.0))
    dep = arr + w + 1.0
    seen = np.arange(arrivals) - np.searchsorted(dep, arr, side="right")
    ns = np.asarray(ns, np.int64)
    hits = seen[None, :] >= ns[:, None]
    p = hits.mean(axis=1)
    usable = arrivals // batches * batches
    bm = hits[:, :usable].reshape(len(ns), batches, -1).mean(axis=2)
    se = bm.std(axis=1, ddof=1) / np.sqrt(batches)
    se = np.maximum(se, np.sqrt(np.maximum(p, 1.0 / arrivals) / arrivals))
    return Md1Estimate(rho, ns, p, se, arrivals)


# -- beat collisions ---------------------------------------------------------


@dataclass
class BeatResult:
    time_ps: np.ndarray  # first-bit tx of each packet of either flow, sorted
    extra_delay_ps: np.ndarray  # latency with the other flow minus latency alone
    flow: np.ndarray  # 0 for flow a, 1 for flow b
    period_s: float
    beat_period_s: float


def periodic_tx(clock: ClockDomain, period: float, n: int, phase: float = 0.0) -> np.ndarray:
    """First-bit times of ``n`` packets placed every ``period`` s of ``clock``."""
    byte_rate = clock.nominal_rate / 8
    starts = [int(round((phase + k * period) * byte_rate)) for k in range(n)]
    return np.array([clock.local_to_global(8 * s) for s in starts], np.int64)


def beat_collision_experiment(
    period: float,
    ppm_a: float,
    ppm_b: float,
    packet_size: int,
    link_rate: int,
    duration: float | None = None,
    phase_a: float = 0.0,
    phase_b: float = 0.0,
) -> BeatResult:
    """Two periodic single-packet flows of distinct clocks sharing one output.

    Each packet's extra delay is its latency with the other flow present
    minus its latency when its own flow is alone. A collision delays
    whichever packet is ready second, so both flows are reported.
    """
    bp = beat_period(period, ppm_a, ppm_b)
    if duration is None:
        duration = 3 * bp
    n = int(duration / period)
    ta = periodic_tx(ClockDomain("a", link_rate, ppm_a), period, n, phase_a)
    tb = periodic_tx(ClockDomain("b", link_rate, ppm_b), period, n, phase_b)
    sizes = np.full(n, packet_size, np.int64)
    hop = [SwitchHop(link_rate, link_rate)]
    both = simulate_switch_path(hop, [("a", ta, sizes), ("b", tb, sizes)])
    extra_a = both["a"].latency - simulate_switch_path(hop, [("a", ta, sizes)])["a"].latency
    extra_b = both["b"].latency - simulate_switch_path(hop, [("b", tb, sizes)])["b"].latency
    t = np.concatenate([ta, tb])
    order = np.argsort(t, kind="stable")
    flow = np.repeat([0, 1], n)
    return BeatResult(t[order], np.concatenate([extra_a, extra_b])[order], flow[order], period, bp)


def burst_peaks(result: BeatResult, threshold_ps: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(time, height) of the maximum of each burst of extra delay.

    Delayed packets less than ten flow periods apart belong to one burst. A
    burst still running at the end of the series is left out.
    """
    busy = np.flatnonzero(result.extra_delay_ps > threshold_ps)
    if len(busy) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    t = result.time_ps[busy]
    split = np.flatnonzero(np.diff(t) > 10 * result.period_s * PS_PER_S) + 1
    times, heights = [], []
    gap = 10 * result.period_s * PS_PER_S
    for group in np.split(busy, split):
        if result.time_ps[-1] - result.time_ps[group[-1]] <= gap:
            continue
        k = group[int(np.argmax(result.extra_delay_ps[group]))]
        times.append(result.time_ps[k])
        heights.append(result.extra_delay_ps[k])
    return np.array(times, np.int64), np.array(heights, np.int64)
