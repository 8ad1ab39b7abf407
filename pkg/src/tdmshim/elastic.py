"""Tx slot accumulation and the Rx elastic FIFO with its PI stuffing control.

The Rx FIFO holds a window ``[head, arrived)`` of a client symbol sequence.
Only the idle/data nature of each symbol matters for control, so the FIFO
works on indices into a source idle mask rather than on byte values.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .clocks import ClockDomain, first_tick_at_or_after_array
from .errors import FifoOverflow, FifoUnderrun

DEFAULT_SETPOINT = 14
DEFAULT_CAPACITY = 4096
TARGET_RATIO = 2.0**-17
DEFAULT_KI = 2.0**-20


def compensation_delay(S: float, b: float) -> float:
    """Constant Tx+Rx waiting budget S/b (S in bits, b in bits/s)."""
    if S < 0 or b <= 0:
        raise ValueError("S must be >= 0 and b > 0")
    return S / b


# -- Tx side -----------------------------------------------------------------


class TxAccumulator:
    """Groups incoming client symbols into fixed-size units."""

    def __init__(self, unit: int):
        self.unit = unit
        self.pending: deque[list] = deque()
        self.current: list = []

    @property
    def fill(self) -> int:
        return len(self.current)

    @property
    def completed(self) -> int:
        return len(self.pending)

    def accumulate(self, symbol) -> int:
        """Append one symbol; returns the number of units completed (0 or 1)."""
        self.current.append(symbol)
        if len(self.current) == self.unit:
            self.pending.append(self.current)
            self.current = []
            return 1
        return 0

    def pick(self, k: int) -> list[list]:
        if k < 1:
            raise ValueError("k must be >= 1")
        n = min(k, len(self.pending))
        return [self.pending.popleft() for _ in range(n)]


def tx_accumulate(acc: TxAccumulator, symbol) -> int:
    return acc.accumulate(symbol)


def tx_pick(acc: TxAccumulator, k: int) -> list[list]:
    return acc.pick(k)


# -- Rx side -----------------------------------------------------------------


@dataclass
class FifoStats:
    drains: int = 0
    violations: int = 0
    idle_inserted: int = 0
    idle_dropped: int = 0
    p_events: int = 0
    warmup_stuffed: int = 0
    steady_violations: int = 0  # violations after the start-up window


@dataclass
class PIState:
    stuff_rate: float = 0.0  # net idle insertions per drain; negative drops
    residual: float = 0.0  # fractional stuffing credit


class RxElasticFifo:
    """Elastic FIFO drained once per local byte time.

    Emission starts once the filling first reaches ``start_level``. Every
    drain that finds the filling below ``setpoint`` is a threshold
    violation; each violation schedules one idle insertion (proportional
    part) and nudges ``stuff_rate`` by ``ki * (1 - target)``, every other
    drain nudges it by ``-ki * target`` (integral part). Insertions and drops
    are executed only on idle symbols.

    ``grace_drains`` is the start-up window: an empty FIFO emits a filler idle
    instead of failing, and only the proportional part acts, so the filling
    settles onto the setpoint without winding up the integrator.

    ``quantum`` is the stuffing granularity in idle bytes. 1 gives byte
    stuffing; a sub-container size gives the coarse variant where every
    event inserts or drops a whole unit worth of idles.
    """

    def __init__(
        self,
        setpoint: int = DEFAULT_SETPOINT,
        capacity: int = DEFAULT_CAPACITY,
        start_level: int | None = None,
        ki: float = DEFAULT_KI,
        target: float = TARGET_RATIO,
        initial_stuff_rate: float = 0.0,
        grace_drains: int = 0,
        quantum: int = 1,
        source_idle: np.ndarray | None = None,
        watch: np.ndarray | None = None,
        telemetry_every: int = 0,
    ):
        self.setpoint = setpoint
        self.capacity = capacity
        self.start_level = setpoint if start_level is None else start_level
        self.ki = ki
        self.target = target
        self.pi = PIState(stuff_rate=initial_stuff_rate)
        self.grace_drains = grace_drains
        if quantum < 1:
            raise ValueError("quantum must be >= 1")
        self.quantum = quantum
        self.stats = FifoStats()
        self.head = 0  # next source index to emit
        self.arrived = 0
        self.pending = 0  # >0 insertions owed, <0 drops owed
        self.started = False
        if source_idle is None:
            self.idle = np.zeros(0, bool)
        elif hasattr(source_idle, "data_before"):
            self.idle = source_idle  # span-backed map, indexable like a mask
        else:
            self.idle = np.asarray(source_idle, bool)
        self.watch = np.zeros(0, np.int64) if watch is None else np.asarray(watch, np.int64)
        self.watch_ticks = np.full(len(self.watch), -1, np.int64)
        self._wi = 0
        self.telemetry_every = telemetry_every
        self.telemetry: list[tuple[int, int, float, int]] = []
        self.clock: ClockDomain | None = None
        self.min_fill_seen: int | None = None

    # -- object interface ---------------------------------------------------

    @property
    def filling(self) -> int:
        return self.arrived - self.head

    def push_symbols(self, idle_flags) -> None:
        """Append symbols to the source and push them."""
        flags = np.asarray(idle_flags, bool)
        self.idle = np.concatenate([self.idle[: self.arrived], flags])
        self.push(len(flags))

    def push(self, n: int) -> None:
        """Make the next ``n`` source symbols available."""
        if self.filling + n > self.capacity:
            raise FifoOverflow(f"filling {self.filling}+{n} exceeds capacity {self.capacity}")
        self.arrived += n
        if not self.started and self.filling >= self.start_level:
            self.started = True

    def drain(self):
        """One local byte time. Returns the emitted source index, or None for an idle
        that does not come from the source (stuffed, or before start)."""
        if not self.started:
            return None
        return self._step()

    # -- control law --------------------------------------------------------

    def pi_update(self, violation: bool, integrate: bool = True) -> None:
        pi = self.pi
        if violation:
            self.stats.violations += 1
            self.stats.p_events += 1
            self.pending += self.quantum
            if integrate:
                self.stats.steady_violations += 1
                pi.stuff_rate += self.ki * (1.0 - self.target)
        elif integrate:
            pi.stuff_rate -= self.ki * self.target
        pi.residual += pi.stuff_rate
        q = self.quantum
        if pi.residual >= q:
            pi.residual -= q
            self.pending += q
        elif pi.residual <= -q:
            pi.residual += q
            self.pending -= q

    def _record(self, index: int, tick: int):
        w = self._wi
        if w < len(self.watch) and self.watch[w] == index:
            self.watch_ticks[w] = tick
            self._wi = w + 1

    def _step(self):
        st = self.stats
        tick = st.drains
        fill = self.arrived - self.head
        if self.telemetry_every and tick % self.telemetry_every == 0:
            self.telemetry.append((tick, fill, self.pi.stuff_rate, st.violations))
        if fill <= 0:
            if tick < self.grace_drains:
                st.warmup_stuffed += 1
                st.drains += 1
                return None
            raise FifoUnderrun(f"FIFO empty at drain {tick}")
        if self.min_fill_seen is None or fill < self.min_fill_seen:
            if tick >= self.grace_drains:
                self.min_fill_seen = fill
        self.pi_update(fill < self.setpoint, tick >= self.grace_drains)
        st.drains += 1
        h = self.head
        idle = self.idle
        if self.pending > 0 and idle[h]:
            self.pending -= 1
            st.idle_inserted += 1
            return None
        if self.pending < 0 and idle[h] and h + 1 < self.arrived and idle[h + 1]:
            self.pending += 1
            st.idle_dropped += 1
            h += 1
        self.head = h + 1
        self._record(h, tick)
        return h

    # -- block engine -------------------------------------------------------

    def drain_to(self, tick_end: int) -> None:
        """Run drains until ``stats.drains == tick_end``.

        Stretches of drains that cannot violate the setpoint or trigger a
        stuffing event are applied in one step; the result is the same
        control law evaluated drain by drain, up to floating-point rounding
        of the integrator sums.
        """
        st = self.stats
        pi = self.pi
        every = self.telemetry_every
        while st.drains < tick_end:
            m = tick_end - st.drains
            k = self.ki * self.target
            if st.drains < self.grace_drains:
                m = min(m, self.grace_drains - st.drains)
                k = 0.0
            if every:
                to_sample = (-st.drains) % every
                if to_sample == 0:
                    self._step()
                    continue
                m = min(m, to_sample)
            fill = self.arrived - self.head
            # drains that keep the filling at or above the setpoint
            m = min(m, fill - self.setpoint + 1)
            if self.pending != 0 or m < 1:
                self._step()
                continue
            r0, s0 = pi.residual, pi.stuff_rate
            while True:
                r_end = r0 + m * s0 - k * m * (m + 1) / 2
                lo, hi = min(r0, r_end), max(r0, r_end)
                if k > 0:
                    i_v = s0 / k - 0.5
                    if 0 < i_v < m:
                        r_v = r0 + i_v * s0 - k * i_v * (i_v + 1) / 2
                        lo, hi = min(lo, r_v), max(hi, r_v)
                if lo > -self.quantum and hi < self.quantum:
                    break
                m //= 2
                if m < 8:
                    break
            if m < 8:
                self._step()
                continue
            # apply m plain pops
            pi.residual = r_end
            pi.stuff_rate = s0 - k * m
            h0 = self.head
            last_fill = fill - (m - 1)
            if st.drains >= self.grace_drains and (
                self.min_fill_seen is None or last_fill < self.min_fill_seen
            ):
                self.min_fill_seen = last_fill
            w = self._wi
            watch = self.watch
            while w < len(watch) and watch[w] < h0 + m:
                self.watch_ticks[w] = st.drains + (watch[w] - h0)
                w += 1
            self._wi = w
            self.head = h0 + m
            st.drains += m

    def run_schedule(
        self, clock: ClockDomain, arrival_times, arrival_counts, until: int | None = None
    ) -> None:
        """Feed slot arrivals (global ps, byte counts) and drain on ``clock``.

        ``clock`` ticks bytes (nominal rate = client bit rate / 8).
        The drain clock is phase-locked to the arrival that starts emission:
        its tick zero is that arrival's time.
        """
        times = np.asarray(arrival_times, np.int64)
        counts = np.asarray(arrival_counts, np.int64)
        i = 0
        while not self.started and i < len(times):
            if counts[i]:
                self.push(int(counts[i]))
            if self.started:
                self.clock = clock.with_phase(int(times[i]))
            i += 1
        if not self.started:
            return
        ticks = first_tick_at_or_after_array(self.clock, times[i:]).tolist()
        for tick, n in zip(ticks, counts[i:].tolist()):
            self.drain_to(tick)
            if n:
                self.push(n)
        if until is not None:
            self.drain_to(self.clock.first_tick_at_or_after(int(until)))


def rx_push(fifo: RxElasticFifo, n: int) -> None:
    fifo.push(n)


def rx_drain(fifo: RxElasticFifo):
    return fifo.drain()


def pi_update(fifo: RxElasticFifo, violation: bool) -> None:
    fifo.pi_update(violation)
