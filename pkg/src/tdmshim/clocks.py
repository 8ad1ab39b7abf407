"""Free-running clock domains on a global picosecond timeline.

A domain counts ticks (bits) at ``nominal_rate * (1 + offset_ppm * 1e-6)``
starting at ``phase`` picoseconds. All conversions are done in exact integer
arithmetic so that drift over seconds of simulated time carries no float error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import InfiniteBeatPeriod, OutOfRange

PS_PER_S = 10**12


@dataclass(frozen=True)
class ClockDomain:
    id: str
    nominal_rate: int  # bits/s
    offset_ppm: float = 0.0
    phase: int = 0  # ps of tick zero
    # ps per tick == _num / _den exactly
    _num: int = field(init=False, repr=False, compare=False)
    _den: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ppm = Fraction(self.offset_ppm)
        scale = 1 + ppm / 10**6
        if self.nominal_rate <= 0 or scale <= 0:
            raise OutOfRange(f"clock {self.id}: effective rate must be positive")
        period = Fraction(PS_PER_S) / (Fraction(self.nominal_rate) * scale)
        object.__setattr__(self, "_num", period.numerator)
        object.__setattr__(self, "_den", period.denominator)

    @property
    def effective_rate(self) -> float:
        return self.nominal_rate * (1 + self.offset_ppm * 1e-6)

    @property
    def tick_ps(self) -> Fraction:
        return Fraction(self._num, self._den)

    def with_phase(self, phase: int) -> "ClockDomain":
        return ClockDomain(self.id, self.nominal_rate, self.offset_ppm, int(phase))

    def local_to_global(self, ticks: int) -> int:
        return local_to_global(self, ticks)

    def global_to_local(self, t: int) -> int:
        return global_to_local(self, t)

    def first_tick_at_or_after(self, t: int) -> int:
        """Smallest tick count whose global time is >= t (0 if t <= phase)."""
        if t <= self.phase:
            return 0
        n = global_to_local(self, t)
        return n if local_to_global(self, n) >= t else n + 1


def local_to_global(domain: ClockDomain, ticks: int) -> int:
    """Global time in ps of local tick ``ticks``; nearest ps, ties toward +inf."""
    if ticks < 0:
        raise OutOfRange("ticks must be non-negative")
    den2 = 2 * domain._den
    return domain.phase + (2 * ticks * domain._num + domain._den) // den2


def global_to_local(domain: ClockDomain, t: int) -> int:
    """Largest tick count whose global time is <= t."""
    if t < domain.phase:
        raise OutOfRange(f"t={t} precedes phase {domain.phase} of clock {domain.id}")
    dt = t - domain.phase
    n = dt * domain._den // domain._num
    # correct for the rounding applied by local_to_global
    while n > 0 and local_to_global(domain, n) > t:
        n -= 1
    while local_to_global(domain, n + 1) <= t:
        n += 1
    return n


def beat_period(period: float, ppm_a: float, ppm_b: float) -> float:
    """Time for one full relative phase slip of two nominally equal periods."""
    if period <= 0:
        raise OutOfRange("period must be positive")
    if ppm_a == ppm_b:
        raise InfiniteBeatPeriod("equal rates never slip")
    return period / (abs(ppm_a - ppm_b) * 1e-6)


# -- array forms -------------------------------------------------------------

_LIMIT = 2**62


def _fits(domain: ClockDomain, bound: int) -> bool:
    return 2 * (abs(int(bound)) + 1) * max(domain._num, domain._den) < _LIMIT


def local_to_global_array(domain: ClockDomain, ticks) -> np.ndarray:
    """Vectorized :func:`local_to_global` (int64 ps)."""
    t = np.asarray(ticks, np.int64)
    if t.size and t.min() < 0:
        raise OutOfRange("ticks must be non-negative")
    if t.size == 0 or _fits(domain, int(t.max())):
        return domain.phase + (2 * t * domain._num + domain._den) // (2 * domain._den)
    return np.array([local_to_global(domain, int(x)) for x in t.ravel()], np.int64).reshape(t.shape)


def global_to_local_array(domain: ClockDomain, times) -> np.ndarray:
    """Vectorized :func:`global_to_local`."""
    t = np.asarray(times, np.int64)
    if t.size == 0:
        return t.copy()
    if t.min() < domain.phase:
        raise OutOfRange(f"time precedes phase {domain.phase} of clock {domain.id}")
    dt = t - domain.phase
    dmax = int(dt.max()) + 1
    nmax = dmax * domain._den // domain._num + 2
    if dmax * domain._den >= _LIMIT or not _fits(domain, nmax):
        return np.array([global_to_local(domain, int(x)) for x in t.ravel()], np.int64).reshape(t.shape)
    n = dt * domain._den // domain._num
    for _ in range(3):
        over = local_to_global_array(domain, n) > t
        n = np.where(over & (n > 0), n - 1, n)
    for _ in range(3):
        n = np.where(local_to_global_array(domain, n + 1) <= t, n + 1, n)
    return n


def first_tick_at_or_after_array(domain: ClockDomain, times) -> np.ndarray:
    t = np.asarray(times, np.int64)
    out = np.zeros(t.shape, np.int64)
    late = t > domain.phase
    if late.any():
        n = global_to_local_array(domain, t[late])
        out[late] = np.where(local_to_global_array(domain, n) >= t[late], n, n + 1)
    return out
