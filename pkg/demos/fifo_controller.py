"""Rx elastic FIFO under a +100 ppm client: the PI loop learns the drop rate.

Arrivals come in 800-byte slot bursts every 6.3936 us; the drain runs at
the nominal byte clock. The filling floor settles at the setpoint while
about one drain in 2^17 falls below it.
"""

import numpy as np

from tdmshim.clocks import ClockDomain, global_to_local_array
from tdmshim.elastic import RxElasticFifo

ppm, slot_ps, n_slots = 100.0, 6_393_600, 200_000
src = ClockDomain("client", 125_000_000, ppm)
times = slot_ps * np.arange(1, n_slots + 1, dtype=np.int64)
units = global_to_local_array(src, times) // 160
counts = np.minimum(np.diff(np.concatenate([[0], units])), 5) * 160

drain = ClockDomain("drain", 125_000_000, 0.0)
fifo = RxElasticFifo(
    initial_stuff_rate=1 - src.effective_rate / drain.effective_rate,
    grace_drains=20_000,
    source_idle=np.ones(int(counts.sum()) + 1, bool),
    telemetry_every=2**23,
)
fifo.run_schedule(drain, times[counts > 0], counts[counts > 0])
for tick, fill, rate, viol in fifo.telemetry:
    print(f"drain {tick:11d}  filling {fill:4d}  stuff rate {rate * 1e6:9.3f} ppm  violations {viol}")
st = fifo.stats
print(f"violation ratio x 2^17: {st.steady_violations / (st.drains - fifo.grace_drains) * 2**17:.2f}")
print(f"idles dropped {st.idle_dropped}, inserted {st.idle_inserted}, lowest filling {fifo.min_fill_seen}")
