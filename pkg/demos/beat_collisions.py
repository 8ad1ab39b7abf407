"""Two periodic flows from clocks 100 ppm apart meet on one switch output.

The collisions recur at the beat period; every burst peaks at the
serialization time of one packet.
"""

from tdmshim.baseline import beat_collision_experiment, burst_peaks, collision_duration

period = 125e-6
res = beat_collision_experiment(period, 50, -50, 1500, 10**9, duration=2.6, phase_a=2.012e-3, phase_b=2e-3)
times, heights = burst_peaks(res)
print(f"beat period {res.beat_period_s:.4f} s, one collision blocks for {collision_duration(1500, 1e9) * 1e6:.3f} us")
for t, h in zip(times, heights):
    print(f"  burst peak at {t / 1e12:8.4f} s: extra delay {h / 1e6:7.3f} us")
busy = (res.extra_delay_ps > 0).sum()
print(f"{busy} of {len(res.extra_delay_ps)} packets delayed")
