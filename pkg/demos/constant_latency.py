"""Constant latency over a TDM connection versus a packet-switched path.

Runs the rate-transition scenario: one GE client whose frames cross the
bus, and the same frames through a GE -> 10GE -> GE store-and-forward chain.
"""

from tdmshim import scenario

rep = scenario.run(scenario.load_preset("fig6_rate_transition"))
for key in sorted(rep.flows):
    st = rep.flows[key]
    print(f"{key:12s} frames {st.count:6d}  mean {st.mean * 1e6:9.3f} us  p2p jitter {st.p2p_jitter * 1e9:10.3f} ns")

c = rep.connections["c"]
b = c.budget
print("\nlatency budget of the TDM connection (ns):")
for name in ("client_phy", "bus_phy", "mapping", "slot_cycle_compensation", "transit", "propagation"):
    print(f"  {name:24s} {getattr(b, name) * 1e9:9.1f}")
print(f"  measured compensation    {c.compensation_ps / 1e3:9.1f}")
