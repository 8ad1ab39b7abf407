"""Scenario configuration, validation, deterministic runs and sweeps.

A scenario is one JSON document (``"schema": "tdmshim/1"``). It describes a
linear bus of nodes, the slot calendar of each direction, TDM connections,
traffic flows, and optionally a packet-switched baseline path that carries
the same traffic for comparison.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .baseline import (
    SwitchHop,
    beat_collision_experiment,
    burst_peaks,
    md1_wait_tail,
    simulate_switch_path,
)
from .bus import (
    BE,
    MODES,
    BusConfig,
    BusNode,
    BusSimulator,
    Calendar,
    Connection,
    FrameSpans,
    run_connection,
)
from .clocks import PS_PER_S, ClockDomain
from .codec import HEADER_BYTES, MAX_FRAME, MIN_FRAME, MIN_IFG
from .elastic import DEFAULT_CAPACITY, DEFAULT_KI, DEFAULT_SETPOINT
from .errors import ContractFailure, Misconfiguration, ShimError, ValidationError
from .traffic import (
    KINDS,
    SUMMARY_COLUMNS,
    FlowSpec,
    FrameSchedule,
    LatencyRecords,
    budget_breakdown,
    generate,
    measure,
    merge_schedules,
    ptp_exchange,
    summary_row,
    write_records_csv,
)

SCHEMA = "tdmshim/1"
RNG_NAME = "philox4x64-10"
PPM_LIMIT = 2000.0
MIN_WARMUP = 0.001  # s; the Rx FIFOs settle onto their setpoint in this window
SWEEP_PARAMS = ("load", "hop_count", "S_max", "ppm")
PRESETS = (
    "fig14_bus",
    "fig16_hops",
    "fig3_md1",
    "fig5_beat",
    "fig6_rate_transition",
    "fig17_ptp",
    "fig19_fieldtrial",
)


# -- loading -----------------------------------------------------------------


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}")
    text = resources.files("tdmshim.presets").joinpath(f"{name}.json").read_text()
    return parse_config(text, f"{name}.json")


def parse_config(text: str, source: str = "<config>") -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError([f"{source}:{e.lineno}:{e.colno}: {e.msg}"]) from None
    if not isinstance(data, dict):
        raise ValidationError([f"{source}: top level must be an object"])
    return data


def load_config(path) -> dict:
    """Read a config file or a preset name."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        return load_preset(str(path))
    try:
        text = p.read_text()
    except OSError as e:
        raise ValidationError([f"{path}: {e.strerror}"]) from None
    return parse_config(text, str(path))


# -- typed view --------------------------------------------------------------


@dataclass
class ScenarioConfig:
    """Parsed scenario; ``raw`` keeps the document for hashing and sweeps."""

    raw: dict
    name: str
    seed: int
    duration: float
    warmup: float
    nodes: list[dict]
    bus: dict
    connections: list[dict]
    flows: list[dict]
    baseline: dict | None
    fifo: dict
    client_phy_ps: int
    ptp: dict | None
    beat: dict | None
    md1: dict | None
    outputs: dict

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        problems = validate(d)
        if problems:
            raise ValidationError(problems)
        return cls(
            raw=d,
            name=d.get("name", "scenario"),
            seed=int(d.get("seed", 0)),
            duration=float(d["duration"]),
            warmup=float(d.get("warmup", 0.0)),
            nodes=d.get("nodes", []),
            bus=d.get("bus", {}),
            connections=d.get("connections", []),
            flows=d.get("flows", []),
            baseline=d.get("baseline"),
            fifo=d.get("fifo", {}),
            client_phy_ps=int(d.get("client_phy_ps", 1_000_000)),
            ptp=d.get("ptp"),
            beat=d.get("beat"),
            md1=d.get("md1"),
            outputs=d.get("outputs", {}),
        )

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def bus_config(self) -> BusConfig:
        b = self.bus
        return BusConfig(
            gross_rate=int(b.get("gross_rate", 10_000_000_000)),
            s_max=int(b.get("s_max", 160)),
            units_per_slot=int(b.get("units_per_slot", 1)),
            mode=b.get("mode", "subcontainer"),
            ifg=int(b.get("ifg", 12)),
            pad=int(b.get("pad", 0)),
            bus_phy=int(b.get("bus_phy_ps", 500_000)),
            link_delay=0,
        )


def _positions(nodes: list[dict]) -> dict:
    """Node id -> bus position; a missing position defaults to the list index."""
    return {n.get("id"): n.get("position", i) for i, n in enumerate(nodes)}


def _sorted_nodes(nodes: list[dict]) -> list[dict]:
    pos = _positions(nodes)
    return sorted(nodes, key=lambda n: pos[n.get("id")])


def _direction(d: dict, conn: dict) -> str:
    pos = _positions(d.get("nodes", []))
    return "down" if pos[conn["src"][0]] < pos[conn["dst"][0]] else "up"


def _ordered_nodes(d: dict, direction: str) -> list[dict]:
    nodes = _sorted_nodes(d.get("nodes", []))
    return nodes if direction == "down" else nodes[::-1]


def cycle_time_ps(d: dict, direction: str) -> float:
    b = d.get("bus", {})
    cfg = BusConfig(
        gross_rate=int(b.get("gross_rate", 10_000_000_000)),
        s_max=int(b.get("s_max", 160)),
        units_per_slot=int(b.get("units_per_slot", 1)),
        mode=b.get("mode", "subcontainer"),
        ifg=int(b.get("ifg", 12)),
        pad=int(b.get("pad", 0)),
    )
    return len(b.get("calendar", {}).get(direction, [])) * cfg.slot_time_ps


# -- validation --------------------------------------------------------------


def validate(d: dict) -> list[str]:
    """All problems found in a config document, each prefixed with its location."""
    out: list[str] = []

    def need(obj, key, where, kind=None):
        if key not in obj:
            out.append(f"{where}.{key}: missing")
            return None
        v = obj[key]
        if kind is not None and not isinstance(v, kind):
            out.append(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}")
            return None
        return v

    if d.get("schema") != SCHEMA:
        out.append(f"schema: expected {SCHEMA!r}")
    if d.get("rng", RNG_NAME) != RNG_NAME:
        out.append(f"rng: only {RNG_NAME!r} is supported")
    dur = need(d, "duration", "config", (int, float))
    if dur is not None and dur <= 0:
        out.append("config.duration: must be positive")
    warm = d.get("warmup", 0.0)
    if dur is not None and not 0 <= warm < dur:
        out.append("config.warmup: must be in [0, duration)")

    if d.get("connections") and warm < MIN_WARMUP:
        out.append(f"config.warmup: connections need a start-up window of at least {MIN_WARMUP:g} s")

    nodes = d.get("nodes", [])
    ids = [n.get("id") for n in nodes]
    if len(set(ids)) != len(ids):
        out.append("nodes: duplicate node ids")
    positions = [n.get("position", i) for i, n in enumerate(nodes)]
    if len(set(positions)) != len(positions):
        out.append("nodes: two nodes share a position, topology is not linear")
    for i, n in enumerate(nodes):
        if abs(n.get("ppm", 0.0)) > PPM_LIMIT:
            out.append(f"nodes[{i}].ppm: {n['ppm']} outside +-{PPM_LIMIT:g} ppm")
        for k in ("links", "neighbors"):
            if k in n:
                out.append(f"nodes[{i}].{k}: explicit links are not supported, topology is linear")

    bus = d.get("bus", {})
    mode = bus.get("mode", "subcontainer")
    if mode not in MODES:
        out.append(f"bus.mode: {mode!r} not in {MODES}")
    s_max = bus.get("s_max", 160)
    if not 100 <= s_max <= 250:
        out.append(f"bus.s_max: {s_max} outside [100, 250]")
    if bus.get("pad", 0) % 8:
        out.append("bus.pad: must be a multiple of 8")
    ifg = bus.get("ifg", 12)
    if ifg < MIN_IFG:
        out.append(f"bus.ifg: {ifg} below the minimum {MIN_IFG}")
    if not isinstance(bus.get("units_per_slot", 1), int) or bus.get("units_per_slot", 1) < 1:
        out.append("bus.units_per_slot: must be a positive integer")
    calendars = bus.get("calendar", {})
    frame_bytes = -(-(HEADER_BYTES + s_max * bus.get("units_per_slot", 1) + ifg) // 8) * 8 + bus.get("pad", 0)
    ordered = _sorted_nodes(nodes)
    for a, b in zip(ordered, ordered[1:]):
        dppm = abs(a.get("ppm", 0.0) - b.get("ppm", 0.0))
        slack = ifg - int(np.ceil(frame_bytes * dppm * 1e-6)) - 1
        if slack < 1:
            out.append(
                f"nodes: clocks of {a.get('id')} and {b.get('id')} differ by {dppm:g} ppm, "
                f"more than the inter-slot gap of {ifg} bytes can absorb"
            )
    conns = d.get("connections", [])
    conn_ids = [c.get("id") for c in conns]
    if len(set(conn_ids)) != len(conn_ids):
        out.append("connections: duplicate connection ids")
    labels = [c.get("label") for c in conns if "label" in c]
    if len(set(labels)) != len(labels):
        out.append("connections: duplicate labels")
    for direction, cal in calendars.items():
        if direction not in ("down", "up"):
            out.append(f"bus.calendar.{direction}: direction must be 'down' or 'up'")
            continue
        for j, a in enumerate(cal):
            if a is not None and a not in conn_ids:
                out.append(f"bus.calendar.{direction}[{j}]: unknown connection {a!r}")

    by_id = {n.get("id"): n for n in nodes}
    units = bus.get("units_per_slot", 1)
    for i, c in enumerate(conns):
        where = f"connections[{i}]"
        src, dst = c.get("src"), c.get("dst")
        if not (isinstance(src, list) and isinstance(dst, list) and src and dst):
            out.append(f"{where}: src and dst must be [node, port]")
            continue
        if src[0] not in by_id or dst[0] not in by_id:
            out.append(f"{where}: unknown node in src/dst")
            continue
        if src[0] == dst[0]:
            out.append(f"{where}: src and dst on the same node")
            continue
        ppm = c.get("ppm", 0.0)
        if abs(ppm) > PPM_LIMIT:
            out.append(f"{where}.ppm: {ppm} outside the justification range +-{PPM_LIMIT:g} ppm")
        rate = c.get("rate")
        if not isinstance(rate, (int, float)) or rate <= 0:
            out.append(f"{where}.rate: must be a positive number")
            continue
        direction = _direction(d, c)
        cal = calendars.get(direction, [])
        n_slots = sum(1 for a in cal if a == c["id"])
        if n_slots == 0:
            out.append(f"{where}: no calendar slots in direction {direction!r}")
            continue
        try:
            cyc = cycle_time_ps(d, direction)
        except ShimError:
            continue
        per_slot = (s_max - 0.5) if mode == "jcjb" else s_max * units
        reserved = n_slots * per_slot * 8 * PS_PER_S / cyc
        worst = rate * (1 + abs(ppm) * 1e-6)
        if mode == "jcjb":
            low = n_slots * (s_max - 1) * 8 * PS_PER_S / cyc
            high = n_slots * s_max * 8 * PS_PER_S / cyc
            lo_rate = rate * (1 - abs(ppm) * 1e-6)
            if worst > high or lo_rate < low:
                out.append(
                    f"{where}: client rate {rate:g} +-{abs(ppm):g} ppm outside the justification "
                    f"range [{low:.6g}, {high:.6g}] of its reservation"
                )
        elif worst > reserved:
            out.append(
                f"{where}: reservation insufficient, {reserved:.6g} bit/s reserved for "
                f"{worst:.6g} bit/s worst-case client rate"
            )
        cap = d.get("fifo", {}).get("capacity", DEFAULT_CAPACITY)
        need_cap = 2 * n_slots * s_max * units + d.get("fifo", {}).get("setpoint", DEFAULT_SETPOINT)
        if need_cap > cap:
            out.append(f"{where}: Rx FIFO capacity {cap} below {need_cap} bytes needed per cycle")

    fifo = d.get("fifo", {})
    q = fifo.get("quantum", 1)
    if not isinstance(q, int) or q < 1:
        out.append("fifo.quantum: must be a positive integer")
    sl = fifo.get("start_level")
    if sl is not None and (not isinstance(sl, int) or sl < 1):
        out.append("fifo.start_level: must be a positive integer")

    flows = d.get("flows", [])
    fids = [f.get("id") for f in flows]
    if len(set(fids)) != len(fids):
        out.append("flows: duplicate flow ids")
    for i, f in enumerate(flows):
        where = f"flows[{i}]"
        if f.get("kind") not in KINDS:
            out.append(f"{where}.kind: {f.get('kind')!r} not in {KINDS}")
        att = f.get("attach", {})
        if "connection" in att and att["connection"] not in conn_ids:
            out.append(f"{where}.attach: unknown connection {att['connection']!r}")
        if "be" in att:
            seg = att["be"]
            if not (isinstance(seg, list) and len(seg) == 2 and seg[0] in by_id and seg[1] in by_id):
                out.append(f"{where}.attach.be: expected [from_node, to_node]")
            else:
                pos = _positions(nodes)
                order = sorted(pos.values())
                p0, p1 = pos[seg[0]], pos[seg[1]]
                if abs(order.index(p0) - order.index(p1)) != 1:
                    out.append(f"{where}.attach.be: best-effort flows span one segment")
        if "rng_stream" in f and not isinstance(f["rng_stream"], str):
            out.append(f"{where}.rng_stream: expected a string")
        size = f.get("size", ["uniform", MIN_FRAME, MAX_FRAME])
        if size[0] == "uniform" and not MIN_FRAME <= size[1] <= size[2] <= MAX_FRAME:
            out.append(f"{where}.size: bounds outside [{MIN_FRAME}, {MAX_FRAME}]")

    base = d.get("baseline")
    if base is not None:
        hops = base.get("hops", [])
        if not hops:
            out.append("baseline.hops: empty hop chain")
        for j, h in enumerate(hops):
            try:
                SwitchHop(int(h["input_rate"]), int(h["output_rate"]), h.get("mode", "store_and_forward"))
            except KeyError as e:
                out.append(f"baseline.hops[{j}]: missing {e.args[0]}")
            except Misconfiguration as e:
                out.append(f"baseline.hops[{j}]: {e}")
        for a, b in zip(hops, hops[1:]):
            if a.get("output_rate") != b.get("input_rate"):
                out.append("baseline.hops: consecutive hop rates do not connect")
        for fid in base.get("flows", []):
            if fid not in fids:
                out.append(f"baseline.flows: unknown flow {fid!r}")
    ptp = d.get("ptp")
    if ptp is not None:
        for k in ("sync_flow", "delay_req_flow"):
            if ptp.get(k) not in fids:
                out.append(f"ptp.{k}: unknown flow {ptp.get(k)!r}")
    return out


# -- run ---------------------------------------------------------------------


@dataclass
class ConnectionReport:
    id: str
    direction: str
    budget: Any
    compensation_ps: float
    drains: int
    violations: int
    violation_ratio: float
    idle_inserted: int
    idle_dropped: int
    min_fill: int | None
    slots: int
    reclaimed: int
    empty: int


@dataclass
class RunReport:
    name: str
    seed: int
    config_hash: str
    flows: dict = field(default_factory=dict)  # rx_port -> JitterStats
    records: dict = field(default_factory=dict)  # rx_port -> LatencyRecords
    connections: dict = field(default_factory=dict)  # id -> ConnectionReport
    be: dict = field(default_factory=dict)  # "a->b" -> BeRun
    realign: dict = field(default_factory=dict)  # direction -> {node: (inserted, removed)}
    conservation: dict = field(default_factory=dict)
    ptp: Any = None
    beat: dict | None = None
    md1: list | None = None
    failed: str | None = None
    outputs: dict = field(default_factory=dict)  # file name -> path

    @property
    def ok(self) -> bool:
        return self.failed is None


def _flow_clock(cfg: ScenarioConfig, f: dict, conns: dict, nodes: dict) -> ClockDomain:
    att = f.get("attach", {})
    if "connection" in att:
        c = conns[att["connection"]]
        return ClockDomain(f"client:{c['id']}", int(c["rate"]), float(c.get("ppm", 0.0)))
    if "be" in att:
        n = nodes[att["be"][0]]
        rate = int(f.get("port_rate", cfg.bus.get("gross_rate", 10_000_000_000)))
        return ClockDomain(f"be:{n['id']}", rate, float(n.get("ppm", 0.0)))
    return ClockDomain(f"port:{f['id']}", int(f.get("port_rate", 1_000_000_000)), float(f.get("ppm", 0.0)))


def _flow_spec(cfg: ScenarioConfig, f: dict, clock: ClockDomain, seed: int) -> FlowSpec:
    size = f.get("size", ["uniform", MIN_FRAME, MAX_FRAME])
    if f["kind"] == "random_size_saturating":
        value = float(f.get("load", 1.0))
    elif f["kind"] == "poisson":
        value = float(f["rate"]) if "rate" in f else float(f["load"]) * clock.nominal_rate
    else:
        value = float(f["period"])
    return FlowSpec(
        id=f["id"],
        kind=f["kind"],
        rate_or_period=value,
        size_dist=tuple(size),
        clock_domain=clock,
        seed=seed,
        start=max(cfg.warmup, float(f.get("start", 0.0))),
        phase=float(f.get("phase", 0.0)),
        rng_stream=f.get("rng_stream"),
    )


@dataclass
class _PortTraffic:
    """Frames of all flows on one connection's client port."""

    starts: np.ndarray
    sizes: np.ndarray
    flow_index: np.ndarray
    flow_ids: list


def _port_traffic(specs: list[FlowSpec], until: float) -> _PortTraffic:
    fixed = [s for s in specs if s.kind in ("periodic", "ptp_probe")]
    fillers = [s for s in specs if s.kind not in ("periodic", "ptp_probe")]
    if len(fillers) > 1:
        raise Misconfiguration("at most one saturating/poisson flow per client port")
    sch_fixed = [generate(s, until) for s in fixed]
    sch_fill = generate(fillers[0], until) if fillers else None
    st, sz, idx = merge_schedules(sch_fixed, sch_fill)
    return _PortTraffic(st, sz, idx, [s.id for s in fixed + fillers])


def _flush_ps(cfg: ScenarioConfig) -> int:
    prop = sum(int(n.get("link_ps", 0)) for n in cfg.nodes)
    return 2 * prop + 1_000_000_000  # 1 ms of margin past the last frame


def run(config, seed: int | None = None, out=None, trace: str = "none") -> RunReport:
    """Execute a scenario; writes CSV outputs to ``out`` when given."""
    cfg = config if isinstance(config, ScenarioConfig) else ScenarioConfig.from_dict(config)
    if seed is not None:
        raw = dict(cfg.raw, seed=int(seed))
        cfg = ScenarioConfig.from_dict(raw)
    report = RunReport(cfg.name, cfg.seed, cfg.config_hash)
    if cfg.md1 is not None:
        report.md1 = _run_md1(cfg)
    slot_rows: list = []
    telemetry: dict = {}
    _run_bus(cfg, report, telemetry, slot_rows if trace == "slots" else None)
    _run_baseline(cfg, report)
    if cfg.ptp is not None:
        report.ptp = _ptp_stats(cfg, report)
    if cfg.beat is not None:
        report.beat = _run_beat(cfg, report)
    bad = [k for k, v in report.conservation.items() if not v]
    if bad:
        report.failed = "conservation counters do not balance: " + ", ".join(sorted(bad))
    if out is not None:
        write_outputs(report, out, telemetry, slot_rows if trace == "slots" else None)
    return report


def _run_bus(cfg: ScenarioConfig, report: RunReport, telemetry: dict, slot_rows) -> None:
    conns = {c["id"]: c for c in cfg.connections}
    nodes = {n["id"]: n for n in cfg.nodes}
    flows_by_conn: dict = {}
    be_flows: dict = {}
    for f in cfg.flows:
        att = f.get("attach", {})
        if "connection" in att:
            flows_by_conn.setdefault(att["connection"], []).append(f)
        elif "be" in att:
            be_flows.setdefault(tuple(att["be"]), []).append(f)
    if not conns and not be_flows:
        return
    bcfg = cfg.bus_config()
    until = cfg.duration
    end_ps = int(round(until * PS_PER_S)) + _flush_ps(cfg)
    fifo = cfg.fifo
    for direction in ("down", "up"):
        cal_list = cfg.bus.get("calendar", {}).get(direction)
        if not cal_list:
            continue
        order = _ordered_nodes(cfg.raw, direction)
        pos = _positions(cfg.nodes)
        ids = [n["id"] for n in order]
        dconns = [c for c in cfg.connections if _direction(cfg.raw, c) == direction]
        dbe = {k: v for k, v in be_flows.items() if ids.index(k[1]) == ids.index(k[0]) + 1}
        if not dconns and not dbe:
            continue
        bus_nodes = [
            BusNode(
                n["id"],
                i,
                ClockDomain(f"bus:{n['id']}", bcfg.gross_rate // 8, float(n.get("ppm", 0.0))),
                int(n.get("transit_delay_ps", 500_000)),
                int(n.get("be_capacity", 256)),
            )
            for i, n in enumerate(order)
        ]
        # segment delay into each node, in this direction
        links = {}
        for a, b in zip(order, order[1:]):
            lo = a if pos[a["id"]] < pos[b["id"]] else b
            links[b["id"]] = int(lo.get("link_ps", 0))
        connections = [
            Connection(
                c["id"],
                tuple(c["src"]),
                tuple(c["dst"]),
                int(c["rate"]),
                ClockDomain(f"client:{c['id']}", int(c["rate"]), float(c.get("ppm", 0.0))),
                int(c.get("label", 0)),
            )
            for c in dconns
        ]
        sim = BusSimulator(bcfg, Calendar(len(cal_list), list(cal_list)), bus_nodes, connections, link_delays=links)
        n_slots = sim.slot_count(end_ps)
        times = sim.slot_times(n_slots)
        report.realign[direction] = dict(sim.realign_stats)
        tx_by_conn = {}
        for conn in connections:
            c = conns[conn.id]
            specs = [
                _flow_spec(cfg, f, conn.clock_domain, cfg.seed) for f in flows_by_conn.get(conn.id, [])
            ]
            port = _port_traffic(specs, until)
            length = int(conn.clock_domain.global_to_local(end_ps) // 8) + 1
            idle = FrameSpans(port.starts, port.sizes, length)
            res = run_connection(
                sim,
                conn,
                times,
                idle,
                port.starts,
                drain_ppm=float(nodes[conn.dst_node].get("ppm", 0.0)),
                client_phy=cfg.client_phy_ps,
                setpoint=int(fifo.get("setpoint", DEFAULT_SETPOINT)),
                ki=float(fifo.get("ki", DEFAULT_KI)),
                capacity=int(fifo.get("capacity", DEFAULT_CAPACITY)),
                start_level=fifo.get("start_level"),
                quantum=int(fifo.get("quantum", 1)),
                warm_start=bool(fifo.get("warm_start", True)),
                grace_ps=int(round(cfg.warmup * PS_PER_S)),
                until_ps=end_ps,
                telemetry_every=int(fifo.get("telemetry_every", 0)),
            )
            tx_by_conn[conn.id] = res.tx
            _collect_connection(cfg, report, conn, c, direction, res, port, sim, times)
            telemetry[conn.id] = res.fifo.telemetry
        _collect_be(cfg, report, sim, times, tx_by_conn, dbe, nodes, direction, n_slots)
        if slot_rows is not None:
            slot_rows.extend(_slot_trace(sim, times, tx_by_conn, direction, n_slots))


def _slot_trace(sim, times, tx_by_conn, direction, n_slots) -> list[tuple]:
    """(time_ps, node, slot_seq, label, action, direction) per slot and node."""
    cal = sim.calendar
    cyc = cal.cycle_length
    labels = np.array(["BE" if a is BE else str(a) for a in cal.assignment], dtype=object)
    label = labels[np.arange(n_slots) % cyc]
    reclaimed = np.zeros(n_slots, bool)
    for tx in tx_by_conn.values():
        reclaimed[tx.slot_index[tx.reclaimed]] = True
    seq = np.arange(n_slots)
    rows = []
    head = sim.order[0]
    rows.extend(zip(times[head].tolist(), [head] * n_slots, seq.tolist(), label.tolist(),
                    ["emit"] * n_slots, [direction] * n_slots))
    for i, nid in enumerate(sim.order):
        action = np.full(n_slots, "be", dtype=object)
        for c in sim.connections.values():
            a, d = sim.order.index(c.src_node), sim.order.index(c.dst_node)
            mine = label == str(c.id)
            if i == a:
                action[mine] = np.where(reclaimed[mine], "reclaim", "add")
            elif a < i < d:
                action[mine] = "transit"
            elif i == d:
                action[mine] = "drop"
        t = sim.arrival_at(times, nid) if i else times[nid]
        rows.extend(zip(t.tolist(), [nid] * n_slots, seq.tolist(), label.tolist(),
                        action.tolist(), [direction] * n_slots))
    return rows


def _collect_connection(cfg, report, conn, c, direction, res, port, sim, times):
    fifo = res.fifo
    st = fifo.stats
    done = res.rx_ps >= 0
    for k, fid in enumerate(port.flow_ids):
        sel = port.flow_index == k
        ok = done[sel]
        recs = LatencyRecords(
            fid,
            np.arange(int(sel.sum()))[ok],
            port.sizes[sel][ok],
            res.tx_ps[sel][ok],
            res.rx_ps[sel][ok],
            int(sel.sum()),
        )
        key = f"{conn.id}:{fid}"
        report.records[key] = recs
        if len(recs):
            report.flows[key] = measure(recs)
    bcfg = sim.config
    order = sim.order
    a, d = order.index(conn.src_node), order.index(conn.dst_node)
    transit = sum(sim.node_by_id[n].transit_delay for n in order[a + 1 : d])
    prop = sum(sim.link_delays.get(n, 0) for n in order[a + 1 : d + 1])
    b = conn.client_rate
    per_cycle = sum(1 for x in sim.calendar.assignment if x == conn.id) * bcfg.body_bytes
    mapping = (bcfg.s_max if bcfg.mode == "subcontainer" else (bcfg.tx_headroom or bcfg.s_max // 2))
    stages = {
        "client_phy": cfg.client_phy_ps * 1e-12,
        "bus_phy": bcfg.bus_phy * 1e-12,
        "mapping": mapping * 8 / b,
        "slot_cycle_compensation": per_cycle * 8 / b,
        "transit": transit * 1e-12,
        "propagation": prop * 1e-12,
    }
    all_recs = [report.records[f"{conn.id}:{fid}"] for fid in port.flow_ids]
    lat = np.concatenate([r.latency for r in all_recs]) if all_recs else np.zeros(0)
    merged = None
    if len(lat):
        merged = LatencyRecords(conn.id, np.arange(len(lat)), np.zeros(len(lat), np.int64), np.zeros(len(lat), np.int64), lat)
    budget = budget_breakdown(stages, merged)
    comp = float("nan")
    if len(lat):
        margin = (fifo.setpoint - 1) * 8 / b
        fixed = stages["client_phy"] + stages["bus_phy"] + stages["transit"] + stages["propagation"]
        comp = (lat.mean() * 1e-12 - fixed - stages["mapping"] - margin) * PS_PER_S
    report.connections[conn.id] = ConnectionReport(
        conn.id,
        direction,
        budget,
        comp,
        st.drains,
        st.violations,
        st.steady_violations / max(st.drains - fifo.grace_drains, 1),
        st.idle_inserted,
        st.idle_dropped,
        fifo.min_fill_seen,
        len(res.tx.count),
        int(res.tx.reclaimed.sum()),
        int((res.tx.count == 0).sum()),
    )
    # every drain emits one symbol: from the source or a stuffed idle
    from_source = fifo.head - st.idle_dropped
    report.conservation[f"{conn.id}:fifo"] = (
        from_source + st.idle_inserted + st.warmup_stuffed == st.drains and fifo.head <= fifo.arrived
    )
    report.conservation[f"{conn.id}:bytes"] = int(res.tx.count.sum()) == fifo.arrived
    report.conservation[f"{conn.id}:frames"] = all(
        len(r) + int((res.rx_ps[port.flow_index == k] < 0).sum()) == r.generated
        for k, r in enumerate(all_recs)
    )


def _collect_be(cfg, report, sim, times, tx_by_conn, dbe, nodes, direction, n_slots):
    cal = sim.calendar
    status = {}  # slot index -> (reclaimed, active)
    for cid, tx in tx_by_conn.items():
        for j, n, rc in zip(tx.slot_index.tolist(), tx.count.tolist(), tx.reclaimed.tolist()):
            status[j] = (rc, n > 0)
    for (a, b), flows in sorted(dbe.items(), key=lambda kv: str(kv[0])):
        usable = np.zeros(n_slots, bool)
        for j in range(n_slots):
            label = cal.label(j)
            rc, active = status.get(j, (False, False))
            usable[j] = sim.be_usable(label, a, rc, active)
        arrivals, sizes = [], []
        for f in flows:
            clk = _flow_clock(cfg, f, {}, nodes)
            sch = generate(_flow_spec(cfg, f, clk, cfg.seed), cfg.duration)
            arrivals.append(sch.times_ps())
            sizes.append(sch.size)
        arr = np.concatenate(arrivals)
        sz = np.concatenate(sizes)
        order = np.argsort(arr, kind="stable")
        res = sim.run_be(a, times[a], usable, arr[order], sz[order])
        key = f"{a}->{b}"
        report.be[key] = res
        queued = res.offered_packets - res.delivered_packets - res.dropped_packets
        report.conservation[f"be:{key}"] = queued >= 0


def _run_baseline(cfg: ScenarioConfig, report: RunReport) -> None:
    base = cfg.baseline
    if base is None or not base.get("flows"):
        return
    hops = [
        SwitchHop(
            int(h["input_rate"]),
            int(h["output_rate"]),
            h.get("mode", "store_and_forward"),
            int(h.get("queue_capacity", 100)),
            int(h.get("processing_ps", 0)),
        )
        for h in base["hops"]
    ]
    flows = {f["id"]: f for f in cfg.flows}
    conns = {c["id"]: c for c in cfg.connections}
    nodes = {n["id"]: n for n in cfg.nodes}
    inputs = []
    for fid in base["flows"]:
        tdm = [r for k, r in report.records.items() if k.endswith(f":{fid}")]
        if tdm:
            # identical traffic: the frames exactly as they entered the TDM port
            r = tdm[0]
            gen_tx = r.tx
            inputs.append((fid, gen_tx, r.size))
        else:
            f = flows[fid]
            sch = generate(_flow_spec(cfg, f, _flow_clock(cfg, f, conns, nodes), cfg.seed), cfg.duration)
            inputs.append((fid, sch.times_ps(), sch.size))
    res = simulate_switch_path(hops, inputs)
    for fid, recs in res.items():
        key = f"baseline:{fid}"
        report.records[key] = recs
        if len(recs):
            report.flows[key] = measure(recs)


def _ptp_stats(cfg: ScenarioConfig, report: RunReport):
    from .traffic import ptp_offset_estimate

    p = cfg.ptp
    fwd = [r for k, r in report.records.items() if k.endswith(":" + p["sync_flow"]) and not k.startswith("baseline")]
    rev = [r for k, r in report.records.items() if k.endswith(":" + p["delay_req_flow"]) and not k.startswith("baseline")]
    if not fwd or not rev:
        return None
    f, r = fwd[0], rev[0]
    n = min(len(f), len(r))
    return ptp_offset_estimate(f.latency[:n], r.latency[:n], int(p.get("true_offset_ps", 0)))


def _run_beat(cfg: ScenarioConfig, report: RunReport) -> dict:
    b = cfg.beat
    res = beat_collision_experiment(
        float(b["period"]),
        float(b["ppm_a"]),
        float(b["ppm_b"]),
        int(b["size"]),
        int(b["link_rate"]),
        duration=cfg.duration,
        phase_a=float(b.get("phase_a", 0.0)),
        phase_b=float(b.get("phase_b", 0.0)),
    )
    peaks_t, peaks_h = burst_peaks(res)
    out = {"baseline": res, "peak_times_ps": peaks_t, "peak_heights_ps": peaks_h}
    # the same flows over TDM: rerun with each flow alone and compare
    tdm_extra = {}
    flow_ids = b.get("flows", [])
    for fid in flow_ids:
        raw = copy.deepcopy(cfg.raw)
        raw["flows"] = [f for f in raw["flows"] if f["id"] == fid or f["id"] not in flow_ids]
        raw.pop("beat", None)
        raw.pop("baseline", None)
        solo = run(raw)
        key = next(k for k in report.records if k.endswith(f":{fid}") and not k.startswith("baseline"))
        both = report.records[key]
        alone = solo.records[key]
        n = min(len(both), len(alone))
        tdm_extra[fid] = (both.tx[:n], both.latency[:n] - alone.latency[:n])
    out["tdm"] = tdm_extra
    return out


def _run_md1(cfg: ScenarioConfig) -> list:
    from .baseline import md1_simulate

    m = cfg.md1
    rho = float(m["load"])
    ns = [int(n) for n in m.get("n", [1, 5, 10, 40, 80])]
    est = md1_simulate(rho, ns, int(m.get("arrivals", 10**6)), seed=cfg.seed)
    return [
        (rho, n, md1_wait_tail(rho, n), float(p), float(se))
        for n, p, se in zip(ns, est.p, est.stderr)
    ]


# -- outputs -----------------------------------------------------------------

BUDGET_COLUMNS = (
    "connection",
    "client_phy_ns",
    "bus_phy_ns",
    "mapping_ns",
    "slot_cycle_compensation_ns",
    "transit_ns",
    "propagation_ns",
    "residual_ns",
    "total_ns",
    "measured_compensation_ns",
)
SLOT_TRACE_COLUMNS = ("time_ps", "node", "slot_seq", "label", "action", "direction")
TELEMETRY_COLUMNS = ("connection", "drain", "filling", "stuff_rate_ppm", "violations")


def _f3(x: float) -> str:
    return f"{x:.3f}"


def summary_rows(report: RunReport) -> list[dict]:
    rows = [summary_row(k, report.records[k]) for k in sorted(report.records)]
    for key in sorted(report.be):
        be = report.be[key]
        tx, rx = be.offered_packets, be.delivered_packets
        rows.append(
            {
                "rx_port": f"be:{key}",
                "tx_frames": tx,
                "rx_frames": rx,
                "loss_pct": f"{be.dropped_packets / tx * 100 if tx else 0:.6f}",
                "avg_latency_ns": "",
                "min_latency_ns": "",
                "max_latency_ns": "",
                "jitter_p2p_ns": "",
            }
        )
    return rows


def budget_rows(report: RunReport) -> list[dict]:
    rows = []
    for cid in sorted(report.connections):
        c = report.connections[cid]
        b = c.budget.as_row()
        row = {"connection": cid}
        for k in ("client_phy", "bus_phy", "mapping", "slot_cycle_compensation", "transit", "propagation", "residual", "total"):
            row[f"{k}_ns"] = _f3(b[k] * 1e9)
        row["measured_compensation_ns"] = _f3(c.compensation_ps / 1000)
        rows.append(row)
    return rows


def _write_csv(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_outputs(report: RunReport, out, telemetry: dict | None = None, slot_rows=None) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    p = out / "records.csv"
    write_records_csv(p, [report.records[k] for k in sorted(report.records)])
    paths["records.csv"] = p
    p = out / "summary.csv"
    _write_csv(p, SUMMARY_COLUMNS, summary_rows(report))
    paths["summary.csv"] = p
    p = out / "budget.csv"
    _write_csv(p, BUDGET_COLUMNS, budget_rows(report))
    paths["budget.csv"] = p
    p = out / "telemetry.csv"
    rows = []
    for cid in sorted(telemetry or {}):
        for tick, fill, rate, viol in telemetry[cid]:
            rows.append(
                {"connection": cid, "drain": tick, "filling": fill,
                 "stuff_rate_ppm": f"{rate * 1e6:.6f}", "violations": viol}
            )
    _write_csv(p, TELEMETRY_COLUMNS, rows)
    paths["telemetry.csv"] = p
    if report.ptp is not None:
        p = out / "ptp.csv"
        o = report.ptp
        _write_csv(
            p,
            ("exchanges", "mean_offset_ps", "min_offset_ps", "max_offset_ps",
             "mean_path_delay_ps", "path_delay_spread_ps"),
            [{
                "exchanges": o.count,
                "mean_offset_ps": f"{o.mean_offset:.6f}",
                "min_offset_ps": f"{o.min_offset:.6f}",
                "max_offset_ps": f"{o.max_offset:.6f}",
                "mean_path_delay_ps": f"{o.mean_path_delay:.6f}",
                "path_delay_spread_ps": f"{o.path_delay_spread:.6f}",
            }],
        )
        paths["ptp.csv"] = p
    if report.md1 is not None:
        p = out / "md1.csv"
        _write_csv(
            p,
            ("rho", "n", "p_analytic", "p_simulated", "stderr"),
            [{"rho": f"{r:.6f}", "n": n, "p_analytic": f"{a:.6e}", "p_simulated": f"{s:.6e}", "stderr": f"{e:.6e}"}
             for r, n, a, s, e in report.md1],
        )
        paths["md1.csv"] = p
    if report.beat is not None:
        p = out / "beat.csv"
        rows = []
        res = report.beat["baseline"]
        for t, fl, x in zip(res.time_ps.tolist(), res.flow.tolist(), res.extra_delay_ps.tolist()):
            rows.append({"path": "baseline", "flow": "ab"[fl], "first_bit_tx_ps": t, "extra_delay_ps": x})
        for fid in sorted(report.beat["tdm"]):
            tx, extra = report.beat["tdm"][fid]
            for t, x in zip(tx.tolist(), extra.tolist()):
                rows.append({"path": "tdm", "flow": fid, "first_bit_tx_ps": t, "extra_delay_ps": x})
        _write_csv(p, ("path", "flow", "first_bit_tx_ps", "extra_delay_ps"), rows)
        paths["beat.csv"] = p
    if slot_rows is not None:
        p = out / "slots.csv"
        _write_csv(p, SLOT_TRACE_COLUMNS, [dict(zip(SLOT_TRACE_COLUMNS, r)) for r in sorted(slot_rows)])
        paths["slots.csv"] = p
    report.outputs = paths
    return paths


# -- sweep -------------------------------------------------------------------


def derived_seed(base: int, param: str) -> int:
    """Seed shared by every sub-run of one sweep (common random numbers)."""
    ss = np.random.SeedSequence([int(base), zlib.crc32(param.encode())])
    return int(ss.generate_state(1, np.uint32)[0])


def apply_param(raw: dict, param: str, value) -> dict:
    """Copy of ``raw`` with one sweep parameter set."""
    d = copy.deepcopy(raw)
    if param not in SWEEP_PARAMS:
        raise ValidationError([f"sweep: parameter {param!r} not in {SWEEP_PARAMS}"])
    if param == "load":
        for f in d.get("flows", []):
            if f.get("kind") in ("random_size_saturating", "poisson") and "load" in f:
                f["load"] = float(value)
        if d.get("md1") is not None:
            d["md1"]["load"] = float(value)
    elif param == "hop_count":
        h = int(value)
        c = d["connections"][0]
        direction = _direction(d, c)
        order = [n["id"] for n in _ordered_nodes(d, direction)]
        i = order.index(c["src"][0])
        if i + h + 1 >= len(order):
            raise ValidationError([f"sweep: hop_count {h} needs more nodes than configured"])
        c["dst"] = [order[i + h + 1], c["dst"][1]]
    elif param == "S_max":
        v = int(value)
        bus = d.setdefault("bus", {})
        if v <= 250:
            bus["s_max"], bus["units_per_slot"] = v, 1
        else:
            unit = bus.get("s_max", 160)
            if v % unit:
                raise ValidationError([f"sweep: S_max {v} is not a multiple of the unit {unit}"])
            bus["units_per_slot"] = v // unit
    else:
        for c in d.get("connections", []):
            c["ppm"] = float(value)
    return d


SWEEP_COLUMNS = (
    "param", "value", "seed", "rx_port", "rx_frames", "loss_pct",
    "avg_latency_ns", "min_latency_ns", "max_latency_ns", "jitter_p2p_ns",
    "slot_cycle_compensation_ns", "measured_compensation_ns",
)


def _value_key(v):
    try:
        return (0, float(v))
    except (TypeError, ValueError):
        return (1, str(v))


def _sweep_run(d: dict):
    try:
        return run(d), None
    except ShimError as e:
        return None, e


def sweep(config: dict, param: str, values, out=None, jobs: int = 1) -> list[dict]:
    """One run per value, aggregated into one row per value.

    Every sub-run uses the same seed derived from the base seed and the
    parameter name. With ``jobs > 1`` sub-runs execute in worker processes;
    rows are emitted in sorted value order either way.
    """
    raw = config.raw if isinstance(config, ScenarioConfig) else config
    seed = derived_seed(int(raw.get("seed", 0)), param)
    values = sorted(values, key=_value_key)
    docs = []
    for v in values:
        d = apply_param(raw, param, v)
        d["seed"] = seed
        docs.append(d)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_run, docs))
    else:
        results = [_sweep_run(d) for d in docs]
    rows = []
    extra_cols: list[str] = []
    for v, (rep, err) in zip(values, results):
        if err is not None:
            if isinstance(err, ValidationError):
                raise ValidationError([f"sweep {param}={v}: {p}" for p in err.problems]) from err
            raise type(err)(f"sweep {param}={v}: {err}") from err
        row = {"param": param, "value": v, "seed": seed}
        ports = [k for k in sorted(rep.records) if not k.startswith("baseline:")] or sorted(rep.records)
        if ports:
            s = summary_row(ports[0], rep.records[ports[0]])
            row.update({k: s[k] for k in ("rx_port", "rx_frames", "loss_pct", "avg_latency_ns",
                                          "min_latency_ns", "max_latency_ns", "jitter_p2p_ns")})
        if rep.connections:
            c = rep.connections[sorted(rep.connections)[0]]
            row["slot_cycle_compensation_ns"] = _f3(c.budget.slot_cycle_compensation * 1e9)
            row["measured_compensation_ns"] = _f3(c.compensation_ps / 1000)
        if rep.md1:
            for rho, n, a, p_sim, se in rep.md1:
                for name, val in ((f"p_ge_{n}_analytic", a), (f"p_ge_{n}_simulated", p_sim)):
                    row[name] = f"{val:.6e}"
                    if name not in extra_cols:
                        extra_cols.append(name)
        rows.append(row)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "sweep.csv", SWEEP_COLUMNS + tuple(extra_cols), rows)
    return rows
