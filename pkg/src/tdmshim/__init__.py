"""Slot-synchronous TDM shim layer for Ethernet: simulator and protocol library."""

from .baseline import (
    SwitchHop,
    beat_collision_experiment,
    burst_peaks,
    md1_simulate,
    md1_wait_tail,
    simulate_switch_path,
)
from .bus import BusConfig, BusNode, BusSimulator, Calendar, Connection, run_connection
from .clocks import ClockDomain, beat_period, global_to_local, local_to_global
from .codec import (
    ClientByteStream,
    SlotFrame,
    embed_pointer,
    embed_pos,
    extract_pointer,
    extract_pos,
    justify_rx,
    justify_tx,
)
from .elastic import RxElasticFifo, TxAccumulator, compensation_delay
from .errors import ContractFailure, ShimError, ValidationError
from .scenario import ScenarioConfig, load_config, run, sweep, validate
from .traffic import FlowSpec, JitterStats, LatencyRecords, generate, measure

__version__ = "0.1.0"
