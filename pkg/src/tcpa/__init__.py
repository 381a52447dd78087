"""Behavioural simulator of an invasive tightly coupled processor array."""

from .array_model import ArrayConfig, ArrayState, ConfigError, Coord, Direction, ICtrlKind, build_array
from .engine import Metrics, run, sweep
from .fault_tolerance import (
    FaultEvent,
    FaultTarget,
    LoopSpec,
    RecoveryPolicy,
    RewindTarget,
    VotingScheme,
    execute_with_faults,
    golden_fir,
)
from .invasion import (
    Claim,
    InvadeRequest,
    InvasionProtocol,
    Linear,
    ProtocolParams,
    Rectangular,
    Reliability,
    infect,
    invade,
    retreat,
)
from .power import PowerManager, PowerModel
from .scenario import Scenario, ScenarioError, load_scenario

__version__ = "0.1.0"
