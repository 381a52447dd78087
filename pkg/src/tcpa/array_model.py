"""Processor-array topology and per-PE state.

The array is a behavioural model: it records which invasion-controller
phase each PE is in, who owns it and what its power state is. It owns no
protocol logic; `tcpa.invasion` and `tcpa.power` mutate it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class Coord(NamedTuple):
    row: int
    col: int

    def __str__(self) -> str:
        return f"{self.row},{self.col}"


class Direction(Enum):
    N = (-1, 0)
    E = (0, 1)
    S = (1, 0)
    W = (0, -1)

    @property
    def dr(self) -> int:
        return self.value[0]

    @property
    def dc(self) -> int:
        return self.value[1]

    def clockwise(self) -> "Direction":
        return _CLOCKWISE[self]

    def opposite(self) -> "Direction":
        return _OPPOSITE[self]

    def step(self, c: Coord) -> Coord:
        return Coord(c.row + self.dr, c.col + self.dc)


DIRECTIONS = (Direction.N, Direction.E, Direction.S, Direction.W)
_CLOCKWISE = {
    Direction.N: Direction.E,
    Direction.E: Direction.S,
    Direction.S: Direction.W,
    Direction.W: Direction.N,
}
_OPPOSITE = {
    Direction.N: Direction.S,
    Direction.S: Direction.N,
    Direction.E: Direction.W,
    Direction.W: Direction.E,
}


class ICtrlKind(Enum):
    FSM = "fsm"
    PROGRAMMABLE = "programmable"


class Phase(Enum):
    IDLE = "Idle"
    INVADING = "Invading"
    CLAIMED = "Claimed"
    RETREATING = "Retreating"


class Power(Enum):
    OFF = "Off"
    SWITCHING_ON = "SwitchingOn"
    ON = "On"


class BufferMode(Enum):
    FIFO = "fifo"
    RAM = "ram"


@dataclass
class ArrayConfig:
    rows: int = 4
    cols: int = 4
    ictrl_kind: ICtrlKind = ICtrlKind.FSM
    hop_latency_fsm: int = 1
    hop_latency_prog: int = 4
    # None -> the four corners
    seed_candidates: Optional[list] = None
    control_channels: int = 1  # 1-bit control network
    data_channels: int = 2  # 16-bit data network, informational only
    buffer_banks: int = 1  # per array edge
    buffer_words: int = 1024

    def __post_init__(self):
        if isinstance(self.ictrl_kind, str):
            try:
                self.ictrl_kind = ICtrlKind(self.ictrl_kind.lower())
            except ValueError:
                raise ConfigError("ictrl_kind", f"unknown controller kind {self.ictrl_kind!r}")
        if self.seed_candidates is None:
            corners = [(0, 0), (0, self.cols - 1), (self.rows - 1, 0), (self.rows - 1, self.cols - 1)]
            self.seed_candidates = sorted(set(corners))
        self.seed_candidates = [Coord(*c) for c in self.seed_candidates]

    @property
    def hop_latency(self) -> int:
        if self.ictrl_kind is ICtrlKind.FSM:
            return self.hop_latency_fsm
        return self.hop_latency_prog

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def in_bounds(self, c) -> bool:
        return 0 <= c[0] < self.rows and 0 <= c[1] < self.cols

    def on_border(self, c) -> bool:
        r, k = c
        return r == 0 or r == self.rows - 1 or k == 0 or k == self.cols - 1

    def validate(self) -> None:
        for name in ("rows", "cols"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(name, "must be a positive integer")
        for name in ("hop_latency_fsm", "hop_latency_prog"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("control_channels", "data_channels", "buffer_banks", "buffer_words"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if not self.seed_candidates:
            raise ConfigError("seed_candidates", "at least one seed candidate is required")
        if len(set(self.seed_candidates)) != len(self.seed_candidates):
            raise ConfigError("seed_candidates", "duplicate seed candidate")
        for c in self.seed_candidates:
            if not self.in_bounds(c):
                raise ConfigError("seed_candidates", f"seed {tuple(c)} is out of bounds")
            if not self.on_border(c):
                raise ConfigError("seed_candidates", f"seed {tuple(c)} is not on the array border")


@dataclass
class ICtrlState:
    phase: Phase = Phase.IDLE
    app: Optional[int] = None
    parent_dir: Optional[Direction] = None
    child_dirs: set = field(default_factory=set)
    pending_confirms: int = 0

    def reset(self) -> None:
        self.phase = Phase.IDLE
        self.app = None
        self.parent_dir = None
        self.child_dirs = set()
        self.pending_confirms = 0


@dataclass
class ProcessorElement:
    coord: Coord
    ictrl: ICtrlState = field(default_factory=ICtrlState)
    pe_power: Power = Power.OFF
    ictrl_power: Power = Power.OFF
    owner: Optional[int] = None
    quarantined: bool = False
    program_id: Optional[str] = None


@dataclass
class IOBufferBank:
    edge: Direction
    index: int
    mode: BufferMode = BufferMode.FIFO
    size: int = 1024
    concat_group: Optional[int] = None
    reserved_by: Optional[int] = None


@dataclass
class ArrayState:
    config: ArrayConfig
    grid: list
    banks: list
    # in-flight invade targets: coord -> invasion key; shared by every protocol
    # instance operating on this array
    reserved: dict = field(default_factory=dict)

    @property
    def rows(self) -> int:
        return self.config.rows

    @property
    def cols(self) -> int:
        return self.config.cols

    def pe(self, c) -> ProcessorElement:
        return self.grid[c[0]][c[1]]

    def coords(self):
        for r in range(self.config.rows):
            for c in range(self.config.cols):
                yield Coord(r, c)

    def pes(self):
        for row in self.grid:
            yield from row

    def owned_by(self, app) -> list:
        return [pe.coord for pe in self.pes() if pe.owner == app]


def build_array(config: ArrayConfig) -> ArrayState:
    config.validate()
    grid = [[ProcessorElement(Coord(r, c)) for c in range(config.cols)] for r in range(config.rows)]
    banks = [
        IOBufferBank(edge=d, index=i, size=config.buffer_words)
        for d in DIRECTIONS
        for i in range(config.buffer_banks)
    ]
    return ArrayState(config=config, grid=grid, banks=banks)


def neighbors(state: ArrayState, c) -> list:
    """In-bounds 4-neighbourhood of ``c`` in N, E, S, W order."""
    out = []
    for d in DIRECTIONS:
        n = d.step(Coord(*c))
        if state.config.in_bounds(n):
            out.append((d, n))
    return out


def available(state: ArrayState, c) -> bool:
    pe = state.pe(c)
    return pe.ictrl.phase is Phase.IDLE and not pe.quarantined


def concat_banks(state: ArrayState, edge: Direction, indices, group: int) -> None:
    """Join adjacent banks on one edge into a larger memory."""
    idx = sorted(indices)
    if idx != list(range(idx[0], idx[0] + len(idx))):
        raise ConfigError("concat_group", "banks in one group must be adjacent")
    for b in state.banks:
        if b.edge is edge and b.index in idx:
            b.concat_group = group


def check_invariants(state: ArrayState, pe_domains_fine: bool = True) -> list:
    """Return human-readable violations of the array-level invariants."""
    problems = []
    for pe in state.pes():
        ic = pe.ictrl
        if ic.phase is Phase.IDLE:
            if ic.parent_dir is not None or ic.child_dirs or ic.pending_confirms:
                problems.append(f"{pe.coord}: idle iCtrl carries tree state")
        if ic.pending_confirms > len(ic.child_dirs):
            problems.append(f"{pe.coord}: pending_confirms exceeds children")
        # an owner only exists on a Claimed PE or one being released; an
        # aborted rectangle also retreats through PEs that were never owned
        claimed = ic.phase is Phase.CLAIMED
        if claimed and pe.owner is None or pe.owner is not None and ic.phase not in (Phase.CLAIMED, Phase.RETREATING):
            problems.append(f"{pe.coord}: owner/phase mismatch ({pe.owner}, {ic.phase.value})")
        if pe_domains_fine and pe.pe_power is Power.ON and pe.owner is None:
            problems.append(f"{pe.coord}: powered PE without owner")
        if pe.ictrl_power is Power.OFF and ic.phase is not Phase.IDLE:
            problems.append(f"{pe.coord}: iCtrl active while powered off")
    return problems
