"""Distributed invade / infect / retreat protocol, stepped cycle by cycle.

Every PE's invasion controller only looks at its own state and at its
4-neighbours. Signals travel one hop per ``hop_latency`` cycles. The
control processor only picks a seed; everything after that is local.

Timing conventions (all cycles are absolute):

* a request issued at ``t`` reaches its seed at ``t + seed_select_cycles``;
* an InvadeSignal event is stamped with the cycle the signal is *accepted*
  by its target (after any power-switching stall);
* a ClaimConfirm event is stamped with the cycle the PE named in ``dst``
  confirms its subtree, ``src`` being the child whose answer completed it;
* RetreatSignal / RetreatConfirm follow the same conventions for release.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from .array_model import (
    ArrayState,
    Coord,
    Direction,
    Phase,
    Power,
    available,
)


class NoSeedAvailable(RuntimeError):
    pass


class StaleClaimError(RuntimeError):
    pass


class ProtocolStuck(RuntimeError):
    """Raised when a wave does not reach quiescence within its bound."""


@dataclass(frozen=True)
class Linear:
    count: int

    @property
    def requested(self) -> int:
        return self.count

    def __str__(self) -> str:
        return f"Linear{{{self.count}}}"


@dataclass(frozen=True)
class Rectangular:
    width: int
    height: int

    @property
    def requested(self) -> int:
        return self.width * self.height

    def __str__(self) -> str:
        return f"Rectangular{{{self.width},{self.height}}}"


Strategy = Union[Linear, Rectangular]


class Reliability(Enum):
    NONE = "none"
    DMR = "dmr"
    TMR = "tmr"

    @property
    def replicas(self) -> int:
        return {"none": 1, "dmr": 2, "tmr": 3}[self.value]


@dataclass
class InvadeRequest:
    app_id: int
    strategy: Strategy
    reliability: Reliability = Reliability.NONE
    issue_cycle: int = 0
    # distinguishes several claims of one application (replicas)
    tag: int = 0

    def __post_init__(self):
        if isinstance(self.strategy, Linear) and self.strategy.count < 1:
            raise ValueError("Linear count must be >= 1")
        if isinstance(self.strategy, Rectangular) and (self.strategy.width < 1 or self.strategy.height < 1):
            raise ValueError("Rectangular width and height must be >= 1")

    @property
    def key(self) -> tuple:
        return (self.app_id, self.tag)

    @property
    def requested(self) -> int:
        return self.strategy.requested


@dataclass
class Claim:
    app_id: int
    seed: Coord
    pes: list
    requested: int
    granted: int
    invade_latency: int
    claim_latency: int
    complete: bool
    strategy: Strategy = None
    tag: int = 0
    issue_cycle: int = 0
    done_cycle: int = 0
    stall_cycles: int = 0
    abort_latency: int = 0
    retreated: bool = False

    @property
    def key(self) -> tuple:
        return (self.app_id, self.tag)

    @property
    def total_latency(self) -> int:
        return self.done_cycle - self.issue_cycle


class EventKind(Enum):
    SEED_SELECTED = "SeedSelected"
    INVADE_SIGNAL = "InvadeSignal"
    CLAIM_CONFIRM = "ClaimConfirm"
    RETREAT_SIGNAL = "RetreatSignal"
    RETREAT_CONFIRM = "RetreatConfirm"
    INFECT_LOADED = "InfectLoaded"


@dataclass(frozen=True)
class ProtocolEvent:
    cycle: int
    kind: EventKind
    src: Optional[Coord]
    dst: Coord
    app_id: int
    count: int = 0
    tag: int = 0

    def encode(self) -> str:
        src = "-" if self.src is None else str(self.src)
        return f"{self.kind.value} app={self.app_id}.{self.tag} src={src} dst={self.dst} n={self.count}"


@dataclass
class ProtocolParams:
    seed_select_cycles: int = 2
    config_load_cycles_per_pe: int = 1
    c_fixed: int = 100
    c_per_pe: int = 20

    def validate(self) -> None:
        for name in ("seed_select_cycles", "c_fixed", "c_per_pe"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.config_load_cycles_per_pe < 1:
            raise ValueError("config_load_cycles_per_pe must be >= 1")


class InstantPower:
    """Power hooks for running the protocol without a power model."""

    def request_ictrl(self, state: ArrayState, c: Coord) -> bool:
        state.pe(c).ictrl_power = Power.ON
        return True

    def claimed(self, state: ArrayState, c: Coord) -> None:
        state.pe(c).pe_power = Power.ON

    def released(self, state: ArrayState, c: Coord) -> None:
        pe = state.pe(c)
        pe.pe_power = Power.OFF
        pe.ictrl_power = Power.OFF


class PassivePower:
    """Hooks that never stall and leave power fields alone."""

    def request_ictrl(self, state, c) -> bool:
        return True

    def claimed(self, state, c) -> None:
        pass

    def released(self, state, c) -> None:
        pass


# -- path geometry ---------------------------------------------------------


def seed_heading(seed: Coord, rows: int, cols: int) -> Direction:
    """Initial travel direction of a linear wave entering at ``seed``."""
    if cols > 1 and seed.col == 0:
        return Direction.E
    if cols > 1 and seed.col == cols - 1:
        return Direction.W
    if seed.row == 0:
        return Direction.S
    return Direction.N


def preference(heading: Direction) -> list:
    """Straight ahead first, then clockwise."""
    out = [heading]
    d = heading
    for _ in range(3):
        d = d.clockwise()
        out.append(d)
    return out


def rect_orientation(seed: Coord, width: int, height: int, rows: int, cols: int):
    """(row_dir, col_dir) so that the rectangle fits, or None."""
    if seed.col + width <= cols:
        row_dir = Direction.E
    elif seed.col - width + 1 >= 0:
        row_dir = Direction.W
    else:
        return None
    if seed.row + height <= rows:
        col_dir = Direction.S
    elif seed.row - height + 1 >= 0:
        col_dir = Direction.N
    else:
        return None
    return row_dir, col_dir


def rect_cells(seed: Coord, width: int, height: int, orient) -> list:
    row_dir, col_dir = orient
    return [
        Coord(seed.row + j * col_dir.dr + k * row_dir.dr, seed.col + j * col_dir.dc + k * row_dir.dc)
        for k in range(width)
        for j in range(height)
    ]


def _free(state: ArrayState, c: Coord) -> bool:
    return state.config.in_bounds(c) and available(state, c) and c not in state.reserved


def probe(state: ArrayState, seed: Coord, strategy: Strategy) -> int:
    """Dry-run count of PEs the strategy could capture from ``seed``."""
    if not _free(state, seed):
        return 0
    rows, cols = state.rows, state.cols
    if isinstance(strategy, Rectangular):
        orient = rect_orientation(seed, strategy.width, strategy.height, rows, cols)
        if orient is None:
            return 0
        return sum(_free(state, c) for c in rect_cells(seed, strategy.width, strategy.height, orient))
    taken = {seed}
    cur, heading = seed, seed_heading(seed, rows, cols)
    while len(taken) < strategy.count:
        for d in preference(heading):
            n = d.step(cur)
            if n not in taken and _free(state, n):
                taken.add(n)
                cur, heading = n, d
                break
        else:
            break
    return len(taken)


def select_seed(request: InvadeRequest, state: ArrayState, params: Optional[ProtocolParams] = None) -> Coord:
    best, best_score = None, -1
    for cand in sorted(state.config.seed_candidates):
        if not _free(state, cand):
            continue
        score = probe(state, cand, request.strategy)
        if score > best_score:
            best, best_score = cand, score
    if best is None:
        raise NoSeedAvailable(f"app {request.app_id}: no available seed candidate")
    return best


def centralized_baseline_cycles(request: Optional[InvadeRequest], granted: int, params: Optional[ProtocolParams] = None) -> int:
    """Cycles a software manager on the control processor would need."""
    if granted < 1:
        raise ValueError("granted must be >= 1")
    p = params or ProtocolParams()
    return p.c_fixed + p.c_per_pe * granted


# -- the protocol engine ---------------------------------------------------

_INVADE, _CONFIRM, _RETREAT, _RCONFIRM = range(4)


@dataclass
class _Invasion:
    request: InvadeRequest
    seed: Coord
    issue: int
    pes: list = field(default_factory=list)
    last_invade: int = 0
    first_confirm: Optional[int] = None
    stalled: set = field(default_factory=set)
    seed_announced: bool = False
    claim: Optional[Claim] = None


@dataclass
class _Retreat:
    claim: Claim
    start: int
    abort: bool = False
    done: Optional[int] = None


class InvasionProtocol:
    """Cycle-stepped engine for any number of concurrent invasions."""

    def __init__(self, state: ArrayState, params: Optional[ProtocolParams] = None, gate=None):
        self.state = state
        self.params = params or ProtocolParams()
        self.gate = gate or InstantPower()
        self._queue = []  # (cycle, order key, seq, msg)
        self._seq = itertools.count()
        self._invasions = {}
        self._retreats = {}
        self._agg = {}  # coord -> [ok, count, last_child]
        self.claims = {}
        self.retreat_latency = {}

    @property
    def hop(self) -> int:
        return self.state.config.hop_latency

    @property
    def idle(self) -> bool:
        return not self._queue

    def next_cycle(self) -> Optional[int]:
        return self._queue[0][0] if self._queue else None

    def active_keys(self) -> set:
        return set(self._invasions) | set(self._retreats)

    def _send(self, cycle: int, key: tuple, kind: int, src, dst: Coord, payload=None) -> None:
        heapq.heappush(self._queue, (cycle, key, next(self._seq), (kind, src, dst, key, payload)))

    # -- invade -------------------------------------------------------------

    def submit(self, request: InvadeRequest, cycle: Optional[int] = None) -> Coord:
        if cycle is not None:
            request.issue_cycle = cycle
        if request.key in self._invasions or request.key in self.claims:
            raise ValueError(f"duplicate invasion key {request.key}")
        seed = select_seed(request, self.state, self.params)
        self.state.reserved[seed] = request.key
        inv = _Invasion(request=request, seed=seed, issue=request.issue_cycle)
        self._invasions[request.key] = inv
        if isinstance(request.strategy, Linear):
            payload = ("L", request.strategy.count, seed_heading(seed, self.state.rows, self.state.cols))
        else:
            s = request.strategy
            orient = rect_orientation(seed, s.width, s.height, self.state.rows, self.state.cols)
            payload = ("R", s.width, s.height, orient, True)
        self._send(request.issue_cycle + self.params.seed_select_cycles, request.key, _INVADE, None, seed, payload)
        return seed

    def step(self, cycle: int) -> list:
        events = []
        while self._queue and self._queue[0][0] <= cycle:
            _, _, _, msg = heapq.heappop(self._queue)
            kind = msg[0]
            if kind == _INVADE:
                self._on_invade(cycle, msg, events)
            elif kind == _CONFIRM:
                self._on_confirm(cycle, msg, events)
            elif kind == _RETREAT:
                self._on_retreat(cycle, msg, events)
            else:
                self._on_retreat_confirm(cycle, msg, events)
        return events

    def _on_invade(self, cycle, msg, events):
        _, src, dst, key, payload = msg
        inv = self._invasions[key]
        app, tag = key
        if src is None and not inv.seed_announced:
            inv.seed_announced = True
            events.append(ProtocolEvent(cycle, EventKind.SEED_SELECTED, None, dst, app, 0, tag))
        if not self.gate.request_ictrl(self.state, dst):
            inv.stalled.add(cycle)
            self._send(cycle + 1, key, _INVADE, src, dst, payload)
            return
        self.state.reserved.pop(dst, None)
        pe = self.state.pe(dst)
        ic = pe.ictrl
        ic.phase, ic.app = Phase.INVADING, app
        ic.parent_dir = None if src is None else _direction(dst, src)
        inv.pes.append(dst)
        inv.last_invade = cycle
        events.append(ProtocolEvent(cycle, EventKind.INVADE_SIGNAL, src, dst, app, 0, tag))

        targets = []
        ok = True
        if payload[0] == "L":
            _, remaining, heading = payload
            if remaining > 1:
                for d in preference(heading):
                    n = d.step(dst)
                    if _free(self.state, n):
                        targets.append((d, n, ("L", remaining - 1, d)))
                        break
        else:
            _, w, h, orient, is_row = payload
            if orient is None:
                ok = False
            else:
                row_dir, col_dir = orient
                if is_row and w > 1:
                    targets.append((row_dir, row_dir.step(dst), ("R", w - 1, h, orient, True)))
                if h > 1:
                    targets.append((col_dir, col_dir.step(dst), ("R", 1, h - 1, orient, False)))
                if not all(_free(self.state, t[1]) for t in targets):
                    ok, targets = False, []
        self._agg[dst] = [ok, 1, None]
        for d, n, pl in targets:
            self.state.reserved[n] = key
            ic.child_dirs.add(d)
            self._send(cycle + self.hop, key, _INVADE, dst, n, pl)
        ic.pending_confirms = len(targets)
        if not targets:
            self._finish_confirm(cycle, key, dst, events)

    def _on_confirm(self, cycle, msg, events):
        _, src, dst, key, (ok, count) = msg
        agg = self._agg[dst]
        agg[0] = agg[0] and ok
        agg[1] += count
        agg[2] = src
        ic = self.state.pe(dst).ictrl
        ic.pending_confirms -= 1
        if ic.pending_confirms == 0:
            self._finish_confirm(cycle, key, dst, events)

    def _finish_confirm(self, cycle, key, c, events):
        inv = self._invasions[key]
        app, tag = key
        ok, count, last_child = self._agg.pop(c)
        if not ok:
            count = 0
        pe = self.state.pe(c)
        if inv.first_confirm is None:
            inv.first_confirm = cycle
        if ok:
            pe.ictrl.phase = Phase.CLAIMED
            pe.owner = app
            self.gate.claimed(self.state, c)
        events.append(ProtocolEvent(cycle, EventKind.CLAIM_CONFIRM, last_child, c, app, count, tag))
        parent = pe.ictrl.parent_dir
        if parent is not None:
            self._send(cycle + self.hop, key, _CONFIRM, c, parent.step(c), (ok, count))
            return
        # confirmation has reached the seed
        req = inv.request
        granted = count
        claim = Claim(
            app_id=app,
            seed=inv.seed,
            pes=list(inv.pes) if ok else [],
            requested=req.requested,
            granted=granted,
            invade_latency=inv.last_invade - inv.issue,
            claim_latency=cycle - inv.first_confirm,
            complete=granted == req.requested,
            strategy=req.strategy,
            tag=tag,
            issue_cycle=inv.issue,
            done_cycle=cycle,
            stall_cycles=len(inv.stalled),
        )
        inv.claim = claim
        self.claims[key] = claim
        del self._invasions[key]
        if not ok:
            # a failed rectangle releases whatever it touched along the same tree
            rclaim = Claim(app, inv.seed, list(inv.pes), req.requested, 0, 0, 0, False, req.strategy, tag)
            self._begin_retreat(cycle, rclaim, events, abort=True)

    # -- retreat ------------------------------------------------------------

    def start_retreat(self, claim: Claim, cycle: int) -> list:
        if claim.retreated or claim.granted == 0:
            raise StaleClaimError(f"claim {claim.key} already released")
        seed = self.state.pe(claim.seed)
        if seed.owner != claim.app_id or seed.ictrl.phase is not Phase.CLAIMED:
            raise StaleClaimError(f"claim {claim.key} is not held")
        if claim.key in self._retreats:
            raise StaleClaimError(f"claim {claim.key} already retreating")
        events = []
        self._begin_retreat(cycle, claim, events)
        return events

    def _begin_retreat(self, cycle, claim, events, abort=False):
        self._retreats[claim.key] = _Retreat(claim=claim, start=cycle, abort=abort)
        self._deliver_retreat(cycle, claim.key, None, claim.seed, events)

    def _on_retreat(self, cycle, msg, events):
        _, src, dst, key, _ = msg
        self._deliver_retreat(cycle, key, src, dst, events)

    def _deliver_retreat(self, cycle, key, src, c, events):
        app, tag = key
        ic = self.state.pe(c).ictrl
        ic.phase = Phase.RETREATING
        events.append(ProtocolEvent(cycle, EventKind.RETREAT_SIGNAL, src, c, app, 0, tag))
        ic.pending_confirms = len(ic.child_dirs)
        for d in sorted(ic.child_dirs, key=lambda d: d.name):
            self._send(cycle + self.hop, key, _RETREAT, c, d.step(c))
        if not ic.child_dirs:
            self._release(cycle, key, c, None, events)

    def _on_retreat_confirm(self, cycle, msg, events):
        _, src, dst, key, _ = msg
        ic = self.state.pe(dst).ictrl
        ic.pending_confirms -= 1
        if ic.pending_confirms == 0:
            self._release(cycle, key, dst, src, events)

    def _release(self, cycle, key, c, last_child, events):
        app, tag = key
        pe = self.state.pe(c)
        parent = pe.ictrl.parent_dir
        pe.ictrl.reset()
        pe.owner = None
        pe.program_id = None
        self.gate.released(self.state, c)
        events.append(ProtocolEvent(cycle, EventKind.RETREAT_CONFIRM, last_child, c, app, 0, tag))
        if parent is not None:
            self._send(cycle + self.hop, key, _RCONFIRM, c, parent.step(c))
            return
        r = self._retreats.pop(key)
        r.done = cycle
        if r.abort:
            self.claims[key].abort_latency = cycle - r.start
        else:
            r.claim.retreated = True
            self.retreat_latency[key] = cycle - r.start

    # -- drivers ------------------------------------------------------------

    def run_until_quiet(self, start: int, limit: Optional[int] = None) -> tuple:
        """Step from ``start`` until no signal is in flight. Returns (events, last cycle)."""
        events = []
        cycle = start
        while self._queue:
            cycle = max(cycle, self._queue[0][0])
            if limit is not None and cycle > limit:
                raise ProtocolStuck(f"protocol still busy at cycle {cycle} (limit {limit})")
            events.extend(self.step(cycle))
            cycle += 1
        return events, cycle - 1


def _direction(frm: Coord, to: Coord) -> Direction:
    for d in Direction:
        if d.step(frm) == to:
            return d
    raise ValueError(f"{frm} and {to} are not neighbours")


def quiescence_bound(state: ArrayState, params: ProtocolParams) -> int:
    return params.seed_select_cycles + 2 * state.config.hop_latency * state.config.size


def invade(state: ArrayState, request: InvadeRequest, params: Optional[ProtocolParams] = None, gate=None) -> Claim:
    """Issue one request and run the protocol until its claim is settled."""
    proto = InvasionProtocol(state, params, gate)
    proto.submit(request)
    proto.run_until_quiet(request.issue_cycle)
    return proto.claims[request.key]


def infect(state: ArrayState, claim: Claim, program_id: str, params: Optional[ProtocolParams] = None, cycle: int = 0) -> list:
    """Load ``program_id`` into the claimed PEs, pipelined along the claim."""
    p = params or ProtocolParams()
    if claim.retreated or claim.granted == 0:
        raise StaleClaimError(f"claim {claim.key} is not held")
    for c in claim.pes:
        pe = state.pe(c)
        if pe.owner != claim.app_id or pe.ictrl.phase is not Phase.CLAIMED:
            raise StaleClaimError(f"claim {claim.key}: PE {c} no longer owned")
    events = []
    for k, c in enumerate(claim.pes):
        state.pe(c).program_id = program_id
        t = cycle + p.config_load_cycles_per_pe + k - 1
        events.append(ProtocolEvent(t, EventKind.INFECT_LOADED, None, c, claim.app_id, k + 1, claim.tag))
    return events


def infect_cycles(granted: int, params: Optional[ProtocolParams] = None) -> int:
    p = params or ProtocolParams()
    return p.config_load_cycles_per_pe + granted - 1


def retreat(state: ArrayState, claim: Claim, params: Optional[ProtocolParams] = None, gate=None, cycle: int = 0) -> int:
    """Release a claim through a retreat wave; returns the retreat latency."""
    proto = InvasionProtocol(state, params, gate)
    proto.start_retreat(claim, cycle)
    proto.run_until_quiet(cycle)
    return proto.retreat_latency[claim.key]


# -- closed forms ----------------------------------------------------------


def linear_latency(n: int, hop: int, seed_select: int = 2) -> int:
    """Issue-to-claim cycles of an unobstructed Linear{n}."""
    return seed_select + 2 * hop * (n - 1)


def rect_latency(width: int, height: int, hop: int, seed_select: int = 2) -> int:
    """Issue-to-claim cycles of an unobstructed Rectangular{w,h}."""
    return seed_select + 2 * hop * (width + height - 2)


def chain_retreat_latency(n: int, hop: int) -> int:
    return 2 * hop * (n - 1)
