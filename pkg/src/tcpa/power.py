"""Hierarchical power gating driven by invasion traffic, plus energy models.

Two kinds of domains exist: invasion-controller (iCtrl) domains and PE
(processing unit) domains. A domain is a rectangular tile of the array;
its size is the grouping granularity. An iCtrl domain wakes when an
invade signal tries to enter one of its members and sleeps once every
member is idle again. A PE domain wakes on claim confirmation and sleeps
once no member is owned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .array_model import ArrayState, ConfigError, Coord, Phase, Power
from .invasion import EventKind, ProtocolEvent


class DomainKind(Enum):
    ICTRL = "ictrl"
    PE = "pe"


class DomainState(Enum):
    OFF = "Off"
    SWITCHING_ON = "SwitchingOn"
    ON = "On"
    SWITCHING_OFF = "SwitchingOff"


_POWERED = (DomainState.ON, DomainState.SWITCHING_ON, DomainState.SWITCHING_OFF)


@dataclass
class PowerModel:
    p_pe_on: float = 10.0
    p_pe_off: float = 0.0
    p_ictrl_on: float = 1.0
    p_ictrl_off: float = 0.0
    e_switch: float = 50.0
    d_switch: int = 10
    # 1 | 4 | "row" | "col" | "array" | "RxC"
    ictrl_domain_size: object = 1
    pe_domain_size: object = 1

    def validate(self, rows: int, cols: int) -> None:
        for name in ("p_pe_on", "p_pe_off", "p_ictrl_on", "p_ictrl_off", "e_switch", "d_switch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"power.{name}", "must be >= 0")
        domain_shape(self.ictrl_domain_size, rows, cols, "power.ictrl_domain_size")
        domain_shape(self.pe_domain_size, rows, cols, "power.pe_domain_size")


def domain_shape(size, rows: int, cols: int, field_name: str = "domain_size") -> tuple:
    """Translate a grouping setting into a (rows, cols) tile and check it tiles the array."""
    if isinstance(size, (list, tuple)) and len(size) == 2:
        shape = (int(size[0]), int(size[1]))
    elif isinstance(size, str) and size.lower() in ("row", "col", "column", "array"):
        shape = {"row": (1, cols), "col": (rows, 1), "column": (rows, 1), "array": (rows, cols)}[size.lower()]
    elif isinstance(size, str) and "x" in size.lower():
        try:
            r, c = size.lower().split("x")
            shape = (int(r), int(c))
        except ValueError:
            raise ConfigError(field_name, f"cannot parse domain size {size!r}")
    elif isinstance(size, int) and not isinstance(size, bool):
        root = math.isqrt(size) if size > 0 else 0
        if root * root != size:
            raise ConfigError(field_name, f"domain size {size} is not a square tile")
        shape = (root, root)
    else:
        raise ConfigError(field_name, f"unknown domain size {size!r}")
    if shape[0] < 1 or shape[1] < 1 or rows % shape[0] or cols % shape[1]:
        raise ConfigError(field_name, "domain size does not tile array")
    return shape


@dataclass
class PowerDomain:
    id: int
    kind: DomainKind
    members: list
    state: DomainState = DomainState.OFF
    remaining: int = 0
    toggle_count: int = 0

    @property
    def size(self) -> int:
        return len(self.members)

    def label(self) -> str:
        return f"{self.kind.value}:{self.id}"


def build_domains(kind: DomainKind, shape: tuple, rows: int, cols: int) -> list:
    dr, dc = shape
    out = []
    for r0 in range(0, rows, dr):
        for c0 in range(0, cols, dc):
            members = [Coord(r, c) for r in range(r0, r0 + dr) for c in range(c0, c0 + dc)]
            out.append(PowerDomain(id=len(out), kind=kind, members=members))
    return out


@dataclass
class EnergyReport:
    e_total: float
    e_baseline: float
    savings_fraction: float
    e_by_component: dict
    stall_cycles: int
    analytic_estimate: float
    estimate_error: float
    toggles: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "e_total": self.e_total,
            "e_baseline": self.e_baseline,
            "savings_fraction": self.savings_fraction,
            "e_by_component": dict(self.e_by_component),
            "stall_cycles": self.stall_cycles,
            "analytic_estimate": self.analytic_estimate,
            "estimate_error": self.estimate_error,
            "toggles": dict(self.toggles),
        }


class PowerManager:
    """Domain state machines, protocol power hooks and energy integration."""

    def __init__(self, state: ArrayState, model: Optional[PowerModel] = None):
        self.state = state
        self.model = model or PowerModel()
        rows, cols = state.rows, state.cols
        self.model.validate(rows, cols)
        self.ictrl_shape = domain_shape(self.model.ictrl_domain_size, rows, cols)
        self.pe_shape = domain_shape(self.model.pe_domain_size, rows, cols)
        self.domains = {
            DomainKind.ICTRL: build_domains(DomainKind.ICTRL, self.ictrl_shape, rows, cols),
            DomainKind.PE: build_domains(DomainKind.PE, self.pe_shape, rows, cols),
        }
        self._of = {kind: {} for kind in DomainKind}
        for kind, doms in self.domains.items():
            for d in doms:
                for m in d.members:
                    self._of[kind][m] = d
        self._wake = set()
        self.energy = {"pe_on": 0.0, "pe_off": 0.0, "ictrl_on": 0.0, "ictrl_off": 0.0, "switching": 0.0}
        self.transitions = []  # (domain label, old, new); drained by the caller
        self.cycles = 0

    # -- lookup -------------------------------------------------------------

    def domain_of(self, kind: DomainKind, c) -> PowerDomain:
        return self._of[kind][Coord(*c)]

    @property
    def pe_domains_fine(self) -> bool:
        return self.pe_shape == (1, 1)

    def toggles(self) -> dict:
        return {kind.value: sum(d.toggle_count for d in doms) for kind, doms in self.domains.items()}

    def stable(self) -> bool:
        return all(d.state in (DomainState.ON, DomainState.OFF) for doms in self.domains.values() for d in doms)

    # -- transitions --------------------------------------------------------

    def _set(self, d: PowerDomain, new: DomainState) -> None:
        self.transitions.append((d.label(), d.state.value, new.value))
        d.state = new

    def _begin_on(self, d: PowerDomain) -> None:
        if d.state is not DomainState.OFF:
            return
        d.toggle_count += 1
        self.energy["switching"] += self.model.e_switch
        if self.model.d_switch == 0:
            self._set(d, DomainState.ON)
        else:
            d.remaining = self.model.d_switch
            self._set(d, DomainState.SWITCHING_ON)
        self._mirror(d)

    def _begin_off(self, d: PowerDomain) -> None:
        if d.state is not DomainState.ON:
            return
        d.toggle_count += 1
        self.energy["switching"] += self.model.e_switch
        if self.model.d_switch == 0:
            self._set(d, DomainState.OFF)
        else:
            d.remaining = self.model.d_switch
            self._set(d, DomainState.SWITCHING_OFF)
        self._mirror(d)

    def _needed(self, d: PowerDomain) -> bool:
        if d.kind is DomainKind.ICTRL:
            return any(
                self.state.pe(m).ictrl.phase is not Phase.IDLE or m in self._wake for m in d.members
            )
        return any(self.state.pe(m).owner is not None for m in d.members)

    def _mirror(self, d: PowerDomain) -> None:
        value = {
            DomainState.ON: Power.ON,
            DomainState.SWITCHING_ON: Power.SWITCHING_ON,
            DomainState.OFF: Power.OFF,
            DomainState.SWITCHING_OFF: Power.OFF,
        }[d.state]
        attr = "ictrl_power" if d.kind is DomainKind.ICTRL else "pe_power"
        for m in d.members:
            setattr(self.state.pe(m), attr, value)

    # protocol gate hooks

    def request_ictrl(self, state, c) -> bool:
        d = self.domain_of(DomainKind.ICTRL, c)
        if d.state is DomainState.ON:
            self._wake.discard(Coord(*c))
            return True
        self._wake.add(Coord(*c))
        self._begin_on(d)
        if d.state is DomainState.ON:
            self._wake.discard(Coord(*c))
            return True
        return False

    def claimed(self, state, c) -> None:
        self._begin_on(self.domain_of(DomainKind.PE, c))

    def released(self, state, c) -> None:
        c = Coord(*c)
        self._wake.discard(c)
        for kind in DomainKind:
            d = self.domain_of(kind, c)
            if not self._needed(d):
                self._begin_off(d)

    def on_protocol_event(self, event: ProtocolEvent) -> list:
        """Event-driven form of the gating rules; returns the transitions it caused."""
        mark = len(self.transitions)
        if event.kind is EventKind.INVADE_SIGNAL:
            self._begin_on(self.domain_of(DomainKind.ICTRL, event.dst))
        elif event.kind is EventKind.CLAIM_CONFIRM and event.count > 0:
            self._begin_on(self.domain_of(DomainKind.PE, event.dst))
        elif event.kind is EventKind.RETREAT_CONFIRM:
            self.released(self.state, event.dst)
        return self.transitions[mark:]

    def force_on(self, coords) -> None:
        """Power domains up at once, charging the full switching cost."""
        for c in coords:
            for kind in DomainKind:
                d = self.domain_of(kind, c)
                if d.state is DomainState.ON:
                    continue
                if d.state is DomainState.OFF:
                    d.toggle_count += 1
                    self.energy["switching"] += self.model.e_switch
                on = self.model.p_ictrl_on if kind is DomainKind.ICTRL else self.model.p_pe_on
                self.energy[f"{kind.value}_on"] += on * d.size * self.model.d_switch
                self._set(d, DomainState.ON)
                self._mirror(d)

    def reconcile(self) -> None:
        """Start transitions for stable domains whose demand changed."""
        for doms in self.domains.values():
            for d in doms:
                if d.state is DomainState.ON and not self._needed(d):
                    self._begin_off(d)
                elif d.state is DomainState.OFF and self._needed(d):
                    self._begin_on(d)

    def tick(self) -> None:
        """Advance switching timers by one cycle (call after accumulate).

        A domain whose demand changed while it was switching turns straight
        around once the transition completes.
        """
        for doms in self.domains.values():
            for d in doms:
                if d.state is DomainState.SWITCHING_ON:
                    d.remaining -= 1
                    if d.remaining <= 0:
                        self._set(d, DomainState.ON)
                        self._mirror(d)
                        if not self._needed(d):
                            self._begin_off(d)
                elif d.state is DomainState.SWITCHING_OFF:
                    d.remaining -= 1
                    if d.remaining <= 0:
                        self._set(d, DomainState.OFF)
                        self._mirror(d)
                        if self._needed(d):
                            self._begin_on(d)

    # -- energy -------------------------------------------------------------

    def power_now(self) -> dict:
        m = self.model
        out = {"pe_on": 0.0, "pe_off": 0.0, "ictrl_on": 0.0, "ictrl_off": 0.0}
        for kind, doms in self.domains.items():
            on, off = (m.p_ictrl_on, m.p_ictrl_off) if kind is DomainKind.ICTRL else (m.p_pe_on, m.p_pe_off)
            for d in doms:
                if d.state in _POWERED:
                    out[f"{kind.value}_on"] += on * d.size
                else:
                    out[f"{kind.value}_off"] += off * d.size
        return out

    def accumulate(self, cycles: int = 1) -> float:
        """Add ``cycles`` worth of the current per-cycle power; returns the delta."""
        if cycles < 1:
            raise ValueError("span must be >= 1")
        delta = 0.0
        for k, p in self.power_now().items():
            self.energy[k] += p * cycles
            delta += p * cycles
        self.cycles += cycles
        return delta

    @property
    def e_total(self) -> float:
        return sum(self.energy.values())

    def pes_on(self) -> int:
        return sum(d.size for d in self.domains[DomainKind.PE] if d.state is DomainState.ON)

    def baseline(self, cycles: Optional[int] = None) -> float:
        n = self.state.config.size
        span = self.cycles if cycles is None else cycles
        return always_on_energy(n, self.model, span)


def always_on_energy(n_pes: int, model: PowerModel, cycles: int) -> float:
    return n_pes * (model.p_pe_on + model.p_ictrl_on) * cycles


# -- analytic model --------------------------------------------------------


@dataclass
class AppUsage:
    """Occupancy of one claim as seen by the analytic model.

    ``ictrl_start``/``pe_start``/``end`` are the mean cycles at which the
    claim's controllers start invading, its processing units become usable
    and its PEs are released.
    """

    pes: list
    ictrl_start: float
    pe_start: float
    end: float

    @property
    def granted(self) -> int:
        return len(self.pes)

    @property
    def busy(self) -> float:
        return self.end - self.pe_start


def _union(intervals) -> tuple:
    """Total length and number of components of a set of half-open intervals.

    An empty interval (released before it was usable) still counts as a
    component: its domain was woken and shut down again.
    """
    total, parts = 0.0, 0
    cur_s = cur_e = None
    for s, e in sorted((s, max(s, e)) for s, e in intervals):
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                total += cur_e - cur_s
            cur_s, cur_e = s, e
            parts += 1
        else:
            cur_e = max(cur_e, e)
    if cur_e is not None:
        total += cur_e - cur_s
    return total, parts


def analytic_estimate(usage: list, model: PowerModel, rows: int, cols: int, horizon: int) -> float:
    """Closed-form energy for a workload given as per-claim occupancy.

    Per domain: on-time is the union of the occupancy intervals of claims
    touching it, each on-period costs two toggles (``e_switch`` each) and
    ``d_switch`` cycles of on-power per toggle; the rest leaks at ``p_off``.
    """
    total = 0.0
    for kind, size_spec, p_on, p_off in (
        (DomainKind.ICTRL, model.ictrl_domain_size, model.p_ictrl_on, model.p_ictrl_off),
        (DomainKind.PE, model.pe_domain_size, model.p_pe_on, model.p_pe_off),
    ):
        shape = domain_shape(size_spec, rows, cols)
        doms = build_domains(kind, shape, rows, cols)
        owner = {m: d.id for d in doms for m in d.members}
        per_dom = {d.id: [] for d in doms}
        for u in usage:
            start = u.ictrl_start if kind is DomainKind.ICTRL else u.pe_start
            end = min(u.end, horizon)
            for dom_id in {owner[Coord(*c)] for c in u.pes}:
                per_dom[dom_id].append((start, end))
        size = shape[0] * shape[1]
        on_member_cycles = 0.0
        for d in doms:
            length, parts = _union(per_dom[d.id])
            toggles = 2 * parts
            if parts and max(e for _, e in per_dom[d.id]) >= horizon:
                toggles -= 1
            on_member_cycles += size * (length + model.d_switch * toggles)
            total += toggles * model.e_switch
        on_member_cycles = min(on_member_cycles, rows * cols * horizon)
        total += on_member_cycles * p_on + (rows * cols * horizon - on_member_cycles) * p_off
    return total


def report(simulated: float, baseline: float, analytic: float, breakdown: Optional[dict] = None,
           stall_cycles: int = 0, toggles: Optional[dict] = None) -> EnergyReport:
    savings = 1.0 - simulated / baseline if baseline > 0 else 0.0
    if simulated > 0:
        err = abs(analytic - simulated) / simulated
    else:
        err = 0.0 if analytic == 0 else math.inf
    return EnergyReport(
        e_total=simulated,
        e_baseline=baseline,
        savings_fraction=savings,
        e_by_component=dict(breakdown or {}),
        stall_cycles=stall_cycles,
        analytic_estimate=analytic,
        estimate_error=err,
        toggles=dict(toggles or {}),
    )
