"""Scenario documents: a TOML tree of array, protocol, power and timed events.

Schema (every section and key optional unless noted)::

    name = "demo"
    rng_seed = 1

    [array]        # ArrayConfig fields; seed_candidates = [[r, c], ...]
    [protocol]     # seed_select_cycles, config_load_cycles_per_pe, c_fixed, c_per_pe
    [power]        # PowerModel fields; domain sizes 1 | 4 | "row" | "col" | "array" | "RxC"

    [[events]]
    at = 0                      # required, non-decreasing
    action = "invade"           # invade | retreat | inject_faults | end
    app_id = 1                  # required except for end
    strategy = "linear"         # linear (count) | rectangular (width, height)
    count = 4
    reliability = "none"        # none | dmr | tmr (dmr/tmr need [events.loop])
    run_cycles = 0              # execution time after infect, non-FT apps
    auto_retreat = false        # retreat as soon as execution ends
    program = "kernel"          # program id loaded during infect
    scheme = "4c"               # voting placement for dmr/tmr
    vote_every = 1
    voted_vars = "outputs+partials"   # or "outputs"
    faults = [{iteration = 7, replica = 0, pe_offset = 2, target = "partial", bit = 3}]
    [events.loop]               # taps = [...]; input = [...] or input_length = N
    [events.policy]             # rewind_target, migrate_threshold
    [events.costs]              # v_hw, v_sw, prop_hop_cycles
"""

from __future__ import annotations

import copy
import dataclasses
import random
from dataclasses import dataclass, field
from typing import Optional, Union

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .array_model import ArrayConfig, ConfigError
from .fault_tolerance import (
    FaultEvent,
    FaultTarget,
    LoopSpec,
    RecoveryPolicy,
    RewindTarget,
    VoteCosts,
    VotedVars,
    VotingScheme,
)
from .invasion import InvadeRequest, Linear, ProtocolParams, Rectangular, Reliability
from .power import PowerModel


class ScenarioError(ValueError):
    """A scenario problem; ``path`` is the dotted field path (or ``<document>``)."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class InvadeAction:
    request: InvadeRequest
    run_cycles: int = 0
    auto_retreat: bool = False
    program: Optional[str] = None
    loop: Optional[LoopSpec] = None
    scheme: Optional[VotingScheme] = None
    policy: RecoveryPolicy = field(default_factory=RecoveryPolicy)
    vote_every: int = 1
    voted_vars: Optional[VotedVars] = None
    costs: VoteCosts = field(default_factory=VoteCosts)
    faults: list = field(default_factory=list)


@dataclass
class RetreatAction:
    app_id: int


@dataclass
class InjectFaultsAction:
    app_id: int
    faults: list


@dataclass
class EndAction:
    pass


Action = Union[InvadeAction, RetreatAction, InjectFaultsAction, EndAction]


@dataclass
class ScheduledEvent:
    at_cycle: int
    action: Action


@dataclass
class Scenario:
    array: ArrayConfig
    protocol: ProtocolParams
    power: PowerModel
    rng_seed: int = 0
    events: list = field(default_factory=list)
    name: str = "scenario"


_EVENT_KEYS = {
    "at", "action", "app_id", "strategy", "count", "width", "height", "reliability", "run_cycles",
    "auto_retreat", "program", "scheme", "vote_every", "voted_vars", "faults", "loop", "policy", "costs",
}
_LOOP_KEYS = {"taps", "input", "input_length", "frame_size", "buffer_size", "word_bits", "iteration_cycles", "kind"}
_FAULT_KEYS = {"iteration", "replica", "pe_offset", "target", "bit", "recurring"}


def _fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


SECTIONS = {
    "array": _fields(ArrayConfig),
    "protocol": _fields(ProtocolParams),
    "power": _fields(PowerModel),
}
TOP_KEYS = {"name", "rng_seed", "array", "protocol", "power", "events"}


def parse_document(text: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ScenarioError("<document>", f"parse error: {e}") from None


def _section(raw: dict, name: str, cls):
    data = raw.get(name, {})
    if not isinstance(data, dict):
        raise ScenarioError(name, "must be a table")
    for key in data:
        if key not in SECTIONS[name]:
            raise ScenarioError(f"{name}.{key}", "unknown field")
    try:
        return cls(**data)
    except ConfigError as e:
        raise ScenarioError(f"{name}.{e.field}", str(e).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as e:
        raise ScenarioError(name, str(e)) from None


def _enum(path: str, cls, value, aliases=None):
    if aliases and str(value).lower() in aliases:
        return aliases[str(value).lower()]
    for member in cls:
        if str(value).lower() in (str(member.value).lower(), member.name.lower()):
            return member
    raise ScenarioError(path, f"unknown value {value!r}")


def _int(path: str, data: dict, key: str, default=None, minimum=None):
    if key not in data:
        if default is None:
            raise ScenarioError(f"{path}.{key}", "required")
        return default
    v = data[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ScenarioError(f"{path}.{key}", "must be an integer")
    if minimum is not None and v < minimum:
        raise ScenarioError(f"{path}.{key}", f"must be >= {minimum}")
    return v


def _fault(path: str, data: dict) -> FaultEvent:
    if not isinstance(data, dict):
        raise ScenarioError(path, "fault must be a table")
    for key in data:
        if key not in _FAULT_KEYS:
            raise ScenarioError(f"{path}.{key}", "unknown field")
    return FaultEvent(
        iteration=_int(path, data, "iteration", minimum=0),
        replica=_int(path, data, "replica", 0, minimum=0),
        pe_offset=_int(path, data, "pe_offset", 0, minimum=0),
        target=_enum(f"{path}.target", FaultTarget, data.get("target", "partial"),
                     {"partialsum": FaultTarget.PARTIAL_SUM, "partial_sum": FaultTarget.PARTIAL_SUM}),
        bit=_int(path, data, "bit", 0, minimum=0),
        recurring=bool(data.get("recurring", False)),
    )


def _loop(path: str, data: dict, rng: random.Random) -> LoopSpec:
    if not isinstance(data, dict):
        raise ScenarioError(path, "must be a table")
    for key in data:
        if key not in _LOOP_KEYS:
            raise ScenarioError(f"{path}.{key}", "unknown field")
    if "taps" not in data:
        raise ScenarioError(f"{path}.taps", "required")
    word_bits = _int(path, data, "word_bits", 16, minimum=1)
    if "input" in data:
        xs = list(data["input"])
    elif "input_length" in data:
        n = _int(path, data, "input_length", minimum=1)
        xs = [rng.randrange(1 << word_bits) for _ in range(n)]
    else:
        raise ScenarioError(f"{path}.input", "give input or input_length")
    loop = LoopSpec(
        taps=list(data["taps"]),
        input=xs,
        frame_size=data.get("frame_size"),
        buffer_size=data.get("buffer_size"),
        word_bits=word_bits,
        iteration_cycles=_int(path, data, "iteration_cycles", 1, minimum=1),
        kind=data.get("kind", "FIR"),
    )
    try:
        loop.validate()
    except ValueError as e:
        raise ScenarioError(path, str(e)) from None
    return loop


def _event(k: int, data: dict, rng_seed: int) -> ScheduledEvent:
    path = f"events[{k}]"
    if not isinstance(data, dict):
        raise ScenarioError(path, "must be a table")
    for key in data:
        if key not in _EVENT_KEYS:
            raise ScenarioError(f"{path}.{key}", "unknown field")
    at = _int(path, data, "at", minimum=0)
    kind = str(data.get("action", "")).lower()
    if kind == "end":
        return ScheduledEvent(at, EndAction())
    if kind not in ("invade", "retreat", "inject_faults"):
        raise ScenarioError(f"{path}.action", f"unknown action {data.get('action')!r}")
    app = _int(path, data, "app_id")
    if kind == "retreat":
        return ScheduledEvent(at, RetreatAction(app))
    if kind == "inject_faults":
        faults = [_fault(f"{path}.faults[{j}]", f) for j, f in enumerate(data.get("faults", []))]
        return ScheduledEvent(at, InjectFaultsAction(app, faults))

    reliability = _enum(f"{path}.reliability", Reliability, data.get("reliability", "none"))
    rng = random.Random(rng_seed * 7919 + app)
    loop = _loop(f"{path}.loop", data["loop"], rng) if "loop" in data else None
    if reliability is not Reliability.NONE:
        if loop is None:
            raise ScenarioError(f"{path}.loop", f"a loop is required for {reliability.value} requests")
        strategy = Linear(loop.T)
    else:
        s = str(data.get("strategy", "linear")).lower()
        if s == "linear":
            strategy = Linear(_int(path, data, "count", minimum=1))
        elif s in ("rectangular", "rect"):
            strategy = Rectangular(_int(path, data, "width", minimum=1), _int(path, data, "height", minimum=1))
        else:
            raise ScenarioError(f"{path}.strategy", f"unknown strategy {s!r}")
    action = InvadeAction(
        request=InvadeRequest(app, strategy, reliability, at),
        run_cycles=_int(path, data, "run_cycles", 0, minimum=0),
        auto_retreat=bool(data.get("auto_retreat", False)),
        program=data.get("program"),
        loop=loop,
        vote_every=_int(path, data, "vote_every", 1, minimum=1),
    )
    if reliability is not Reliability.NONE:
        try:
            action.scheme = VotingScheme.parse(data.get("scheme", "4c"))
        except ValueError as e:
            raise ScenarioError(f"{path}.scheme", str(e)) from None
        if "voted_vars" in data:
            action.voted_vars = _enum(f"{path}.voted_vars", VotedVars, data["voted_vars"])
        pol = data.get("policy", {})
        action.policy = RecoveryPolicy(
            rewind_target=_enum(f"{path}.policy.rewind_target", RewindTarget,
                                pol.get("rewind_target", "buffer_start")),
            migrate_threshold=_int(f"{path}.policy", pol, "migrate_threshold", 3, minimum=1),
        )
        costs = data.get("costs", {})
        action.costs = VoteCosts(**{k: _int(f"{path}.costs", costs, k) for k in costs})
        try:
            action.costs.validate()
        except ValueError as e:
            raise ScenarioError(f"{path}.costs", str(e)) from None
        action.faults = [_fault(f"{path}.faults[{j}]", f) for j, f in enumerate(data.get("faults", []))]
        for j, f in enumerate(action.faults):
            try:
                f.validate(loop, reliability.replicas)
            except ValueError as e:
                raise ScenarioError(f"{path}.faults[{j}]", str(e)) from None
    return ScheduledEvent(at, action)


def build_scenario(raw: dict) -> Scenario:
    for key in raw:
        if key not in TOP_KEYS:
            raise ScenarioError(key, "unknown top-level field")
    array = _section(raw, "array", ArrayConfig)
    try:
        array.validate()
    except ConfigError as e:
        raise ScenarioError(f"array.{e.field}", str(e).split(": ", 1)[-1]) from None
    protocol = _section(raw, "protocol", ProtocolParams)
    try:
        protocol.validate()
    except ValueError as e:
        raise ScenarioError("protocol", str(e)) from None
    power = _section(raw, "power", PowerModel)
    try:
        power.validate(array.rows, array.cols)
    except ConfigError as e:
        raise ScenarioError(e.field, str(e).split(": ", 1)[-1]) from None
    rng_seed = raw.get("rng_seed", 0)
    if isinstance(rng_seed, bool) or not isinstance(rng_seed, int):
        raise ScenarioError("rng_seed", "must be an integer")
    events_raw = raw.get("events", [])
    if not isinstance(events_raw, list):
        raise ScenarioError("events", "must be an array of tables")
    events = [_event(k, e, rng_seed) for k, e in enumerate(events_raw)]
    seen = set()
    for k, ev in enumerate(events):
        if k and ev.at_cycle < events[k - 1].at_cycle:
            raise ScenarioError(f"events[{k}].at", "events must be sorted by cycle")
        if isinstance(ev.action, InvadeAction):
            app = ev.action.request.app_id
            if app in seen:
                raise ScenarioError(f"events[{k}].app_id", f"app {app} is invaded twice")
            seen.add(app)
    return Scenario(array=array, protocol=protocol, power=power, rng_seed=rng_seed,
                    events=events, name=str(raw.get("name", "scenario")))


def load_scenario(text: str, overrides=(), seed: Optional[int] = None) -> Scenario:
    raw = parse_document(text)
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["rng_seed"] = seed
    return build_scenario(raw)


# -- overrides -------------------------------------------------------------


def parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _check_path(parts: list) -> None:
    path = ".".join(parts)
    head = parts[0]
    if head in ("name", "rng_seed") and len(parts) == 1:
        return
    if head in SECTIONS and len(parts) == 2 and parts[1] in SECTIONS[head]:
        return
    if head == "events" and len(parts) >= 3 and (parts[1] == "*" or parts[1].isdigit()):
        key = parts[2]
        if len(parts) == 3 and key in _EVENT_KEYS:
            return
        if len(parts) == 4 and key == "loop" and parts[3] in _LOOP_KEYS:
            return
        if len(parts) == 4 and key == "policy" and parts[3] in ("rewind_target", "migrate_threshold"):
            return
        if len(parts) == 4 and key == "costs" and parts[3] in _fields(VoteCosts):
            return
    raise ScenarioError(path, "not an overridable field")


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``path=value`` strings (or (path, value) pairs) to a raw document copy.

    ``events.*.key`` targets every event that already has ``key``.
    """
    raw = copy.deepcopy(raw)
    for item in overrides:
        if isinstance(item, str):
            if "=" not in item:
                raise ScenarioError(item, "override must look like path=value")
            path, text = item.split("=", 1)
            value = parse_value(text.strip())
        else:
            path, value = item
        parts = path.strip().split(".")
        _check_path(parts)
        if parts[0] != "events":
            node = raw
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = value
            continue
        events = raw.get("events", [])
        if parts[1] == "*":
            targets = [e for e in events if parts[2] in e]
        else:
            idx = int(parts[1])
            if idx >= len(events):
                raise ScenarioError(path, "no such event")
            targets = [events[idx]]
        for e in targets:
            node = e
            for p in parts[2:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = value
    return raw
