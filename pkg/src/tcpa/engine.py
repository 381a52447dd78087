"""Cycle loop tying together the protocol, power gating and FT execution.

Within one cycle the order is fixed:

1. fire scenario events due at this cycle;
2. step the invasion protocol (power hooks may stall signals);
3. reconcile power domains;
4. advance application phases (infect, execute with voting, retreat);
5. integrate energy for the cycle and advance switching timers;
6. append the cycle's trace records.

Spans in which nothing can change are skipped in one step.
"""

from __future__ import annotations

import csv
import heapq
import io
import itertools
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .array_model import Power, build_array, check_invariants
from .fault_tolerance import (
    InsufficientResources,
    array_migrator,
    execute_with_faults,
    golden_fir,
    make_plan,
    replicate_loop,
)
from .invasion import (
    EventKind,
    InvadeRequest,
    InvasionProtocol,
    Linear,
    NoSeedAvailable,
    PassivePower,
    Reliability,
    StaleClaimError,
    centralized_baseline_cycles,
    infect,
    infect_cycles,
)
from .power import AppUsage, PowerManager, analytic_estimate, report
from .scenario import (
    EndAction,
    InjectFaultsAction,
    InvadeAction,
    RetreatAction,
    Scenario,
    apply_overrides,
    build_scenario,
    parse_document,
)


class AppPhase(Enum):
    INVADING = "invading"
    POWERING = "powering"
    INFECTING = "infecting"
    RUNNING = "running"
    HOLDING = "holding"
    RETREATING = "retreating"
    DONE = "done"
    FAILED = "failed"


@dataclass
class AppMetrics:
    app_id: int
    strategy: str
    reliability: str
    requested: int = 0
    granted: int = 0
    complete: bool = False
    seeds: list = field(default_factory=list)
    pes: list = field(default_factory=list)
    invade_latency: Optional[int] = None
    claim_latency: Optional[int] = None
    total_latency: Optional[int] = None
    retreat_latency: Optional[int] = None
    stall_cycles: int = 0
    speedup_vs_centralized: Optional[float] = None
    exec_start: Optional[int] = None
    exec_end: Optional[int] = None
    phase: str = ""
    error: Optional[str] = None
    ft: Optional[dict] = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Metrics:
    apps: dict = field(default_factory=dict)
    energy: Optional[object] = None  # EnergyReport
    utilization: list = field(default_factory=list)
    total_cycles: int = 0
    invariant_violations: list = field(default_factory=list)

    @property
    def mean_utilization(self) -> float:
        return statistics.fmean(self.utilization) if self.utilization else 0.0

    def utilization_changes(self) -> list:
        """Run-length form of the timeline: [cycle, fraction] at every change."""
        out = []
        for t, u in enumerate(self.utilization):
            if not out or out[-1][1] != u:
                out.append([t, u])
        return out

    def as_dict(self) -> dict:
        return {
            "total_cycles": self.total_cycles,
            "apps": {str(k): v.as_dict() for k, v in sorted(self.apps.items())},
            "energy": self.energy.as_dict() if self.energy is not None else None,
            "mean_utilization": self.mean_utilization,
            "utilization": self.utilization_changes(),
            "invariant_violations": list(self.invariant_violations),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class _App:
    action: InvadeAction
    phase: AppPhase = AppPhase.INVADING
    tags: list = field(default_factory=list)
    claims: dict = field(default_factory=dict)
    failing: Optional[str] = None
    retreat_requested: bool = False
    infect_end: Optional[int] = None
    exec_start: Optional[int] = None
    exec_end: Optional[int] = None
    extra_faults: list = field(default_factory=list)
    # claims replaced by migration: (claim, cycle it stopped being used)
    migrated: list = field(default_factory=list)
    first_claims: list = field(default_factory=list)
    ft: Optional[dict] = None
    error: Optional[str] = None

    @property
    def app_id(self) -> int:
        return self.action.request.app_id

    @property
    def replicated(self) -> bool:
        return self.action.request.reliability is not Reliability.NONE

    @property
    def needs_execution(self) -> bool:
        a = self.action
        return a.loop is not None or a.run_cycles > 0 or a.program is not None


class _Trace:
    """Records stamped with their cycle, released in (cycle, arrival) order."""

    def __init__(self):
        self._pending = []
        self._seq = itertools.count()
        self.lines = []

    def add(self, cycle: int, category: str, text: str) -> None:
        heapq.heappush(self._pending, (cycle, next(self._seq), category, text))

    def flush(self, upto: int) -> None:
        while self._pending and self._pending[0][0] <= upto:
            cycle, _, category, text = heapq.heappop(self._pending)
            self.lines.append(f"{cycle:>8} {category:<5} {text}")


class Simulation:
    def __init__(self, scenario: Scenario, check_invariants: bool = False):
        self.scenario = scenario
        self.array = build_array(scenario.array)
        self.power = PowerManager(self.array, scenario.power)
        self.protocol = InvasionProtocol(self.array, scenario.protocol, gate=self.power)
        self.check = check_invariants
        self.apps = {}
        self.trace = _Trace()
        self.metrics = Metrics()
        self._events = list(scenario.events)
        self._next_event = 0
        self._seen = {"invade": {}, "confirm": {}, "release": {}}

    # -- driver -------------------------------------------------------------

    def run(self) -> tuple:
        cycle = 0
        while True:
            if self._end_due(cycle):
                break
            nxt = self._next_interesting(cycle)
            if nxt is None:
                break
            if nxt > cycle:
                self._idle(cycle, nxt)
                cycle = nxt
                if self._end_due(cycle):
                    break
            self._cycle(cycle)
            cycle += 1
        self.trace.flush(cycle - 1)
        self._finish(cycle)
        return self.metrics, self.trace.lines

    def _end_due(self, cycle: int) -> bool:
        for ev in self._events[self._next_event:]:
            if ev.at_cycle > cycle:
                return False
            if isinstance(ev.action, EndAction):
                return True
        return False

    def _next_interesting(self, cycle: int) -> Optional[int]:
        if not self.power.stable():
            return cycle
        candidates = []
        if self._next_event < len(self._events):
            candidates.append(self._events[self._next_event].at_cycle)
        if self.protocol.next_cycle() is not None:
            candidates.append(self.protocol.next_cycle())
        for app in self.apps.values():
            if app.phase is AppPhase.POWERING:
                return cycle
            if app.phase is AppPhase.HOLDING and app.retreat_requested:
                return cycle
            if app.phase is AppPhase.INFECTING:
                candidates.append(app.infect_end)
            if app.phase is AppPhase.RUNNING:
                candidates.append(app.exec_end)
        if not candidates:
            return None
        return max(cycle, min(candidates))

    def _idle(self, start: int, stop: int) -> None:
        span = stop - start
        self.power.accumulate(span)
        u = self.power.pes_on() / self.array.config.size
        self.metrics.utilization.extend([u] * span)
        self.trace.flush(stop - 1)

    def _cycle(self, cycle: int) -> None:
        # 1. scenario events
        while self._next_event < len(self._events) and self._events[self._next_event].at_cycle == cycle:
            ev = self._events[self._next_event]
            if isinstance(ev.action, EndAction):
                break
            self._next_event += 1
            self._fire(cycle, ev.action)
        self._drain_power(cycle)
        # 2. protocol
        for e in self.protocol.step(cycle):
            self._record(e)
        self._drain_power(cycle)
        # 3. power
        self.power.reconcile()
        self._drain_power(cycle)
        # 4. applications
        for app_id in sorted(self.apps):
            self._advance(cycle, self.apps[app_id])
        self._drain_power(cycle)
        # 5. energy, then switching timers
        self.power.accumulate(1)
        self.metrics.utilization.append(self.power.pes_on() / self.array.config.size)
        self.power.tick()
        self._drain_power(cycle)
        if self.check:
            self._check(cycle)
        # 6. trace
        self.trace.flush(cycle)

    def _drain_power(self, cycle: int) -> None:
        for label, old, new in self.power.transitions:
            self.trace.add(cycle, "power", f"{label} {old}->{new}")
        self.power.transitions.clear()

    def _record(self, e) -> None:
        self.trace.add(e.cycle, "proto", e.encode())
        key = (e.app_id, e.tag)
        if e.kind is EventKind.INVADE_SIGNAL:
            self._seen["invade"].setdefault(key, {})[e.dst] = e.cycle
        elif e.kind is EventKind.CLAIM_CONFIRM and e.count > 0:
            self._seen["confirm"].setdefault(key, {})[e.dst] = e.cycle
        elif e.kind is EventKind.RETREAT_CONFIRM:
            self._seen["release"].setdefault(key, {})[e.dst] = e.cycle

    def _check(self, cycle: int) -> None:
        problems = check_invariants(self.array, self.power.pe_domains_fine)
        if self.power.pe_domains_fine:
            powered_owned = sum(
                1 for pe in self.array.pes() if pe.owner is not None and pe.pe_power is Power.ON
            )
            if self.power.pes_on() != powered_owned:
                problems.append(f"PEs on {self.power.pes_on()} != owned and powered {powered_owned}")
        for p in problems:
            self.metrics.invariant_violations.append(f"cycle {cycle}: {p}")

    # -- scenario events ----------------------------------------------------

    def _fire(self, cycle: int, action) -> None:
        if isinstance(action, InvadeAction):
            app = _App(action=action)
            self.apps[action.request.app_id] = app
            req = action.request
            self.trace.add(cycle, "app", f"app={req.app_id} invade {req.strategy} reliability={req.reliability.value}")
            for tag in range(req.reliability.replicas):
                sub = InvadeRequest(req.app_id, req.strategy, req.reliability, cycle, tag)
                try:
                    self.protocol.submit(sub, cycle)
                except NoSeedAvailable as e:
                    app.failing = f"NoSeedAvailable: {e}"
                    break
                app.tags.append(tag)
            if not app.tags:
                self._fail(cycle, app, app.failing)
            return
        app = self.apps.get(action.app_id)
        if isinstance(action, RetreatAction):
            if app is None:
                self.trace.add(cycle, "app", f"app={action.app_id} retreat ignored: unknown app")
                return
            app.retreat_requested = True
            self.trace.add(cycle, "app", f"app={action.app_id} retreat requested")
        elif isinstance(action, InjectFaultsAction):
            if app is None or app.exec_start is not None:
                self.trace.add(cycle, "app", f"app={action.app_id} faults ignored: not awaiting execution")
                return
            app.extra_faults.extend(action.faults)
            self.trace.add(cycle, "app", f"app={action.app_id} {len(action.faults)} fault(s) queued")

    def _fail(self, cycle: int, app: _App, message: str) -> None:
        app.phase = AppPhase.FAILED
        app.error = message
        self.trace.add(cycle, "app", f"app={app.app_id} failed: {message}")

    # -- application phases -------------------------------------------------

    def _advance(self, cycle: int, app: _App) -> None:
        if app.phase is AppPhase.INVADING:
            keys = [(app.app_id, t) for t in app.tags]
            busy = self.protocol.active_keys()
            if any(k not in self.protocol.claims or k in busy for k in keys):
                return
            for t in app.tags:
                app.claims[t] = self.protocol.claims[(app.app_id, t)]
            app.first_claims = [app.claims[t] for t in sorted(app.claims)]
            held = [c for c in app.claims.values() if c.granted > 0]
            problem = app.failing
            if problem is None and not held:
                problem = "no PEs granted"
            if problem is None and app.replicated and not all(c.complete for c in app.claims.values()):
                problem = "InsufficientResources: a replica chain is incomplete"
            if problem is None and app.replicated and len(app.claims) != app.action.request.reliability.replicas:
                problem = "InsufficientResources: not every replica could be placed"
            if problem is not None:
                app.error = problem
                if held:
                    self.trace.add(cycle, "app", f"app={app.app_id} rolling back: {problem}")
                    self._start_retreat(cycle, app)
                else:
                    self._fail(cycle, app, problem)
                return
            granted = sum(c.granted for c in app.claims.values())
            self.trace.add(cycle, "app", f"app={app.app_id} claimed {granted} PE(s)")
            app.phase = AppPhase.POWERING if app.needs_execution else AppPhase.HOLDING
            if app.phase is AppPhase.HOLDING and app.action.auto_retreat:
                app.retreat_requested = True
        if app.phase is AppPhase.POWERING:
            pes = [c for claim in app.claims.values() for c in claim.pes]
            if any(self.array.pe(c).pe_power is not Power.ON for c in pes):
                return
            program = app.action.program or ("fir" if app.action.loop is not None else "kernel")
            for claim in app.claims.values():
                for e in infect(self.array, claim, program, self.scenario.protocol, cycle):
                    self.trace.add(e.cycle, "proto", e.encode())
            g = max(c.granted for c in app.claims.values())
            app.infect_end = cycle + infect_cycles(g, self.scenario.protocol)
            app.phase = AppPhase.INFECTING
        if app.phase is AppPhase.INFECTING:
            if cycle < app.infect_end:
                return
            app.exec_start = cycle
            if app.replicated:
                duration = self._execute_ft(cycle, app)
            else:
                duration = app.action.run_cycles
            app.exec_end = cycle + duration
            self.trace.add(cycle, "app", f"app={app.app_id} executing for {duration} cycle(s)")
            app.phase = AppPhase.RUNNING
        if app.phase is AppPhase.RUNNING:
            if cycle < app.exec_end:
                return
            self.trace.add(cycle, "app", f"app={app.app_id} finished")
            app.phase = AppPhase.HOLDING
            if app.action.auto_retreat:
                app.retreat_requested = True
        if app.phase is AppPhase.HOLDING:
            if app.retreat_requested:
                self._start_retreat(cycle, app)
            return
        if app.phase is AppPhase.RETREATING:
            busy = self.protocol.active_keys()
            if any(c.key in busy for c in app.claims.values()):
                return
            app.phase = AppPhase.FAILED if app.error else AppPhase.DONE
            self.trace.add(cycle, "app", f"app={app.app_id} released")

    def _start_retreat(self, cycle: int, app: _App) -> None:
        for tag in sorted(app.claims):
            claim = app.claims[tag]
            if claim.granted == 0 or claim.retreated:
                continue
            try:
                for e in self.protocol.start_retreat(claim, cycle):
                    self._record(e)
            except StaleClaimError as err:
                app.error = app.error or f"StaleClaimError: {err}"
        app.phase = AppPhase.RETREATING
        self._drain_power(cycle)
        self._advance(cycle, app)

    def _execute_ft(self, cycle: int, app: _App) -> int:
        a = app.action
        claims = [app.claims[t] for t in sorted(app.claims)]
        request = InvadeRequest(app.app_id, Linear(a.loop.T), a.request.reliability, a.request.issue_cycle)
        try:
            plan = make_plan(a.request.reliability, claims, a.scheme, a.loop, a.policy, a.vote_every,
                             a.voted_vars, a.costs, request)
        except ValueError as e:
            app.error = f"plan rejected: {e}"
            return 0
        for w in plan.warnings:
            self.trace.add(cycle, "ft", f"app={app.app_id} warning: {w}")
        program = replicate_loop(a.loop, plan)
        base = array_migrator(self.array, self.scenario.protocol, PassivePower())

        def migrate(old_plan, implicated):
            try:
                result = base(old_plan, implicated)
            except (InsufficientResources, StaleClaimError):
                result = None
            if result is not None:
                fresh, _ = result
                self.power.force_on([c for claim in fresh.replica_claims for c in claim.pes])
                self.power.reconcile()
                for claim in fresh.replica_claims:
                    app.migrated.append((app.claims[claim.tag], cycle))
                    app.claims[claim.tag] = claim
                    self.protocol.claims[claim.key] = claim
            return result

        faults = list(a.faults) + list(app.extra_faults)
        try:
            outputs, stats = execute_with_faults(program, faults, migrator=migrate)
        except ValueError as e:
            app.error = f"fault list rejected: {e}"
            return 0
        for offset, text in stats.log:
            self.trace.add(cycle + offset, "ft", f"app={app.app_id} {text}")
        ft = stats.as_dict()
        ft["outputs_match_golden"] = outputs == golden_fir(a.loop)
        ft["scheme"] = plan.scheme.value
        ft["warnings"] = list(plan.warnings)
        app.ft = ft
        if stats.aborted:
            app.error = "fail-safe stop: outputs invalid"
        return stats.cycles

    # -- results ------------------------------------------------------------

    def _finish(self, total: int) -> None:
        m = self.metrics
        m.total_cycles = total
        usage = []
        for app_id in sorted(self.apps):
            app = self.apps[app_id]
            m.apps[app_id] = self._app_metrics(app)
            for claim, stopped in app.migrated:
                u = self._usage(claim, total, end=stopped)
                if u is not None:
                    usage.append(u)
            for claim in app.claims.values():
                start = app.exec_start if app.migrated else None
                u = self._usage(claim, total, start=start)
                if u is not None:
                    usage.append(u)
        if total > 0:
            model = self.scenario.power
            rows, cols = self.array.rows, self.array.cols
            est = analytic_estimate(usage, model, rows, cols, total)
            stalls = sum(a.stall_cycles for a in m.apps.values())
            m.energy = report(self.power.e_total, self.power.baseline(total), est, self.power.energy,
                              stalls, self.power.toggles())
        else:
            m.utilization = []

    def _usage(self, claim, horizon: int, start=None, end=None) -> Optional[AppUsage]:
        """Occupancy of one claim for the analytic model.

        Migrated claims are not seen by this protocol instance: the old
        claim ends and the fresh one starts at the execution start (``end``
        / ``start`` overrides), an approximation of the in-run migration.
        """
        if claim.granted == 0:
            return None
        key = claim.key
        d = self.scenario.power.d_switch
        rel = self._seen["release"].get(key, {})
        ends = [rel.get(c, horizon) for c in claim.pes]
        if start is not None:
            return AppUsage(list(claim.pes), start + d, start + d, statistics.fmean(ends))
        inv = self._seen["invade"].get(key, {})
        conf = self._seen["confirm"].get(key, {})
        if not all(c in inv and c in conf for c in claim.pes):
            return None
        return AppUsage(
            pes=list(claim.pes),
            ictrl_start=statistics.fmean(inv[c] for c in claim.pes),
            pe_start=statistics.fmean(conf[c] for c in claim.pes) + d,
            end=end if end is not None else statistics.fmean(ends),
        )

    def _app_metrics(self, app: _App) -> AppMetrics:
        req = app.action.request
        m = AppMetrics(app_id=app.app_id, strategy=str(req.strategy), reliability=req.reliability.value)
        m.requested = req.requested * req.reliability.replicas
        m.phase = app.phase.value
        m.error = app.error
        m.ft = app.ft
        m.exec_start, m.exec_end = app.exec_start, app.exec_end
        claims = app.first_claims or [app.claims[t] for t in sorted(app.claims)]
        if not claims:
            return m
        m.granted = sum(c.granted for c in claims)
        m.complete = app.error is None and all(c.complete for c in claims) and len(claims) == req.reliability.replicas
        m.seeds = [str(c.seed) for c in claims]
        m.pes = [[str(p) for p in c.pes] for c in claims]
        m.invade_latency = max(c.invade_latency for c in claims)
        m.claim_latency = max(c.claim_latency for c in claims)
        m.total_latency = max(c.total_latency for c in claims)
        m.stall_cycles = sum(c.stall_cycles for c in claims)
        held = [app.claims[t] for t in sorted(app.claims) if app.claims[t].granted]
        rl = [self.protocol.retreat_latency[c.key] for c in held if c.key in self.protocol.retreat_latency]
        if rl and len(rl) == len(held):
            m.retreat_latency = max(rl)
        if m.granted > 0 and m.total_latency > 0:
            base = centralized_baseline_cycles(req, m.granted, self.scenario.protocol)
            m.speedup_vs_centralized = base / m.total_latency
        return m


def run(scenario: Scenario, check_invariants: bool = False) -> tuple:
    """Simulate ``scenario``; returns (Metrics, trace lines)."""
    return Simulation(scenario, check_invariants).run()


def trace_text(lines) -> str:
    return "".join(line + "\n" for line in lines)


# -- sweeps ----------------------------------------------------------------

SWEEP_COLUMNS = [
    "total_cycles", "apps", "apps_failed", "granted", "mean_utilization",
    "e_total", "e_baseline", "savings_fraction", "analytic_estimate", "estimate_error",
    "stall_cycles", "toggles_ictrl", "toggles_pe",
    "mean_speedup", "ft_injected", "ft_detected", "ft_corrected", "ft_silent",
    "ft_cycles", "ft_timing_overhead",
]


def derive_seed(base: int, index: int) -> int:
    return (base * 1_000_003 + index * 7919 + 1) % (2 ** 31)


def grid_points(grid: dict) -> list:
    if not grid:
        return []
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def summarize(metrics: Metrics) -> dict:
    apps = list(metrics.apps.values())
    e = metrics.energy
    speedups = [a.speedup_vs_centralized for a in apps if a.speedup_vs_centralized is not None]
    fts = [a.ft for a in apps if a.ft]
    row = {
        "total_cycles": metrics.total_cycles,
        "apps": len(apps),
        "apps_failed": sum(1 for a in apps if a.error),
        "granted": sum(a.granted for a in apps),
        "mean_utilization": metrics.mean_utilization,
        "e_total": e.e_total if e else 0.0,
        "e_baseline": e.e_baseline if e else 0.0,
        "savings_fraction": e.savings_fraction if e else 0.0,
        "analytic_estimate": e.analytic_estimate if e else 0.0,
        "estimate_error": e.estimate_error if e else 0.0,
        "stall_cycles": e.stall_cycles if e else 0,
        "toggles_ictrl": e.toggles.get("ictrl", 0) if e else 0,
        "toggles_pe": e.toggles.get("pe", 0) if e else 0,
        "mean_speedup": statistics.fmean(speedups) if speedups else "",
        "ft_injected": sum(f["injected"] for f in fts),
        "ft_detected": sum(f["detected"] for f in fts),
        "ft_corrected": sum(f["corrected"] for f in fts),
        "ft_silent": sum(f["silent"] for f in fts),
        "ft_cycles": sum(f["cycles"] for f in fts),
        "ft_timing_overhead": max((f["timing_overhead_fraction"] for f in fts), default=""),
    }
    return row


def _run_point(raw: dict) -> dict:
    metrics, _ = run(build_scenario(raw))
    return summarize(metrics)


def sweep(template: str, grid: dict, workers: int = 1, base_seed: Optional[int] = None, overrides=()) -> list:
    """One run per grid point; returns rows ordered by grid index.

    ``grid`` maps override paths (as accepted by ``--set``) to value lists;
    ``overrides`` apply to every point. Every point is validated before the
    first run starts.
    """
    raw = apply_overrides(parse_document(template), overrides)
    base = raw.get("rng_seed", 0) if base_seed is None else base_seed
    docs = []
    points = grid_points(grid)
    for idx, point in enumerate(points):
        doc = apply_overrides(raw, list(point.items()))
        doc["rng_seed"] = derive_seed(base, idx)
        build_scenario(doc)  # validation only
        docs.append(doc)
    if workers > 1 and len(docs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, docs))
    else:
        results = [_run_point(d) for d in docs]
    rows = []
    for idx, (point, res) in enumerate(zip(points, results)):
        row = {"index": idx}
        row.update(point)
        row.update(res)
        rows.append(row)
    return rows


def rows_to_csv(rows: list, params: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["index"] + list(params) + SWEEP_COLUMNS
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(row.get(h, "")) for h in header])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v
