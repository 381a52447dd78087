"""Randomized multi-application protocol runs with invariant checking.

The RNG only generates workloads; the protocol itself is deterministic.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .array_model import ArrayConfig, ICtrlKind, Phase, build_array, check_invariants
from .invasion import (
    InvadeRequest,
    InvasionProtocol,
    Linear,
    NoSeedAvailable,
    ProtocolParams,
    Rectangular,
)


@dataclass
class FuzzReport:
    scenarios: int = 0
    invasions: int = 0
    claims: int = 0
    retreats: int = 0
    rejected: int = 0
    disjointness_violations: int = 0
    nonterminating: int = 0
    incomplete_retreats: int = 0
    invariant_violations: int = 0
    examples: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.disjointness_violations or self.nonterminating
                    or self.incomplete_retreats or self.invariant_violations)

    def note(self, text: str) -> None:
        if len(self.examples) < 10:
            self.examples.append(text)


def random_workload(rng: random.Random, rows: int, cols: int, apps: int) -> list:
    """(app_id, strategy, issue_cycle, hold_cycles) tuples."""
    out = []
    for app in range(1, apps + 1):
        if rng.random() < 0.5:
            strategy = Linear(rng.randint(1, rows * cols))
        else:
            strategy = Rectangular(rng.randint(1, cols), rng.randint(1, rows))
        out.append((app, strategy, rng.randint(0, 20), rng.randint(0, 30)))
    return out


def fuzz_one(rng: random.Random, report: FuzzReport, tag: str = "") -> None:
    rows, cols = rng.randint(2, 8), rng.randint(2, 8)
    kind = rng.choice([ICtrlKind.FSM, ICtrlKind.PROGRAMMABLE])
    cfg = ArrayConfig(rows=rows, cols=cols, ictrl_kind=kind)
    state = build_array(cfg)
    params = ProtocolParams()
    proto = InvasionProtocol(state, params)
    workload = random_workload(rng, rows, cols, rng.randint(2, 8))
    bound = params.seed_select_cycles + 2 * cfg.hop_latency * cfg.size
    pending = sorted(workload, key=lambda w: (w[2], w[0]))
    hold = {w[0]: w[3] for w in workload}
    retreat_at = {}
    held = {}
    report.scenarios += 1
    cycle = 0
    limit = 40 + 2 * bound * (len(workload) + 1)
    while pending or not proto.idle or retreat_at:
        if cycle > limit:
            report.nonterminating += 1
            report.note(f"{tag}: run exceeded {limit} cycles")
            return
        while pending and pending[0][2] <= cycle:
            app, strategy, issue, _ = pending.pop(0)
            report.invasions += 1
            try:
                proto.submit(InvadeRequest(app, strategy, issue_cycle=cycle), cycle)
            except NoSeedAvailable:
                report.rejected += 1
        proto.step(cycle)
        for key, claim in list(proto.claims.items()):
            if key in held or key in retreat_at or claim.retreated:
                continue
            if key in proto.active_keys():
                continue  # rectangle abort cleanup still running
            if claim.total_latency > bound:
                report.nonterminating += 1
                report.note(f"{tag}: {key} took {claim.total_latency} > {bound}")
            if claim.granted == 0:
                retreat_at[key] = None
                continue
            report.claims += 1
            held[key] = claim
            retreat_at[key] = cycle + hold[key[0]]
        for key, at in sorted(retreat_at.items()):
            if at is not None and at <= cycle and key in held:
                proto.start_retreat(held[key], cycle)
                retreat_at[key] = None
        for key in [k for k, at in retreat_at.items() if at is None and k not in proto.active_keys()]:
            del retreat_at[key]
            claim = held.pop(key, None)
            if claim is None:
                continue
            report.retreats += 1
            # released PEs may already belong to a later invasion
            stuck = [c for c in claim.pes if state.pe(c).owner == key[0] or state.pe(c).ictrl.app == key[0]]
            if stuck or not claim.retreated:
                report.incomplete_retreats += 1
                report.note(f"{tag}: retreat of {key} left {stuck}")
        _check_disjoint(state, {k: c for k, c in held.items() if retreat_at.get(k) is not None}, report, tag)
        problems = check_invariants(state)
        if problems:
            report.invariant_violations += len(problems)
            report.note(f"{tag}: cycle {cycle}: {problems[0]}")
        cycle += 1
    if state.reserved or any(pe.ictrl.phase is not Phase.IDLE for pe in state.pes()):
        report.incomplete_retreats += 1
        report.note(f"{tag}: array not idle at the end")


def _check_disjoint(state, held: dict, report: FuzzReport, tag: str) -> None:
    seen = {}
    for key, claim in held.items():
        for c in claim.pes:
            if c in seen:
                report.disjointness_violations += 1
                report.note(f"{tag}: {c} claimed by {seen[c]} and {key}")
            seen[c] = key
            if state.pe(c).owner != key[0]:
                report.disjointness_violations += 1
                report.note(f"{tag}: {c} owner {state.pe(c).owner} != {key[0]}")


def fuzz(count: int, seed: int = 0) -> FuzzReport:
    rng = random.Random(seed)
    report = FuzzReport()
    for k in range(count):
        fuzz_one(rng, report, tag=f"scenario {k}")
    return report
