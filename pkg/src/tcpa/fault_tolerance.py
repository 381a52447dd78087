"""On-demand DMR/TMR execution of a systolic FIR kernel.

A T-tap FIR is mapped onto a linear chain of T PEs: PE ``p`` holds tap
``a[p]`` and, in iteration ``i``, extends the running partial sum with
``a[p] * x[i - p]``. The last PE of the chain sits on the array border and
produces ``y[i]``. Replication claims two or three such chains and votes
on partial sums and/or outputs according to one of four placements:

========  ===========================================================
``4a``    hardware voter on the output PE of the middle replica only
``4b``    software vote by the middle replica, result sent to all
``4c``    hardware voter FU in every middle-replica PE
``4d``    software vote on every replica
========  ===========================================================

Arithmetic is modulo ``2**word_bits``. Faults are single-bit XOR flips.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Union

from .array_model import ArrayState, Coord
from .invasion import (
    Claim,
    InvadeRequest,
    Linear,
    NoSeedAvailable,
    ProtocolParams,
    Reliability,
    infect_cycles,
    invade,
    retreat,
)

log = logging.getLogger(__name__)


class InsufficientResources(RuntimeError):
    pass


class VotingScheme(Enum):
    OUTPUT_HW = "4a"
    INTERMEDIATE_SW_MIDDLE = "4b"
    INTERMEDIATE_HW = "4c"
    INTERMEDIATE_SW_ALL = "4d"

    @classmethod
    def parse(cls, value) -> "VotingScheme":
        if isinstance(value, cls):
            return value
        v = str(value).strip()
        for s in cls:
            if v.lower() in (s.value, s.name.lower()):
                return s
        raise ValueError(f"unknown voting scheme {value!r}")

    @property
    def hardware(self) -> bool:
        return self in (VotingScheme.OUTPUT_HW, VotingScheme.INTERMEDIATE_HW)


class VotedVars(Enum):
    OUTPUTS_ONLY = "outputs"
    OUTPUTS_AND_PARTIALS = "outputs+partials"


class FaultTarget(Enum):
    PARTIAL_SUM = "partial"
    OUTPUT = "output"


class RewindTarget(Enum):
    PREVIOUS_ITERATION = "previous_iteration"
    BUFFER_START = "buffer_start"
    FRAME_START = "frame_start"
    HALT = "halt"  # fail-safe halt, no rewind


@dataclass
class VoteCosts:
    v_hw: int = 1
    v_sw: int = 8
    prop_hop_cycles: int = 1

    def validate(self) -> None:
        if self.v_hw > self.v_sw:
            raise ValueError("hardware voting must not be slower than software voting (v_hw <= v_sw)")
        if min(self.v_hw, self.v_sw, self.prop_hop_cycles) < 0:
            raise ValueError("vote costs must be >= 0")


@dataclass
class LoopSpec:
    taps: list
    input: list
    frame_size: Optional[int] = None
    buffer_size: Optional[int] = None
    word_bits: int = 16
    iteration_cycles: int = 1
    kind: str = "FIR"

    def __post_init__(self):
        n = len(self.input)
        if self.frame_size is None:
            self.frame_size = n
        if self.buffer_size is None:
            self.buffer_size = self.frame_size

    @property
    def T(self) -> int:
        return len(self.taps)

    @property
    def N(self) -> int:
        return len(self.input)

    @property
    def mask(self) -> int:
        return (1 << self.word_bits) - 1

    def validate(self) -> None:
        if self.kind.upper() != "FIR":
            raise ValueError("only FIR kernels are supported")
        if self.T < 1:
            raise ValueError("loop needs at least one tap")
        if self.N < self.T:
            raise ValueError("input must be at least as long as the tap count")
        if self.buffer_size < 1 or self.frame_size % self.buffer_size or self.N % self.frame_size:
            raise ValueError("buffer_size must divide frame_size and frame_size must divide the input length")
        if self.word_bits < 1:
            raise ValueError("word_bits must be >= 1")


def golden_fir(loop: LoopSpec) -> list:
    """Direct evaluation of y[i] = sum_j a[j] * x[i - j], x[k < 0] = 0."""
    out = []
    for i in range(loop.N):
        acc = 0
        for j, a in enumerate(loop.taps):
            if i - j >= 0:
                acc += a * loop.input[i - j]
        out.append(acc & loop.mask)
    return out


@dataclass(frozen=True)
class FaultEvent:
    iteration: int
    replica: int
    pe_offset: int
    target: FaultTarget = FaultTarget.PARTIAL_SUM
    bit: int = 0
    recurring: bool = False

    def validate(self, loop: LoopSpec, replicas: int) -> None:
        if not 0 <= self.iteration < loop.N:
            raise ValueError(f"fault iteration {self.iteration} out of range")
        if not 0 <= self.replica < replicas:
            raise ValueError(f"fault replica {self.replica} out of range")
        if not 0 <= self.pe_offset < loop.T:
            raise ValueError(f"fault pe_offset {self.pe_offset} out of range")
        if self.target is FaultTarget.OUTPUT and self.pe_offset != loop.T - 1:
            raise ValueError("output faults live on the last PE of the chain")
        if not 0 <= self.bit < loop.word_bits:
            raise ValueError(f"fault bit {self.bit} out of range")


@dataclass
class RecoveryPolicy:
    rewind_target: RewindTarget = RewindTarget.BUFFER_START
    migrate_threshold: int = 3

    def validate(self) -> None:
        if self.migrate_threshold < 1:
            raise ValueError("migrate_threshold must be >= 1")


# -- vote outcomes ---------------------------------------------------------


@dataclass(frozen=True)
class Match:
    value: int


@dataclass(frozen=True)
class Corrected:
    value: int
    faulty_replica: int


@dataclass(frozen=True)
class Mismatch:
    values: tuple


VoteOutcome = Union[Match, Corrected, Mismatch]


def vote(values, mode: Reliability) -> VoteOutcome:
    values = list(values)
    if mode is Reliability.DMR:
        if len(values) != 2:
            raise ValueError("DMR compares exactly two values")
        return Match(values[0]) if values[0] == values[1] else Mismatch(tuple(values))
    if mode is Reliability.TMR:
        if len(values) != 3:
            raise ValueError("TMR votes over exactly three values")
        a, b, c = values
        if a == b == c:
            return Match(a)
        if a == b:
            return Corrected(a, 2)
        if a == c:
            return Corrected(a, 1)
        if b == c:
            return Corrected(b, 0)
        return Mismatch(tuple(values))
    raise ValueError(f"cannot vote in mode {mode}")


# -- planning --------------------------------------------------------------


@dataclass
class ReplicationPlan:
    mode: Reliability
    replica_claims: list
    scheme: VotingScheme
    vote_every: int = 1
    voted_vars: VotedVars = VotedVars.OUTPUTS_AND_PARTIALS
    voter_pes: set = field(default_factory=set)
    costs: VoteCosts = field(default_factory=VoteCosts)
    policy: RecoveryPolicy = field(default_factory=RecoveryPolicy)
    request: Optional[InvadeRequest] = None
    warnings: list = field(default_factory=list)

    @property
    def replicas(self) -> int:
        return self.mode.replicas

    @property
    def voting_replica(self) -> int:
        """Replica whose PEs host voters and whose output leaves the array."""
        return 1 if self.mode is Reliability.TMR else 0

    def chains(self) -> list:
        return [list(c.pes) for c in self.replica_claims]

    def validate(self) -> None:
        if self.mode not in (Reliability.DMR, Reliability.TMR):
            raise ValueError("replication needs DMR or TMR")
        if len(self.replica_claims) != self.replicas:
            raise ValueError("replica count does not match mode")
        seen = set()
        for c in self.replica_claims:
            s = set(c.pes)
            if seen & s:
                raise ValueError("replica claims overlap")
            seen |= s
        if self.vote_every < 1:
            raise ValueError("vote_every must be >= 1")
        if self.scheme is VotingScheme.OUTPUT_HW and self.voted_vars is not VotedVars.OUTPUTS_ONLY:
            raise ValueError("scheme 4a votes on outputs only")
        if self.scheme.hardware and not self.voter_pes:
            raise ValueError("hardware voting needs voter PEs")
        self.costs.validate()
        self.policy.validate()


def _voter_pes(scheme: VotingScheme, chains: list, voting_replica: int) -> set:
    chain = chains[voting_replica]
    if scheme is VotingScheme.OUTPUT_HW:
        return {chain[-1]}
    if scheme is VotingScheme.INTERMEDIATE_HW:
        return set(chain)
    return set()


def _effective_policy(policy: RecoveryPolicy, loop: LoopSpec, warnings: list) -> RecoveryPolicy:
    if policy.rewind_target is RewindTarget.PREVIOUS_ITERATION and loop.T > 1:
        msg = (f"partial sums live for {loop.T} iterations; "
               "rewinding to the previous iteration is unsafe, using buffer start")
        log.warning(msg)
        warnings.append(msg)
        return RecoveryPolicy(RewindTarget.BUFFER_START, policy.migrate_threshold)
    return policy


def plan_replication(request: InvadeRequest, loop: LoopSpec, array: ArrayState, scheme,
                     policy: Optional[RecoveryPolicy] = None, vote_every: int = 1,
                     voted_vars: Optional[VotedVars] = None, costs: Optional[VoteCosts] = None,
                     params: Optional[ProtocolParams] = None, gate=None) -> ReplicationPlan:
    """Claim 2 or 3 disjoint Linear{T} chains and place voters.

    Either every replica is claimed or none is: partial results are
    retreated before ``InsufficientResources`` is raised.
    """
    if request.reliability not in (Reliability.DMR, Reliability.TMR):
        raise ValueError("plan_replication needs a DMR or TMR request")
    loop.validate()
    scheme = VotingScheme.parse(scheme)
    claims = []
    failure = None
    for r in range(request.reliability.replicas):
        sub = InvadeRequest(request.app_id, Linear(loop.T), request.reliability, request.issue_cycle, tag=r)
        try:
            claim = invade(array, sub, params, gate)
        except NoSeedAvailable as e:
            failure = str(e)
            break
        if claim.granted:
            claims.append(claim)
        if not claim.complete:
            failure = f"replica {r} got {claim.granted}/{loop.T} PEs"
            break
    if failure is not None:
        for c in claims:
            retreat(array, c, params, gate)
        raise InsufficientResources(f"app {request.app_id}: {failure}")
    return make_plan(request.reliability, claims, scheme, loop, policy, vote_every, voted_vars, costs, request)


def make_plan(mode: Reliability, claims: list, scheme, loop: LoopSpec, policy=None, vote_every=1,
              voted_vars=None, costs=None, request=None) -> ReplicationPlan:
    scheme = VotingScheme.parse(scheme)
    if voted_vars is None:
        voted_vars = VotedVars.OUTPUTS_ONLY if scheme is VotingScheme.OUTPUT_HW else VotedVars.OUTPUTS_AND_PARTIALS
    warnings = []
    plan = ReplicationPlan(
        mode=mode,
        replica_claims=claims,
        scheme=scheme,
        vote_every=vote_every,
        voted_vars=voted_vars,
        costs=costs or VoteCosts(),
        policy=_effective_policy(policy or RecoveryPolicy(), loop, warnings),
        request=request,
        warnings=warnings,
    )
    plan.voter_pes = _voter_pes(scheme, plan.chains(), plan.voting_replica)
    plan.validate()
    return plan


def detached_plan(mode: Reliability, loop: LoopSpec, scheme, **kw) -> ReplicationPlan:
    """A plan on synthetic chains (replica r on row r) for array-free studies."""
    claims = []
    for r in range(mode.replicas):
        pes = [Coord(r, p) for p in range(loop.T)]
        claims.append(Claim(app_id=0, seed=pes[0], pes=pes, requested=loop.T, granted=loop.T,
                            invade_latency=0, claim_latency=0, complete=True, strategy=Linear(loop.T), tag=r))
    return make_plan(mode, claims, scheme, loop, **kw)


# -- replicated program ----------------------------------------------------


@dataclass(frozen=True)
class VotePoint:
    iteration: int
    var: str  # "p<k>" for the partial sum on chain position k, "out" for the output
    pe_offset: int


@dataclass
class ReplicatedProgram:
    loop: LoopSpec
    plan: ReplicationPlan
    schedules: list
    vote_points: list
    operation: str  # "majority" (TMR) or "compare" (DMR)

    @property
    def output_votes(self) -> int:
        return sum(1 for v in self.vote_points if v.var == "out")

    @property
    def partial_votes(self) -> int:
        return sum(1 for v in self.vote_points if v.var != "out")

    def voted_iterations(self) -> list:
        return sorted({v.iteration for v in self.vote_points})


def is_voted_iteration(i: int, vote_every: int) -> bool:
    return (i + 1) % vote_every == 0


def replicate_loop(loop: LoopSpec, plan: ReplicationPlan) -> ReplicatedProgram:
    loop.validate()
    schedules = []
    for chain in plan.chains():
        schedules.append([(i, p, chain[p]) for i in range(loop.N) for p in range(loop.T)])
    points = []
    partials = plan.voted_vars is VotedVars.OUTPUTS_AND_PARTIALS
    for i in range(loop.N):
        if not is_voted_iteration(i, plan.vote_every):
            continue
        if partials:
            points.extend(VotePoint(i, f"p{p}", p) for p in range(loop.T))
        points.append(VotePoint(i, "out", loop.T - 1))
    op = "majority" if plan.mode is Reliability.TMR else "compare"
    return ReplicatedProgram(loop, plan, schedules, points, op)


# -- timing model ----------------------------------------------------------


def vote_cost(plan: ReplicationPlan) -> int:
    """Cycles a voted iteration adds to the iteration latency."""
    c = plan.costs
    if plan.scheme is VotingScheme.OUTPUT_HW:
        return 0  # overlapped with the output transfer
    if plan.scheme is VotingScheme.INTERMEDIATE_HW:
        return c.v_hw
    if plan.scheme is VotingScheme.INTERMEDIATE_SW_MIDDLE:
        return c.v_sw + c.prop_hop_cycles  # middle replica is one hop from the others
    return c.v_sw + c.prop_hop_cycles * (plan.replicas - 1)  # farthest replicas exchange


def unprotected_cycles(loop: LoopSpec) -> int:
    return (loop.N + loop.T - 1) * loop.iteration_cycles


def fault_free_cycles(program: ReplicatedProgram) -> int:
    voted = len(program.voted_iterations())
    return unprotected_cycles(program.loop) + voted * vote_cost(program.plan)


@dataclass
class OverheadReport:
    timing_overhead_fraction: float
    voter_fu_count: int
    extra_pes: int
    claimed_pes: int


def overhead_report(program: ReplicatedProgram, plan: Optional[ReplicationPlan] = None) -> OverheadReport:
    plan = plan or program.plan
    base = unprotected_cycles(program.loop)
    prot = fault_free_cycles(program)
    claimed = plan.replicas * program.loop.T
    return OverheadReport(
        timing_overhead_fraction=(prot - base) / base,
        voter_fu_count=len(plan.voter_pes),
        extra_pes=claimed - program.loop.T,
        claimed_pes=claimed,
    )


# -- execution -------------------------------------------------------------


@dataclass
class FTStats:
    injected: int = 0
    detected: int = 0
    corrected: int = 0
    silent: int = 0
    halts: int = 0
    rewinds: dict = field(default_factory=dict)
    migrations: int = 0
    timing_overhead_fraction: float = 0.0
    voter_fu_count: int = 0
    cycles: int = 0
    unprotected_cycles: int = 0
    aborted: bool = False
    votes: dict = field(default_factory=dict)
    log: list = field(default_factory=list)  # (cycle offset, text)

    def as_dict(self) -> dict:
        return {
            "injected": self.injected,
            "detected": self.detected,
            "corrected": self.corrected,
            "silent": self.silent,
            "halts": self.halts,
            "rewinds": dict(sorted(self.rewinds.items())),
            "migrations": self.migrations,
            "timing_overhead_fraction": self.timing_overhead_fraction,
            "voter_fu_count": self.voter_fu_count,
            "cycles": self.cycles,
            "unprotected_cycles": self.unprotected_cycles,
            "aborted": self.aborted,
            "votes": dict(sorted(self.votes.items())),
        }


def rewind_to(i: int, loop: LoopSpec, target: RewindTarget) -> int:
    if target is RewindTarget.PREVIOUS_ITERATION:
        return i
    if target is RewindTarget.BUFFER_START:
        return i - i % loop.buffer_size
    if target is RewindTarget.FRAME_START:
        return i - i % loop.frame_size
    raise ValueError("halt has no rewind point")


Migrator = Callable[[ReplicationPlan, set], Optional[tuple]]


def array_migrator(array: ArrayState, params: Optional[ProtocolParams] = None, gate=None) -> Migrator:
    """Migration through real retreat / quarantine / re-invade on ``array``."""

    def migrate(plan: ReplicationPlan, implicated: set):
        latency = 0
        for claim in plan.replica_claims:
            latency = max(latency, retreat(array, claim, params, gate))
        for r in sorted(implicated):
            for c in plan.replica_claims[r].pes:
                array.pe(c).quarantined = True
        loop_T = len(plan.replica_claims[0].pes)
        req = plan.request or InvadeRequest(plan.replica_claims[0].app_id, Linear(loop_T), plan.mode)
        try:
            fresh = plan_replication(req, LoopSpec(taps=[0] * loop_T, input=[0] * loop_T), array, plan.scheme,
                                     plan.policy, plan.vote_every, plan.voted_vars, plan.costs, params, gate)
        except InsufficientResources:
            return None
        latency += max(c.total_latency for c in fresh.replica_claims)
        latency += infect_cycles(loop_T, params)
        return fresh, latency

    return migrate


def execute_with_faults(program: ReplicatedProgram, faults, policy: Optional[RecoveryPolicy] = None,
                        array: Optional[ArrayState] = None, params: Optional[ProtocolParams] = None,
                        gate=None, migrator: Optional[Migrator] = None) -> tuple:
    """Run the replicated kernel, injecting ``faults``; returns (outputs, FTStats).

    ``outputs[i]`` is None where the result is invalid after a fail-safe stop.
    """
    loop, plan = program.loop, program.plan
    policy = _effective_policy(policy, loop, []) if policy is not None else plan.policy
    faults = list(faults)
    R, T, N, mask = plan.replicas, loop.T, loop.N, loop.mask
    for f in faults:
        f.validate(loop, R)
    if migrator is None and array is not None:
        migrator = array_migrator(array, params, gate)
    golden = golden_fir(loop)
    taps, x = loop.taps, loop.input
    mid = plan.voting_replica
    partials = plan.voted_vars is VotedVars.OUTPUTS_AND_PARTIALS
    resync_all = plan.scheme in (VotingScheme.INTERMEDIATE_SW_MIDDLE, VotingScheme.INTERMEDIATE_SW_ALL)
    cost = vote_cost(plan)

    by_site = {}
    for fid, f in enumerate(faults):
        by_site.setdefault((f.iteration, f.target, f.pe_offset), []).append(fid)
    home = {fid: plan.replica_claims[f.replica].pes[f.pe_offset] for fid, f in enumerate(faults)}
    fired = set()
    detected, corrected = set(), set()

    stats = FTStats(voter_fu_count=len(plan.voter_pes), unprotected_cycles=unprotected_cycles(loop))
    outputs = [None] * N
    out_detected = [False] * N
    cycles = (T - 1) * loop.iteration_cycles
    streak_key, streak, streak_deviants = None, 0, set()

    def inject(i, target, p, vals, taint):
        for fid in by_site.get((i, target, p), ()):
            f = faults[fid]
            if f.recurring:
                if plan.replica_claims[f.replica].pes[f.pe_offset] != home[fid]:
                    continue
            elif fid in fired:
                continue
            fired.add(fid)
            vals[f.replica] ^= 1 << f.bit
            taint[f.replica] = taint[f.replica] | {fid}

    def count_vote(outcome):
        name = type(outcome).__name__
        stats.votes[name] = stats.votes.get(name, 0) + 1

    def apply_vote(i, var, vals, taint, deviants):
        """Vote at one point; returns the outcome (values updated in place)."""
        outcome = vote(vals, plan.mode)
        count_vote(outcome)
        if isinstance(outcome, Mismatch):
            for t in taint:
                detected.update(t)
            stats.log.append((cycles, f"vote it={i} var={var} outcome=Mismatch values={list(vals)}"))
            return outcome
        if isinstance(outcome, Corrected):
            bad = outcome.faulty_replica
            detected.update(taint[bad])
            corrected.update(taint[bad])
            deviants.add(bad)
            stats.log.append((cycles, f"vote it={i} var={var} outcome=Corrected value={outcome.value} deviant={bad}"))
            good = set().union(*(taint[r] for r in range(R) if vals[r] == outcome.value))
            targets = range(R) if resync_all else (mid,)
            for r in targets:
                vals[r] = outcome.value
                taint[r] = good
        return outcome

    i = 0
    while i < N:
        voted = is_voted_iteration(i, plan.vote_every)
        vals = [0] * R
        taint = [frozenset()] * R
        deviants = set()
        failure = None
        for p in range(T):
            xi = x[i - p] if i - p >= 0 else 0
            for r in range(R):
                vals[r] = (vals[r] + taps[p] * xi) & mask
            inject(i, FaultTarget.PARTIAL_SUM, p, vals, taint)
            if voted and partials:
                if isinstance(apply_vote(i, f"p{p}", vals, taint, deviants), Mismatch):
                    failure = f"p{p}"
                    break
        if failure is None:
            inject(i, FaultTarget.OUTPUT, T - 1, vals, taint)
            if voted:
                outcome = apply_vote(i, "out", vals, taint, deviants)
                if isinstance(outcome, Mismatch):
                    failure = "out"
                else:
                    final, final_taint = outcome.value, taint[mid]
            else:
                final, final_taint = vals[mid], taint[mid]
        cycles += loop.iteration_cycles + (cost if voted else 0)

        if failure is None:
            outputs[i] = final
            out_detected[i] = bool(final_taint & detected)
            if streak_key is not None and streak_key[0] == i:
                streak_key, streak, streak_deviants = None, 0, set()
            i += 1
            continue

        # fail-safe halt, then rewind or migrate
        stats.halts += 1
        out_detected[i] = True
        key = (i, failure)
        if key == streak_key:
            streak += 1
        else:
            streak_key, streak, streak_deviants = key, 1, set()
        streak_deviants |= deviants
        if policy.rewind_target is RewindTarget.HALT:
            stats.log.append((cycles, f"halt it={i}"))
            stats.aborted = True
            break
        if streak >= policy.migrate_threshold:
            implicated = streak_deviants if plan.mode is Reliability.TMR and streak_deviants else set(range(R))
            result = migrator(plan, implicated) if migrator else None
            if result is None:
                stats.log.append((cycles, f"migrate it={i} failed: no resources"))
                stats.aborted = True
                break
            plan, latency = result
            program = ReplicatedProgram(loop, plan, program.schedules, program.vote_points, program.operation)
            stats.migrations += 1
            cycles += latency
            stats.log.append((cycles, f"migrate it={i} replicas={sorted(implicated)} latency={latency}"))
            streak_key, streak, streak_deviants = None, 0, set()
        j = rewind_to(i, loop, policy.rewind_target)
        name = policy.rewind_target.value
        stats.rewinds[name] = stats.rewinds.get(name, 0) + 1
        stats.log.append((cycles, f"rewind it={i} target={name} to={j}"))
        cycles += (T - 1) * loop.iteration_cycles
        i = j

    stats.injected = len(fired)
    stats.detected = len(detected)
    stats.corrected = len(corrected)
    stats.silent = sum(
        1 for k in range(N) if outputs[k] is not None and outputs[k] != golden[k] and not out_detected[k]
    )
    stats.cycles = cycles
    stats.timing_overhead_fraction = (cycles - stats.unprotected_cycles) / stats.unprotected_cycles
    return outputs, stats


# -- fault sweeps ----------------------------------------------------------


def single_faults(loop: LoopSpec, replicas: int, target: FaultTarget = FaultTarget.PARTIAL_SUM) -> list:
    positions = range(loop.T) if target is FaultTarget.PARTIAL_SUM else (loop.T - 1,)
    return [
        FaultEvent(i, r, p, target, b)
        for i in range(loop.N)
        for r in range(replicas)
        for p in positions
        for b in range(loop.word_bits)
    ]


def classify(outputs: list, stats: FTStats, golden: list) -> str:
    """One word per run: silent, corrected, detected, aborted or masked."""
    if stats.silent:
        return "silent"
    if stats.aborted or any(o is None for o in outputs):
        return "aborted"
    if outputs != golden:
        return "silent"
    if stats.corrected:
        return "corrected"
    if stats.detected:
        return "detected"
    return "masked"


def fault_sweep(loop: LoopSpec, mode: Reliability, scheme, fault_lists, policy=None, **plan_kw) -> dict:
    """Run each fault list on a detached plan; returns {classification: count}."""
    plan = detached_plan(mode, loop, scheme, policy=policy, **plan_kw)
    program = replicate_loop(loop, plan)
    golden = golden_fir(loop)
    counts = {}
    for faults in fault_lists:
        outputs, stats = execute_with_faults(program, faults)
        k = classify(outputs, stats, golden)
        counts[k] = counts.get(k, 0) + 1
    return counts


def silent_set(loop: LoopSpec, scheme, fault_lists, mode: Reliability = Reliability.TMR, **plan_kw) -> set:
    """Indices of fault lists that end in silent corruption under ``scheme``."""
    plan = detached_plan(mode, loop, scheme, **plan_kw)
    program = replicate_loop(loop, plan)
    golden = golden_fir(loop)
    out = set()
    for k, faults in enumerate(fault_lists):
        outputs, stats = execute_with_faults(program, faults)
        if classify(outputs, stats, golden) == "silent":
            out.add(k)
    return out
