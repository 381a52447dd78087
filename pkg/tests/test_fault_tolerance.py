import logging

import hypothesis.strategies as st
import pytest
from hypothesis import given, settings

from tcpa.array_model import ArrayConfig, build_array
from tcpa.invasion import InvadeRequest, Linear, Reliability
from tcpa.fault_tolerance import (
    Corrected,
    FaultEvent,
    FaultTarget,
    InsufficientResources,
    LoopSpec,
    Match,
    Mismatch,
    RecoveryPolicy,
    RewindTarget,
    VoteCosts,
    VotedVars,
    VotingScheme,
    array_migrator,
    classify,
    detached_plan,
    execute_with_faults,
    golden_fir,
    overhead_report,
    plan_replication,
    replicate_loop,
    single_faults,
    vote,
)

SCHEMES = list(VotingScheme)


def fir_oracle(taps, xs, bits):
    # full convolution truncated to len(xs), then masked
    full = [0] * (len(xs) + len(taps))
    for j, a in enumerate(taps):
        for k, x in enumerate(xs):
            full[j + k] += a * x
    return [v % (1 << bits) for v in full[: len(xs)]]


def loop16(**kw):
    return LoopSpec(taps=[7, 3, 5, 2], input=list(range(1, 17)), **kw)


def run(mode, scheme, faults, loop=None, **kw):
    loop = loop or loop16()
    program = replicate_loop(loop, detached_plan(mode, loop, scheme, **kw))
    return execute_with_faults(program, faults)


# -- vote --------------------------------------------------------------------


def test_vote_examples():
    assert vote([5, 5, 5], Reliability.TMR) == Match(5)
    assert vote([5, 9, 5], Reliability.TMR) == Corrected(5, 1)
    assert vote([5, 9], Reliability.DMR) == Mismatch((5, 9))
    assert vote([5, 9, 7], Reliability.TMR) == Mismatch((5, 9, 7))
    assert vote([4, 4], Reliability.DMR) == Match(4)


def test_vote_arity():
    with pytest.raises(ValueError):
        vote([1, 2, 3], Reliability.DMR)
    with pytest.raises(ValueError):
        vote([1, 2], Reliability.TMR)


@settings(derandomize=True, max_examples=200)
@given(st.integers(0, 2**16 - 1), st.integers(0, 2), st.integers(1, 2**16 - 1))
def test_vote_identifies_single_deviant(v, r, flip):
    values = [v] * 3
    values[r] ^= flip
    assert vote(values, Reliability.TMR) == Corrected(v, r)


# -- golden oracle -----------------------------------------------------------


@settings(derandomize=True, max_examples=100)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=5), st.lists(st.integers(0, 300), min_size=5, max_size=20))
def test_golden_matches_oracle(taps, xs):
    loop = LoopSpec(taps=taps, input=xs)
    assert golden_fir(loop) == fir_oracle(taps, xs, 16)


def test_loop_validation():
    with pytest.raises(ValueError):
        LoopSpec(taps=[], input=[1]).validate()
    with pytest.raises(ValueError):
        LoopSpec(taps=[1, 2, 3], input=[1, 2]).validate()
    with pytest.raises(ValueError):
        LoopSpec(taps=[1], input=list(range(16)), frame_size=16, buffer_size=5).validate()


# -- planning ----------------------------------------------------------------


def test_plan_tmr_on_8x8():
    array = build_array(ArrayConfig(rows=8, cols=8))
    plan = plan_replication(InvadeRequest(1, Linear(4), Reliability.TMR), loop16(), array, "4a")
    chains = plan.chains()
    assert len(chains) == 3 and all(len(c) == 4 for c in chains)
    assert len({c for chain in chains for c in chain}) == 12
    assert len(plan.voter_pes) == 1
    assert plan.voter_pes == {chains[1][-1]}


@pytest.mark.parametrize("rows,cols", [(4, 2), (2, 4)])
def test_plan_dmr_fills_small_array(rows, cols):
    array = build_array(ArrayConfig(rows=rows, cols=cols))
    plan = plan_replication(InvadeRequest(1, Linear(4), Reliability.DMR), loop16(), array, "4c")
    assert len(plan.chains()) == 2
    assert sum(pe.owner is not None for pe in array.pes()) == 8


@pytest.mark.parametrize("rows,cols", [(4, 2), (2, 4)])
def test_plan_tmr_on_small_array_rolls_back(rows, cols):
    array = build_array(ArrayConfig(rows=rows, cols=cols))
    with pytest.raises(InsufficientResources):
        plan_replication(InvadeRequest(1, Linear(4), Reliability.TMR), loop16(), array, "4c")
    assert all(pe.owner is None for pe in array.pes())
    assert all(pe.ictrl.app is None for pe in array.pes())


def test_plan_requires_replication():
    with pytest.raises(ValueError):
        plan_replication(InvadeRequest(1, Linear(4)), loop16(), build_array(ArrayConfig()), "4a")


def test_output_voting_scheme_rejects_partials():
    with pytest.raises(ValueError):
        detached_plan(Reliability.TMR, loop16(), "4a", voted_vars=VotedVars.OUTPUTS_AND_PARTIALS)


def test_costs_must_respect_hw_le_sw():
    with pytest.raises(ValueError):
        detached_plan(Reliability.TMR, loop16(), "4c", costs=VoteCosts(v_hw=9, v_sw=8))


def test_scheme_parse():
    assert VotingScheme.parse("4c") is VotingScheme.INTERMEDIATE_HW
    assert VotingScheme.parse("intermediate_sw_all") is VotingScheme.INTERMEDIATE_SW_ALL
    with pytest.raises(ValueError):
        VotingScheme.parse("4e")


# -- replicate_loop ----------------------------------------------------------


def test_vote_counts_every_iteration():
    program = replicate_loop(loop16(), detached_plan(Reliability.TMR, loop16(), "4c"))
    assert program.output_votes == 16
    assert program.partial_votes == 16 * 4
    assert program.operation == "majority"
    assert len(program.schedules) == 3


def test_vote_every_n_outputs_only():
    program = replicate_loop(loop16(), detached_plan(Reliability.TMR, loop16(), "4a", vote_every=16))
    assert program.voted_iterations() == [15]
    assert program.partial_votes == 0 and program.output_votes == 1


def test_dmr_compares():
    program = replicate_loop(loop16(), detached_plan(Reliability.DMR, loop16(), "4c"))
    assert program.operation == "compare"
    assert len(program.schedules) == 2


# -- execute_with_faults -----------------------------------------------------


def test_tmr_4c_single_fault_corrected():
    loop = loop16()
    outputs, stats = run(Reliability.TMR, "4c", [FaultEvent(7, 0, 1, FaultTarget.PARTIAL_SUM, 3)], loop)
    assert outputs == fir_oracle(loop.taps, loop.input, 16)
    assert stats.corrected == 1 and stats.silent == 0
    assert any("it=7" in text and "Corrected" in text for _, text in stats.log)


def test_dmr_single_fault_one_rewind():
    loop = loop16(buffer_size=4)
    outputs, stats = run(Reliability.DMR, "4c", [FaultEvent(6, 1, 2, FaultTarget.PARTIAL_SUM, 5)], loop)
    assert stats.detected == 1 and stats.corrected == 0
    assert stats.rewinds == {"buffer_start": 1}
    assert outputs == fir_oracle(loop.taps, loop.input, 16)
    assert any("rewind it=6 target=buffer_start to=4" in text for _, text in stats.log)


def test_halt_policy_aborts():
    loop = loop16()
    plan = detached_plan(Reliability.DMR, loop, "4c", policy=RecoveryPolicy(RewindTarget.HALT))
    outputs, stats = execute_with_faults(replicate_loop(loop, plan), [FaultEvent(5, 0, 0)])
    assert stats.aborted and outputs[5:] == [None] * 11
    assert classify(outputs, stats, golden_fir(loop)) == "aborted"


def test_previous_iteration_falls_back(caplog):
    with caplog.at_level(logging.WARNING):
        plan = detached_plan(Reliability.TMR, loop16(), "4c",
                             policy=RecoveryPolicy(RewindTarget.PREVIOUS_ITERATION))
    assert plan.policy.rewind_target is RewindTarget.BUFFER_START
    assert plan.warnings and "unsafe" in plan.warnings[0]
    single_tap = LoopSpec(taps=[3], input=[1, 2, 3, 4])
    plan1 = detached_plan(Reliability.TMR, single_tap, "4c", policy=RecoveryPolicy(RewindTarget.PREVIOUS_ITERATION))
    assert plan1.policy.rewind_target is RewindTarget.PREVIOUS_ITERATION


def test_fault_out_of_range_rejected():
    with pytest.raises(ValueError):
        run(Reliability.TMR, "4c", [FaultEvent(16, 0, 0)])
    with pytest.raises(ValueError):
        run(Reliability.DMR, "4c", [FaultEvent(0, 2, 0)])
    with pytest.raises(ValueError):
        run(Reliability.TMR, "4c", [FaultEvent(0, 0, 0, bit=16)])


def test_output_only_voting_misses_what_4c_corrects():
    # iteration 0: p0 = 7*1 = 0b0111 and p1 = p0 + 3*0, so bit 3 is clear in both partial sums.
    # the voting replica flips it at PE 0 and replica 0 at PE 1: both outputs come out +8
    loop = loop16()
    faults = [FaultEvent(0, 1, 0, bit=3), FaultEvent(0, 0, 1, bit=3)]
    golden = fir_oracle(loop.taps, loop.input, 16)
    out_a, stats_a = run(Reliability.TMR, "4a", faults, loop)
    assert out_a[0] == golden[0] + 8
    assert classify(out_a, stats_a, golden) == "silent"
    out_c, stats_c = run(Reliability.TMR, "4c", faults, loop)
    assert out_c == golden and stats_c.corrected == 2


def test_cost_ordering_and_overheads():
    loop = loop16()
    overhead = {}
    for s in SCHEMES:
        kw = {"voted_vars": VotedVars.OUTPUTS_ONLY} if s is VotingScheme.OUTPUT_HW else {}
        program = replicate_loop(loop, detached_plan(Reliability.TMR, loop, s, **kw))
        overhead[s.value] = overhead_report(program).timing_overhead_fraction
    assert overhead["4a"] <= overhead["4c"] <= overhead["4b"] <= overhead["4d"]
    assert overhead["4d"] > overhead["4c"]


def test_output_only_hardware_voting_has_no_timing_overhead():
    loop = loop16()
    program = replicate_loop(loop, detached_plan(Reliability.TMR, loop, "4a", vote_every=16))
    assert overhead_report(program).timing_overhead_fraction == 0.0


def test_replica_pe_counts():
    loop = loop16()
    tmr = overhead_report(replicate_loop(loop, detached_plan(Reliability.TMR, loop, "4c")))
    dmr = overhead_report(replicate_loop(loop, detached_plan(Reliability.DMR, loop, "4c")))
    assert tmr.claimed_pes * 2 == dmr.claimed_pes * 3
    assert (tmr.extra_pes, dmr.extra_pes) == (8, 4)


def _migration_case(faults):
    array = build_array(ArrayConfig(rows=8, cols=8, seed_candidates=[(r, 0) for r in range(8)]))
    loop = loop16()
    plan = plan_replication(InvadeRequest(1, Linear(4), Reliability.TMR), loop, array, "4c",
                            policy=RecoveryPolicy(RewindTarget.BUFFER_START, migrate_threshold=2))
    outputs, stats = execute_with_faults(replicate_loop(loop, plan), faults, array=array)
    assert stats.migrations >= 1
    assert outputs == fir_oracle(loop.taps, loop.input, 16)
    quarantined = {pe.coord for pe in array.pes() if pe.quarantined}
    owned = {pe.coord for pe in array.pes() if pe.owner is not None}
    assert not quarantined & owned
    return plan.chains(), quarantined


def test_migration_quarantines_the_deviant_chain():
    # replica 0 is out-voted at p0 (4c resyncs only the voting replica), then replica 2 deviates at p1:
    # three distinct values with replica 0 already identified as the deviant
    chains, quarantined = _migration_case([FaultEvent(5, 0, 0, bit=1, recurring=True),
                                           FaultEvent(5, 2, 1, bit=4, recurring=True)])
    assert quarantined == set(chains[0])


def test_migration_without_a_deviant_quarantines_every_chain():
    chains, quarantined = _migration_case([FaultEvent(5, 0, 1, bit=1, recurring=True),
                                           FaultEvent(5, 2, 1, bit=4, recurring=True)])
    assert quarantined == set(chains[0]) | set(chains[1]) | set(chains[2])


def test_migration_without_resources_aborts():
    array = build_array(ArrayConfig(rows=3, cols=4, seed_candidates=[(0, 0), (1, 0), (2, 0)]))
    loop = loop16()
    plan = plan_replication(InvadeRequest(1, Linear(4), Reliability.TMR), loop, array, "4c",
                            policy=RecoveryPolicy(RewindTarget.BUFFER_START, migrate_threshold=1))
    faults = [FaultEvent(2, 0, 0, bit=1, recurring=True), FaultEvent(2, 1, 0, bit=2, recurring=True)]
    outputs, stats = execute_with_faults(replicate_loop(loop, plan), faults, migrator=array_migrator(array))
    assert stats.aborted
    assert any("no resources" in text for _, text in stats.log)
    assert None in outputs


# -- properties --------------------------------------------------------------

loops = st.builds(
    lambda taps, extra: LoopSpec(taps=taps, input=extra[: max(len(taps), len(extra))] + [1] * (len(taps) - len(extra))),
    st.lists(st.integers(0, 2**16 - 1), min_size=1, max_size=5),
    st.lists(st.integers(0, 2**16 - 1), min_size=1, max_size=12),
)


@settings(derandomize=True, max_examples=100)
@given(loops, st.sampled_from([Reliability.DMR, Reliability.TMR]), st.sampled_from(SCHEMES), st.integers(1, 4))
def test_fault_free_transparency(loop, mode, scheme, every):
    kw = {"vote_every": every}
    if scheme is VotingScheme.OUTPUT_HW:
        kw["voted_vars"] = VotedVars.OUTPUTS_ONLY
    outputs, stats = run(mode, scheme, [], loop, **kw)
    assert outputs == fir_oracle(loop.taps, loop.input, 16)
    assert set(stats.votes) <= {"Match"}
    assert stats.detected == stats.corrected == stats.silent == stats.halts == 0


@settings(derandomize=True, max_examples=150)
@given(st.integers(0, 15), st.integers(0, 2), st.integers(0, 3), st.integers(0, 15),
       st.sampled_from([VotingScheme.INTERMEDIATE_HW, VotingScheme.INTERMEDIATE_SW_MIDDLE,
                        VotingScheme.INTERMEDIATE_SW_ALL]))
def test_single_fault_tmr_correction(it, replica, pe, bit, scheme):
    loop = loop16()
    outputs, stats = run(Reliability.TMR, scheme, [FaultEvent(it, replica, pe, bit=bit)], loop)
    assert outputs == fir_oracle(loop.taps, loop.input, 16)
    assert stats.corrected == 1 and stats.silent == 0


@settings(derandomize=True, max_examples=150)
@given(st.integers(0, 15), st.integers(0, 1), st.integers(0, 3), st.integers(0, 15), st.sampled_from(SCHEMES))
def test_single_fault_dmr_detection(it, replica, pe, bit, scheme):
    loop = loop16()
    kw = {"voted_vars": VotedVars.OUTPUTS_ONLY} if scheme is VotingScheme.OUTPUT_HW else {}
    outputs, stats = run(Reliability.DMR, scheme, [FaultEvent(it, replica, pe, bit=bit)], loop, **kw)
    assert stats.silent == 0 and stats.corrected == 0
    assert stats.detected == 1
    assert outputs == fir_oracle(loop.taps, loop.input, 16)


def test_single_fault_list_size():
    assert len(single_faults(loop16(), 3)) == 16 * 3 * 4 * 16
    assert len(single_faults(loop16(), 2, FaultTarget.OUTPUT)) == 16 * 2 * 16
