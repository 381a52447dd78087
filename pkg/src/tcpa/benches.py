"""Built-in experiments: speedup, energy/grouping, fault tolerance, validation.

Each bench reads a shipped scenario (see ``tcpa/scenarios``), applies the
caller's overrides and returns plain rows plus a list of threshold checks.
A check is ``(name, passed, detail, enforced)``; only enforced checks decide
the exit status under ``--strict``.
"""

from __future__ import annotations

import itertools
import math
from importlib import resources

from .array_model import ArrayConfig, ICtrlKind, build_array
from .engine import run, trace_text
from .fault_tolerance import (
    FaultEvent,
    FaultTarget,
    LoopSpec,
    VotingScheme,
    classify,
    detached_plan,
    execute_with_faults,
    golden_fir,
    overhead_report,
    replicate_loop,
    silent_set,
    single_faults,
)
from .fuzz import fuzz
from .invasion import InvadeRequest, Linear, Reliability, invade, linear_latency
from .scenario import InvadeAction, load_scenario

SPEEDUP_SIZES = (4, 8, 16, 64, 256)
SPEEDUP_ENVELOPE = (2.6, 45.0)
GROUPINGS = (1, 4, "row", "array")
SAVINGS_TARGET = 0.70
ESTIMATE_TOLERANCE = 0.036
UTILIZATION_CEILING = 0.25


def scenario_text(name: str) -> str:
    """Text of a shipped scenario (``demo``, ``energy_low_util``, ...)."""
    if not name.endswith(".toml"):
        name += ".toml"
    return (resources.files("tcpa") / "scenarios" / name).read_text()


def shipped_scenarios() -> list:
    return sorted(p.name for p in (resources.files("tcpa") / "scenarios").iterdir() if p.name.endswith(".toml"))


def array_for(n: int) -> tuple:
    """Most square rows x cols (rows <= cols) holding exactly n PEs."""
    r = max(d for d in range(1, math.isqrt(n) + 1) if n % d == 0)
    return r, n // r


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def format_table(rows: list, columns: list) -> str:
    cells = [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[k]) for row in cells]) for k, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


# -- speedup ---------------------------------------------------------------


def speedup_bench(overrides=(), sizes=SPEEDUP_SIZES, kinds=("fsm", "programmable")) -> tuple:
    """Distributed vs. centralized claim cycles for Linear{n} on n-PE arrays.

    The envelope is enforced for the FSM controller; programmable-controller
    rows are reported for comparison.
    """
    template = scenario_text("speedup")
    rows, checks = [], []
    lo, hi = SPEEDUP_ENVELOPE
    for kind in kinds:
        for n in sizes:
            r, c = array_for(n)
            sets = [f"array.rows={r}", f"array.cols={c}", f'array.ictrl_kind="{kind}"', f"events.0.count={n}"]
            sc = load_scenario(template, sets + list(overrides))
            metrics, _ = run(sc)
            app = next(iter(metrics.apps.values()))
            hop = sc.array.hop_latency
            closed = linear_latency(n, hop, sc.protocol.seed_select_cycles)
            central = sc.protocol.c_fixed + sc.protocol.c_per_pe * app.granted
            speedup = metrics.apps[app.app_id].speedup_vs_centralized or 0.0
            inside = lo <= speedup <= hi
            rows.append({
                "kind": kind, "size": n, "array": f"{r}x{c}", "granted": app.granted,
                "distributed_cycles": app.total_latency, "closed_form": closed,
                "centralized_cycles": central, "speedup": speedup,
                "in_envelope": inside,
            })
            enforced = kind == ICtrlKind.FSM.value
            checks.append((f"speedup {kind} n={n} in [{lo}, {hi}]", inside, f"{speedup:.3f}", enforced))
            checks.append((f"latency {kind} n={n} equals closed form", app.total_latency == closed,
                           f"{app.total_latency} vs {closed}", True))
    return rows, checks


SPEEDUP_COLUMNS = ["kind", "size", "array", "granted", "distributed_cycles", "closed_form",
                   "centralized_cycles", "speedup", "in_envelope"]


# -- energy ----------------------------------------------------------------


def _size_literal(g) -> str:
    return f'"{g}"' if isinstance(g, str) else str(g)


def energy_bench(overrides=(), groupings=GROUPINGS) -> tuple:
    """Savings and analytic-model error over iCtrl groupings on the low-utilization workload."""
    template = scenario_text("energy_low_util")
    rows, checks = [], []
    for g in groupings:
        sc = load_scenario(template, [f"power.ictrl_domain_size={_size_literal(g)}"] + list(overrides))
        m, _ = run(sc)
        e = m.energy
        rows.append({
            "ictrl_domain_size": g, "pe_domain_size": sc.power.pe_domain_size,
            "mean_utilization": m.mean_utilization, "e_total": e.e_total, "e_baseline": e.e_baseline,
            "savings_fraction": e.savings_fraction, "analytic_estimate": e.analytic_estimate,
            "estimate_error": e.estimate_error, "stall_cycles": e.stall_cycles,
            "toggles_ictrl": e.toggles["ictrl"], "toggles_pe": e.toggles["pe"],
        })
        checks.append((f"analytic error ictrl={g} <= {ESTIMATE_TOLERANCE}", e.estimate_error <= ESTIMATE_TOLERANCE,
                       f"{e.estimate_error:.5f}", True))
    fine = [r for r in rows if r["ictrl_domain_size"] == 1]
    if fine:
        r = fine[0]
        checks.append((f"savings at fine grouping >= {SAVINGS_TARGET}", r["savings_fraction"] >= SAVINGS_TARGET,
                       f"{r['savings_fraction']:.4f}", True))
        checks.append((f"mean PE utilization <= {UTILIZATION_CEILING}", r["mean_utilization"] <= UTILIZATION_CEILING,
                       f"{r['mean_utilization']:.4f}", True))
    return rows, checks


ENERGY_COLUMNS = ["ictrl_domain_size", "pe_domain_size", "mean_utilization", "e_total", "e_baseline",
                  "savings_fraction", "analytic_estimate", "estimate_error", "stall_cycles",
                  "toggles_ictrl", "toggles_pe"]


def grouping_bench(overrides=(), groupings=GROUPINGS) -> tuple:
    """Energy and toggles on the mixed workload, iCtrl and PE domains grouped alike.

    Energy ordering is checked with free switching (e_switch = d_switch = 0),
    toggle ordering with the workload's own switching costs.
    """
    template = scenario_text("mixed_workload")
    rows, checks = [], []
    for free in (True, False):
        costs = ["power.e_switch=0", "power.d_switch=0"] if free else []
        for g in groupings:
            lit = _size_literal(g)
            sets = [f"power.ictrl_domain_size={lit}", f"power.pe_domain_size={lit}"] + costs
            m, _ = run(load_scenario(template, sets + list(overrides)))
            e = m.energy
            rows.append({
                "switching": "free" if free else "default", "domain_size": g, "e_total": e.e_total,
                "toggles": sum(e.toggles.values()), "stall_cycles": e.stall_cycles,
                "estimate_error": e.estimate_error,
            })
    free_e = [r["e_total"] for r in rows if r["switching"] == "free" and r["domain_size"] in (1, 4, "row")]
    if len(free_e) == 3:
        ok = free_e[0] <= free_e[1] <= free_e[2]
        checks.append(("energy(1) <= energy(4) <= energy(row), free switching", ok,
                       " <= ".join(f"{x:.0f}" for x in free_e), True))
    toggles = [r["toggles"] for r in rows if r["switching"] == "default"]
    ok = all(a >= b for a, b in zip(toggles, toggles[1:]))
    checks.append(("toggles non-increasing with domain size", ok, " >= ".join(map(str, toggles)), True))
    return rows, checks


GROUPING_COLUMNS = ["switching", "domain_size", "e_total", "toggles", "stall_cycles", "estimate_error"]


# -- fault tolerance -------------------------------------------------------


def ft_loop(overrides=()) -> LoopSpec:
    sc = load_scenario(scenario_text("ft_tmr"), list(overrides))
    for ev in sc.events:
        if isinstance(ev.action, InvadeAction) and ev.action.loop is not None:
            return ev.action.loop
    raise ValueError("ft_tmr scenario has no loop")


def coverage(loop: LoopSpec, mode: Reliability, scheme, fault_lists, **plan_kw) -> dict:
    plan = detached_plan(mode, loop, scheme, **plan_kw)
    program = replicate_loop(loop, plan)
    golden = golden_fir(loop)
    counts = {"runs": 0, "masked": 0, "corrected": 0, "detected": 0, "aborted": 0, "silent": 0}
    for faults in fault_lists:
        outputs, stats = execute_with_faults(program, faults)
        counts[classify(outputs, stats, golden)] += 1
        counts["runs"] += 1
    ov = overhead_report(program)
    counts["timing_overhead"] = ov.timing_overhead_fraction
    counts["voter_fus"] = ov.voter_fu_count
    counts["extra_pes"] = ov.extra_pes
    return counts


def small_loop() -> LoopSpec:
    """The instance used for the two-fault brute force: T=3, N=4, 4-bit words."""
    return LoopSpec(taps=[1, 2, 3], input=[1, 2, 3, 4], word_bits=4)


def crafted_pair(loop: LoopSpec):
    """Two faults that out-vote the correct replica at the output only.

    The voting replica flips bit ``b`` at PE 0 and replica 0 flips the same
    bit at PE 1 of the same iteration, both turning a 0 bit into a 1 (+2**b).
    Returns the first such pair or None.
    """
    mid = 1
    for i in range(loop.N):
        s0 = loop.taps[0] * loop.input[i] & loop.mask
        s1 = (s0 + (loop.taps[1] * loop.input[i - 1] if i >= 1 else 0)) & loop.mask
        for b in range(loop.word_bits):
            if not s0 >> b & 1 and not s1 >> b & 1:
                return [FaultEvent(i, mid, 0, FaultTarget.PARTIAL_SUM, b), FaultEvent(i, 0, 1, FaultTarget.PARTIAL_SUM, b)]
    return None


def ft_run(overrides=(), pairs: bool = True) -> tuple:
    loop = ft_loop(overrides)
    rows, checks = [], []
    faults = [[f] for f in single_faults(loop, 3)]
    for scheme in VotingScheme:
        c = coverage(loop, Reliability.TMR, scheme, faults, vote_every=1)
        rows.append({"mode": "tmr", "scheme": scheme.value, **c})
        if scheme is not VotingScheme.OUTPUT_HW:
            ok = c["corrected"] == c["runs"]
            checks.append((f"TMR {scheme.value}: every single fault corrected", ok,
                           f"{c['corrected']}/{c['runs']}", True))
    dmr_faults = [[f] for f in single_faults(loop, 2)]
    for scheme in VotingScheme:
        c = coverage(loop, Reliability.DMR, scheme, dmr_faults, vote_every=1)
        rows.append({"mode": "dmr", "scheme": scheme.value, **c})
        caught = c["detected"] + c["corrected"]
        checks.append((f"DMR {scheme.value}: every single fault detected, none silent",
                       caught == c["runs"] and c["silent"] == 0, f"{caught}/{c['runs']}, silent {c['silent']}", True))
    if pairs:
        small = small_loop()
        singles = single_faults(small, 3)
        combos = [list(p) for p in itertools.combinations(singles, 2)]
        s_a = silent_set(small, VotingScheme.OUTPUT_HW, combos)
        s_c = silent_set(small, VotingScheme.INTERMEDIATE_HW, combos)
        checks.append(("two-fault silent set of 4c is a strict subset of 4a's", s_c < s_a,
                       f"|4c|={len(s_c)} |4a|={len(s_a)} of {len(combos)}", True))
        case = crafted_pair(small)
        ok = False
        if case is not None:
            ok = silent_set(small, "4a", [case]) == {0} and _classify_one(small, "4c", case) == "corrected"
        detail = "none found" if case is None else "; ".join(
            f"it={f.iteration} replica={f.replica} pe={f.pe_offset} bit={f.bit}" for f in case)
        checks.append(("crafted pair silent under 4a, corrected under 4c", ok, detail, True))
    return rows, checks


def _classify_one(loop, scheme, faults, mode=Reliability.TMR) -> str:
    program = replicate_loop(loop, detached_plan(mode, loop, scheme))
    outputs, stats = execute_with_faults(program, faults)
    return classify(outputs, stats, golden_fir(loop))


FT_COLUMNS = ["mode", "scheme", "runs", "corrected", "detected", "masked", "aborted", "silent",
              "timing_overhead", "voter_fus", "extra_pes"]


# -- validate --------------------------------------------------------------


def validate(fuzz_count: int = 300, seed: int = 0) -> list:
    checks = []
    # closed-form latencies on a fresh array
    bad = []
    for kind in ICtrlKind:
        for n in range(1, 17):
            state = build_array(ArrayConfig(rows=4, cols=4, ictrl_kind=kind))
            claim = invade(state, InvadeRequest(1, Linear(n)))
            if claim.total_latency != linear_latency(n, state.config.hop_latency):
                bad.append((kind.value, n))
    checks.append(("Linear{n} latency closed form, n=1..16", not bad, str(bad or "exact"), True))
    # shipped scenarios: invariants every cycle, determinism
    for name in shipped_scenarios():
        text = scenario_text(name)
        m1, t1 = run(load_scenario(text), check_invariants=True)
        m2, t2 = run(load_scenario(text))
        checks.append((f"{name}: invariants hold every cycle", not m1.invariant_violations,
                       (m1.invariant_violations or ["none"])[0], True))
        same = m1.to_json() == m2.to_json() and trace_text(t1) == trace_text(t2)
        checks.append((f"{name}: deterministic", same, "", True))
    rep = fuzz(fuzz_count, seed)
    checks.append((f"protocol fuzz x{fuzz_count}", rep.ok,
                   (rep.examples or [f"{rep.claims} claims, {rep.retreats} retreats"])[0], True))
    # FT oracle on a small instance: every single fault corrected under 4c
    small = small_loop()
    c = coverage(small, Reliability.TMR, "4c", [[f] for f in single_faults(small, 3)])
    checks.append(("small TMR 4c single-fault sweep", c["corrected"] == c["runs"], f"{c['corrected']}/{c['runs']}", True))
    return checks


def failed(checks) -> list:
    return [c for c in checks if c[3] and not c[1]]


def format_checks(checks) -> str:
    out = []
    for name, ok, detail, enforced in checks:
        tag = "PASS" if ok else ("FAIL" if enforced else "WARN")
        out.append(f"{tag}  {name}" + (f"  [{detail}]" if detail else ""))
    return "\n".join(out)

