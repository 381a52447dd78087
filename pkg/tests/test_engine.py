import json

import hypothesis.strategies as st
import pytest
from hypothesis import given, settings

from tcpa.benches import scenario_text, shipped_scenarios
from tcpa.engine import SWEEP_COLUMNS, derive_seed, rows_to_csv, run, sweep, trace_text
from tcpa.invasion import linear_latency
from tcpa.scenario import ScenarioError, load_scenario

FREE_POWER = """
[power]
d_switch = 0
e_switch = 0.0
"""


def linear_doc(n, kind="fsm", rows=4, cols=4, hold=None, power=FREE_POWER):
    doc = f"""
[array]
rows = {rows}
cols = {cols}
ictrl_kind = "{kind}"
{power}
[[events]]
at = 0
action = "invade"
app_id = 1
strategy = "linear"
count = {n}
auto_retreat = true
"""
    return doc


def test_single_linear4_matches_closed_forms():
    m, _ = run(load_scenario(linear_doc(4)))
    app = m.apps[1]
    assert (app.total_latency, app.invade_latency, app.claim_latency) == (8, 5, 3)
    assert app.retreat_latency == 6
    assert app.speedup_vs_centralized == pytest.approx(22.5)
    assert app.phase == "done"


def test_power_stalls_add_switching_delay_per_hop():
    m, _ = run(load_scenario(linear_doc(4, power="")))
    assert m.apps[1].total_latency == linear_latency(4, 1) + 4 * 10
    assert m.energy.estimate_error < 0.036


@settings(derandomize=True, max_examples=32, deadline=None)
@given(st.integers(1, 16), st.sampled_from(["fsm", "programmable"]))
def test_closed_forms_through_engine(n, kind):
    m, _ = run(load_scenario(linear_doc(n, kind, rows=16, cols=16)))
    hop = 1 if kind == "fsm" else 4
    assert m.apps[1].total_latency == 2 + 2 * hop * (n - 1)


def test_empty_scenario():
    m, trace = run(load_scenario(""))
    assert m.total_cycles == 0 and m.apps == {} and m.energy is None
    assert trace == []


def test_end_event_bounds_the_run():
    m, _ = run(load_scenario(linear_doc(4) + '\n[[events]]\nat = 500\naction = "end"\n'))
    assert m.total_cycles == 500
    assert len(m.utilization) == 500


def test_competing_invades_same_cycle():
    doc = """
[array]
rows = 4
cols = 4

[[events]]
at = 0
action = "invade"
app_id = 1
strategy = "linear"
count = 10

[[events]]
at = 0
action = "invade"
app_id = 2
strategy = "rectangular"
width = 2
height = 2
"""
    m, _ = run(load_scenario(doc), check_invariants=True)
    a, b = m.apps[1], m.apps[2]
    assert a.granted and b.granted
    assert not {c for claim in a.pes for c in claim} & {c for claim in b.pes for c in claim}
    assert m.invariant_violations == []


def test_module_errors_are_recorded_per_app():
    doc = """
[array]
rows = 2
cols = 4

[[events]]
at = 0
action = "invade"
app_id = 1
reliability = "tmr"

[events.loop]
taps = [1, 2, 3, 4]
input_length = 8
"""
    m, _ = run(load_scenario(doc), check_invariants=True)
    assert m.apps[1].phase == "failed"
    assert "InsufficientResources" in m.apps[1].error or "PE" in m.apps[1].error
    assert m.invariant_violations == []


@pytest.mark.parametrize("name", shipped_scenarios())
def test_shipped_scenarios_conserve_power_and_ownership(name):
    m, trace = run(load_scenario(scenario_text(name)), check_invariants=True)
    assert m.invariant_violations == []
    assert all(0.0 <= u <= 1.0 for u in m.utilization)
    cycles = [int(line[:8]) for line in trace]
    assert cycles == sorted(cycles)
    for app in m.apps.values():
        for v in (app.invade_latency, app.claim_latency, app.retreat_latency):
            assert v is None or v >= 0
    if m.energy is not None:
        assert sum(m.energy.e_by_component.values()) == pytest.approx(m.energy.e_total)


@pytest.mark.parametrize("name", shipped_scenarios())
def test_determinism(name):
    text = scenario_text(name)
    m1, t1 = run(load_scenario(text))
    m2, t2 = run(load_scenario(text))
    assert m1.to_json() == m2.to_json()
    assert trace_text(t1) == trace_text(t2)


def test_demo_tmr_app_corrects_its_fault():
    m, trace = run(load_scenario(scenario_text("demo.toml")))
    ft = m.apps[3].ft
    assert ft["corrected"] == 1 and ft["silent"] == 0 and ft["outputs_match_golden"]
    assert any(" ft " in line and "Corrected" in line for line in trace)


def test_metrics_json_shape():
    m, _ = run(load_scenario(scenario_text("demo.toml")))
    data = json.loads(m.to_json())
    assert set(data) == {"apps", "energy", "mean_utilization", "utilization", "total_cycles", "invariant_violations"}
    assert data["utilization"][0][0] == 0
    assert set(data["energy"]["e_by_component"]) == {"pe_on", "pe_off", "ictrl_on", "ictrl_off", "switching"}


def test_trace_line_format():
    _, trace = run(load_scenario(linear_doc(2)))
    for line in trace:
        assert line[:8].strip().isdigit()
        assert line[9:14].strip() in {"app", "proto", "power", "ft"}


# -- sweep -------------------------------------------------------------------


def test_grouping_sweep_three_rows():
    rows = sweep(scenario_text("mixed_workload.toml"), {"power.ictrl_domain_size": [1, 4, "row"]})
    assert [r["power.ictrl_domain_size"] for r in rows] == [1, 4, "row"]
    assert all(r["e_total"] > 0 for r in rows)
    assert rows[0]["stall_cycles"] >= rows[2]["stall_cycles"]


def test_scheme_sweep_over_one_fault_list():
    rows = sweep(scenario_text("ft_tmr.toml"), {"events.*.scheme": ["4a", "4b", "4c", "4d"]})
    assert len(rows) == 4
    overhead = {r["events.*.scheme"]: r["ft_timing_overhead"] for r in rows}
    assert overhead["4a"] <= overhead["4c"] <= overhead["4b"] <= overhead["4d"]


def test_empty_grid_gives_empty_table():
    assert sweep(scenario_text("demo.toml"), {}) == []
    assert rows_to_csv([], []).strip() == ",".join(["index"] + SWEEP_COLUMNS)


def test_invalid_grid_path_fails_before_running():
    with pytest.raises(ScenarioError):
        sweep(scenario_text("demo.toml"), {"power.ictrl_domain_size": [1], "power.bogus": [1]})
    with pytest.raises(ScenarioError):
        sweep(scenario_text("demo.toml"), {"power.ictrl_domain_size": [1, "3x3"]})


def test_sweep_is_independent_of_worker_count():
    grid = {"power.ictrl_domain_size": [1, 4]}
    text = scenario_text("mixed_workload.toml")
    assert sweep(text, grid, workers=1) == sweep(text, grid, workers=2)


def test_derive_seed_is_deterministic_and_spread():
    assert derive_seed(1, 0) == derive_seed(1, 0)
    assert len({derive_seed(1, i) for i in range(100)}) == 100
