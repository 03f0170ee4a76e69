"""Acceptance criteria, one pass/fail line each (see the session summary).

Criteria that miss their bands are left failing on purpose; the numbers are
printed so the gap is visible.
"""

import subprocess
import sys
import time
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, toy_instance
from llrm.errors import InfeasibleError, InfeasibleProblemError
from llrm.ga import GaConfig, best_of_seeds, exhaustive_oracle
from llrm.grid import Branch, Bus, Network
from llrm.market import SCENARIOS, MarketRequest, Mode, curtailment_only_baseline
from llrm.powerflow import max_branch_current, min_voltage, solve

HERE = Path(__file__).parent
SEEDS = range(10)


def record(tag, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def within(value, ref, rel):
    return value is not None and abs(value - ref) <= rel * ref


@pytest.fixture(scope="module")
def runs(inst33):
    """Best-of-10-seeds GA run and baseline per scenario, computed on first use."""
    cache = {}

    def get(name):
        if name not in cache:
            t0 = time.perf_counter()
            best, _ = best_of_seeds(inst33, request=SCENARIOS[name], config=GaConfig(),
                                    seeds=SEEDS)
            elapsed = time.perf_counter() - t0
            try:
                base = curtailment_only_baseline(inst33, request=SCENARIOS[name])
            except InfeasibleError:
                base = None
            cache[name] = (best.solution, base, elapsed)
        return cache[name]

    return get


# -- 1. base power flow -------------------------------------------------------------

def test_c1_base_power_flow(ieee33):
    net = ieee33[0]
    res = solve(net)
    n = 200
    t0 = time.perf_counter()
    for _ in range(n):
        solve(net)
    ms = (time.perf_counter() - t0) / n * 1000
    ok = (net.total_load_kw == 3715.0 and within(res.total_loss_kw, 201.9, 0.02) and ms < 50)
    record("C1 base power flow", ok,
           f"load {net.total_load_kw:g} kW, loss {res.total_loss_kw:.3f} kW "
           f"(201.9 +/-2%), {ms:.3f} ms/solve (<50)")


# -- 2. scenario A ---------------------------------------------------------------------

def test_c2_a_feasible_loss_runtime(runs):
    sol, _, elapsed = runs("A")
    vmin = min_voltage(sol.flow_after)
    loss = sol.flow_after.total_loss_kw
    ok = sol.feasible and vmin >= 0.95 and within(loss, 79.0, 0.15) and elapsed < 300
    record("C2a scenario A feasibility/loss/runtime", ok,
           f"min V {vmin:.5f} (>=0.95), loss {loss:.2f} kW (79 +/-15%), "
           f"10 seeds in {elapsed:.1f} s (<300)")


def test_c2_a_cost(runs):
    sol, _, _ = runs("A")
    record("C2b scenario A cost", within(sol.total_cost, 454.66, 0.15),
           f"${sol.total_cost:.2f} (454.66 +/-15%: [386.46, 522.86])")


def test_c2_a_baseline(runs):
    _, base, _ = runs("A")
    cost = None if base is None else base.total_cost
    record("C2c scenario A baseline", within(cost, 41328.0, 0.20),
           "curtailment-only infeasible (all non-firmed curtailed leaves V_min < 0.95)"
           if cost is None else f"${cost:,.2f} (41,328 +/-20%)")


def test_c2_a_ratio(runs):
    sol, base, _ = runs("A")
    ratio = None if base is None else base.total_cost / sol.total_cost
    record("C2d scenario A cost ratio", ratio is not None and ratio >= 50,
           "no baseline cost to compare" if ratio is None else f"{ratio:.1f}x (>=50x)")


# -- 3. scenario B ---------------------------------------------------------------------

def test_c3_b_market(runs):
    sol, base, _ = runs("B")
    imax = max_branch_current(sol.flow_after)
    loss = sol.flow_after.total_loss_kw
    dominates = base is None or sol.total_cost <= base.total_cost
    ok = (sol.feasible and imax <= 0.04 and within(sol.total_cost, 141.7, 0.20)
          and within(loss, 137.1, 0.15) and dominates)
    record("C3a scenario B market", ok,
           f"max I {imax:.5f} p.u. (<=0.04), cost ${sol.total_cost:.2f} (141.7 +/-20%), "
           f"loss {loss:.2f} kW (137.1 +/-15%)")


def test_c3_b_baseline(runs):
    _, base, _ = runs("B")
    cost = None if base is None else base.total_cost
    record("C3b scenario B baseline", within(cost, 15560.0, 0.20),
           "infeasible" if cost is None else
           f"${cost:,.2f} for {base.curtailed_kw:g} kW (15,560 +/-20%)")


# -- 4. scenario C ---------------------------------------------------------------------

def test_c4_c_target(runs):
    sol, base, _ = runs("C")
    ok = sol.feasible and sol.total_reduction_kw >= 500 and (
        base is None or sol.total_cost <= base.total_cost)
    record("C4a scenario C target", ok, f"reduction {sol.total_reduction_kw:g} kW (>=500)")


def test_c4_c_cost(runs):
    sol, _, _ = runs("C")
    record("C4b scenario C cost", within(sol.total_cost, 229.3, 0.15),
           f"${sol.total_cost:.2f} (229.3 +/-15%: [194.91, 263.70])")


def test_c4_c_baseline(runs):
    _, base, _ = runs("C")
    cost = None if base is None else base.total_cost
    record("C4c scenario C baseline", within(cost, 24369.0, 0.25),
           "infeasible" if cost is None else f"${cost:,.2f} (24,369 +/-25%)")


# -- 5. oracle equivalence -------------------------------------------------------------

def random_instance(rng):
    """Up to 4 bidders with up to 3 steps, some curtailable load, one active limit."""
    n = int(rng.integers(2, 5))
    loads = [float(rng.integers(40, 120)) for _ in range(n)]
    n_bid = int(rng.integers(1, n + 1))
    bidders = rng.choice(np.arange(2, n + 2), size=n_bid, replace=False)
    bids = {}
    for b in sorted(int(x) for x in bidders):
        steps = int(rng.integers(1, 4))
        prices = np.sort(rng.uniform(0.1, 0.9, steps)).round(2)
        bids[b] = [(10 * (s + 1), float(prices[s])) for s in range(steps)]
    nf = [float(rng.integers(0, 3) * 10) for _ in range(n)]
    costs = [float(rng.integers(20, 90)) for _ in range(n)]
    inst = toy_instance(loads, bids, non_firmed=nf, costs=costs, r=float(rng.uniform(2, 8)),
                        x=float(rng.uniform(1, 5)), chain=bool(rng.random() < 0.5))
    base = inst.base_flow
    kind = rng.integers(0, 3)
    if kind == 0:
        req = MarketRequest(Mode.SCHEDULED_REDUCTION, p_sch=float(rng.integers(1, 8) * 10))
    elif kind == 1:
        vmin = min_voltage(base)
        req = MarketRequest(Mode.VOLTAGE_REGULATION,
                            v_min=float(vmin + rng.uniform(0.2, 0.8) * (1 - vmin)))
    else:
        req = MarketRequest(Mode.CONGESTION_RELIEF,
                            i_max=float(max_branch_current(base) * rng.uniform(0.6, 0.95)))
    return inst, req, n_bid


def test_c5_oracle_equivalence():
    rng = np.random.default_rng(20240601)
    cfg = GaConfig(population_size=30, iterations=40, cr_step_kw=10)
    checked, worst, misses = 0, 0.0, []
    while checked < 60:
        inst, req, n_bid = random_instance(rng)
        try:
            oracle = exhaustive_oracle(inst, request=req)
        except InfeasibleProblemError:
            continue
        best, _ = best_of_seeds(inst, request=req, config=cfg, seeds=SEEDS)
        ga, ref = best.solution.total_cost, oracle.total_cost
        gap = (ga - ref) / ref
        worst = max(worst, gap)
        exact = len(inst.consumers) - 1 <= 3
        if gap > 0.01 or gap < -1e-12 or (exact and abs(gap) > 1e-12):
            misses.append((checked, ga, ref))
        checked += 1
    record("C5 oracle equivalence", not misses,
           f"{checked} instances, worst GA/oracle gap {worst:.2e}, misses {misses[:3]}")


# -- 6. property suites ---------------------------------------------------------------

PROPERTIES = {
    "power balance": "test_powerflow.py::test_power_balance",
    "radial voltage monotonicity": "test_powerflow.py::test_voltage_falls_along_every_path",
    "load-reduction monotonicity": "test_powerflow.py::test_single_load_reduction_monotone",
    "cost additivity + constraint soundness":
        "test_market.py::test_cost_additivity_and_soundness",
    "best-so-far monotonicity": "test_ga.py::test_best_so_far_monotone",
    "gene-range containment": "test_ga.py::test_gene_range_containment",
    "seed determinism (GA)": "test_ga.py::test_seed_determinism",
    "seed determinism (power flow)": "test_powerflow.py::test_deterministic",
}


def test_c6_property_suites(tmp_path):
    xml = tmp_path / "props.xml"
    ids = [str(HERE / p) for p in PROPERTIES.values()]
    subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                    f"--junitxml={xml}", *ids], cwd=HERE.parent, capture_output=True)
    outcome = {}
    for case in ET.parse(xml).getroot().iter("testcase"):
        failed = any(child.tag in ("failure", "error", "skipped") for child in case)
        outcome[case.get("name")] = not failed
    results = {label: outcome.get(node.split("::")[1], False)
               for label, node in PROPERTIES.items()}
    record("C6 property suites (>=1000 cases each)", all(results.values()),
           ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in results.items()))


# -- 7. two-bus cross-check -----------------------------------------------------------

def test_c7_two_bus_cross_check():
    # independent fixed-point iteration on V2 = 1 - z * conj(S / V2)
    zb = 12.66 ** 2 / 100.0
    z = complex(0.1, 0.05) / zb
    s = complex(100.0, 50.0) / 1e5
    v2 = 1.0 + 0j
    for _ in range(200):
        v2 = 1.0 - z * np.conj(s / v2)
    net = Network((Bus(1, 0.0, 0.0), Bus(2, 100.0, 50.0)), (Branch(1, 2, 0.1, 0.05),))
    res = solve(net)
    err = abs(res.bus_voltage[1] - v2)
    loss_err = abs(res.total_loss_kw / 1e5 - abs(s / v2) ** 2 * z.real)
    record("C7 two-bus cross-check", err < 1e-6 and loss_err < 1e-6,
           f"|dV| {err:.2e} p.u., loss diff {loss_err:.2e} p.u. (<1e-6)")
