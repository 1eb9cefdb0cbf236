import math
import os
import types

import pytest

from orpf4py.admittance import reduce_network
from orpf4py.netmodel import load_network, nominal_case, to_per_unit
from orpf4py.nlp import check_feasibility
from orpf4py.objectives import WeightVector
from orpf4py.solver import OPTIMAL
from orpf4py.taps import (TapError, alternate_tap, compare_taps, discretize_taps, exhaustive_taps, next_transformer,
                          optimize_case, relative_gap, round_tap, solve_fixed, terminal_apparent_power)

DATA = os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "orpf4py", "data")

MIXED = {"B.U": 10.0, "G.Q": 5.0, "E.Q": 5.0, "slack.P": 1.0}

# Supporting functions
def toyStudy(name="toy_t3.json"):
    physical = load_network(os.path.join(DATA, name))
    return reduce_network(to_per_unit(physical)), nominal_case(physical)

def assertIntegralTaps(net, report):
    for t in net.trafos:
        psi = report.point.psi[t.id]
        assert psi == int(psi)
        assert t.tap_min <= psi <= t.tap_max

# Testing functions

def test_round_tap():
    t = toyStudy()[0].trafos[0]
    assert round_tap(t, 0.5) == 1
    assert round_tap(t, -0.5) == -1
    assert round_tap(t, 1.49) == 1
    assert round_tap(t, 0.0) == 0
    assert round_tap(t, 3.7) == 2
    assert round_tap(t, -2.6) == -2

def test_alternate_tap():
    t = toyStudy()[0].trafos[0]
    assert alternate_tap(t, 0.3, 0) == 1
    assert alternate_tap(t, -0.3, 0) == -1
    assert alternate_tap(t, 2.0, 2) == 1
    assert alternate_tap(t, 2.4, 2) == 2

@pytest.mark.parametrize("name", ["toy_t3.json", "toy_t4.json"])
def test_heuristic_solve_count(name):
    net, case = toyStudy(name)
    report = discretize_taps(net, case, WeightVector.from_mapping(MIXED))
    assert report.status == OPTIMAL
    assert report.solves == len(net.trafos) + 1
    assert sorted(report.fixed_order) == sorted(t.id for t in net.trafos)
    assertIntegralTaps(net, report)
    assert check_feasibility(net, report.solution) == []

def test_heuristic_against_exhaustive():
    net, case = toyStudy("toy_t4.json")
    weights = WeightVector.from_mapping(MIXED)
    heuristic = discretize_taps(net, case, weights)
    best = exhaustive_taps(net, case, weights)
    assert best.status == OPTIMAL
    assert best.solves == 25
    assertIntegralTaps(net, best)
    gap = heuristic.objective - best.objective
    assert gap >= -1e-6
    relaxed = solve_fixed(net, case, weights)
    assert relaxed.objective <= best.objective + 1e-6

def test_single_objective_name():
    net, case = toyStudy()
    report = optimize_case(net, case, "B.U", mode="heuristic")
    assert report.ok
    assert list(report.f_values) == ["B.U"]
    assert report.objective == pytest.approx(report.f_values["B.U"])

def test_relax_mode():
    net, case = toyStudy()
    report = optimize_case(net, case, "B.U", mode="relax")
    assert report.solves == 1
    assert report.fixed_order == ()
    t = net.trafos[0]
    assert t.tap_min <= report.point.psi[t.id] <= t.tap_max

def test_exhaustive_cap():
    net, case = toyStudy()
    with pytest.raises(TapError):
        exhaustive_taps(net, case, "B.U", cap=3)

def test_unknown_mode():
    net, case = toyStudy()
    with pytest.raises(TapError):
        optimize_case(net, case, "B.U", mode="round")

def test_fixing_order_follows_relaxed_power():
    net, case = toyStudy("toy_t4.json")
    weights = WeightVector.from_mapping(MIXED)
    relaxed = solve_fixed(net, case, weights)
    power = terminal_apparent_power(relaxed, net)
    assert set(power) == {t.id for t in net.trafos}
    report = discretize_taps(net, case, weights)
    assert report.fixed_order[0] == next_transformer(net.trafos, power, {}).id
    assert power[report.fixed_order[0]] == max(power.values())

def test_next_transformer_ties():
    trafos = toyStudy("toy_t4.json")[0].trafos
    first, second = trafos[0].id, trafos[1].id
    assert next_transformer(trafos, {first: 0.3, second: 0.3}, {}).id == first
    assert next_transformer(trafos, {first: 0.2, second: 0.3}, {}).id == second
    assert next_transformer(trafos, {first: 0.2, second: 0.3}, {second: 0}).id == first

def test_relative_gap():
    def report(objective, ok=True):
        return types.SimpleNamespace(ok=ok, objective=objective)
    assert relative_gap(report(1.1), report(1.0)) == pytest.approx(0.1)
    assert relative_gap(report(-0.9), report(-1.0)) == pytest.approx(0.1)
    assert math.isnan(relative_gap(report(1.1, ok=False), report(1.0)))
    assert math.isnan(relative_gap(report(1.1), report(1.0, ok=False)))
    assert relative_gap(report(0.0), report(0.0)) == 0.0
    assert relative_gap(report(0.5), report(0.0)) == math.inf

def test_compare_taps():
    net, case = toyStudy("toy_t4.json")
    comparison = compare_taps(net, case, WeightVector.from_mapping(MIXED))
    h, e = comparison.heuristic, comparison.exhaustive
    assert comparison.gap >= -1e-6
    assert comparison.gap == pytest.approx((h.objective - e.objective) / abs(e.objective))
    doc = comparison.as_dict()
    assert doc["relative_gap"] == comparison.gap
    assert doc["heuristic_solves"] == len(net.trafos) + 1
    assert set(doc["heuristic_taps"]) == {t.id for t in net.trafos}
