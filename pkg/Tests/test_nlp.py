import dataclasses
import os

import numpy as np
import pytest

from orpf4py.admittance import PiBranch, reduce_network
from orpf4py.netmodel import (Bus, ExternalGrid, Line, Load, Network, Transformer, load_network, nominal_case,
                              to_per_unit)
from orpf4py.nlp import (FormulationError, build_nlp, check_feasibility, derive_bounds, derive_serial_current_bound,
                         derive_smax_e, dump_nlp)
from orpf4py.objectives import ObjectiveError, WeightVector, eval_f_alpha, eval_all
from orpf4py.powerflow import solve_pf
from orpf4py.solver import SolverOptions, solve

DATA = os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "orpf4py", "data")

MIXED = {"B.U": 10.0, "G.Q": 5.0, "E.Q": 5.0, "slack.P": 1.0, "L.IS": 2.0}

# Supporting functions
def toyStudy(name="toy_t3.json"):
    physical = load_network(os.path.join(DATA, name))
    return reduce_network(to_per_unit(physical)), nominal_case(physical)

def perturbedStart(problem, seed=0):
    rng = np.random.default_rng(seed)
    x = problem.start()
    return x + rng.uniform(-1e-2, 1e-2, x.shape)

def centralDifference(fn, x, h=1e-6):
    columns = []
    for k in range(len(x)):
        e = np.zeros(len(x))
        e[k] = h
        columns.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.array(columns).T

def assertClose(analytic, numeric):
    scale = max(1.0, float(np.max(np.abs(numeric))))
    assert np.max(np.abs(analytic - numeric)) <= 1e-6 * scale

# Testing functions

def test_derived_bounds():
    net, _ = toyStudy()
    smax = derive_smax_e(net)
    np.testing.assert_allclose(smax, [0.4])
    bounds = derive_bounds(net)
    assert bounds.branch_ids == ("L1", "T1")
    assert bounds.kinds == ("line", "transformer")
    assert np.all(bounds.i_con > 0)
    assert bounds.i_con[0] < net.lines[0].imax
    assert bounds.i_con[1] < 0.4

def test_variable_layout():
    net, case = toyStudy()
    problem = build_nlp(net, case, WeightVector.from_mapping(MIXED))
    # vm, va at two buses, two gens, one tap, pe and qe, one epigraph bound
    assert problem.n == 2 + 2 + 2 + 1 + 2 + 1
    assert problem.n_eq == 6
    assert problem.n_ineq == 2 + 1
    assert problem.n_taps_free == 1
    assert problem.names[0] == "vm[1]"
    assert problem.names[-1] == "m[L.IS]"
    fixed = build_nlp(net, case, "B.U", fixed_taps={"T1": 1})
    assert fixed.n == 2 + 2 + 2 + 2
    assert fixed.n_taps_free == 0
    assert fixed.operating_point(fixed.start()).psi == {"T1": 1.0}

def test_derivatives_match_finite_differences():
    net, case = toyStudy("toy_t4.json")
    problem = build_nlp(net, case, WeightVector.from_mapping(MIXED))
    x = perturbedStart(problem)
    assertClose(problem.gradient(x), centralDifference(lambda z: [problem.objective(z)], x)[0])
    assertClose(problem.eq_jacobian(x), centralDifference(problem.eq, x))
    assertClose(problem.ineq_jacobian(x), centralDifference(problem.ineq, x))
    rng = np.random.default_rng(1)
    lamEq = rng.normal(size=problem.n_eq)
    lamIn = rng.uniform(size=problem.n_ineq)

    def lagrangianGradient(z):
        return (0.7 * problem.gradient(z) + problem.eq_jacobian(z).T @ lamEq
                + problem.ineq_jacobian(z).T @ lamIn)

    hess = problem.lagrangian_hessian(x, 0.7, lamEq, lamIn)
    np.testing.assert_allclose(hess, hess.T, atol=1e-10)
    assertClose(hess, centralDifference(lagrangianGradient, x))

def test_start_point_satisfies_power_flow():
    net, case = toyStudy()
    problem = build_nlp(net, case, "B.U")
    x = problem.start()
    assert np.max(np.abs(problem.eq(x))) < 1e-7
    assert np.all(x >= problem.lower) and np.all(x <= problem.upper)

def test_objective_value_matches_evaluation():
    net, case = toyStudy()
    weights = WeightVector.from_mapping({"B.U": 3.0, "G.Q": 1.0, "E.Q": 2.0})
    problem = build_nlp(net, case, weights)
    x = problem.start()
    values = eval_all(problem.to_solution(x), net, weights.specs)
    assert problem.objective(x) == pytest.approx(eval_f_alpha(weights, values) ** 2, rel=1e-6)

def test_solved_point_replays_through_power_flow():
    net, case = toyStudy()
    problem = build_nlp(net, case, WeightVector.from_mapping(MIXED))
    options = SolverOptions()
    report = solve(problem, options=options)
    assert report.status == "optimal"
    assert report.kkt.within(options)
    x = report.x
    replay = solve_pf(net, case, problem.operating_point(x), tol=1e-10)
    nlpState = problem.to_solution(x)
    np.testing.assert_allclose(replay.vm, nlpState.vm, atol=1e-7)
    np.testing.assert_allclose(replay.va, nlpState.va, atol=1e-7)
    np.testing.assert_allclose(replay.s_e, nlpState.extra["s_e_nlp"], atol=1e-7)
    assert check_feasibility(net, nlpState) == []

def test_fixed_tap_errors():
    net, case = toyStudy()
    with pytest.raises(FormulationError) as info:
        build_nlp(net, case, "B.U", fixed_taps={"T1": 3})
    assert info.value.element_id == "T1"
    with pytest.raises(FormulationError):
        build_nlp(net, case, "B.U", fixed_taps={"T9": 0})

def test_empty_element_set():
    net, case = toyStudy()
    noLines = dataclasses.replace(net, lines=())
    with pytest.raises(FormulationError):
        build_nlp(noLines, case, "L.IS")

def test_serial_current_reference():
    net, case = toyStudy()
    spec = WeightVector.single("L.IS").specs[0]
    shifted = dataclasses.replace(spec, ref=0.5)
    with pytest.raises(ObjectiveError):
        build_nlp(net, case, WeightVector((shifted,), (1.0,)))

def test_unknown_q_limit_policy():
    from orpf4py import Config
    net, case = toyStudy()
    Config.setConfigVal("qlim_policy", "capability-curve")
    try:
        with pytest.raises(FormulationError):
            build_nlp(net, case, "G.Q")
    finally:
        Config.initDict()

def test_check_feasibility_flags_voltage():
    net, case = toyStudy()
    sol = solve_pf(net, case)
    sol.vm = sol.vm.copy()
    sol.vm[2] = 1.2
    problems = check_feasibility(net, sol)
    assert [p[0] for p in problems] == [2]

def test_dump_nlp(tmp_path):
    net, case = toyStudy("toy_t4.json")
    problem = build_nlp(net, case, WeightVector.from_mapping(MIXED), fixed_taps={"T2": -1})
    path = tmp_path / "nlp.txt"
    dump_nlp(problem, str(path))
    text = path.read_text()
    assert "[variables] {}".format(problem.n) in text
    assert "psi[T2] = -1" in text
    assert "I_S[L1]" in text
    assert "L.IS[0]" in text

def test_serial_current_bound():
    branch = PiBranch("B", "line", 0, 1, complex(0, -10), 0.04j, 1 + 0j, 1.0)
    assert derive_serial_current_bound(branch, 1.1, 1.1) == pytest.approx(0.978)
    stepped = dataclasses.replace(branch, kind="transformer", ratio=2 + 0j)
    assert derive_serial_current_bound(stepped, 1.1, 1.1) == pytest.approx(0.978)
    assert derive_serial_current_bound(dataclasses.replace(branch, y_p=0j), 1.1, 1.1) == 1.0
    with pytest.raises(FormulationError) as info:
        derive_serial_current_bound(dataclasses.replace(branch, y_p=2j), 1.1, 1.1)
    assert info.value.element_id == "B"

def test_smax_of_external_grid():
    buses = (Bus(0, 1.0, 0.9, 1.1), Bus(1, 1.0), Bus(2, 1.0))
    net = Network(buses=buses, lines=(Line("L", 0, 1, 0.01, 0.1, imax=0.9),), loads=(Load("M", 0, sn=0.2),),
                  ext_grids=(ExternalGrid("E", 0),), per_unit=True)
    np.testing.assert_allclose(derive_smax_e(net), [1.19])
    trafo = Transformer("T", 1, 0, 1.0, 1.0, 3.0)
    np.testing.assert_allclose(derive_smax_e(dataclasses.replace(net, lines=(), loads=(), trafos=(trafo,))), [3.0])
    bare = dataclasses.replace(net, lines=(Line("L", 1, 2, 0.01, 0.1, imax=0.9),), loads=())
    with pytest.raises(FormulationError) as info:
        derive_smax_e(bare)
    assert info.value.element_id == "E"
