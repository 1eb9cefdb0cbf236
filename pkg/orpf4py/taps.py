"""Integer tap positions by relax, round and fix.

The ORPF is first solved with continuous taps. Then, one transformer at a
time, the not yet fixed transformer carrying the highest apparent power is
fixed to the nearest integer tap and the problem is solved again, so that
|T| + 1 solves are run in total. ``exhaustive_taps`` enumerates every
integer combination and serves as the reference for small grids.
"""
import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from orpf4py import Config
from orpf4py.nlp import build_nlp
from orpf4py.objectives import WeightVector, eval_all, eval_f_alpha
from orpf4py.solver import INFEASIBLE, OPTIMAL, SolverOptions, solve

logger = logging.getLogger(__name__)

TAP_MODES = ("relax", "heuristic", "exhaustive")


class TapError(ValueError):
    """Raised for unknown tap modes or enumerations above the cap."""


def round_tap(t, psi):
    """Nearest integer tap, exact halves rounded away from the neutral position."""
    offset = psi - t.tap_neutral
    step = math.copysign(math.floor(abs(offset) + 0.5), offset)
    return int(min(max(t.tap_neutral + step, t.tap_min), t.tap_max))


def alternate_tap(t, psi, fixed):
    """The other integer neighbour of a relaxed position, clipped to the range."""
    if psi > fixed:
        alt = fixed + 1
    elif psi < fixed:
        alt = fixed - 1
    else:
        alt = fixed - 1 if fixed > t.tap_neutral else fixed + 1
    return int(min(max(alt, t.tap_min), t.tap_max))


def _weights(objective):
    if isinstance(objective, WeightVector):
        return objective
    return WeightVector.single(objective, Config.getConfigVal("e_q_setpoint"))


def solve_fixed(net, case, objective, fixed_taps=None, options=None, start=None):
    """One ORPF solve with the given taps fixed

    Returns
    -------
    SolveReport
        with ``point``, ``solution``, ``f_values`` of the weighted
        objectives and ``objective`` set to f_alpha
    """
    weights = _weights(objective)
    problem = build_nlp(net, case, weights, fixed_taps)
    report = solve(problem, problem.start() if start is None else start, options)
    solution = problem.to_solution(report.x)
    values = eval_all(solution, net, weights.specs)
    return dataclasses.replace(report, point=problem.operating_point(report.x), solution=solution,
                               f_values=values, objective=eval_f_alpha(weights, values), solves=1,
                               fixed_order=tuple(fixed_taps or ()))


def terminal_apparent_power(report, net):
    """max(|S_from|, |S_to|) of every transformer in the solved state of ``report``."""
    sol = report.solution
    index = {bid: k for k, bid in enumerate(sol.branch_ids)}
    return {t.id: max(abs(sol.s_from[index[t.id]]), abs(sol.s_to[index[t.id]])) for t in net.trafos}


def next_transformer(trafos, power, fixed):
    """The not yet fixed transformer with the largest power, ties go to the first declared."""
    trafos = list(trafos)
    free = [t for t in trafos if t.id not in fixed]
    return min(free, key=lambda t: (-power[t.id], trafos.index(t)))


def discretize_taps(net, case, objective, options=None, retry=None):
    """Heuristic integer taps

    Parameters
    ----------
    net : Network
        reduced per-unit network
    case : StudyCase
        study case
    objective : WeightVector or str
        aggregated objective or a single objective name
    options : SolverOptions, optional
        solver settings
    retry : bool, optional
        retry an infeasible re-solve once with the other adjacent integer;
        the ``tap_retry`` setting when omitted

    Returns
    -------
    SolveReport
        the last solve, ``solves`` counts all solver runs and
        ``fixed_order`` lists the transformers in fixing order
    """
    options = SolverOptions.from_config() if options is None else options
    retry = Config.getConfigVal("tap_retry") if retry is None else retry
    fixed = {}
    report = solve_fixed(net, case, objective, fixed, options)
    solves = 1
    order = []
    trafos = list(net.trafos)
    while report.status == OPTIMAL and len(fixed) < len(trafos):
        power = terminal_apparent_power(report, net)
        t = next_transformer(trafos, power, fixed)
        relaxed = report.point.psi[t.id]
        fixed[t.id] = round_tap(t, relaxed)
        order.append(t.id)
        logger.info("case %s: fixing tap of %s at %d (relaxed %.4f, |S| %.4f pu)",
                    case.case_id, t.id, fixed[t.id], relaxed, power[t.id])
        previous = report
        report = solve_fixed(net, case, objective, fixed, options)
        solves += 1
        if report.status != OPTIMAL and retry:
            alt = alternate_tap(t, relaxed, fixed[t.id])
            if alt != fixed[t.id]:
                logger.info("case %s: %s infeasible at tap %d, retrying %d", case.case_id, t.id, fixed[t.id], alt)
                fixed[t.id] = alt
                report = solve_fixed(net, case, objective, fixed, options)
                solves += 1
        if report.status != OPTIMAL:
            logger.info("case %s: solve after fixing %s ended with %s", case.case_id, t.id, report.status)
            report = dataclasses.replace(report, message="fixing {} failed after {}; relaxed objective {:.6g}"
                                         .format(t.id, order[:-1], previous.objective))
    return dataclasses.replace(report, solves=solves, fixed_order=tuple(order))


def exhaustive_taps(net, case, objective, options=None, cap=None):
    """Best integer tap combination by enumeration

    Raises
    ------
    TapError
        when the number of combinations exceeds ``cap``
    """
    options = SolverOptions.from_config() if options is None else options
    cap = Config.getConfigVal("exhaustive_cap") if cap is None else cap
    ranges = [range(t.tap_min, t.tap_max + 1) for t in net.trafos]
    count = int(np.prod([len(r) for r in ranges])) if ranges else 1
    if count > cap:
        raise TapError("{} tap combinations exceed the cap of {}".format(count, cap))
    best = None
    last = None
    for combo in itertools.product(*ranges):
        fixed = {t.id: psi for t, psi in zip(net.trafos, combo)}
        report = solve_fixed(net, case, objective, fixed, options)
        last = report
        if report.status == OPTIMAL and (best is None or report.objective < best.objective):
            best = report
    if best is None:
        return dataclasses.replace(last, status=INFEASIBLE, solves=count,
                                   message="no tap combination was solved to optimality")
    return dataclasses.replace(best, solves=count)


def optimize_case(net, case, objective, mode=None, options=None):
    """Solve one case with the tap mode ``relax``, ``heuristic`` or ``exhaustive``."""
    mode = Config.getConfigVal("taps") if mode is None else mode
    if mode == "relax":
        return solve_fixed(net, case, objective, {}, options)
    if mode == "heuristic":
        return discretize_taps(net, case, objective, options)
    if mode == "exhaustive":
        return exhaustive_taps(net, case, objective, options)
    raise TapError("unknown tap mode {!r}, expected one of {}".format(mode, ", ".join(TAP_MODES)))


def relative_gap(heuristic, exhaustive):
    """(f_heuristic - f_exhaustive) / |f_exhaustive|, nan unless both reports are optimal."""
    if not (heuristic.ok and exhaustive.ok):
        return float("nan")
    if exhaustive.objective == 0:
        return 0.0 if heuristic.objective == 0 else float("inf")
    return (heuristic.objective - exhaustive.objective) / abs(exhaustive.objective)


@dataclass(frozen=True)
class TapComparison:
    heuristic: object
    exhaustive: object
    gap: float

    def as_dict(self):
        h, e = self.heuristic, self.exhaustive
        return {"heuristic": h.objective, "exhaustive": e.objective, "relative_gap": self.gap,
                "heuristic_status": h.status, "heuristic_solves": h.solves,
                "heuristic_taps": dict(h.point.psi) if h.point is not None else None}


def compare_taps(net, case, objective, options=None, cap=None):
    """Heuristic taps against the exhaustive reference of the same case

    Returns
    -------
    TapComparison
        both reports and the relative gap of the heuristic objective
    """
    heuristic = discretize_taps(net, case, objective, options)
    exhaustive = exhaustive_taps(net, case, objective, options, cap)
    gap = relative_gap(heuristic, exhaustive)
    logger.info("case %s: heuristic %.6g, exhaustive %.6g, relative gap %.3g",
                case.case_id, heuristic.objective, exhaustive.objective, gap)
    return TapComparison(heuristic, exhaustive, gap)
