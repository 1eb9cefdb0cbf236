"""Study pipeline: sampling, interdependence, weight tuning, combined run, post-processing.

Results are pandas tables written as CSV plus JSON documents. Cases fan
out over a thread pool; results are always collected in case order.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from orpf4py import Config
from orpf4py.nlp import check_feasibility
from orpf4py.objectives import (INITIAL, WeightVector, eval_all, eval_F, eval_f_alpha, objective_spec)
from orpf4py.powerflow import OperatingPoint, case_vectors, solve_pf
from orpf4py.solver import SolverOptions
from orpf4py.taps import optimize_case

logger = logging.getLogger(__name__)

COMBINED = "combined"
STATS_ROWS = ("mu", "sigma")
_UINT64 = 1 << 64


class PipelineError(ValueError):
    """Raised for inconsistent pipeline inputs or result files."""


# ---------------------------------------------------------------------------
# sampling

def sample_cases(population, count, seed=None, method=None):
    """Draw distinct case ids without replacement

    Parameters
    ----------
    population : int
        number of time steps in the profile
    count : int
        number of study cases to draw
    seed : int, optional
        seed, the ``seed`` setting when omitted
    method : str, optional
        ``pcg64`` (default): partial Fisher-Yates shuffle of ``range(population)``
        driven by raw 64-bit PCG64 output with rejection sampling;
        ``numpy-legacy``: ``numpy.random.seed(seed)`` followed by
        ``numpy.random.choice(population, count, replace=False)``

    Returns
    -------
    list of int
    """
    seed = Config.getConfigVal("seed") if seed is None else seed
    method = Config.getConfigVal("sampling") if method is None else method
    population, count = int(population), int(count)
    if count < 0 or count > population:
        raise PipelineError("cannot draw {} cases from {} time steps".format(count, population))
    if method == "numpy-legacy":
        return [int(k) for k in np.random.RandomState(seed).choice(population, count, replace=False)]
    if method != "pcg64":
        raise PipelineError("unknown sampling method {!r}".format(method))
    bits = np.random.PCG64(seed)
    ids = list(range(population))
    for i in range(count):
        bound = population - i
        limit = _UINT64 - _UINT64 % bound
        while True:
            raw = int(bits.random_raw())
            if raw < limit:
                break
        j = i + raw % bound
        ids[i], ids[j] = ids[j], ids[i]
    return ids[:count]


# ---------------------------------------------------------------------------
# per-case evaluation

@dataclass
class CaseResult:
    case_id: object
    family: str
    status: str
    f_values: dict = field(default_factory=dict)
    point: object = None
    solution: object = None
    solves: int = 0
    violations: tuple = ()
    message: str = ""

    @property
    def ok(self):
        return self.status == "optimal"


_CAUGHT = (ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError)


def evaluate_initial(net, case, specs, v0=None):
    """Power flow at Q_g = 0 and neutral taps, evaluated under every objective."""
    try:
        sol = solve_pf(net, case, OperatingPoint.initial(net), v0=v0)
        values = eval_all(sol, net, specs)
    except _CAUGHT as err:
        return CaseResult(case.case_id, INITIAL, "failed", message=str(err))
    violations = tuple(check_feasibility(net, sol))
    return CaseResult(case.case_id, INITIAL, "optimal", values, OperatingPoint.initial(net), sol,
                      violations=violations)


def optimize_and_evaluate(net, case, weights, specs, family, mode=None, options=None):
    """Optimize one case and evaluate the optimum under every objective."""
    try:
        report = optimize_case(net, case, weights, mode, options)
        if not report.ok:
            return CaseResult(case.case_id, family, report.status, solves=report.solves, message=report.message)
        values = eval_all(report.solution, net, specs)
    except _CAUGHT as err:
        return CaseResult(case.case_id, family, "failed", message=str(err))
    return CaseResult(case.case_id, family, report.status, values, report.point, report.solution,
                      solves=report.solves)


def _map(fn, cases, workers):
    workers = Config.getConfigVal("workers") if workers is None else workers
    if workers <= 1:
        return [fn(c) for c in cases]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cases))


def run_family(net, cases, family, weights=None, specs=None, workers=None, mode=None, options=None):
    """Results of one operating-point family over all cases, in case order."""
    specs = default_specs() if specs is None else specs
    if family == INITIAL:
        if Config.getConfigVal("warm_start") and (workers or Config.getConfigVal("workers")) <= 1:
            results = []
            v0 = None
            for case in cases:
                res = evaluate_initial(net, case, specs, v0)
                v0 = res.solution.v if res.solution is not None else None
                results.append(res)
        else:
            results = _map(lambda c: evaluate_initial(net, c, specs), cases, workers)
        infeasible = sum(1 for r in results if r.violations)
        if infeasible:
            logger.warning("initial operating point violates limits in %d of %d cases", infeasible, len(results))
    else:
        options = SolverOptions.from_config() if options is None else options
        results = _map(lambda c: optimize_and_evaluate(net, c, weights, specs, family, mode, options),
                       cases, workers)
    for r in results:
        if not r.ok:
            logger.info("%s case %s: %s %s", family, r.case_id, r.status, r.message)
    logger.info("%s: %d of %d cases solved", family, sum(r.ok for r in results), len(results))
    return results


def default_specs():
    setpoint = Config.getConfigVal("e_q_setpoint")
    return tuple(objective_spec(name, setpoint) for name in Config.getConfigVal("objectives"))


def performance_row(results, specs):
    """F_o of a family over its solved cases."""
    ok = [r for r in results if r.ok]
    if not ok:
        return pd.Series({s.label: np.nan for s in specs}, dtype=float)
    return pd.Series({s.label: eval_F([r.f_values[s.label] for r in ok]) for s in specs}, dtype=float)


# ---------------------------------------------------------------------------
# interdependence

@dataclass
class InterdependenceMatrix:
    frame: pd.DataFrame
    failures: dict
    flagged: list
    infeasible_initial: int
    results: dict = field(default_factory=dict, repr=False)


@dataclass
class ColumnStats:
    mu: pd.Series
    sigma: pd.Series

    def as_frame(self):
        return pd.DataFrame([self.mu, self.sigma], index=list(STATS_ROWS))


def column_stats(frame):
    """Mean and sample standard deviation (n - 1) of every column."""
    data = frame.drop(index=[r for r in frame.index if r in STATS_ROWS + (COMBINED,)])
    mu = data.mean(axis=0)
    sigma = data.std(axis=0, ddof=1).fillna(0.0) if len(data) > 1 else pd.Series(0.0, index=data.columns)
    mu.name, sigma.name = "mu", "sigma"
    return ColumnStats(mu, sigma)


def _failureReport(results, total):
    failed = sum(1 for r in results if not r.ok)
    ratio = failed / total if total else 0.0
    return failed, ratio > Config.getConfigVal("failure_flag_ratio")


def run_interdependence(net, cases, objectives=None, workers=None, mode=None, options=None):
    """Optimize every case for every objective and cross-evaluate

    Parameters
    ----------
    net : Network
        reduced per-unit network
    cases : list of StudyCase
        sampled study cases
    objectives : list of str, optional
        objectives to optimize and evaluate, the ``objectives`` setting by default

    Returns
    -------
    tuple of (InterdependenceMatrix, ColumnStats)
        rows ``initial`` and one per objective, columns F_o per objective
    """
    setpoint = Config.getConfigVal("e_q_setpoint")
    names = Config.getConfigVal("objectives") if objectives is None else objectives
    specs = tuple(objective_spec(n, setpoint) for n in names)
    rows, failures, flagged, results = {}, {}, [], {}
    initial = run_family(net, cases, INITIAL, specs=specs, workers=workers)
    results[INITIAL] = initial
    rows[INITIAL] = performance_row(initial, specs)
    failures[INITIAL], flag = _failureReport(initial, len(cases))
    if flag:
        flagged.append(INITIAL)
    for spec in specs:
        logger.info("optimizing %d cases for %s", len(cases), spec.label)
        res = run_family(net, cases, spec.label, WeightVector((spec,), (1.0,)), specs, workers, mode, options)
        results[spec.label] = res
        rows[spec.label] = performance_row(res, specs)
        failures[spec.label], flag = _failureReport(res, len(cases))
        if flag:
            flagged.append(spec.label)
            logger.warning("%s: %d of %d cases failed", spec.label, failures[spec.label], len(cases))
    frame = pd.DataFrame(rows).T
    frame.index.name = "family"
    matrix = InterdependenceMatrix(frame, failures, flagged,
                                   sum(1 for r in initial if r.violations), results)
    for issue in diagonal_violations(frame, Config.getConfigVal("diagonal_tol")):
        logger.warning("objective %s is not column-minimal on its own family (%.6g > %.6g from %s)",
                       issue["objective"], issue["value"], issue["other_value"], issue["other"])
    return matrix, column_stats(frame)


def diagonal_violations(frame, tol=1e-4):
    """Columns where the family optimized for the objective is not the minimum of the optimized families."""
    out = []
    optimized = [r for r in frame.index if r not in (INITIAL, COMBINED) + STATS_ROWS]
    for o in frame.columns:
        if o not in frame.index:
            continue
        own = frame.loc[o, o]
        for other in optimized:
            if other != o and frame.loc[other, o] + tol < own:
                out.append({"objective": o, "value": float(own), "other": other,
                            "other_value": float(frame.loc[other, o])})
    return out


def normalize_radar(frame):
    """Scale every column to [0, 1] by its smallest and largest entry; constant columns give 0."""
    data = frame.drop(index=[r for r in frame.index if r in STATS_ROWS])
    lo = data.min(axis=0)
    span = data.max(axis=0) - lo
    out = pd.DataFrame(0.0, index=data.index, columns=data.columns)
    for col in data.columns:
        if not span[col] > 0:
            logger.warning("radar column %s is constant, normalized to 0", col)
            continue
        out[col] = (data[col] - lo[col]) / span[col]
    return out


# ---------------------------------------------------------------------------
# combined objective

@dataclass
class CombinedResult:
    weights: WeightVector
    row: pd.Series
    f_alpha: float
    violations: list
    failures: int
    results: list = field(default_factory=list, repr=False)


def envelope_violations(row, frame, tol=1e-4):
    """F_o of ``row`` outside the [min, max] of the optimized families."""
    data = frame.drop(index=[r for r in frame.index if r in (INITIAL, COMBINED) + STATS_ROWS])
    out = []
    for col in row.index:
        if col not in data.columns:
            continue
        lo, hi = float(data[col].min()), float(data[col].max())
        if row[col] < lo - tol or row[col] > hi + tol:
            out.append({"objective": col, "value": float(row[col]), "min": lo, "max": hi})
    return out


def run_combined(net, cases, weights, matrix=None, workers=None, mode=None, options=None):
    """Optimize f_alpha per case and evaluate every objective

    Parameters
    ----------
    weights : WeightVector or dict
        alpha per objective name
    matrix : InterdependenceMatrix or DataFrame, optional
        interdependence rows for the envelope check
    """
    setpoint = Config.getConfigVal("e_q_setpoint")
    if not isinstance(weights, WeightVector):
        weights = WeightVector.from_mapping(weights, setpoint)
    names = list(Config.getConfigVal("objectives"))
    for s in weights.specs:
        if s.label not in names:
            names.append(s.label)
    specs = tuple(objective_spec(n, setpoint) for n in names)
    res = run_family(net, cases, COMBINED, weights, specs, workers, mode, options)
    row = performance_row(res, specs)
    row.name = COMBINED
    failures, flag = _failureReport(res, len(cases))
    if flag:
        logger.warning("combined: %d of %d cases failed", failures, len(cases))
    violations = []
    if matrix is not None:
        frame = matrix.frame if isinstance(matrix, InterdependenceMatrix) else matrix
        violations = envelope_violations(row, frame, Config.getConfigVal("diagonal_tol"))
        for v in violations:
            logger.warning("combined F of %s = %.6g outside [%.6g, %.6g]", v["objective"], v["value"], v["min"], v["max"])
    fAlpha = eval_f_alpha(weights, row.to_dict()) if not row.isna().any() else float("nan")
    return CombinedResult(weights, row, fAlpha, violations, failures, res)


# ---------------------------------------------------------------------------
# post-processing

@dataclass(frozen=True)
class BoxStats:
    count: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    lower_fence: float
    upper_fence: float
    below_pct: float
    above_pct: float


def box_stats(samples):
    """Quartiles (linear interpolation), Tukey fences clipped to the data range and outlier shares in percent."""
    x = np.asarray(list(samples), dtype=float)
    if x.size == 0:
        raise PipelineError("box statistics of an empty sample")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    lower = float(max(q1 - 1.5 * iqr, x.min()))
    upper = float(min(q3 + 1.5 * iqr, x.max()))
    return BoxStats(int(x.size), float(x.min()), float(q1), float(med), float(q3), float(x.max()),
                    lower, upper, 100.0 * np.sum(x < lower) / x.size, 100.0 * np.sum(x > upper) / x.size)


def tap_histogram(taps, omit_single=False):
    """Occurrence of each integer tap in percent of all samples

    Parameters
    ----------
    taps : iterable of int
        tap positions, one per operating point
    omit_single : bool
        drop positions that occur exactly once; percentages still refer to
        all samples
    """
    values = [int(round(t)) for t in taps]
    if not values:
        return {}
    positions, counts = np.unique(values, return_counts=True)
    return {int(p): 100.0 * c / len(values) for p, c in zip(positions, counts)
            if not (omit_single and c == 1)}


def element_records(net, results, cases):
    """Long-format rows of the per-element quantities of solved cases."""
    byId = {c.case_id: c for c in cases}
    index = net.busIndex()
    rows = []
    for r in results:
        if not r.ok or r.solution is None:
            continue
        sol = r.solution
        pg, _, _, _, _ = case_vectors(net, byId[r.case_id])
        branchIndex = {b: k for k, b in enumerate(sol.branch_ids)}
        for g, p, q in zip(net.gens, pg, sol.q_g):
            if g.p_max > 0:
                rows.append((r.family, r.case_id, g.id, "p_pmax", p / g.p_max))
                rows.append((r.family, r.case_id, g.id, "q_pmax", q / g.p_max))
            rows.append((r.family, r.case_id, g.id, "u", sol.vm[index[g.bus]]))
        for t in net.trafos:
            k = branchIndex[t.id]
            rows.append((r.family, r.case_id, t.id, "u_lv", sol.vm[index[t.lv_bus]]))
            rows.append((r.family, r.case_id, t.id, "p_hv_smax", sol.s_to[k].real / t.sn))
            rows.append((r.family, r.case_id, t.id, "tap", sol.psi[t.id]))
    return pd.DataFrame(rows, columns=["family", "case_id", "element", "quantity", "value"])


def case_records(results):
    rows = []
    for r in results:
        row = {"family": r.family, "case_id": r.case_id, "status": r.status, "solves": r.solves,
               "violations": len(r.violations)}
        row.update({"f." + k: v for k, v in r.f_values.items()})
        rows.append(row)
    return pd.DataFrame(rows)


def boxstats_from_points(points):
    out = {}
    data = points[points["quantity"] != "tap"]
    for (family, quantity), group in data.groupby(["family", "quantity"], sort=True):
        out.setdefault(family, {})[quantity] = asdict(box_stats(group["value"]))
    return out


def histogram_from_points(points, omit_single=False):
    rows = []
    taps = points[points["quantity"] == "tap"]
    for (family, element), group in taps.groupby(["family", "element"], sort=True):
        for pos, pct in tap_histogram(group["value"], omit_single).items():
            rows.append({"family": family, "trafo": element, "tap": pos, "percent": pct})
    return pd.DataFrame(rows, columns=["family", "trafo", "tap", "percent"])


# ---------------------------------------------------------------------------
# result files

FLOAT_FORMAT = "%.10g"


def _writeJson(filePath, doc):
    with open(filePath, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def write_interdependence(outDir, matrix, stats):
    frame = pd.concat([matrix.frame, stats.as_frame()])
    frame.index.name = "family"
    frame.to_csv(os.path.join(outDir, "interdependence.csv"), float_format=FLOAT_FORMAT)
    normalize_radar(matrix.frame).rename_axis("family").to_csv(os.path.join(outDir, "radar.csv"),
                                                               float_format=FLOAT_FORMAT)


def read_interdependence(filePath):
    """Matrix rows and ColumnStats from an ``interdependence.csv`` file."""
    if not os.path.isfile(filePath):
        raise PipelineError("There is no interdependence file at " + filePath)
    frame = pd.read_csv(filePath, index_col=0)
    missing = [r for r in STATS_ROWS if r not in frame.index]
    rows = frame.drop(index=[r for r in STATS_ROWS if r in frame.index])
    if missing:
        stats = column_stats(rows)
    else:
        stats = ColumnStats(frame.loc["mu"], frame.loc["sigma"])
    return rows, stats


def write_case_results(outDir, net, cases, results):
    allResults = [r for family in results for r in family]
    case_records(allResults).to_csv(os.path.join(outDir, "cases.csv"), index=False, float_format=FLOAT_FORMAT)
    element_records(net, allResults, cases).to_csv(os.path.join(outDir, "points.csv"), index=False,
                                                   float_format=FLOAT_FORMAT)


def write_combined(outDir, combined):
    frame = pd.DataFrame([combined.row])
    frame.index.name = "family"
    frame["f_alpha"] = combined.f_alpha
    frame["failures"] = combined.failures
    frame.to_csv(os.path.join(outDir, "combined_eval.csv"), float_format=FLOAT_FORMAT)


def write_report(resultsDir, outDir=None, omit_single=False):
    """boxstats.json and taps_hist.csv from the stored ``points.csv``."""
    outDir = resultsDir if outDir is None else outDir
    pointsFile = os.path.join(resultsDir, "points.csv")
    if not os.path.isfile(pointsFile):
        raise PipelineError("There is no points file at " + pointsFile)
    points = pd.read_csv(pointsFile)
    os.makedirs(outDir, exist_ok=True)
    _writeJson(os.path.join(outDir, "boxstats.json"),
               {"format_version": Config.getConfigVal("format_version"),
                "quartile_method": "linear", "families": boxstats_from_points(points)})
    histogram_from_points(points, omit_single).to_csv(os.path.join(outDir, "taps_hist.csv"), index=False,
                                                      float_format=FLOAT_FORMAT)


def write_summary(outDir, caseIds, extra=None):
    doc = {
        "format_version": Config.getConfigVal("format_version"),
        "seed": Config.getConfigVal("seed"),
        "sampling": Config.getConfigVal("sampling"),
        "config_hash": Config.configHash(),
        "config": dict(Config.CONFIG_DICT),
        "tolerances": {k: Config.getConfigVal(k) for k in ("tol_stat", "tol_feas", "tol_comp", "max_iter", "pf_tol")},
        "case_ids": [int(c) if isinstance(c, (int, np.integer)) else c for c in caseIds],
    }
    doc.update(extra or {})
    _writeJson(os.path.join(outDir, "summary.json"), doc)
