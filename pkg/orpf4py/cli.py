"""Command-line entry point: ``orpf4py <command> [options]``.

Every command reads its inputs from files, prints a JSON document to stdout
and returns 0. Failures print ``{"error", "message", "element_id"}`` to
stderr and return 1 (2 for usage errors).
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from orpf4py import Config
from orpf4py import pipeline
from orpf4py.admittance import build_ybus, reduce_network
from orpf4py.netmodel import load_network, load_profiles, nominal_case, synthetic_profiles, to_per_unit
from orpf4py.nlp import build_nlp, dump_nlp
from orpf4py.objectives import WeightVector, parse_weights, tune_weights
from orpf4py.pipeline import PipelineError
from orpf4py.powerflow import solve_pf
from orpf4py.taps import TAP_MODES, compare_taps, optimize_case

logger = logging.getLogger(__name__)

WEIGHTS_FORMAT_VERSION = 1

# flag destination -> config key
FLAG_KEYS = {
    "workers": "workers",
    "tol_stat": "tol_stat",
    "tol_feas": "tol_feas",
    "max_iter": "max_iter",
    "seed": "seed",
    "count": "case_count",
    "sampling": "sampling",
    "taps": "taps",
    "warm_start": "warm_start",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):

    def error(self, message):
        raise UsageError(message)


def _jsonDefault(value):
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, tuple):
        return list(value)
    return str(value)


def _dumps(doc):
    return json.dumps(doc, indent=2, sort_keys=True, default=_jsonDefault)


def _emit(doc, outFile=None):
    text = _dumps(doc)
    if outFile:
        with open(outFile, "w") as f:
            f.write(text + "\n")
    print(text)


def _fail(err, code):
    doc = {"error": type(err).__name__, "message": str(err),
           "element_id": getattr(err, "element_id", None)}
    sys.stderr.write(json.dumps(doc, default=str) + "\n")
    return code


# ---------------------------------------------------------------------------
# shared loading

def _study(args, profilesRequired=False):
    """Physical network, reduced per-unit network and study cases."""
    net = load_network(args.net)
    reduced = reduce_network(to_per_unit(net))
    profiles = getattr(args, "profiles", None)
    if profiles:
        cases = load_profiles(net, profiles)
    elif profilesRequired:
        raise PipelineError("--profiles is required for this command")
    else:
        cases = [nominal_case(net)]
    return net, reduced, cases


def _pickCase(cases, caseId):
    if not 0 <= caseId < len(cases):
        raise PipelineError("case {} outside the {} available cases".format(caseId, len(cases)))
    return cases[caseId]


def _readWeights(filePath):
    doc = Config.readDict(filePath)
    if not isinstance(doc, dict):
        raise PipelineError("weights file {} must hold a JSON object".format(filePath))
    version = doc.get("format_version", WEIGHTS_FORMAT_VERSION)
    if version != WEIGHTS_FORMAT_VERSION:
        raise PipelineError("unsupported weights format_version {}".format(version))
    alpha = doc.get("alpha", doc)
    return {k: float(v) for k, v in alpha.items() if k != "format_version"}


def _weights(args):
    setpoint = Config.getConfigVal("e_q_setpoint")
    if getattr(args, "weights", None):
        return WeightVector.from_mapping(_readWeights(args.weights), setpoint)
    return WeightVector.single(args.objective, setpoint)


def _sampled(cases):
    ids = pipeline.sample_cases(len(cases), min(Config.getConfigVal("case_count"), len(cases)))
    return [cases[k] for k in ids]


def _pointDoc(net, point):
    sb = net.s_base
    return {"q_g_pu": dict(point.q_g), "q_g_mvar": {k: v * sb for k, v in point.q_g.items()},
            "taps": dict(point.psi)}


# ---------------------------------------------------------------------------
# commands

def cmd_validate(args):
    net, reduced, cases = _study(args)
    _emit({"valid": True, "network": str(net), "reduced": str(reduced), "cases": len(cases),
           "origin": reduced.origin})
    return 0


def cmd_powerflow(args):
    net, reduced, cases = _study(args)
    case = _pickCase(cases, args.case)
    sol = solve_pf(reduced, case)
    doc = {
        "case_id": case.case_id,
        "iterations": sol.iterations,
        "max_mismatch": sol.max_mismatch,
        "vm_pu": dict(zip(sol.bus_ids, sol.vm)),
        "va_rad": dict(zip(sol.bus_ids, sol.va)),
        "s_ext_pu": {e.id: s for e, s in zip(reduced.ext_grids, sol.s_e)},
        "losses_pu": sol.losses,
        "i_serial_pu": dict(zip(sol.branch_ids, sol.i_serial)),
    }
    if args.dump_ybus:
        build_ybus(reduced).to_csv(args.dump_ybus)
    _emit(doc, args.dump_solution)
    return 0


def cmd_optimize(args):
    net, reduced, cases = _study(args)
    case = _pickCase(cases, args.case)
    weights = _weights(args)
    if args.dump_nlp:
        dump_nlp(build_nlp(reduced, case, weights), args.dump_nlp)
    comparison = None
    if Config.getConfigVal("taps") == "exhaustive":
        comparison = compare_taps(reduced, case, weights)
        report = comparison.exhaustive
    else:
        report = optimize_case(reduced, case, weights)
    doc = {
        "case_id": case.case_id,
        "status": report.status,
        "objective": report.objective,
        "f_values": report.f_values,
        "weights": weights.as_dict(),
        "kkt": report.kkt.as_dict(),
        "iterations": report.iterations,
        "solves": report.solves,
        "fixed_order": list(report.fixed_order),
        "mu": report.mu_summary,
        "message": report.message,
    }
    if report.point is not None:
        doc.update(_pointDoc(reduced, report.point))
    if comparison is not None:
        doc["tap_gap"] = comparison.as_dict()
    _emit(doc, args.out)
    return 0 if report.ok else 1


def cmd_interdependence(args):
    net, reduced, cases = _study(args, profilesRequired=True)
    sampled = _sampled(cases)
    os.makedirs(args.out, exist_ok=True)
    matrix, stats = pipeline.run_interdependence(reduced, sampled)
    pipeline.write_interdependence(args.out, matrix, stats)
    pipeline.write_case_results(args.out, reduced, sampled, matrix.results.values())
    pipeline.write_report(args.out)
    pipeline.write_summary(args.out, [c.case_id for c in sampled],
                           {"failures": matrix.failures, "flagged": matrix.flagged,
                            "infeasible_initial": matrix.infeasible_initial})
    _emit({"out": args.out, "cases": len(sampled), "failures": matrix.failures, "flagged": matrix.flagged,
           "mu": stats.mu.to_dict(), "sigma": stats.sigma.to_dict()})
    return 0


def cmd_tune_weights(args):
    tilde = parse_weights(args.tilde) if args.tilde else dict(Config.getConfigVal("tilde_alpha"))
    rows, stats = pipeline.read_interdependence(args.stats)
    alpha = tune_weights(tilde, stats.mu.to_dict())
    doc = {"format_version": WEIGHTS_FORMAT_VERSION, "alpha": alpha, "tilde": tilde}
    _emit(doc, args.out)
    return 0


def cmd_run_combined(args):
    net, reduced, cases = _study(args, profilesRequired=True)
    sampled = _sampled(cases)
    os.makedirs(args.out, exist_ok=True)
    matrix = None
    if args.interdependence:
        matrix, _ = pipeline.read_interdependence(args.interdependence)
    weights = WeightVector.from_mapping(_readWeights(args.weights), Config.getConfigVal("e_q_setpoint"))
    combined = pipeline.run_combined(reduced, sampled, weights, matrix)
    pipeline.write_combined(args.out, combined)
    pipeline.write_case_results(args.out, reduced, sampled, [combined.results])
    pipeline.write_report(args.out)
    pipeline.write_summary(args.out, [c.case_id for c in sampled],
                           {"weights": weights.as_dict(), "failures": combined.failures,
                            "envelope_violations": combined.violations})
    _emit({"out": args.out, "cases": len(sampled), "row": combined.row.to_dict(), "f_alpha": combined.f_alpha,
           "failures": combined.failures, "envelope_violations": combined.violations})
    return 0


def cmd_profiles(args):
    net = load_network(args.net)
    seed = Config.getConfigVal("seed")
    frame = synthetic_profiles(net, args.steps, seed)
    frame.to_csv(args.out, index=False, float_format=pipeline.FLOAT_FORMAT)
    _emit({"out": args.out, "steps": len(frame), "seed": seed, "columns": list(frame.columns)})
    return 0


def cmd_report(args):
    out = args.out or args.results
    pipeline.write_report(args.results, out, args.omit_single)
    matrixFile = os.path.join(args.results, "interdependence.csv")
    written = ["boxstats.json", "taps_hist.csv"]
    if os.path.isfile(matrixFile):
        rows, _ = pipeline.read_interdependence(matrixFile)
        pipeline.normalize_radar(rows).rename_axis("family").to_csv(
            os.path.join(out, "radar.csv"), float_format=pipeline.FLOAT_FORMAT)
        written.append("radar.csv")
    _emit({"out": out, "written": written})
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file, overridden by flags")
    common.add_argument("--workers", type=int, help="worker threads for case loops")
    common.add_argument("--tol-stat", dest="tol_stat", type=float, help="stationarity tolerance")
    common.add_argument("--tol-feas", dest="tol_feas", type=float, help="feasibility tolerance")
    common.add_argument("--max-iter", dest="max_iter", type=int, help="interior point iteration limit")
    common.add_argument("--taps", choices=TAP_MODES, help="tap mode")
    common.add_argument("--verbose", "-v", action="count", default=0, help="-v info, -vv debug")

    study = _Parser(add_help=False)
    study.add_argument("--net", required=True, help="network JSON file")
    study.add_argument("--profiles", help="profile CSV file, one row per time step")

    sampling = _Parser(add_help=False)
    sampling.add_argument("--count", type=int, help="number of sampled cases")
    sampling.add_argument("--seed", type=int, help="sampling seed")
    sampling.add_argument("--sampling", choices=("pcg64", "numpy-legacy"), help="sampling method")
    sampling.add_argument("--warm-start", dest="warm_start", action="store_true", default=None,
                          help="start each initial power flow from the previous case")
    sampling.add_argument("--out", required=True, help="result directory")

    parser = _Parser(prog="orpf4py", description="Optimal reactive power flow studies of distribution grids")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("validate", parents=[common, study], help="check network and profiles")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("powerflow", parents=[common, study], help="power flow of one case")
    p.add_argument("--case", type=int, default=0, help="case index")
    p.add_argument("--dump-solution", dest="dump_solution", help="write the solution JSON here")
    p.add_argument("--dump-ybus", dest="dump_ybus", help="write the Y-bus CSV here")
    p.set_defaults(func=cmd_powerflow)

    p = sub.add_parser("optimize", parents=[common, study], help="ORPF of one case")
    p.add_argument("--case", type=int, default=0, help="case index")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--objective", help="objective name, e.g. B.U or L.IS")
    group.add_argument("--weights", help="weights JSON file")
    p.add_argument("--dump-nlp", dest="dump_nlp", help="write the NLP at its start point here")
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("interdependence", parents=[common, study, sampling], help="interdependence matrix")
    p.set_defaults(func=cmd_interdependence)

    p = sub.add_parser("tune-weights", parents=[common], help="weights from relative importance")
    p.add_argument("--tilde", help="relative importance, e.g. B.U=10,G.Q=5")
    p.add_argument("--stats", required=True, help="interdependence CSV with a mu row")
    p.add_argument("--out", help="write the weights JSON here")
    p.set_defaults(func=cmd_tune_weights)

    p = sub.add_parser("run-combined", parents=[common, study, sampling], help="combined-objective study")
    p.add_argument("--weights", required=True, help="weights JSON file")
    p.add_argument("--interdependence", help="interdependence CSV for the envelope check")
    p.set_defaults(func=cmd_run_combined)

    p = sub.add_parser("profiles", parents=[common], help="synthetic daily profiles for a network")
    p.add_argument("--net", required=True, help="network JSON file")
    p.add_argument("--steps", type=int, default=96, help="time steps per day")
    p.add_argument("--seed", type=int, help="noise seed")
    p.add_argument("--out", required=True, help="profile CSV to write")
    p.set_defaults(func=cmd_profiles)

    p = sub.add_parser("report", parents=[common], help="box statistics and tap histograms")
    p.add_argument("--results", required=True, help="result directory holding points.csv")
    p.add_argument("--out", help="output directory, the result directory by default")
    p.add_argument("--omit-single", dest="omit_single", action="store_true",
                   help="leave out tap positions seen only once")
    p.set_defaults(func=cmd_report)
    return parser


def _configure(args):
    Config.initDict()
    if args.config:
        Config.loadDict(args.config)
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            Config.setConfigVal(key, value)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger().setLevel(level)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        return _fail(err, 2)
    try:
        _configure(args)
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as err:
        logger.debug("command failed", exc_info=True)
        return _fail(err, 1)


if __name__ == "__main__":
    sys.exit(main())
