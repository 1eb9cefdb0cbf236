from orpf4py import Config

# Add other "top-level" names here
from orpf4py.netmodel import (Network, StudyCase, load_network, load_profiles, nominal_case,
                              to_per_unit, validate)
from orpf4py.admittance import build_ybus, reduce_network
from orpf4py.powerflow import OperatingPoint, solve_pf
from orpf4py.objectives import WeightVector, eval_f, eval_F, eval_f_alpha, tune_weights
from orpf4py.nlp import build_nlp
from orpf4py.solver import solve
from orpf4py.taps import discretize_taps, optimize_case
from orpf4py.pipeline import run_combined, run_interdependence, sample_cases

__version__ = "0.1.0"

Config.initDict()
