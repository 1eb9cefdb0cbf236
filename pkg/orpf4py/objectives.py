"""Objective framework o = (O, S, A, B).

Every objective normalizes a quantity A over an element set S by a per
element base and measures the deviation from the reference indicator B
with the operation O, either root-mean-square or maximum:

    f_rms = sqrt(mean((A_s/A_base,s - B)**2))
    f_max = max(|A_s/A_base,s - B|)

The five supported objectives, named ``<set>.<quantity>``:

    B.U      bus voltage, base U_N, B = 1, rms
    G.Q      generator reactive power, base S_N, B = 0, rms
    E.Q      external grid reactive power, base S_max,e, B = setpoint, rms
    slack.P  summed external grid active power, base sum(S_max,e), B = -1, rms
    L.IS     line serial current, base I_con-max, B = 0, max

Appending ``@rms`` or ``@max`` to a name overrides the operation.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

OBJECTIVE_NAMES = ("B.U", "G.Q", "E.Q", "slack.P", "L.IS")
INITIAL = "initial"

_DEFAULTS = {
    "B.U": ("rms", "B", "U", 1.0),
    "G.Q": ("rms", "G", "Q", 0.0),
    "E.Q": ("rms", "E", "Q", 0.0),
    "slack.P": ("rms", "slack", "P", -1.0),
    "L.IS": ("max", "L", "I_S", 0.0),
}


class ObjectiveError(ValueError):
    """Raised for unknown objectives, empty sets, zero bases or bad weights."""


@dataclass(frozen=True)
class ObjectiveSpec:
    name: str
    op: str
    set: str
    quantity: str
    ref: float

    @property
    def key(self):
        """Structural identity, the reference value is a parameter."""
        return (self.set, self.quantity, self.op)

    @property
    def label(self):
        default = _DEFAULTS.get(self.name)
        if default is not None and default[0] != self.op:
            return "{}@{}".format(self.name, self.op)
        return self.name


def objective_spec(name, e_q_setpoint=0.0):
    """Parse an objective name such as ``B.U`` or ``B.U@max``

    Parameters
    ----------
    name : str
        objective name with optional ``@rms``/``@max`` suffix
    e_q_setpoint : float
        reference indicator of E.Q

    Returns
    -------
    ObjectiveSpec
    """
    if isinstance(name, ObjectiveSpec):
        return name
    base, _, op = str(name).partition("@")
    if base == INITIAL:
        raise ObjectiveError("'initial' is an evaluation mode and cannot be optimized")
    if base not in _DEFAULTS:
        raise ObjectiveError("unknown objective {!r}, expected one of {}".format(name, ", ".join(OBJECTIVE_NAMES)))
    defaultOp, sset, quantity, ref = _DEFAULTS[base]
    op = op or defaultOp
    if op not in ("rms", "max"):
        raise ObjectiveError("unknown operation {!r} in {!r}".format(op, name))
    if base == "E.Q":
        ref = float(e_q_setpoint)
    return ObjectiveSpec(base, op, sset, quantity, ref)


@dataclass(frozen=True)
class WeightVector:
    """Weights alpha_o >= 0 of the aggregated objective, aligned with ``specs``."""
    specs: tuple
    alpha: tuple

    def __post_init__(self):
        if len(self.specs) != len(self.alpha):
            raise ObjectiveError("weights and objectives are not aligned")
        if not self.specs:
            raise ObjectiveError("no objective given")
        for a in self.alpha:
            if not (math.isfinite(a) and a >= 0):
                raise ObjectiveError("weights must be finite and nonnegative, got {}".format(a))
        if not any(a > 0 for a in self.alpha):
            raise ObjectiveError("at least one weight must be positive")

    @classmethod
    def single(cls, name, e_q_setpoint=0.0):
        return cls((objective_spec(name, e_q_setpoint),), (1.0,))

    @classmethod
    def from_mapping(cls, weights, e_q_setpoint=0.0):
        specs = tuple(objective_spec(n, e_q_setpoint) for n in weights)
        return cls(specs, tuple(float(weights[n]) for n in weights))

    def positive(self):
        return [(s, a) for s, a in zip(self.specs, self.alpha) if a > 0]

    @property
    def structure(self):
        return tuple(s.key for s, _ in self.positive())

    def as_dict(self):
        return {s.label: a for s, a in zip(self.specs, self.alpha)}


def parse_weights(text):
    """Parse ``B.U=10,G.Q=5`` into an ordered dict of floats."""
    out = {}
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, value = item.partition("=")
        if not sep:
            raise ObjectiveError("weight {!r} is not <objective>=<value>".format(item))
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise ObjectiveError("weight {!r} is not a number".format(item))
    return out


def reduce_terms(op, terms):
    """Apply the rms or max operation to normalized deviations."""
    terms = np.asarray(terms, dtype=float)
    if terms.size == 0:
        raise ObjectiveError("objective over an empty element set")
    if op == "rms":
        return float(np.sqrt(np.mean(terms ** 2)))
    if op == "max":
        return float(np.max(np.abs(terms)))
    raise ObjectiveError("unknown operation {!r}".format(op))


def _normalized(values, bases, ref):
    bases = np.asarray(bases, dtype=float)
    if bases.size and np.any(bases <= 0):
        raise ObjectiveError("objective base must be strictly positive")
    return np.asarray(values, dtype=float) / bases - ref


def objective_terms(spec, solution, net):
    """Normalized deviations A_s/A_base,s - B of one objective on a solved state."""
    from orpf4py.nlp import derive_bounds

    if spec.key[:2] == ("B", "U"):
        return _normalized(solution.vm, np.ones(len(solution.vm)), spec.ref)
    if spec.key[:2] == ("G", "Q"):
        return _normalized(solution.q_g, [g.sn for g in net.gens], spec.ref)
    bounds = derive_bounds(net)
    if spec.key[:2] == ("E", "Q"):
        return _normalized(solution.s_e.imag, bounds.s_max_e, spec.ref)
    if spec.key[:2] == ("slack", "P"):
        if not len(bounds.s_max_e):
            raise ObjectiveError("objective over an empty element set")
        return _normalized([np.sum(solution.s_e.real)], [np.sum(bounds.s_max_e)], spec.ref)
    if spec.key[:2] == ("L", "I_S"):
        lines = np.array([k == "line" for k in bounds.kinds], dtype=bool)
        return _normalized(solution.i_serial[lines], bounds.i_con[lines], spec.ref)
    raise ObjectiveError("unsupported objective {}".format(spec.name))


def eval_f(spec, solution, net):
    """Value of one objective for a solved state

    Parameters
    ----------
    spec : ObjectiveSpec or str
        objective
    solution : PfSolution
        power-flow solution or the state of a solved NLP
    net : Network
        the reduced per-unit network the solution belongs to

    Returns
    -------
    float
        nonnegative objective value
    """
    spec = objective_spec(spec)
    return reduce_terms(spec.op, objective_terms(spec, solution, net))


def eval_all(solution, net, specs):
    return {s.label: eval_f(s, solution, net) for s in specs}


def eval_f_alpha(weights, values):
    """Aggregate sqrt(sum(alpha_o f_o**2) / sum(alpha_o))

    Parameters
    ----------
    weights : WeightVector or sequence of float
        alpha per objective
    values : sequence of float or dict
        f_o aligned with the weights, or keyed by objective label
    """
    if isinstance(weights, WeightVector):
        if isinstance(values, dict):
            values = [values[s.label] for s in weights.specs]
        weights = weights.alpha
    alpha = np.asarray(weights, dtype=float)
    f = np.asarray(list(values), dtype=float)
    if alpha.shape != f.shape:
        raise ObjectiveError("weights and values are not aligned")
    total = alpha.sum()
    if not total > 0:
        raise ObjectiveError("weights sum to zero")
    return float(np.sqrt(np.dot(alpha, f ** 2) / total))


def eval_F(values):
    """Performance measure sqrt(mean over cases of f**2)."""
    f = np.asarray(list(values), dtype=float)
    if f.size == 0:
        raise ObjectiveError("performance measure over an empty case set")
    return float(np.sqrt(np.mean(f ** 2)))


def F_alpha_from_F(weights, F_values):
    """F_alpha restored from per-objective F_o; same form as the per-case aggregate."""
    return eval_f_alpha(weights, F_values)


def tune_weights(tilde_alpha, mu_F):
    """alpha_o = tilde_alpha_o / mu_F_o

    Parameters
    ----------
    tilde_alpha : dict
        relative importance per objective name
    mu_F : dict
        mean performance measure per objective name

    Returns
    -------
    dict
        alpha per objective, zero where tilde_alpha is zero
    """
    alpha = {}
    for name, tilde in tilde_alpha.items():
        tilde = float(tilde)
        if tilde < 0 or not math.isfinite(tilde):
            raise ObjectiveError("tilde weight of {} must be finite and nonnegative".format(name))
        if tilde == 0:
            alpha[name] = 0.0
            continue
        if name not in mu_F:
            raise ObjectiveError("no mean performance for objective {}".format(name))
        mu = float(mu_F[name])
        if not mu > 0:
            raise ObjectiveError("mean performance of {} is {}, weight is undefined".format(name, mu))
        alpha[name] = tilde / mu
    return alpha
