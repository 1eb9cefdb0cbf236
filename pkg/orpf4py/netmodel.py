"""Grid data model for orpf4py.

Elements are immutable dataclasses grouped into a ``Network``. Sets follow
the usual notation: buses B, external grids E, generators G, lines L,
loads M and transformers T. Power of external grids and generators is
counted as injected into their bus, so with fixed loads

    sum(S_e) = load - generation + losses

Units of a network read from file are kV, MVA, MW, MVAr, Ohm, uS and kA.
``to_per_unit`` converts to bus-local voltage bases and one system power
base.
"""
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from orpf4py import Config

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
ELEMENT_KEYS = ("buses", "lines", "trafos", "gens", "loads", "ext_grids")
PROFILE_TYPES = {"gen": "gens", "load": "loads", "ext_grid": "ext_grids"}


class NetworkError(ValueError):
    """Problem with a network or profile file, tagged with the offending element."""

    def __init__(self, message, element_id=None):
        if element_id is not None:
            message = "{}: {}".format(element_id, message)
        super().__init__(message)
        self.element_id = element_id


@dataclass(frozen=True)
class Bus:
    id: object
    vn: float
    vmin_pu: float = 0.9
    vmax_pu: float = 1.1


@dataclass(frozen=True)
class Line:
    id: object
    from_bus: object
    to_bus: object
    r: float
    x: float
    imax: float
    b: float = 0.0
    g: float = 0.0
    parallel_count: int = 1


@dataclass(frozen=True)
class Transformer:
    id: object
    lv_bus: object
    hv_bus: object
    vn_lv: float
    vn_hv: float
    sn: float
    vk_percent: float = 0.0
    vkr_percent: float = 0.0
    pfe_kw: float = 0.0
    i0_percent: float = 0.0
    tap_dn: float = 0.0
    tap_dphi: float = 0.0
    phi_n: float = 0.0
    tap_neutral: int = 0
    tap_min: int = 0
    tap_max: int = 0
    ys_pu: complex = None
    yp_pu: complex = None


@dataclass(frozen=True)
class Generator:
    id: object
    bus: object
    p_max: float
    sn: float
    q_min: float
    q_max: float
    p: float = 0.0


@dataclass(frozen=True)
class Load:
    id: object
    bus: object
    sn: float
    p: float = 0.0
    q: float = 0.0


@dataclass(frozen=True)
class ExternalGrid:
    id: object
    bus: object
    vm_pu: float = 1.0
    va_rad: float = 0.0


ELEMENT_TYPES = {
    "buses": Bus,
    "lines": Line,
    "trafos": Transformer,
    "gens": Generator,
    "loads": Load,
    "ext_grids": ExternalGrid,
}


@dataclass(frozen=True)
class Network:
    buses: tuple = ()
    lines: tuple = ()
    trafos: tuple = ()
    gens: tuple = ()
    loads: tuple = ()
    ext_grids: tuple = ()
    s_base: float = 100.0
    per_unit: bool = False
    name: str = ""
    origin: dict = field(default_factory=dict, compare=False, hash=False, repr=False)

    def bus(self, busId):
        for b in self.buses:
            if b.id == busId:
                return b
        raise NetworkError("unknown bus", busId)

    def busIndex(self):
        return {b.id: k for k, b in enumerate(self.buses)}

    def __str__(self):
        return "Network {!r}: {} buses, {} lines, {} trafos, {} gens, {} loads, {} ext grids".format(
            self.name, len(self.buses), len(self.lines), len(self.trafos),
            len(self.gens), len(self.loads), len(self.ext_grids))


@dataclass(frozen=True)
class StudyCase:
    """Fixed injections of one time step, physical units.

    ``u_e`` maps an external grid id to ``(vm_pu, va_rad)``.
    """
    case_id: object
    p_g: dict
    p_m: dict
    q_m: dict
    u_e: dict


# ---------------------------------------------------------------------------
# file i/o

def _element(cls, key, raw):
    if not isinstance(raw, dict):
        raise NetworkError("{} entries must be objects".format(key))
    known = {f.name for f in fields(cls)}
    elementId = raw.get("id")
    unknown = sorted(set(raw) - known)
    if unknown:
        raise NetworkError("unknown fields {}".format(", ".join(unknown)), elementId)
    kwargs = dict(raw)
    for name in ("ys_pu", "yp_pu"):
        if kwargs.get(name) is not None:
            try:
                re, im = kwargs[name]
                kwargs[name] = complex(float(re), float(im))
            except (TypeError, ValueError):
                raise NetworkError("{} must be a [re, im] pair".format(name), elementId)
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise NetworkError("schema violation in {}: {}".format(key, err), elementId)


def parse_network(document):
    """Build a Network from an already decoded JSON document.

    A document without ``s_base`` takes the ``s_base`` setting.
    """
    if not isinstance(document, dict):
        raise NetworkError("network document must be a JSON object")
    unknown = sorted(set(document) - set(ELEMENT_KEYS) - {"s_base", "name", "format_version"})
    if unknown:
        raise NetworkError("unknown top-level keys: {}".format(", ".join(unknown)))
    version = document.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise NetworkError("unsupported format_version {}".format(version))
    elements = {}
    for key in ELEMENT_KEYS:
        raw = document.get(key, [])
        if not isinstance(raw, list):
            raise NetworkError("{} must be a list".format(key))
        elements[key] = tuple(_element(ELEMENT_TYPES[key], key, r) for r in raw)
    net = Network(s_base=float(document.get("s_base", Config.getConfigVal("s_base"))),
                  name=str(document.get("name", "")), **elements)
    problems = validate(net)
    if problems:
        elementId, message = problems[0]
        raise NetworkError(message, elementId)
    return net


def load_network(document):
    """Read a network file

    Parameters
    ----------
    document : str or dict
        path of a JSON network file, a JSON string or a decoded document

    Returns
    -------
    Network
        validated network in physical units
    """
    if isinstance(document, dict):
        return parse_network(document)
    text = document
    if not document.lstrip().startswith("{"):
        try:
            with open(document, "r") as f:
                text = f.read()
        except OSError:
            raise NetworkError("There is no network file at " + str(document))
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise NetworkError("network file is not valid JSON: {}".format(err))
    return parse_network(data)


def _jsonValue(value):
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def serialize_network(net):
    """Return the network as a JSON string with a stable layout."""
    if net.per_unit:
        raise NetworkError("only physical-unit networks are serialized")
    doc = {"format_version": FORMAT_VERSION, "name": net.name, "s_base": net.s_base}
    for key in ELEMENT_KEYS:
        rows = []
        for element in getattr(net, key):
            row = {}
            for f in fields(element):
                value = getattr(element, f.name)
                if f.name in ("ys_pu", "yp_pu") and value is None:
                    continue
                row[f.name] = _jsonValue(value)
            rows.append(row)
        doc[key] = rows
    return json.dumps(doc, indent=2) + "\n"


def dump_network(net, filePath):
    with open(filePath, "w") as f:
        f.write(serialize_network(net))


# ---------------------------------------------------------------------------
# validation

def _connectedProblems(net, index):
    n = len(net.buses)
    rows, cols = [], []
    for line in net.lines:
        rows.append(index[line.from_bus])
        cols.append(index[line.to_bus])
    for t in net.trafos:
        rows.append(index[t.lv_bus])
        cols.append(index[t.hv_bus])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    count, labels = connected_components(graph, directed=False)
    if count <= 1:
        return []
    fed = {labels[index[e.bus]] for e in net.ext_grids}
    return [(b.id, "bus is not connected to an external grid")
            for b in net.buses if labels[index[b.id]] not in fed]


def validate(net):
    """Check the network invariants without changing the network

    Parameters
    ----------
    net : Network
        network to check

    Returns
    -------
    list of (element id, message)
        every problem found, empty when the network is valid
    """
    problems = []
    index = {}
    for b in net.buses:
        if b.id in index:
            problems.append((b.id, "duplicate bus id"))
        index[b.id] = len(index)
        if not b.vn > 0:
            problems.append((b.id, "nominal voltage must be positive"))
        if not 0 < b.vmin_pu < b.vmax_pu:
            problems.append((b.id, "voltage bounds must satisfy 0 < vmin_pu < vmax_pu"))
    if not net.s_base > 0:
        problems.append((None, "s_base must be positive"))

    def checkBus(element, busId):
        if busId not in index:
            problems.append((element.id, "references unknown bus {!r}".format(busId)))
            return False
        return True

    for key in ELEMENT_KEYS[1:]:
        seen = set()
        for element in getattr(net, key):
            if element.id in seen:
                problems.append((element.id, "duplicate id in {}".format(key)))
            seen.add(element.id)

    for line in net.lines:
        ok = checkBus(line, line.from_bus) & checkBus(line, line.to_bus)
        if line.from_bus == line.to_bus:
            problems.append((line.id, "line connects a bus to itself"))
        if not line.imax > 0:
            problems.append((line.id, "imax must be positive"))
        if math.hypot(line.r, line.x) <= 0:
            problems.append((line.id, "series impedance must be nonzero"))
        if int(line.parallel_count) != line.parallel_count or line.parallel_count < 1:
            problems.append((line.id, "parallel_count must be a positive integer"))
        if ok and net.bus(line.from_bus).vn != net.bus(line.to_bus).vn:
            problems.append((line.id, "line ends have different nominal voltages"))
    for t in net.trafos:
        checkBus(t, t.lv_bus)
        checkBus(t, t.hv_bus)
        if t.lv_bus == t.hv_bus:
            problems.append((t.id, "transformer connects a bus to itself"))
        if not t.sn > 0:
            problems.append((t.id, "sn must be positive"))
        if not net.per_unit and not 0 < t.vn_lv < t.vn_hv:
            problems.append((t.id, "nominal voltages must satisfy 0 < vn_lv < vn_hv"))
        if not t.tap_min <= t.tap_neutral <= t.tap_max:
            problems.append((t.id, "tap range must satisfy tap_min <= tap_neutral <= tap_max"))
        for psi in (t.tap_min, t.tap_max):
            if 1.0 + t.tap_dn * (psi - t.tap_neutral) <= 0:
                problems.append((t.id, "tap magnitude factor is not positive at tap {}".format(psi)))
        if t.ys_pu is None and not (t.vk_percent > 0 and 0 <= t.vkr_percent <= t.vk_percent):
            problems.append((t.id, "needs 0 <= vkr_percent <= vk_percent with vk_percent > 0, or ys_pu"))
    for gen in net.gens:
        checkBus(gen, gen.bus)
        if not gen.sn > 0:
            problems.append((gen.id, "sn must be positive"))
        if not gen.q_min <= gen.q_max:
            problems.append((gen.id, "q_min must not exceed q_max"))
        if gen.p_max < 0:
            problems.append((gen.id, "p_max must not be negative"))
    for load in net.loads:
        checkBus(load, load.bus)
        if load.sn < 0:
            problems.append((load.id, "sn must not be negative"))
    extBuses = set()
    for ext in net.ext_grids:
        checkBus(ext, ext.bus)
        if not ext.vm_pu > 0:
            problems.append((ext.id, "voltage magnitude must be positive"))
        if ext.bus in extBuses:
            problems.append((ext.id, "more than one external grid at bus {!r}".format(ext.bus)))
        extBuses.add(ext.bus)
    if not net.ext_grids:
        problems.append((None, "network has no external grid"))
    if not problems and net.buses:
        problems.extend(_connectedProblems(net, index))
    return problems


# ---------------------------------------------------------------------------
# per-unit conversion

def _lineFactors(net, line):
    vn = net.bus(line.from_bus).vn
    if vn == 0:
        raise NetworkError("zero nominal voltage", line.from_bus)
    zBase = vn ** 2 / net.s_base
    return zBase, math.sqrt(3.0) * vn / net.s_base


def _convert(net, forward):
    if net.s_base <= 0:
        raise NetworkError("s_base must be positive")
    scale = (lambda v, f: v / f) if forward else (lambda v, f: v * f)
    sb = net.s_base
    lines = []
    for line in net.lines:
        zBase, iFactor = _lineFactors(net, line)
        lines.append(dataclasses.replace(
            line, r=scale(line.r, zBase), x=scale(line.x, zBase),
            b=scale(line.b, 1e6 / zBase), g=scale(line.g, 1e6 / zBase),
            imax=scale(line.imax, 1.0 / iFactor)))
    trafos = []
    for t in net.trafos:
        vnLv = net.bus(t.lv_bus).vn
        vnHv = net.bus(t.hv_bus).vn
        if vnLv == 0 or vnHv == 0:
            raise NetworkError("zero nominal voltage", t.id)
        trafos.append(dataclasses.replace(
            t, vn_lv=scale(t.vn_lv, vnLv), vn_hv=scale(t.vn_hv, vnHv),
            sn=scale(t.sn, sb), pfe_kw=scale(t.pfe_kw, 1000.0 * sb)))
    gens = [dataclasses.replace(g, p_max=scale(g.p_max, sb), sn=scale(g.sn, sb),
                                q_min=scale(g.q_min, sb), q_max=scale(g.q_max, sb),
                                p=scale(g.p, sb)) for g in net.gens]
    loads = [dataclasses.replace(m, sn=scale(m.sn, sb), p=scale(m.p, sb), q=scale(m.q, sb))
             for m in net.loads]
    return dataclasses.replace(net, lines=tuple(lines), trafos=tuple(trafos),
                               gens=tuple(gens), loads=tuple(loads), per_unit=forward)


def to_per_unit(net):
    """Convert a physical-unit network to per unit.

    Impedances use Z_base = vn**2 / s_base of the line's bus, shunts are
    converted from uS, currents use I_base = s_base / (sqrt(3) vn) and
    transformer nominal voltages become fractions of their bus voltages.
    """
    if net.per_unit:
        raise NetworkError("network is already per unit")
    for b in net.buses:
        if b.vn == 0:
            raise NetworkError("zero nominal voltage", b.id)
    return _convert(net, True)


def from_per_unit(net):
    if not net.per_unit:
        raise NetworkError("network is not per unit")
    return _convert(net, False)


def tap_ratio(element, psi=None):
    """Complex winding ratio n of a branch

    Parameters
    ----------
    element : Line or Transformer
        branch element; lines always give 1
    psi : float, optional
        tap position, may be fractional; neutral tap when omitted

    Returns
    -------
    complex
        (vn_hv/vn_lv) * (1 + tap_dn*d) * exp(j*(phi_n + tap_dphi*d)) with
        d = psi - tap_neutral
    """
    if isinstance(element, Line):
        return 1 + 0j
    if psi is None:
        psi = element.tap_neutral
    d = psi - element.tap_neutral
    magnitude = 1.0 + element.tap_dn * d
    if magnitude <= 0:
        raise NetworkError("tap magnitude factor {} is not positive at tap {}".format(magnitude, psi),
                           element.id)
    angle = element.phi_n + element.tap_dphi * d
    ratio = element.vn_hv / element.vn_lv * magnitude
    if angle == 0:
        return complex(ratio, 0.0)
    return ratio * complex(math.cos(angle), math.sin(angle))


# ---------------------------------------------------------------------------
# study cases

def nominal_case(net, caseId=0):
    """Study case built from the nominal injections stored in the network."""
    return StudyCase(case_id=caseId,
                     p_g={g.id: g.p for g in net.gens},
                     p_m={m.id: m.p for m in net.loads},
                     q_m={m.id: m.q for m in net.loads},
                     u_e={e.id: (e.vm_pu, e.va_rad) for e in net.ext_grids})


def _column(frame, name, default, elementId):
    if name not in frame.columns:
        return np.full(len(frame), float(default))
    values = frame[name].to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise NetworkError("profile column {} has missing values".format(name), elementId)
    return values


def cases_from_frame(net, frame):
    """Turn a profile table into study cases; absent columns use the nominal values."""
    known = set()
    ids = {key: {str(e.id) for e in getattr(net, key)} for key in PROFILE_TYPES.values()}
    for name in frame.columns:
        parts = str(name).split(".")
        if len(parts) != 3 or parts[0] not in PROFILE_TYPES:
            raise NetworkError("profile column {!r} is not <type>.<id>.<quantity>".format(name))
        if parts[1] not in ids[PROFILE_TYPES[parts[0]]]:
            raise NetworkError("profile column references unknown element", parts[1])
        known.add(name)
    pg = {g.id: _column(frame, "gen.{}.p_mw".format(g.id), g.p, g.id) for g in net.gens}
    pm = {m.id: _column(frame, "load.{}.p_mw".format(m.id), m.p, m.id) for m in net.loads}
    qm = {m.id: _column(frame, "load.{}.q_mvar".format(m.id), m.q, m.id) for m in net.loads}
    vm = {e.id: _column(frame, "ext_grid.{}.vm_pu".format(e.id), e.vm_pu, e.id) for e in net.ext_grids}
    va = {e.id: _column(frame, "ext_grid.{}.va_rad".format(e.id), e.va_rad, e.id) for e in net.ext_grids}
    for g in net.gens:
        if np.any(pg[g.id] < 0) or np.any(pg[g.id] > g.p_max + 1e-9):
            raise NetworkError("profile power outside [0, p_max]", g.id)
    cases = []
    for k in range(len(frame)):
        cases.append(StudyCase(
            case_id=k,
            p_g={g: float(v[k]) for g, v in pg.items()},
            p_m={m: float(v[k]) for m, v in pm.items()},
            q_m={m: float(v[k]) for m, v in qm.items()},
            u_e={e: (float(vm[e][k]), float(va[e][k])) for e in vm}))
    return cases


def load_profiles(net, filePath):
    """Read a delimited profile file into a list of study cases

    Parameters
    ----------
    net : Network
        network the profiles belong to
    filePath : str
        CSV file, one row per time step, columns ``<type>.<id>.<quantity>``

    Returns
    -------
    list of StudyCase
        one case per row, ``case_id`` is the row position
    """
    try:
        frame = pd.read_csv(filePath)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as err:
        raise NetworkError("cannot read profile file {}: {}".format(filePath, err))
    return cases_from_frame(net, frame)


def synthetic_profiles(net, steps=96, seed=42):
    """Daily-shaped profile table for desk-scale studies.

    Generators follow a midday peak, loads a morning and evening peak, both
    with a little seeded noise, scaled by the nominal values of the network.
    """
    rng = np.random.default_rng(seed)
    hours = np.arange(steps) * 24.0 / steps
    solar = np.clip(np.sin((hours - 6.0) / 12.0 * np.pi), 0.0, None)
    demand = 0.6 + 0.25 * np.exp(-((hours - 8.0) / 2.0) ** 2) + 0.4 * np.exp(-((hours - 19.0) / 2.5) ** 2)
    data = {}
    for g in net.gens:
        shape = np.clip(solar + rng.normal(0.0, 0.05, steps), 0.0, 1.0)
        data["gen.{}.p_mw".format(g.id)] = np.round(shape * g.p_max, 6)
    for m in net.loads:
        shape = np.clip(demand + rng.normal(0.0, 0.03, steps), 0.0, None)
        data["load.{}.p_mw".format(m.id)] = np.round(shape * m.p, 6)
        data["load.{}.q_mvar".format(m.id)] = np.round(shape * m.q, 6)
    for e in net.ext_grids:
        data["ext_grid.{}.vm_pu".format(e.id)] = np.round(e.vm_pu + rng.normal(0.0, 0.003, steps), 6)
    return pd.DataFrame(data)
