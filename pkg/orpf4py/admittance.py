"""Directional Pi-branch admittances and the bus admittance matrix.

A branch s runs from bus k to bus i. The series admittance y_s sits between
k and an auxiliary node i' whose voltage is U_i/n, half of the shunt
admittance y_p hangs at k and half at i', and an ideal transformer with
ratio n links i' to i. Transformers are oriented lv (k) to hv (i); their
series and shunt admittances are referred to the lv side.
"""
import dataclasses
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix

from orpf4py.netmodel import Line, NetworkError, Transformer, tap_ratio

logger = logging.getLogger(__name__)

DENSE_LIMIT = 200


class AdmittanceError(ValueError):
    """Raised for branches whose admittances cannot be formed."""

    def __init__(self, message, element_id=None):
        if element_id is not None:
            message = "{}: {}".format(element_id, message)
        super().__init__(message)
        self.element_id = element_id


@dataclass(frozen=True)
class PiBranch:
    id: object
    kind: str
    from_bus: object
    to_bus: object
    y_s: complex
    y_p: complex
    ratio: complex
    i_max: float


def transformer_admittances(t):
    """Series and shunt admittance of a per-unit transformer, lv side

    Parameters
    ----------
    t : Transformer
        per-unit transformer; ``ys_pu``/``yp_pu`` take precedence over the
        short-circuit and no-load test data

    Returns
    -------
    tuple of complex
        (y_s, y_p)
    """
    if t.ys_pu is not None:
        ys = complex(t.ys_pu)
        yp = complex(t.yp_pu) if t.yp_pu is not None else 0j
        if ys == 0:
            raise AdmittanceError("series admittance is zero", t.id)
        return ys, yp
    zBase = t.vn_lv ** 2 / t.sn
    z = t.vk_percent / 100.0 * zBase
    r = t.vkr_percent / 100.0 * zBase
    if z <= 0:
        raise AdmittanceError("short-circuit impedance is zero", t.id)
    x = math.sqrt(max(z * z - r * r, 0.0))
    ys = 1.0 / complex(r, x)
    ym = t.i0_percent / 100.0 * t.sn / t.vn_lv ** 2
    gm = t.pfe_kw / t.vn_lv ** 2
    bm = math.sqrt(max(ym * ym - gm * gm, 0.0))
    return ys, complex(gm, -bm)


def build_pibranch(element, psi=None):
    """Pi-branch of a per-unit line or transformer at tap ``psi``."""
    if isinstance(element, Line):
        z = complex(element.r, element.x)
        if z == 0:
            raise AdmittanceError("series impedance is zero", element.id)
        count = element.parallel_count
        return PiBranch(element.id, "line", element.from_bus, element.to_bus,
                        count / z, count * complex(element.g, element.b), 1 + 0j,
                        count * element.imax)
    if isinstance(element, Transformer):
        ys, yp = transformer_admittances(element)
        try:
            ratio = tap_ratio(element, psi)
        except NetworkError as err:
            raise AdmittanceError(str(err))
        return PiBranch(element.id, "transformer", element.lv_bus, element.hv_bus,
                        ys, yp, ratio, element.sn / element.vn_lv)
    raise AdmittanceError("not a branch element: {!r}".format(element))


def branches(net, taps=None):
    """Pi-branches of a network, lines first, then transformers."""
    taps = taps or {}
    out = [build_pibranch(line) for line in net.lines]
    out.extend(build_pibranch(t, taps.get(t.id)) for t in net.trafos)
    return out


@dataclass(frozen=True)
class BranchTable:
    """Branch data as aligned arrays for vectorized evaluation."""
    ids: tuple
    kinds: tuple
    f: np.ndarray
    t: np.ndarray
    y_s: np.ndarray
    y_p: np.ndarray
    ratio: np.ndarray
    i_max: np.ndarray

    @property
    def lineMask(self):
        return np.array([k == "line" for k in self.kinds], dtype=bool)


def branch_table(net, taps=None):
    index = net.busIndex()
    pis = branches(net, taps)
    return BranchTable(
        ids=tuple(p.id for p in pis),
        kinds=tuple(p.kind for p in pis),
        f=np.array([index[p.from_bus] for p in pis], dtype=int),
        t=np.array([index[p.to_bus] for p in pis], dtype=int),
        y_s=np.array([p.y_s for p in pis], dtype=complex),
        y_p=np.array([p.y_p for p in pis], dtype=complex),
        ratio=np.array([p.ratio for p in pis], dtype=complex),
        i_max=np.array([p.i_max for p in pis], dtype=float))


@dataclass(frozen=True)
class YBus:
    matrix: object
    bus_ids: tuple

    def dense(self):
        return self.matrix.toarray()

    def __getitem__(self, key):
        return self.matrix[key]

    def to_frame(self):
        y = self.dense()
        labels = [str(b) for b in self.bus_ids]
        data = OrderedDict()
        for j, label in enumerate(labels):
            data[label + ".re"] = y[:, j].real
            data[label + ".im"] = y[:, j].imag
        return pd.DataFrame(data, index=pd.Index(labels, name="bus"))

    def to_csv(self, filePath):
        self.to_frame().to_csv(filePath, float_format="%.12g")


def stamp(table, nb):
    """Sparse Y-bus from a branch table.

    Y_ki = -y_s/n, Y_ik = -y_s/conj(n), Y_kk += y_s + y_p/2 and
    Y_ii += (y_s + y_p/2)/|n|^2 for a branch from k to i.
    """
    ys, yp, n = table.y_s, table.y_p, table.ratio
    yff = ys + yp / 2
    ytt = (ys + yp / 2) / (n * np.conj(n))
    yft = -ys / n
    ytf = -ys / np.conj(n)
    rows = np.concatenate([table.f, table.t, table.f, table.t])
    cols = np.concatenate([table.f, table.t, table.t, table.f])
    vals = np.concatenate([yff, ytt, yft, ytf])
    return coo_matrix((vals, (rows, cols)), shape=(nb, nb), dtype=complex).tocsr()


def build_ybus(net, taps=None):
    """Bus admittance matrix of a reduced per-unit network

    Parameters
    ----------
    net : Network
        per-unit network
    taps : dict, optional
        transformer id to tap position; neutral tap when absent

    Returns
    -------
    YBus
        complex matrix indexed like ``net.buses``
    """
    table = branch_table(net, taps)
    return YBus(stamp(table, len(net.buses)), tuple(b.id for b in net.buses))


def _mergeLines(group):
    if len(group) == 1 and group[0].parallel_count == 1:
        return group[0]
    ys = sum(l.parallel_count / complex(l.r, l.x) for l in group)
    yp = sum(l.parallel_count * complex(l.g, l.b) for l in group)
    z = 1.0 / ys
    first = group[0]
    return dataclasses.replace(
        first, id="+".join(str(l.id) for l in group), r=z.real, x=z.imag,
        g=yp.real, b=yp.imag, imax=sum(l.parallel_count * l.imax for l in group),
        parallel_count=1)


def _trafoKey(t):
    return (t.lv_bus, t.hv_bus, t.vn_lv, t.vn_hv, t.tap_dn, t.tap_dphi, t.phi_n,
            t.tap_neutral, t.tap_min, t.tap_max)


def _mergeTrafos(group):
    if len(group) == 1:
        return group[0]
    ys, yp = 0j, 0j
    for t in group:
        a, b = transformer_admittances(t)
        ys += a
        yp += b
    return dataclasses.replace(group[0], id="+".join(str(t.id) for t in group),
                               sn=sum(t.sn for t in group), ys_pu=ys, yp_pu=yp)


def reduce_network(net):
    """Merge parallel branches and drop zero-rated elements

    Parameters
    ----------
    net : Network
        per-unit network

    Returns
    -------
    Network
        reduced network; ``origin`` maps every merged id to the original ids
        and lists the dropped elements
    """
    if not net.per_unit:
        raise AdmittanceError("reduce_network needs a per-unit network")
    lineGroups = OrderedDict()
    for line in net.lines:
        key = tuple(sorted((line.from_bus, line.to_bus), key=str))
        lineGroups.setdefault(key, []).append(line)
    trafoGroups = OrderedDict()
    for t in net.trafos:
        trafoGroups.setdefault(_trafoKey(t), []).append(t)
    lines = tuple(_mergeLines(g) for g in lineGroups.values())
    trafos = tuple(_mergeTrafos(g) for g in trafoGroups.values())
    gens = tuple(g for g in net.gens if g.sn > 0)
    loads = tuple(m for m in net.loads if m.sn > 0)
    dropped = tuple(e.id for e in net.gens + net.loads if e.sn <= 0)
    origin = {
        "lines": {m.id: tuple(l.id for l in g) for m, g in zip(lines, lineGroups.values())},
        "trafos": {m.id: tuple(t.id for t in g) for m, g in zip(trafos, trafoGroups.values())},
        "dropped": dropped,
    }
    merged = sum(len(g) - 1 for g in lineGroups.values()) + sum(len(g) - 1 for g in trafoGroups.values())
    if merged or dropped:
        logger.info("reduced %s: %d branches merged, %d elements dropped", net.name, merged, len(dropped))
    return dataclasses.replace(net, lines=lines, trafos=trafos, gens=gens, loads=loads, origin=origin)
