"""Newton-Raphson AC power flow in polar coordinates.

External-grid buses are fixed-voltage buses that absorb the residual
complex power; every other bus has fixed P and Q injections.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix, diags, hstack, vstack
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from orpf4py import Config
from orpf4py.admittance import branch_table, stamp

logger = logging.getLogger(__name__)


class PowerFlowError(RuntimeError):
    """Raised when the power flow cannot be solved."""


@dataclass(frozen=True)
class OperatingPoint:
    """Decision variables: generator reactive powers (pu) and tap positions."""
    q_g: dict
    psi: dict

    @classmethod
    def initial(cls, net):
        """Q_g = 0 and every tap at its neutral position."""
        return cls({g.id: 0.0 for g in net.gens}, {t.id: float(t.tap_neutral) for t in net.trafos})


@dataclass(frozen=True)
class BranchCurrents:
    i_serial: np.ndarray
    i_par_from: np.ndarray
    i_par_to: np.ndarray
    i_from: np.ndarray
    i_to: np.ndarray


@dataclass
class PfSolution:
    bus_ids: tuple
    vm: np.ndarray
    va: np.ndarray
    s_e: np.ndarray
    q_g: np.ndarray
    psi: dict
    branch_ids: tuple
    currents: BranchCurrents
    s_from: np.ndarray
    s_to: np.ndarray
    iterations: int = 0
    max_mismatch: float = 0.0
    case_id: object = None
    extra: dict = field(default_factory=dict)

    @property
    def v(self):
        return self.vm * np.exp(1j * self.va)

    @property
    def losses(self):
        return complex(np.sum(self.s_from + self.s_to))

    @property
    def i_serial(self):
        return np.abs(self.currents.i_serial)


def branch_currents(table, v):
    """Currents of every Pi-branch for given bus voltages

    Parameters
    ----------
    table : BranchTable
        branch data from ``admittance.branch_table``
    v : ndarray of complex
        bus voltages

    Returns
    -------
    BranchCurrents
        serial current y_s (U_k - U_i/n), shunt currents at both ends and the
        terminal currents flowing into the branch at k and at i
    """
    uk = v[table.f]
    ui = v[table.t] / table.ratio
    iSerial = table.y_s * (uk - ui)
    iParFrom = table.y_p / 2 * uk
    iParTo = table.y_p / 2 * ui
    iFrom = iSerial + iParFrom
    iTo = (-iSerial + iParTo) / np.conj(table.ratio)
    return BranchCurrents(iSerial, iParFrom, iParTo, iFrom, iTo)


def incidence(net):
    """Element-to-bus incidence matrices for gens, loads and external grids."""
    index = net.busIndex()
    nb = len(net.buses)

    def build(elements):
        rows = [index[e.bus] for e in elements]
        return csr_matrix((np.ones(len(rows)), (rows, range(len(rows)))), shape=(nb, len(rows)))

    return build(net.gens), build(net.loads), build(net.ext_grids)


def case_vectors(net, case):
    """Per-unit injection vectors of a study case

    Returns
    -------
    tuple of ndarray
        generator P, load P, load Q, external grid vm and va
    """
    sb = net.s_base if net.per_unit else 1.0
    try:
        pg = np.array([case.p_g[g.id] for g in net.gens], dtype=float) / sb
        pm = np.array([case.p_m[m.id] for m in net.loads], dtype=float) / sb
        qm = np.array([case.q_m[m.id] for m in net.loads], dtype=float) / sb
        ue = [case.u_e[e.id] for e in net.ext_grids]
    except KeyError as err:
        raise PowerFlowError("study case {} has no value for element {}".format(case.case_id, err))
    vm = np.array([u[0] for u in ue], dtype=float)
    va = np.array([u[1] for u in ue], dtype=float)
    return pg, pm, qm, vm, va


def _dSbus_dV(Ybus, V):
    Ibus = Ybus * V
    diagV = diags(V)
    diagIbus = diags(Ibus)
    diagVnorm = diags(V / np.abs(V))
    dS_dVm = diagV * (Ybus * diagVnorm).conj() + diagIbus.conj() * diagVnorm
    dS_dVa = 1j * diagV * (diagIbus - Ybus * diagV).conj()
    return dS_dVm, dS_dVa


def _checkIsolated(net, table):
    nb = len(net.buses)
    graph = csr_matrix((np.ones(len(table.f)), (table.f, table.t)), shape=(nb, nb))
    count, labels = connected_components(graph, directed=False)
    if count > 1:
        index = net.busIndex()
        fed = {labels[index[e.bus]] for e in net.ext_grids}
        isolated = [b.id for b in net.buses if labels[index[b.id]] not in fed]
        if isolated:
            raise PowerFlowError("isolated buses without external grid: {}".format(isolated))


def build_solution(net, case, x, v, table=None, iterations=0, max_mismatch=0.0):
    """Assemble a PfSolution from bus voltages and the operating point."""
    if table is None:
        table = branch_table(net, x.psi)
    Cg, Cm, Ce = incidence(net)
    pg, pm, qm, _, _ = case_vectors(net, case)
    qg = np.array([x.q_g[g.id] for g in net.gens], dtype=float)
    sbus = Cg * (pg + 1j * qg) - Cm * (pm + 1j * qm)
    ybus = stamp(table, len(net.buses))
    scalc = v * np.conj(ybus * v)
    eb = np.array([net.busIndex()[e.bus] for e in net.ext_grids], dtype=int)
    se = scalc[eb] - sbus[eb]
    cur = branch_currents(table, v)
    return PfSolution(
        bus_ids=tuple(b.id for b in net.buses), vm=np.abs(v), va=np.angle(v), s_e=se, q_g=qg,
        psi={t.id: float(x.psi.get(t.id, t.tap_neutral)) for t in net.trafos},
        branch_ids=table.ids, currents=cur,
        s_from=v[table.f] * np.conj(cur.i_from), s_to=v[table.t] * np.conj(cur.i_to),
        iterations=iterations, max_mismatch=max_mismatch, case_id=case.case_id)


def solve_pf(net, case, x=None, v0=None, tol=None, max_iter=None):
    """Solve the AC power flow of one study case

    Parameters
    ----------
    net : Network
        reduced per-unit network
    case : StudyCase
        fixed injections in physical units
    x : OperatingPoint, optional
        generator reactive power and taps, ``OperatingPoint.initial`` if omitted
    v0 : ndarray of complex, optional
        start voltages, flat start when omitted
    tol : float, optional
        mismatch tolerance in pu
    max_iter : int, optional
        iteration limit

    Returns
    -------
    PfSolution
        converged state
    """
    tol = Config.getConfigVal("pf_tol") if tol is None else tol
    max_iter = Config.getConfigVal("pf_max_iter") if max_iter is None else max_iter
    x = OperatingPoint.initial(net) if x is None else x
    table = branch_table(net, x.psi)
    _checkIsolated(net, table)
    nb = len(net.buses)
    Ybus = stamp(table, nb)
    Cg, Cm, Ce = incidence(net)
    pg, pm, qm, vmExt, vaExt = case_vectors(net, case)
    qg = np.array([x.q_g[g.id] for g in net.gens], dtype=float)
    Sbus = Cg * (pg + 1j * qg) - Cm * (pm + 1j * qm)

    index = net.busIndex()
    ref = np.array([index[e.bus] for e in net.ext_grids], dtype=int)
    pq = np.array(sorted(set(range(nb)) - set(ref.tolist())), dtype=int)
    if v0 is None:
        Vm = np.ones(nb)
        Va = np.full(nb, vaExt[0] if len(vaExt) else 0.0)
    else:
        Vm = np.abs(v0).astype(float)
        Va = np.angle(v0).astype(float)
    Vm[ref] = vmExt
    Va[ref] = vaExt
    V = Vm * np.exp(1j * Va)

    npq = len(pq)
    j1, j2 = 0, npq
    j3, j4 = j2, j2 + npq

    def mismatch(V):
        mis = V * np.conj(Ybus * V) - Sbus
        return np.r_[mis[pq].real, mis[pq].imag]

    F = mismatch(V)
    normF = np.linalg.norm(F, np.inf) if npq else 0.0
    i = 0
    converged = normF < tol
    while not converged and i < max_iter:
        i += 1
        dS_dVm, dS_dVa = _dSbus_dV(Ybus, V)
        J11 = dS_dVa[pq, :][:, pq].real
        J12 = dS_dVm[pq, :][:, pq].real
        J21 = dS_dVa[pq, :][:, pq].imag
        J22 = dS_dVm[pq, :][:, pq].imag
        J = vstack([hstack([J11, J12]), hstack([J21, J22])], format="csr")
        dx = -spsolve(J, F)
        Va[pq] += dx[j1:j2]
        Vm[pq] += dx[j3:j4]
        V = Vm * np.exp(1j * Va)
        Vm = np.abs(V)
        Va = np.angle(V)
        F = mismatch(V)
        normF = np.linalg.norm(F, np.inf)
        if not np.isfinite(normF):
            break
        logger.debug("power flow iteration %d: max mismatch %.3e", i, normF)
        converged = normF < tol
    if not converged:
        raise PowerFlowError("power flow of case {} did not converge in {} iterations (mismatch {:.3e})"
                             .format(case.case_id, max_iter, normF))
    return build_solution(net, case, x, V, table, iterations=i, max_mismatch=float(normF))
