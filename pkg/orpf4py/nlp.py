"""ORPF nonlinear program of one study case.

Variables, in this order::

    vm, va   voltage magnitude and angle of every bus without external grid
    q        generator reactive power
    psi      transformer tap position (continuous)
    pe, qe   external grid active and reactive power
    m        epigraph bound of each max-type objective (squared)

Equalities are the nodal power balances at every bus; the voltages of
external-grid buses are parameters. Inequalities are the serial-current
limits |I_S|**2 / I_con**2 - 1 <= 0 and, for max-type objectives, the
epigraph rows term**2 - m <= 0. The objective is the squared aggregate
sum(alpha_o f_o**2) / sum(alpha_o). Derivatives come from jax.
"""
import functools
import logging
from dataclasses import dataclass

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
import numpy as np

from orpf4py import Config
from orpf4py.admittance import AdmittanceError, branch_table, build_pibranch
from orpf4py.netmodel import tap_ratio
from orpf4py.objectives import ObjectiveError, WeightVector
from orpf4py.powerflow import (OperatingPoint, PowerFlowError, build_solution, case_vectors,
                               incidence, solve_pf)
from orpf4py.solver import SmoothProblem

logger = logging.getLogger(__name__)


class FormulationError(ValueError):
    """Raised when the NLP of a case cannot be set up."""

    def __init__(self, message, element_id=None):
        if element_id is not None:
            message = "{}: {}".format(element_id, message)
        super().__init__(message)
        self.element_id = element_id


@dataclass(frozen=True)
class DerivedBounds:
    """S_max,e per external grid and I_con-max per branch (branch table order)."""
    s_max_e: np.ndarray
    i_con: np.ndarray
    branch_ids: tuple
    kinds: tuple


def derive_smax_e(net):
    """Maximal apparent power of every external grid

    Sums the capacity of the elements at the external-grid bus: U_max I_max
    for lines, S_max for transformers and S_N for loads and generators.

    Parameters
    ----------
    net : Network
        reduced per-unit network

    Returns
    -------
    ndarray
        S_max,e in pu, ordered like ``net.ext_grids``
    """
    out = []
    for e in net.ext_grids:
        bus = net.bus(e.bus)
        total = 0.0
        for line in net.lines:
            if bus.id in (line.from_bus, line.to_bus):
                total += bus.vmax_pu * line.imax * line.parallel_count
        total += sum(t.sn for t in net.trafos if bus.id in (t.lv_bus, t.hv_bus))
        total += sum(m.sn for m in net.loads if m.bus == bus.id)
        total += sum(g.sn for g in net.gens if g.bus == bus.id)
        if not total > 0:
            raise FormulationError("no element rating at the external grid bus, S_max is zero", e.id)
        out.append(total)
    return np.array(out, dtype=float)


def derive_serial_current_bound(branch, vmax_from, vmax_to):
    """I_con-max = I_max - |y_p/2| * max(U_max,k, U_max,i/|n|)."""
    ipar = abs(branch.y_p / 2) * max(vmax_from, vmax_to / abs(branch.ratio))
    icon = branch.i_max - ipar
    if not icon > 0:
        raise FormulationError("shunt current {:.4g} exhausts the current limit {:.4g}"
                               .format(ipar, branch.i_max), branch.id)
    return icon


def _weakestTap(t):
    # |n| is linear in psi, its minimum sits at one end of the range
    return min((t.tap_min, t.tap_max), key=lambda psi: abs(tap_ratio(t, psi)))


@functools.lru_cache(maxsize=32)
def derive_bounds(net):
    """DerivedBounds of a reduced per-unit network, cached per network."""
    sMax = derive_smax_e(net)
    branches = [build_pibranch(line) for line in net.lines]
    try:
        branches += [build_pibranch(t, _weakestTap(t)) for t in net.trafos]
    except AdmittanceError as err:
        raise FormulationError(str(err))
    icon = np.array([derive_serial_current_bound(b, net.bus(b.from_bus).vmax_pu, net.bus(b.to_bus).vmax_pu)
                     for b in branches], dtype=float)
    return DerivedBounds(sMax, icon, tuple(b.id for b in branches), tuple(b.kind for b in branches))


def constant_q_limits(net, case):
    """Constant reactive power box stored with each generator (pu)."""
    return (np.array([g.q_min for g in net.gens], dtype=float),
            np.array([g.q_max for g in net.gens], dtype=float))


Q_LIMIT_POLICIES = {"constant": constant_q_limits}


class _Model:
    """jit-compiled residuals and derivatives for one network and objective structure."""

    def __init__(self, net, structure):
        self.net = net
        self.structure = structure
        index = net.busIndex()
        nb = len(net.buses)
        self.extBus = np.array([index[e.bus] for e in net.ext_grids], dtype=int)
        self.pq = np.array(sorted(set(range(nb)) - set(self.extBus.tolist())), dtype=int)
        npq, ng, nt, ne = len(self.pq), len(net.gens), len(net.trafos), len(net.ext_grids)
        self.nmax = sum(1 for key in structure if key[2] == "max")
        sizes = [("vm", npq), ("va", npq), ("q", ng), ("psi", nt), ("pe", ne), ("qe", ne), ("m", self.nmax)]
        self.slices = {}
        start = 0
        for name, size in sizes:
            self.slices[name] = slice(start, start + size)
            start += size
        self.n = start

        table = branch_table(net)
        nbr = len(table.ids)
        nl = len(net.lines)
        self.bounds = derive_bounds(net)
        Cf = np.zeros((nbr, nb))
        Ct = np.zeros((nbr, nb))
        Cf[np.arange(nbr), table.f] = 1.0
        Ct[np.arange(nbr), table.t] = 1.0
        Btr = np.zeros((nbr, nt))
        Btr[nl + np.arange(nt), np.arange(nt)] = 1.0
        Ppq = np.zeros((nb, npq))
        Ppq[self.pq, np.arange(npq)] = 1.0
        Pext = np.zeros((nb, ne))
        Pext[self.extBus, np.arange(ne)] = 1.0
        Cg, Cm, Ce = incidence(net)
        self.Cg, self.Cm = Cg.toarray(), Cm.toarray()
        self.lineIdx = np.arange(nl)

        c = {
            "Cf": jnp.asarray(Cf), "Ct": jnp.asarray(Ct), "Btr": jnp.asarray(Btr),
            "Ppq": jnp.asarray(Ppq), "Pext": jnp.asarray(Pext),
            "Cg": jnp.asarray(self.Cg), "Ce": jnp.asarray(Ce.toarray()),
            "ys": jnp.asarray(table.y_s), "yp": jnp.asarray(table.y_p),
            "a0": jnp.asarray([t.vn_hv / t.vn_lv for t in net.trafos], dtype=float),
            "dn": jnp.asarray([t.tap_dn for t in net.trafos], dtype=float),
            "dphi": jnp.asarray([t.tap_dphi for t in net.trafos], dtype=float),
            "phin": jnp.asarray([t.phi_n for t in net.trafos], dtype=float),
            "neutral": jnp.asarray([t.tap_neutral for t in net.trafos], dtype=float),
            "icon2": jnp.asarray(self.bounds.i_con ** 2),
            "genSn": jnp.asarray([g.sn for g in net.gens], dtype=float),
            "sMax": jnp.asarray(self.bounds.s_max_e),
        }
        self.c = c
        s = self.slices

        def flows(z, params):
            pBus, qLoad, vmExt, vaExt, weights, refs = params
            vm = c["Ppq"] @ z[s["vm"]] + c["Pext"] @ vmExt
            va = c["Ppq"] @ z[s["va"]] + c["Pext"] @ vaExt
            v = vm * jnp.exp(1j * va)
            d = z[s["psi"]] - c["neutral"]
            nt_ = c["a0"] * (1.0 + c["dn"] * d) * jnp.exp(1j * (c["phin"] + c["dphi"] * d))
            n = 1.0 + c["Btr"] @ (nt_ - 1.0)
            uk = c["Cf"] @ v
            ui = (c["Ct"] @ v) / n
            iS = c["ys"] * (uk - ui)
            iFrom = iS + c["yp"] / 2 * uk
            iTo = (-iS + c["yp"] / 2 * ui) / jnp.conj(n)
            ibus = c["Cf"].T @ iFrom + c["Ct"].T @ iTo
            sbus = v * jnp.conj(ibus)
            iS2 = jnp.real(iS) ** 2 + jnp.imag(iS) ** 2
            return vm, sbus, iS2

        def squaredTerms(z, params, key, ref, vm, iS2):
            if key[:2] == ("B", "U"):
                return (vm - ref) ** 2
            if key[:2] == ("G", "Q"):
                return (z[s["q"]] / c["genSn"] - ref) ** 2
            if key[:2] == ("E", "Q"):
                return (z[s["qe"]] / c["sMax"] - ref) ** 2
            if key[:2] == ("slack", "P"):
                return jnp.reshape((jnp.sum(z[s["pe"]]) / jnp.sum(c["sMax"]) - ref) ** 2, (1,))
            return iS2[self.lineIdx] / c["icon2"][self.lineIdx]

        def eq(z, params):
            pBus, qLoad = params[0], params[1]
            vm, sbus, iS2 = flows(z, params)
            p = pBus + c["Ce"] @ z[s["pe"]] - jnp.real(sbus)
            q = c["Cg"] @ z[s["q"]] - qLoad + c["Ce"] @ z[s["qe"]] - jnp.imag(sbus)
            return jnp.concatenate([p, q])

        def ineq(z, params):
            refs = params[5]
            vm, sbus, iS2 = flows(z, params)
            rows = [iS2 / c["icon2"] - 1.0]
            m = z[s["m"]]
            slot = 0
            for j, key in enumerate(structure):
                if key[2] == "max":
                    rows.append(squaredTerms(z, params, key, refs[j], vm, iS2) - m[slot])
                    slot += 1
            return jnp.concatenate(rows)

        def objective(z, params):
            weights, refs = params[4], params[5]
            vm, sbus, iS2 = flows(z, params)
            m = z[s["m"]]
            total = 0.0
            slot = 0
            for j, key in enumerate(structure):
                if key[2] == "max":
                    total = total + weights[j] * m[slot]
                    slot += 1
                else:
                    total = total + weights[j] * jnp.mean(squaredTerms(z, params, key, refs[j], vm, iS2))
            return total / jnp.sum(weights)

        def lagrangian(z, params, sigma, lamEq, lamIn):
            return sigma * objective(z, params) + lamEq @ eq(z, params) + lamIn @ ineq(z, params)

        self.f = jax.jit(objective)
        self.df = jax.jit(jax.grad(objective))
        self.c_eq = jax.jit(eq)
        self.dc_eq = jax.jit(jax.jacfwd(eq))
        self.g_in = jax.jit(ineq)
        self.dg_in = jax.jit(jax.jacfwd(ineq))
        self.hess = jax.jit(jax.hessian(lagrangian))
        self.n_eq = 2 * nb
        self.n_ineq = nbr + sum(self._termCount(key) for key in structure if key[2] == "max")

    def _termCount(self, key):
        if key[:2] == ("B", "U"):
            return len(self.net.buses)
        if key[:2] == ("G", "Q"):
            return len(self.net.gens)
        if key[:2] == ("E", "Q"):
            return len(self.net.ext_grids)
        if key[:2] == ("slack", "P"):
            return 1
        return len(self.net.lines)


@functools.lru_cache(maxsize=16)
def _model(net, structure):
    logger.info("compiling NLP for %s with objectives %s", net.name, structure)
    return _Model(net, structure)


class NlpProblem(SmoothProblem):
    """ORPF of one study case with some taps possibly fixed.

    Variables fixed by ``fixed_taps`` or by equal bounds are removed from the
    vector the solver sees; ``full`` puts them back.
    """

    def __init__(self, model, net, case, weights, fixed_taps, qLimits):
        self.model = model
        self.net = net
        self.case = case
        self.weights = weights
        self.fixed_taps = dict(fixed_taps)
        pg, pm, qm, vmExt, vaExt = case_vectors(net, case)
        pos = weights.positive()
        self.params = (jnp.asarray(model.Cg @ pg - model.Cm @ pm), jnp.asarray(model.Cm @ qm),
                       jnp.asarray(vmExt), jnp.asarray(vaExt),
                       jnp.asarray([a for _, a in pos], dtype=float),
                       jnp.asarray([spec.ref for spec, _ in pos], dtype=float))
        self.specs = tuple(spec for spec, _ in pos)
        s = model.slices
        lo = np.full(model.n, -np.inf)
        hi = np.full(model.n, np.inf)
        pqBuses = [net.buses[k] for k in model.pq]
        lo[s["vm"]] = [b.vmin_pu for b in pqBuses]
        hi[s["vm"]] = [b.vmax_pu for b in pqBuses]
        lo[s["q"]], hi[s["q"]] = qLimits
        lo[s["psi"]] = [t.tap_min for t in net.trafos]
        hi[s["psi"]] = [t.tap_max for t in net.trafos]
        sMax = model.bounds.s_max_e
        lo[s["pe"]], hi[s["pe"]] = -sMax, sMax
        lo[s["qe"]], hi[s["qe"]] = -sMax, sMax
        lo[s["m"]] = 0.0
        base = np.zeros(model.n)
        free = np.ones(model.n, dtype=bool)
        psiIdx = np.arange(model.n)[s["psi"]]
        for j, t in enumerate(net.trafos):
            if t.id in self.fixed_taps:
                base[psiIdx[j]] = self.fixed_taps[t.id]
                free[psiIdx[j]] = False
        same = np.isfinite(lo) & (lo == hi)
        base[same] = lo[same]
        free &= ~same
        self._base = base
        self._fullLower = lo
        self._fullUpper = hi
        self.free = free
        self._lower = lo[free]
        self._upper = hi[free]
        names = ["vm[{}]".format(b.id) for b in pqBuses] + ["va[{}]".format(b.id) for b in pqBuses]
        names += ["q[{}]".format(g.id) for g in net.gens] + ["psi[{}]".format(t.id) for t in net.trafos]
        names += ["pe[{}]".format(e.id) for e in net.ext_grids] + ["qe[{}]".format(e.id) for e in net.ext_grids]
        names += ["m[{}]".format(spec.label) for spec in self.specs if spec.op == "max"]
        self.names = tuple(np.array(names, dtype=object)[free])

    # SmoothProblem interface
    @property
    def n(self):
        return int(self.free.sum())

    @property
    def n_eq(self):
        return self.model.n_eq

    @property
    def n_ineq(self):
        return self.model.n_ineq

    @property
    def lower(self):
        return self._lower

    @property
    def upper(self):
        return self._upper

    @property
    def n_taps_free(self):
        return int(self.free[self.model.slices["psi"]].sum())

    def full(self, x):
        z = self._base.copy()
        z[self.free] = x
        return z

    def objective(self, x):
        return float(self.model.f(self.full(x), self.params))

    def gradient(self, x):
        return np.asarray(self.model.df(self.full(x), self.params))[self.free]

    def eq(self, x):
        return np.asarray(self.model.c_eq(self.full(x), self.params))

    def eq_jacobian(self, x):
        return np.asarray(self.model.dc_eq(self.full(x), self.params))[:, self.free]

    def ineq(self, x):
        return np.asarray(self.model.g_in(self.full(x), self.params))

    def ineq_jacobian(self, x):
        return np.asarray(self.model.dg_in(self.full(x), self.params))[:, self.free]

    def lagrangian_hessian(self, x, sigma, lam_eq, lam_ineq):
        h = np.asarray(self.model.hess(self.full(x), self.params, float(sigma),
                                       jnp.asarray(lam_eq), jnp.asarray(lam_ineq)))
        return h[np.ix_(self.free, self.free)]

    def check_iterate(self, x):
        z = self.full(x)
        assert z[self.model.slices["pe"]].sum() >= -self.model.bounds.s_max_e.sum() - 1e-9, \
            "slack active power below -sum(S_max,e)"

    # conversions
    def voltages(self, x):
        z = self.full(x)
        s = self.model.slices
        nb = len(self.net.buses)
        vm = np.empty(nb)
        va = np.empty(nb)
        vm[self.model.pq] = z[s["vm"]]
        va[self.model.pq] = z[s["va"]]
        vm[self.model.extBus] = np.asarray(self.params[2])
        va[self.model.extBus] = np.asarray(self.params[3])
        return vm * np.exp(1j * va)

    def operating_point(self, x):
        """Generator Q (pu) and tap positions of a variable vector."""
        z = self.full(x)
        s = self.model.slices
        return OperatingPoint({g.id: float(q) for g, q in zip(self.net.gens, z[s["q"]])},
                              {t.id: float(p) for t, p in zip(self.net.trafos, z[s["psi"]])})

    def to_solution(self, x):
        """PfSolution of the state described by a variable vector."""
        sol = build_solution(self.net, self.case, self.operating_point(x), self.voltages(x),
                             max_mismatch=float(np.max(np.abs(self.eq(x)), initial=0.0)))
        z = self.full(x)
        s = self.model.slices
        sol.extra["s_e_nlp"] = z[s["pe"]] + 1j * z[s["qe"]]
        return sol

    def start(self, solution=None):
        """Start vector from a power flow at Q_g = 0 (clipped) and the current taps."""
        s = self.model.slices
        lo, hi = self._fullLower, self._fullUpper
        z = self._base.copy()
        psi = {t.id: self.fixed_taps.get(t.id, float(t.tap_neutral)) for t in self.net.trafos}
        qIdx = np.arange(self.model.n)[s["q"]]
        q0 = {g.id: float(np.clip(0.0, lo[i], hi[i])) for g, i in zip(self.net.gens, qIdx)}
        if solution is None:
            try:
                solution = solve_pf(self.net, self.case, OperatingPoint(q0, psi))
            except PowerFlowError as err:
                logger.info("flat start for case %s: %s", self.case.case_id, err)
        z[s["psi"]] = [psi[t.id] for t in self.net.trafos]
        z[s["q"]] = [q0[g.id] for g in self.net.gens]
        if solution is not None:
            z[s["vm"]] = solution.vm[self.model.pq]
            z[s["va"]] = solution.va[self.model.pq]
            z[s["pe"]] = solution.s_e.real
            z[s["qe"]] = solution.s_e.imag
        else:
            z[s["vm"]] = 1.0
            z[s["va"]] = float(self.params[3][0]) if len(self.net.ext_grids) else 0.0
        if self.model.nmax:
            rows = np.asarray(self.model.g_in(z, self.params))[len(self.model.bounds.i_con):]
            offset = 0
            m = []
            for spec in self.specs:
                if spec.op == "max":
                    size = self.model._termCount(spec.key)
                    m.append(1.1 * float(np.max(rows[offset:offset + size])) + 1e-3)
                    offset += size
            z[s["m"]] = m
        return z[self.free]


def build_nlp(net, case, objective, fixed_taps=None, q_limits=None):
    """Formulate the ORPF of one study case

    Parameters
    ----------
    net : Network
        reduced per-unit network
    case : StudyCase
        fixed injections
    objective : WeightVector or str
        aggregated objective, or the name of a single objective
    fixed_taps : dict, optional
        transformer id to integer tap; these taps become constants
    q_limits : callable, optional
        ``(net, case) -> (q_min, q_max)``, defaults to the configured policy

    Returns
    -------
    NlpProblem
    """
    if not isinstance(objective, WeightVector):
        objective = WeightVector.single(objective, Config.getConfigVal("e_q_setpoint"))
    fixed_taps = dict(fixed_taps or {})
    trafos = {t.id: t for t in net.trafos}
    for tid, psi in fixed_taps.items():
        if tid not in trafos:
            raise FormulationError("fixed tap for unknown transformer", tid)
        t = trafos[tid]
        if not t.tap_min <= psi <= t.tap_max:
            raise FormulationError("fixed tap {} outside [{}, {}]".format(psi, t.tap_min, t.tap_max), tid)
    for spec, _ in objective.positive():
        empty = ((spec.set == "G" and not net.gens) or (spec.set == "L" and not net.lines)
                 or (spec.set in ("E", "slack") and not net.ext_grids))
        if empty:
            raise FormulationError("objective {} references an empty element set".format(spec.label))
        if spec.set == "L" and spec.ref != 0:
            raise ObjectiveError("L.IS supports the reference 0 only")
    if q_limits is None:
        policy = Config.getConfigVal("qlim_policy")
        if policy not in Q_LIMIT_POLICIES:
            raise FormulationError("unknown reactive power limit policy {!r}".format(policy))
        q_limits = Q_LIMIT_POLICIES[policy]
    model = _model(net, objective.structure)
    return NlpProblem(model, net, case, objective, fixed_taps, q_limits(net, case))


def check_feasibility(net, solution, tol=1e-6):
    """Inequality violations of a solved state

    Returns
    -------
    list of (element id, message)
        empty when voltage, generator Q, external grid, current and tap
        limits all hold within ``tol``
    """
    problems = []
    ext = {e.bus for e in net.ext_grids}
    for k, b in enumerate(net.buses):
        if b.id in ext:
            continue
        if not b.vmin_pu - tol <= solution.vm[k] <= b.vmax_pu + tol:
            problems.append((b.id, "voltage {:.5f} pu outside [{}, {}]".format(solution.vm[k], b.vmin_pu, b.vmax_pu)))
    for g, q in zip(net.gens, solution.q_g):
        if not g.q_min - tol <= q <= g.q_max + tol:
            problems.append((g.id, "reactive power {:.5f} pu outside [{}, {}]".format(q, g.q_min, g.q_max)))
    bounds = derive_bounds(net)
    for e, se, smax in zip(net.ext_grids, solution.s_e, bounds.s_max_e):
        if abs(se.real) > smax + tol or abs(se.imag) > smax + tol:
            problems.append((e.id, "slack power {:.5f} exceeds S_max {:.5f}".format(se, smax)))
    for bid, i, icon in zip(bounds.branch_ids, solution.i_serial, bounds.i_con):
        if i > icon + tol:
            problems.append((bid, "serial current {:.5f} pu above {:.5f}".format(i, icon)))
    for t in net.trafos:
        psi = solution.psi[t.id]
        if not t.tap_min - tol <= psi <= t.tap_max + tol:
            problems.append((t.id, "tap {} outside [{}, {}]".format(psi, t.tap_min, t.tap_max)))
    return problems


def dump_nlp(problem, filePath, x=None):
    """Write variables, bounds and constraint residuals at ``x`` (start point by default)."""
    x = problem.start() if x is None else x
    c = problem.eq(x)
    g = problem.ineq(x)
    with open(filePath, "w") as f:
        f.write("# ORPF problem of case {} ({})\n".format(problem.case.case_id, problem.net.name))
        f.write("# objectives: {}\n".format(", ".join("{}={:g}".format(s.label, float(a))
                                                       for s, a in zip(problem.specs, problem.params[4]))))
        f.write("# objective value: {:.10g}\n".format(problem.objective(x)))
        f.write("\n[variables] {}\n".format(problem.n))
        for name, lo, val, hi in zip(problem.names, problem.lower, x, problem.upper):
            f.write("{:<24s} {:>14.6g} <= {:>14.8g} <= {:<14.6g}\n".format(name, lo, val, hi))
        if problem.fixed_taps:
            f.write("\n[fixed taps]\n")
            for tid, psi in problem.fixed_taps.items():
                f.write("psi[{}] = {}\n".format(tid, psi))
        f.write("\n[equalities] {}  max |c| = {:.3e}\n".format(len(c), np.max(np.abs(c), initial=0.0)))
        buses = [b.id for b in problem.net.buses]
        for k, value in enumerate(c):
            kind = "P" if k < len(buses) else "Q"
            f.write("{}[{}] {:>14.6e}\n".format(kind, buses[k % len(buses)], value))
        f.write("\n[inequalities] {}  max g = {:.3e}\n".format(len(g), np.max(g, initial=-np.inf)))
        labels = ["I_S[{}]".format(b) for b in problem.model.bounds.branch_ids]
        for spec in problem.specs:
            if spec.op == "max":
                labels += ["{}[{}]".format(spec.label, k) for k in range(problem.model._termCount(spec.key))]
        for label, value in zip(labels, g):
            f.write("{:<24s} {:>14.6e}\n".format(label, value))
