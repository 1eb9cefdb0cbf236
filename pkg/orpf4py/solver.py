"""Primal-dual interior point method for smooth NLPs

    minimize f(x)  s.t.  c(x) = 0,  g(x) <= 0,  lower <= x <= upper

Inequalities get slacks s >= 0 so that the solver works on w = (x, s) with
the residual r(w) = (c(x), g(x) + s) and plain variable bounds. Bounds are
handled by a logarithmic barrier whose parameter mu follows the
Fiacco-McCormick rule. Each iteration solves the regularized KKT system

    [ W + Sigma + dw I   J^T   ] [ dw   ]     [ grad phi + J^T lam ]
    [ J                 -dc I  ] [ dlam ] = - [ r                  ]

with the inertia corrected through (dw, dc), takes a fraction-to-boundary
step and backtracks on the merit function phi_mu + nu ||r||_1. When the
line search fails at an infeasible point, a Levenberg-Marquardt
restoration phase minimizes ||r||**2 inside the bounds.
"""
import abc
import logging
from dataclasses import dataclass, field

import numpy as np

from orpf4py import Config

logger = logging.getLogger(__name__)

EPS = np.finfo(float).eps

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical-failure"


class SmoothProblem(abc.ABC):
    """Smooth NLP with first and second derivatives.

    Jacobians are dense ``(rows, n)`` arrays, the Hessian is the one of
    ``sigma f + lam_eq . c + lam_ineq . g``.
    """

    @property
    @abc.abstractmethod
    def n(self):
        pass

    @property
    def n_eq(self):
        return 0

    @property
    def n_ineq(self):
        return 0

    @property
    def lower(self):
        return np.full(self.n, -np.inf)

    @property
    def upper(self):
        return np.full(self.n, np.inf)

    @abc.abstractmethod
    def objective(self, x):
        pass

    @abc.abstractmethod
    def gradient(self, x):
        pass

    def eq(self, x):
        return np.zeros(0)

    def eq_jacobian(self, x):
        return np.zeros((0, self.n))

    def ineq(self, x):
        return np.zeros(0)

    def ineq_jacobian(self, x):
        return np.zeros((0, self.n))

    @abc.abstractmethod
    def lagrangian_hessian(self, x, sigma, lam_eq, lam_ineq):
        pass

    def check_iterate(self, x):
        """Hook called with every accepted iterate."""

    def start(self):
        lo, hi = self.lower, self.upper
        x = np.zeros(self.n)
        both = np.isfinite(lo) & np.isfinite(hi)
        x[both] = (lo[both] + hi[both]) / 2
        x[np.isfinite(lo) & ~both] = lo[np.isfinite(lo) & ~both] + 1.0
        x[np.isfinite(hi) & ~both] = hi[np.isfinite(hi) & ~both] - 1.0
        return x


class CallbackProblem(SmoothProblem):
    """SmoothProblem given by callables.

    Parameters
    ----------
    f, df, d2f : callable
        objective, gradient and Hessian
    n : int
        number of variables
    ce, dce, d2ce : callable, optional
        equality residuals, Jacobian and stacked Hessians ``(m, n, n)``
    ci, dci, d2ci : callable, optional
        inequality residuals (``<= 0``) with the same derivatives
    lower, upper : array_like, optional
        variable bounds, infinite entries are free
    x0 : array_like, optional
        start point
    """

    def __init__(self, f, df, d2f, n, ce=None, dce=None, d2ce=None, ci=None, dci=None, d2ci=None,
                 lower=None, upper=None, x0=None):
        self._f, self._df, self._d2f = f, df, d2f
        self._n = int(n)
        self._ce, self._dce, self._d2ce = ce, dce, d2ce
        self._ci, self._dci, self._d2ci = ci, dci, d2ci
        self._lower = np.full(self._n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
        self._upper = np.full(self._n, np.inf) if upper is None else np.asarray(upper, dtype=float)
        self._x0 = None if x0 is None else np.asarray(x0, dtype=float)
        self._neq = 0 if ce is None else len(np.atleast_1d(ce(self.start())))
        self._nineq = 0 if ci is None else len(np.atleast_1d(ci(self.start())))

    @property
    def n(self):
        return self._n

    @property
    def n_eq(self):
        return self._neq

    @property
    def n_ineq(self):
        return self._nineq

    @property
    def lower(self):
        return self._lower

    @property
    def upper(self):
        return self._upper

    def start(self):
        return super().start() if self._x0 is None else self._x0.copy()

    def objective(self, x):
        return float(self._f(x))

    def gradient(self, x):
        return np.asarray(self._df(x), dtype=float)

    def eq(self, x):
        return np.zeros(0) if self._ce is None else np.atleast_1d(np.asarray(self._ce(x), dtype=float))

    def eq_jacobian(self, x):
        if self._ce is None:
            return np.zeros((0, self._n))
        return np.atleast_2d(np.asarray(self._dce(x), dtype=float))

    def ineq(self, x):
        return np.zeros(0) if self._ci is None else np.atleast_1d(np.asarray(self._ci(x), dtype=float))

    def ineq_jacobian(self, x):
        if self._ci is None:
            return np.zeros((0, self._n))
        return np.atleast_2d(np.asarray(self._dci(x), dtype=float))

    def lagrangian_hessian(self, x, sigma, lam_eq, lam_ineq):
        h = sigma * np.atleast_2d(np.asarray(self._d2f(x), dtype=float))
        if self._neq:
            h = h + np.tensordot(lam_eq, np.asarray(self._d2ce(x), dtype=float).reshape(self._neq, self._n, self._n), 1)
        if self._nineq:
            h = h + np.tensordot(lam_ineq, np.asarray(self._d2ci(x), dtype=float).reshape(self._nineq, self._n, self._n), 1)
        return h


@dataclass(frozen=True)
class SolverOptions:
    tol_stat: float = 1e-6
    tol_feas: float = 1e-8
    tol_comp: float = 1e-8
    max_iter: int = 200
    mu_init: float = 0.1
    kappa_eps: float = 10.0
    kappa_mu: float = 0.2
    theta_mu: float = 1.5
    tau_min: float = 0.99
    bound_push: float = 1e-2
    bound_frac: float = 1e-2
    slack_init: float = 1e-2
    kappa_sigma: float = 1e10
    eta: float = 1e-4
    max_backtrack: int = 40
    restoration_max_iter: int = 100
    restoration_trigger: float = 1e-6

    @classmethod
    def from_config(cls, **overrides):
        values = dict(tol_stat=Config.getConfigVal("tol_stat"), tol_feas=Config.getConfigVal("tol_feas"),
                      tol_comp=Config.getConfigVal("tol_comp"), max_iter=int(Config.getConfigVal("max_iter")))
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class KKTResiduals:
    stationarity: float
    feasibility: float
    complementarity: float

    def within(self, options):
        return (self.stationarity <= options.tol_stat and self.feasibility <= options.tol_feas
                and self.complementarity <= options.tol_comp)

    def as_dict(self):
        return {"stationarity": self.stationarity, "feasibility": self.feasibility,
                "complementarity": self.complementarity}


@dataclass
class SolveReport:
    x: np.ndarray
    objective: float
    kkt: KKTResiduals
    status: str
    iterations: int
    multipliers: dict
    mu_trajectory: list = field(default_factory=list)
    point: object = None
    solution: object = None
    f_values: dict = field(default_factory=dict)
    solves: int = 1
    fixed_order: tuple = ()
    message: str = ""

    @property
    def ok(self):
        return self.status == OPTIMAL

    @property
    def mu_summary(self):
        if not self.mu_trajectory:
            return {}
        return {"initial": self.mu_trajectory[0], "final": self.mu_trajectory[-1],
                "updates": len(self.mu_trajectory) - 1}


def _infNorm(v):
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def _residuals(x, lower, upper, grad, jc, jg, c, g, mult):
    lamEq, lamIn = mult["eq"], mult["ineq"]
    zl, zu = mult["lower"], mult["upper"]
    stat = grad - zl + zu
    if len(c):
        stat = stat + jc.T @ lamEq
    if len(g):
        stat = stat + jg.T @ lamIn
    hasL, hasU = np.isfinite(lower), np.isfinite(upper)
    feas = max(_infNorm(c), float(np.max(g, initial=0.0)),
               float(np.max(np.where(hasL, lower - x, 0.0), initial=0.0)),
               float(np.max(np.where(hasU, x - upper, 0.0), initial=0.0)))
    comp = max(_infNorm(lamIn * g),
               _infNorm(np.where(hasL, zl * (x - np.where(hasL, lower, 0.0)), 0.0)),
               _infNorm(np.where(hasU, zu * (np.where(hasU, upper, 0.0) - x), 0.0)))
    return KKTResiduals(_infNorm(stat), feas, comp)


def kkt_residuals(problem, x, multipliers):
    """Stationarity, feasibility and complementarity infinity norms

    Parameters
    ----------
    problem : SmoothProblem
        the problem
    x : ndarray
        primal point
    multipliers : dict
        ``eq``, ``ineq`` (>= 0 for g <= 0), ``lower`` and ``upper`` (>= 0,
        zero for infinite bounds)

    Returns
    -------
    KKTResiduals
    """
    x = np.asarray(x, dtype=float)
    return _residuals(x, problem.lower, problem.upper, problem.gradient(x),
                      problem.eq_jacobian(x), problem.ineq_jacobian(x),
                      problem.eq(x), problem.ineq(x), multipliers)


class _InteriorPoint:

    def __init__(self, problem, options):
        self.p = problem
        self.o = options
        self.nx = problem.n
        self.me = problem.n_eq
        self.mi = problem.n_ineq
        self.nw = self.nx + self.mi
        self.m = self.me + self.mi
        self.lw = np.r_[np.asarray(problem.lower, dtype=float), np.zeros(self.mi)]
        self.uw = np.r_[np.asarray(problem.upper, dtype=float), np.full(self.mi, np.inf)]
        self.hasL = np.isfinite(self.lw)
        self.hasU = np.isfinite(self.uw)
        if np.any(self.lw > self.uw):
            raise ValueError("lower bound above upper bound")

    # evaluation --------------------------------------------------------
    def residual(self, w):
        x, s = w[:self.nx], w[self.nx:]
        return np.r_[self.p.eq(x), self.p.ineq(x) + s]

    def jacobian(self, w):
        x = w[:self.nx]
        J = np.zeros((self.m, self.nw))
        if self.me:
            J[:self.me, :self.nx] = self.p.eq_jacobian(x)
        if self.mi:
            J[self.me:, :self.nx] = self.p.ineq_jacobian(x)
            J[self.me:, self.nx:] = np.eye(self.mi)
        return J

    def gradient(self, w):
        return np.r_[self.p.gradient(w[:self.nx]), np.zeros(self.mi)]

    def hessian(self, w, lam):
        H = np.zeros((self.nw, self.nw))
        H[:self.nx, :self.nx] = self.p.lagrangian_hessian(w[:self.nx], 1.0, lam[:self.me], lam[self.me:])
        return H

    def distances(self, w):
        dl = np.where(self.hasL, w - np.where(self.hasL, self.lw, 0.0), 1.0)
        du = np.where(self.hasU, np.where(self.hasU, self.uw, 0.0) - w, 1.0)
        return dl, du

    def barrier(self, w, mu):
        dl, du = self.distances(w)
        if np.any(dl[self.hasL] <= 0) or np.any(du[self.hasU] <= 0):
            return np.inf
        return (self.p.objective(w[:self.nx]) - mu * np.sum(np.log(dl[self.hasL]))
                - mu * np.sum(np.log(du[self.hasU])))

    def barrierGradient(self, grad, w, mu):
        dl, du = self.distances(w)
        return grad - np.where(self.hasL, mu / dl, 0.0) + np.where(self.hasU, mu / du, 0.0)

    def multipliers(self, lam, zl, zu):
        return {"eq": lam[:self.me].copy(), "ineq": lam[self.me:].copy(),
                "lower": zl[:self.nx].copy(), "upper": zu[:self.nx].copy()}

    # helpers -----------------------------------------------------------
    def push(self, w):
        lo, hi = self.lw, self.uw
        width = np.where(self.hasL & self.hasU, hi - lo, np.inf)
        pl = np.minimum(self.o.bound_push * np.maximum(1.0, np.abs(np.where(self.hasL, lo, 0.0))),
                        self.o.bound_frac * width)
        pu = np.minimum(self.o.bound_push * np.maximum(1.0, np.abs(np.where(self.hasU, hi, 0.0))),
                        self.o.bound_frac * width)
        w = np.where(self.hasL, np.maximum(w, np.where(self.hasL, lo, 0.0) + pl), w)
        return np.where(self.hasU, np.minimum(w, np.where(self.hasU, hi, 0.0) - pu), w)

    def stepToBoundary(self, w, dw, tau):
        dl, du = self.distances(w)
        alpha = 1.0
        neg = self.hasL & (dw < 0)
        if np.any(neg):
            alpha = min(alpha, float(np.min(-tau * dl[neg] / dw[neg])))
        pos = self.hasU & (dw > 0)
        if np.any(pos):
            alpha = min(alpha, float(np.min(tau * du[pos] / dw[pos])))
        return alpha

    @staticmethod
    def dualStep(z, dz, tau):
        neg = dz < 0
        if not np.any(neg):
            return 1.0
        return min(1.0, float(np.min(-tau * z[neg] / dz[neg])))

    def leastSquaresLambda(self, w, zl, zu):
        if not self.m:
            return np.zeros(0)
        J = self.jacobian(w)
        rhs = -(self.gradient(w) - zl + zu)
        lam = np.linalg.lstsq(J.T, rhs, rcond=None)[0]
        if _infNorm(lam) > 1e3:
            lam = np.zeros(self.m)
        return lam

    def safeguard(self, w, zl, zu, mu):
        dl, du = self.distances(w)
        k = self.o.kappa_sigma
        zl = np.where(self.hasL, np.clip(zl, mu / (k * dl), k * mu / dl), 0.0)
        zu = np.where(self.hasU, np.clip(zu, mu / (k * du), k * mu / du), 0.0)
        return zl, zu

    def factorize(self, H, sigma, J, mu, state):
        """Eigendecomposition of the KKT matrix with corrected inertia."""
        nw, m = self.nw, self.m
        dc = 0.0
        dw = 0.0
        attempt = 0
        while True:
            K = np.zeros((nw + m, nw + m))
            K[:nw, :nw] = H + np.diag(sigma + dw)
            K[:nw, nw:] = J.T
            K[nw:, :nw] = J
            K[nw:, nw:] = -dc * np.eye(m)
            try:
                vals, vecs = np.linalg.eigh(K)
            except np.linalg.LinAlgError:
                return None
            if not np.all(np.isfinite(vals)):
                return None
            zeroTol = 100 * EPS * max(1.0, float(np.max(np.abs(vals), initial=0.0)))
            npos = int(np.sum(vals > zeroTol))
            nneg = int(np.sum(vals < -zeroTol))
            if npos == nw and nneg == m:
                if dw > 0:
                    state["dw_last"] = dw
                return vals, vecs, dw
            if attempt == 0:
                if npos + nneg < nw + m and m:
                    dc = 1e-8 * mu ** 0.25
                dw = 1e-4 if state["dw_last"] == 0 else max(1e-20, state["dw_last"] / 3)
            else:
                dw *= 100 if state["dw_last"] == 0 else 8
            attempt += 1
            if dw > 1e40:
                return None

    @staticmethod
    def eigSolve(fact, rhs):
        vals, vecs, _ = fact
        return vecs @ ((vecs.T @ rhs) / vals)

    def restore(self, w, target):
        """Levenberg-Marquardt steps on 0.5 ||r(w)||**2 with affine scaling."""
        r = self.residual(w)
        lm = 1e-4
        for k in range(self.o.restoration_max_iter):
            if _infNorm(r) <= target:
                break
            J = self.jacobian(w)
            dl, du = self.distances(w)
            d = np.minimum(1.0, np.minimum(np.where(self.hasL, dl, np.inf), np.where(self.hasU, du, np.inf)))
            Js = J * d
            gs = Js.T @ r
            if _infNorm(gs) <= 1e-14:
                break
            accepted = False
            while lm < 1e12:
                ps = np.linalg.solve(Js.T @ Js + lm * np.eye(self.nw), -gs)
                p = d * ps
                alpha = self.stepToBoundary(w, p, 0.99)
                wt = w + alpha * p
                rt = self.residual(wt)
                if rt @ rt < r @ r:
                    w, r = wt, rt
                    lm = max(lm / 10, 1e-12)
                    accepted = True
                    break
                lm *= 10
            if not accepted:
                break
            logger.debug("restoration %d: ||r|| = %.3e", k, _infNorm(r))
        return w, _infNorm(r) <= target

    # main loop ---------------------------------------------------------
    def run(self, start):
        o = self.o
        x0 = np.asarray(self.p.start() if start is None else start, dtype=float)
        if x0.shape != (self.nx,):
            raise ValueError("start vector has shape {}, expected ({},)".format(x0.shape, self.nx))
        s0 = np.maximum(-self.p.ineq(x0), o.slack_init) if self.mi else np.zeros(0)
        w = self.push(np.r_[x0, s0])
        mu = o.mu_init
        muTrajectory = [mu]
        muMin = o.tol_comp / 10
        dl, du = self.distances(w)
        zl = np.where(self.hasL, mu / dl, 0.0)
        zu = np.where(self.hasU, mu / du, 0.0)
        state = {"dw_last": 0.0}
        nu = 1.0
        status = MAX_ITER
        message = ""

        if _infNorm(self.residual(w)) > o.restoration_trigger:
            w, ok = self.restore(w, o.restoration_trigger)
            if not ok:
                logger.info("restoration before the first iteration failed")
                return self.report(w, np.zeros(self.m), zl, zu, INFEASIBLE, 0, muTrajectory,
                                   "start point could not be made feasible")
            zl, zu = self.safeguard(w, zl, zu, mu)
        lam = self.leastSquaresLambda(w, zl, zu)

        it = 0
        while True:
            x = w[:self.nx]
            grad = self.gradient(w)
            r = self.residual(w)
            J = self.jacobian(w)
            mult = self.multipliers(lam, zl, zu)
            kkt = _residuals(x, self.lw[:self.nx], self.uw[:self.nx], grad[:self.nx],
                             J[:self.me, :self.nx], J[self.me:, :self.nx],
                             r[:self.me], r[self.me:] - w[self.nx:], mult)
            statW = _infNorm(grad + J.T @ lam - zl + zu)
            if kkt.within(o) and statW <= o.tol_stat:
                status = OPTIMAL
                break
            if it >= o.max_iter:
                status = MAX_ITER
                break

            dl, du = self.distances(w)

            def muError(mu):
                comp = max(_infNorm(np.where(self.hasL, zl * dl - mu, 0.0)),
                           _infNorm(np.where(self.hasU, zu * du - mu, 0.0)))
                return max(statW, _infNorm(r), comp)

            while mu > muMin and muError(mu) <= o.kappa_eps * mu:
                mu = max(muMin, min(o.kappa_mu * mu, mu ** o.theta_mu))
                muTrajectory.append(mu)
            tau = max(o.tau_min, 1.0 - mu)

            H = self.hessian(w, lam)
            sigma = np.where(self.hasL, zl / dl, 0.0) + np.where(self.hasU, zu / du, 0.0)
            fact = self.factorize(H, sigma, J, mu, state)
            if fact is None:
                status, message = NUMERICAL_FAILURE, "KKT matrix could not be regularized"
                break
            gphi = self.barrierGradient(grad, w, mu)
            rhs = -np.r_[gphi + J.T @ lam, r]
            sol = self.eigSolve(fact, rhs)
            dw, dlam = sol[:self.nw], sol[self.nw:]
            dzl = np.where(self.hasL, mu / dl - zl - zl / dl * dw, 0.0)
            dzu = np.where(self.hasU, mu / du - zu + zu / du * dw, 0.0)

            alphaMax = self.stepToBoundary(w, dw, tau)
            alphaZ = min(self.dualStep(zl, dzl, tau), self.dualStep(zu, dzu, tau))

            # l1 merit with penalty update
            theta = float(np.sum(np.abs(r)))
            dphi = float(gphi @ dw)
            curv = float(dw @ (H + np.diag(sigma + fact[2])) @ dw)
            if theta > 0:
                nuTrial = (dphi + 0.5 * max(curv, 0.0)) / (0.9 * theta)
                if nu < nuTrial:
                    nu = nuTrial + 1.0
            merit0 = self.barrier(w, mu) + nu * theta
            slope = dphi - nu * theta
            accepted = None
            if _infNorm(dw) <= 10 * EPS * max(1.0, _infNorm(w)):
                accepted = (alphaMax, w + alphaMax * dw)
            alpha = alphaMax
            for k in range(o.max_backtrack if accepted is None else 0):
                wt = w + alpha * dw
                rt = self.residual(wt)
                meritT = self.barrier(wt, mu) + nu * float(np.sum(np.abs(rt)))
                if meritT <= merit0 + o.eta * alpha * slope + 10 * EPS * abs(merit0):
                    accepted = (alpha, wt)
                    break
                if k == 0 and float(np.sum(np.abs(rt))) >= theta and self.m:
                    # second-order correction against the Maratos effect
                    csoc = alpha * r + rt
                    dsoc = self.eigSolve(fact, -np.r_[gphi + J.T @ lam, csoc])[:self.nw]
                    aSoc = self.stepToBoundary(w, dsoc, tau)
                    ws = w + aSoc * dsoc
                    meritS = self.barrier(ws, mu) + nu * float(np.sum(np.abs(self.residual(ws))))
                    if meritS <= merit0 + o.eta * alpha * slope + 10 * EPS * abs(merit0):
                        accepted = (alpha, ws)
                        break
                alpha *= 0.5
            if accepted is None:
                if _infNorm(r) <= o.tol_feas:
                    status, message = NUMERICAL_FAILURE, "line search failed at a feasible point"
                    break
                logger.info("line search failed at iteration %d, entering restoration", it)
                w, ok = self.restore(w, max(o.tol_feas, 0.5 * _infNorm(r)))
                if not ok:
                    status, message = INFEASIBLE, "restoration phase failed"
                    break
                zl, zu = self.safeguard(w, zl, zu, mu)
                lam = self.leastSquaresLambda(w, zl, zu)
                it += 1
                continue

            alpha, w = accepted
            lam = lam + alpha * dlam
            zl, zu = self.safeguard(w, zl + alphaZ * dzl, zu + alphaZ * dzu, mu)
            self.p.check_iterate(w[:self.nx])
            it += 1
            logger.debug("ipm %3d  f=%.10g  stat=%.2e  feas=%.2e  comp=%.2e  mu=%.1e  alpha=%.2e",
                         it, self.p.objective(w[:self.nx]), kkt.stationarity, kkt.feasibility,
                         kkt.complementarity, mu, alpha)

        return self.report(w, lam, zl, zu, status, it, muTrajectory, message)

    def report(self, w, lam, zl, zu, status, iterations, muTrajectory, message):
        x = w[:self.nx].copy()
        if len(lam) != self.m:
            lam = np.zeros(self.m)
        mult = self.multipliers(lam, zl, zu)
        kkt = kkt_residuals(self.p, x, mult)
        if status == OPTIMAL and not kkt.within(self.o):
            status = NUMERICAL_FAILURE
            message = "KKT residuals above tolerance at the returned point"
        return SolveReport(x=x, objective=self.p.objective(x), kkt=kkt, status=status,
                           iterations=iterations, multipliers=mult, mu_trajectory=muTrajectory,
                           message=message)


def solve(problem, start=None, options=None):
    """Solve a SmoothProblem with the primal-dual interior point method

    Parameters
    ----------
    problem : SmoothProblem
        problem to solve
    start : ndarray, optional
        start vector, ``problem.start()`` when omitted; moved strictly inside
        the bounds before the first iteration
    options : SolverOptions, optional
        tolerances and limits, taken from the config when omitted

    Returns
    -------
    SolveReport
        status is one of optimal, max-iter, infeasible, numerical-failure
    """
    options = SolverOptions.from_config() if options is None else options
    report = _InteriorPoint(problem, options).run(start)
    logger.debug("solve finished: %s after %d iterations, objective %.10g", report.status,
                 report.iterations, report.objective)
    return report
