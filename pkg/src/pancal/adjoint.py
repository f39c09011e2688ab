"""Calibration of potential parameters against full-field data.

The objective summed over recorded load steps is

    J = sum_s [ 1/2 sum_n w_n |u_n - d_n|^2 + alpha1/2 (F_s - F_s^data)^2 ]
        + alpha2 |theta - theta0|^2 (+ optional indicator penalty)

with ``w_n`` the nodal tributary areas.  Its gradient comes from one
discrete adjoint solve per recorded step,

    K_ff^T v = -dJ/du_f,    dJ/dtheta = dJ/dtheta|_u + v^T dR_f/dtheta,

and the outer loop is a projected L-BFGS with Armijo backtracking.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import spsolve

from . import diffcore as dc
from .fem import (DirichletBC, LoadSchedule, NewtonFailure, element_kinematics,
                  parameter_residual_sensitivity, residual, residual_and_tangent, solve_increment,
                  tension_bc)
from .materials import Normalized

__all__ = [
    "CalibrationProblem",
    "Evaluation",
    "objective",
    "gradient",
    "calibrate",
    "CalibrationResult",
    "lbfgs",
    "write_history",
]

log = logging.getLogger(__name__)


@dataclass
class CalibrationProblem:
    """Design variables are ``model`` parameters; ``model`` is un-normalized.

    ``alpha1`` may be ``"auto"``: the ratio of displacement to force misfit
    at ``theta0``.  ``nonneg`` marks parameters projected onto ``>= 0``;
    by default this is the model's mask for the polyconvex variant and
    nothing otherwise.
    """

    mesh: object
    model: object
    dic: object
    alpha1: object = "auto"
    alpha2: float = 1e-4
    theta0: np.ndarray | None = None
    indicator_weight: float = 0.0
    nonneg: np.ndarray | None = None
    bc_factory: object = None
    max_iter: int = 50
    tol: float = 1e-9
    newton_tol: float = 1e-10

    def __post_init__(self):
        self.theta0 = np.array(self.model.theta if self.theta0 is None else self.theta0, float)
        if len(self.theta0) > 13:
            raise ValueError("calibration is meant for sparse models with at most 13 parameters")
        if self.nonneg is None:
            mask = getattr(self.model, "nonneg", None)
            poly = getattr(self.model, "variant", None) == "polyconvex"
            self.nonneg = np.asarray(mask, bool) if (mask is not None and poly) \
                else np.zeros(len(self.theta0), bool)
        if self.bc_factory is None:
            mesh = self.mesh
            self.bc_factory = lambda uy: tension_bc(mesh, uy)
        sch = self.dic.schedule
        self.schedule = LoadSchedule(sch.get("total", 2.5), sch.get("increments", 25),
                                     tuple(sch.get("record", (1, 5, 10, 15, 20, 25))),
                                     sch.get("height", 5.0))
        self.weights = np.repeat(self.mesh.lumped_areas(), 2)
        self.top_y = 2 * self.mesh.sets["top"] + 1
        self._data_states = None
        if isinstance(self.alpha1, str):
            if self.alpha1 != "auto":
                raise ValueError("alpha1 must be a number or 'auto'")
            ev = self.evaluate(self.theta0, with_gradient=False, alpha1=1.0)
            self.alpha1 = ev.disp / ev.force if ev.force > 0 else 1.0
        self.alpha1 = float(self.alpha1)

    def potential(self, theta):
        return Normalized(self.model.with_params(theta))

    # -- forward ---------------------------------------------------------
    def solve_states(self, theta):
        """Displacements at the recorded increments for parameters ``theta``."""
        pot = self.potential(theta)
        u = np.zeros(self.mesh.n_dofs)
        out = {}
        rec = {s.increment for s in self.dic.steps}
        for inc in range(1, max(rec) + 1):
            u = solve_increment(self.mesh, pot, u, self.bc_factory(self.schedule.displacement(inc)),
                                self.newton_tol)
            if inc in rec:
                out[inc] = u.copy()
        return out

    def _data_invariants(self):
        if self._data_states is None:
            pts = []
            for s in self.dic.steps:
                try:
                    _, _, I1, I2, J = element_kinematics(self.mesh, s.u)
                except dc.DomainError:
                    continue
                pts.append(np.column_stack([I1, I2, J]))
            self._data_states = np.vstack(pts) if pts else np.zeros((0, 3))
        return self._data_states

    def _indicator(self, theta, with_gradient):
        """Squared-hinge indicator penalty at data-derived element states."""
        T = self._data_invariants()
        if self.indicator_weight == 0 or len(T) == 0:
            return 0.0, np.zeros(len(theta))
        pot = self.potential(theta)

        def pen(d):
            g1 = d.dd(0, 0) + (1.5 / T[:, 0]) * d.d(0)
            g2 = d.dd(1, 1) + (1.5 / T[:, 1]) * d.d(1)
            return g1, g2

        g1, g2 = pen(pot.eval(T[:, 0], T[:, 1], T[:, 2]))
        g1, g2 = np.broadcast_to(g1, len(T)), np.broadcast_to(g2, len(T))
        val = self.indicator_weight * float(np.sum(np.maximum(-g1, 0) ** 2) + np.sum(np.maximum(-g2, 0) ** 2))
        grad = np.zeros(len(theta))
        if with_gradient:
            for k in range(len(theta)):
                d1, d2 = pen(pot.param_sensitivity(T[:, 0], T[:, 1], T[:, 2], k))
                dg1 = d1.d if isinstance(d1, dc.Dual1) else 0.0
                dg2 = d2.d if isinstance(d2, dc.Dual1) else 0.0
                grad[k] = self.indicator_weight * float(
                    np.sum(-2.0 * np.maximum(-g1, 0) * dg1) + np.sum(-2.0 * np.maximum(-g2, 0) * dg2))
        return val, grad

    def evaluate(self, theta, with_gradient=True, alpha1=None):
        theta = np.asarray(theta, float)
        a1 = self.alpha1 if alpha1 is None else alpha1
        states = self.solve_states(theta)
        pot = self.potential(theta)
        disp = force = 0.0
        grad = np.zeros(len(theta))
        per_step = []
        for s in self.dic.steps:
            u = states[s.increment]
            r = u - s.u
            ds = 0.5 * float(np.sum(self.weights * r * r))
            R, K = residual_and_tangent(self.mesh, pot, u)
            F = float(np.sum(R[self.top_y]))
            fs = 0.5 * (F - s.force) ** 2
            disp += ds
            force += fs
            per_step.append({"increment": s.increment, "disp": ds, "force": fs, "F": F})
            if not with_gradient:
                continue
            bc = self.bc_factory(s.uy)
            free = np.setdiff1d(np.arange(self.mesh.n_dofs), bc.dofs)
            dF_du = np.asarray(K[self.top_y].sum(axis=0)).ravel()
            dJ_du = self.weights * r + a1 * (F - s.force) * dF_du
            Kff = K[free][:, free]
            v = spsolve(Kff.T.tocsc(), -dJ_du[free]) if len(free) else np.zeros(0)
            for k in range(len(theta)):
                dR = parameter_residual_sensitivity(self.mesh, pot, u, k)
                grad[k] += a1 * (F - s.force) * float(np.sum(dR[self.top_y])) + float(v @ dR[free])
        reg = self.alpha2 * float(np.sum((theta - self.theta0) ** 2))
        ind, gind = self._indicator(theta, with_gradient)
        if with_gradient:
            grad += 2.0 * self.alpha2 * (theta - self.theta0) + gind
        total = disp + a1 * force + reg + ind
        return Evaluation(total, disp, force, a1 * force, reg, ind, grad if with_gradient else None,
                          states, per_step)


@dataclass
class Evaluation:
    total: float
    disp: float
    force: float
    force_weighted: float
    reg: float
    indicator: float
    grad: np.ndarray | None
    states: dict = field(repr=False, default_factory=dict)
    per_step: list = field(repr=False, default_factory=list)

    def breakdown(self):
        return {"total": self.total, "disp": self.disp, "force": self.force_weighted,
                "reg": self.reg, "indicator": self.indicator}


def objective(p, theta):
    """``(J, breakdown)`` for the calibration problem at ``theta``."""
    ev = p.evaluate(theta, with_gradient=False)
    return ev.total, ev.breakdown()


def gradient(p, theta):
    return p.evaluate(theta, with_gradient=True).grad


# ---------------------------------------------------------------------------
# optimizer

def lbfgs(fun, x0, lower=None, max_iter=50, memory=10, tol=1e-9, c1=1e-4, max_backtrack=30,
          callback=None):
    """Projected L-BFGS with backtracking Armijo line search.

    ``fun(x)`` returns ``(f, g, info)``; a failed evaluation may return
    ``f = inf``, which triggers backtracking.  Returns ``(x, f, status)``.
    """
    x = np.array(x0, float)
    lower = np.full(len(x), -np.inf) if lower is None else np.asarray(lower, float)
    x = np.maximum(x, lower)
    f, g, info = fun(x)
    if not np.isfinite(f):
        raise NewtonFailure("objective is not finite at the initial point")
    S, Y = [], []
    status = "max_iter"
    if callback:
        callback(0, x, f, g, info, 0.0)
    for it in range(1, max_iter + 1):
        pg = x - np.maximum(x - g, lower)
        if np.linalg.norm(pg) <= tol * max(1.0, abs(f)):
            status = "converged"
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in reversed(list(zip(S, Y))):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q -= a * y
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            q *= min(1.0, 1.0 / max(np.linalg.norm(g, np.inf), 1e-300))
        for (s, y), a in zip(zip(S, Y), reversed(alphas)):
            b = (y @ q) / (y @ s)
            q += s * (a - b)
        d = -q
        if g @ d >= 0:
            S, Y = [], []
            d = -g * min(1.0, 1.0 / max(np.linalg.norm(g, np.inf), 1e-300))
        t = 1.0
        accepted = False
        for _ in range(max_backtrack):
            xn = np.maximum(x + t * d, lower)
            try:
                fn, gn, info_n = fun(xn)
            except (NewtonFailure, dc.DomainError, np.linalg.LinAlgError):
                fn = np.inf
            if np.isfinite(fn) and fn <= f + c1 * (g @ (xn - x)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            status = "line_search_failed"
            break
        s, y = xn - x, gn - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        df = f - fn
        x, f, g, info = xn, fn, gn, info_n
        if callback:
            callback(it, x, f, g, info, t)
        if df <= tol * max(1.0, abs(f)):
            status = "converged"
            break
    return x, f, status


@dataclass
class CalibrationResult:
    theta: np.ndarray
    objective: float
    status: str
    history: list


HISTORY_FIELDS = ("iter", "total", "disp", "force", "reg", "indicator", "grad_norm", "step")


def calibrate(p, theta0=None):
    """Minimize the calibration objective starting at ``theta0``."""
    theta0 = p.theta0 if theta0 is None else np.asarray(theta0, float)
    history = []

    def fun(x):
        ev = p.evaluate(x)
        return ev.total, ev.grad, ev

    def cb(it, x, f, g, ev, t):
        row = {"iter": it, **ev.breakdown(), "grad_norm": float(np.linalg.norm(g)), "step": t,
               "theta": x.tolist()}
        history.append(row)
        log.info("iter %d J %.6g disp %.4g", it, f, ev.disp)

    lower = np.where(p.nonneg, 0.0, -np.inf)
    x, f, status = lbfgs(fun, theta0, lower, max_iter=p.max_iter, tol=p.tol, callback=cb)
    return CalibrationResult(x, f, status, history)


def write_history(path, history):
    n = max((len(r["theta"]) for r in history), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(HISTORY_FIELDS) + [f"theta{k + 1}" for k in range(n)])
        for r in history:
            w.writerow([r[k] for k in HISTORY_FIELDS] + list(r["theta"]))
