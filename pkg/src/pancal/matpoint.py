"""Single material-point solvers and the validation bench."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Dual1, DomainError
from .l0 import r2_score
from .sampling import DEFAULT_RANGES, canonical_test_data

__all__ = [
    "UniaxialResult",
    "NewtonDiverged",
    "uniaxial_residual",
    "uniaxial_newton",
    "uniaxial_curve",
    "TRAINING_RANGES",
    "ModeComparison",
    "ValidationReport",
    "run_validation",
]


class NewtonDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class UniaxialResult:
    lambda_lateral: float
    S11: float
    iterations: int
    dS22: float


def _parts(x):
    if isinstance(x, Dual1):
        return float(np.asarray(x.v)), float(np.asarray(x.d))
    return float(np.asarray(x)), 0.0


def uniaxial_residual(m, lam, lam2):
    """``(S22, dS22/dlam2, S11)`` for ``F = diag(lam, lam2, lam2)``."""
    l2 = Dual1(float(lam2), 1.0)
    a = lam * lam
    b = l2 * l2
    d = m.eval(a + 2.0 * b, 2.0 * a * b + b * b, lam * b)
    p1, p2, pj = d.g
    s22 = 2.0 * p1 + 2.0 * p2 * (a + b) + lam * pj
    s11 = 2.0 * p1 + 4.0 * b * p2 + b * (1.0 / lam) * pj
    r, dr = _parts(s22)
    return r, dr, _parts(s11)[0]


def uniaxial_newton(m, lambda_axial, guess=None, tol=1e-10, max_iter=50, max_halvings=20):
    """Lateral stretch giving zero lateral stress under uniaxial tension.

    Newton-Raphson on ``S22(lam2) = 0`` with the consistent derivative from a
    nested dual number; steps are halved while the residual does not drop
    or the iterate leaves ``lam2 > 0``.
    """
    lam = float(lambda_axial)
    if lam <= 0:
        raise ValueError("axial stretch must be positive")
    l2 = lam ** -0.25 if guess is None else float(guess)
    r, dr, s11 = uniaxial_residual(m, lam, l2)
    for it in range(max_iter + 1):
        if abs(r) < tol:
            if dr == 0:
                raise NewtonDiverged("singular residual derivative at the solution")
            return UniaxialResult(l2, s11, it, dr)
        if dr == 0 or not np.isfinite(dr):
            raise NewtonDiverged("zero residual derivative")
        step = -r / dr
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = l2 + t * step
            if cand > 0:
                try:
                    rn, drn, s11n = uniaxial_residual(m, lam, cand)
                    if np.isfinite(rn) and abs(rn) < abs(r):
                        break
                except DomainError:
                    pass
            t *= 0.5
        else:
            raise NewtonDiverged(f"backtracking failed at lambda={lam}")
        l2, r, dr, s11 = cand, rn, drn, s11n
    raise NewtonDiverged(f"no convergence in {max_iter} iterations at lambda={lam}")


def uniaxial_curve(m, lambdas):
    """Axial stress and lateral stretch along a sequence of stretches (continuation)."""
    out, guess = [], None
    for lam in lambdas:
        res = uniaxial_newton(m, lam, guess)
        out.append(res)
        guess = res.lambda_lateral
    return (np.array([r.S11 for r in out]), np.array([r.lambda_lateral for r in out]),
            [r.iterations for r in out])


# ---------------------------------------------------------------------------
# validation bench

TRAINING_RANGES = {
    "constrained_uniaxial": (0.8, 1.2),
    "constrained_equibiaxial": (0.8, 1.2),
    "simple_shear": (-0.2, 0.2),
}

_COMPONENTS = ((0, 0), (1, 1), (2, 2), (0, 1))


@dataclass
class ModeComparison:
    mode: str
    control: np.ndarray
    S_pred: np.ndarray
    S_true: np.ndarray
    psi_pred: np.ndarray
    psi_true: np.ndarray
    r2_inside: float
    r2_outside: float

    def rows(self):
        for k, c in enumerate(self.control):
            row = {"control": c, "psi_true": self.psi_true[k], "psi_pred": self.psi_pred[k]}
            for i, j in _COMPONENTS:
                row[f"S{i + 1}{j + 1}_true"] = self.S_true[k, i, j]
                row[f"S{i + 1}{j + 1}_pred"] = self.S_pred[k, i, j]
            yield row


@dataclass
class ValidationReport:
    modes: dict = field(default_factory=dict)

    def r2_table(self):
        return {m: {"inside": c.r2_inside, "outside": c.r2_outside} for m, c in self.modes.items()}

    def write(self, out_dir, prefix="validation"):
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for mode, cmp_ in self.modes.items():
            path = os.path.join(out_dir, f"{prefix}_{mode}.csv")
            rows = list(cmp_.rows())
            with open(path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(rows[0]))
                w.writeheader()
                w.writerows(rows)
            paths.append(path)
        path = os.path.join(out_dir, f"{prefix}_r2.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "r2_inside", "r2_outside"])
            for mode, c in self.modes.items():
                w.writerow([mode, c.r2_inside, c.r2_outside])
        return paths + [path]


def _stack(S):
    return np.column_stack([S[:, i, j] for i, j in _COMPONENTS])


def run_validation(model, truth, modes=None, ranges=None, n=81, train_ranges=None):
    """Compare ``model`` against ``truth`` along the canonical modes.

    R² is reported separately for control values inside and outside the
    training ranges.
    """
    ranges = dict(DEFAULT_RANGES if ranges is None else ranges)
    if modes is not None:
        ranges = {m: ranges[m] for m in modes}
    train_ranges = TRAINING_RANGES if train_ranges is None else train_ranges
    pred = canonical_test_data(model, ranges, n)
    true = canonical_test_data(truth, ranges, n)
    report = ValidationReport()
    for mode in ranges:
        c = pred[mode]["control"]
        lo, hi = train_ranges[mode]
        inside = (c >= lo - 1e-12) & (c <= hi + 1e-12)
        Sp, St = _stack(pred[mode]["S"]), _stack(true[mode]["S"])
        r_in = r2_score(Sp[inside], St[inside]) if inside.any() else float("nan")
        r_out = r2_score(Sp[~inside], St[~inside]) if (~inside).any() else float("nan")
        report.modes[mode] = ModeComparison(mode, c, pred[mode]["S"], true[mode]["S"],
                                            pred[mode]["psi"], true[mode]["psi"], r_in, r_out)
    return report
