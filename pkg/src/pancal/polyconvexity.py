"""Polyconvexity indicator inequalities for invariant-based potentials.

For ``phi(I1, I2, J)`` the indicator values are

    g1 = phi_{,I1 I1} + 3 / (2 I1) phi_{,I1}
    g2 = phi_{,I2 I2} + 3 / (2 I2) phi_{,I2}
    gJ = phi_{,J J}

and a point satisfies the indicator when all three are non-negative.  The
check is necessary for polyconvexity, not sufficient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

__all__ = ["IndicatorValues", "indicator", "indicator_batch", "indicator_terms",
           "indicator_penalty", "penalty_from_terms"]


@dataclass(frozen=True)
class IndicatorValues:
    g1: float
    g2: float
    gJ: float

    def satisfied(self, tol=0.0):
        return self.g1 >= -tol and self.g2 >= -tol and self.gJ >= -tol


def indicator_terms(d, i1, i2):
    """``(g1, g2, gJ)`` from a :class:`~pancal.diffcore.Dual2` energy.

    Components may be floats, arrays or tape variables, so the result can
    be used directly inside a training loss.
    """
    g1 = d.dd(0, 0) + (1.5 / np.asarray(i1)) * d.d(0)
    g2 = d.dd(1, 1) + (1.5 / np.asarray(i2)) * d.d(1)
    return g1, g2, d.dd(2, 2)


def indicator_batch(m, i1, i2, j):
    """Vectorized indicator over arrays of invariants."""
    i1, i2, j = (np.asarray(x, dtype=float) for x in (i1, i2, j))
    if np.any(i1 <= 0) or np.any(i2 <= 0):
        raise ValueError("indicator requires I1, I2 > 0")
    g1, g2, gj = indicator_terms(m.eval(i1, i2, j), i1, i2)
    shape = np.broadcast(i1, i2, j).shape
    return tuple(np.broadcast_to(np.asarray(g, float), shape).copy() for g in (g1, g2, gj))


def indicator(m, t):
    i1, i2, j = (float(x) for x in t)
    g1, g2, gj = indicator_batch(m, i1, i2, j)
    return IndicatorValues(float(g1), float(g2), float(gj))


def penalty_from_terms(g1, g2, weight=1.0):
    """Squared hinge on the I1 and I2 inequalities, summed over points."""
    return weight * ((dc.relu(-1.0 * g1) ** 2).sum() + (dc.relu(-1.0 * g2) ** 2).sum())


def indicator_penalty(m, points, weight=1.0):
    """``weight * sum(relu(-g1)^2 + relu(-g2)^2)`` over ``points``.

    ``gJ`` is left out: for the network potentials it holds by construction.
    """
    if weight < 0:
        raise ValueError("penalty weight must be non-negative")
    pts = np.asarray([tuple(p) for p in points], dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return 0.0
    g1, g2, _ = indicator_batch(m, pts[:, 0], pts[:, 1], pts[:, 2])
    return float(weight * (np.sum(np.maximum(-g1, 0) ** 2) + np.sum(np.maximum(-g2, 0) ** 2)))
