"""Isotropic strain-energy potentials in invariant form and their stresses.

Every potential implements :meth:`PotentialModel.energy` with generic
arithmetic only, so the same formula is evaluated on floats, arrays,
parameter duals or tape variables.
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from . import diffcore as dc
from .diffcore import Dual1, Dual2, DomainError
from .kinematics import invariants_of_diag

__all__ = [
    "PotentialModel",
    "Normalized",
    "normalize",
    "GentGent",
    "NeoHookean",
    "OgdenGeneralized",
    "gent_gent",
    "neo_hookean",
    "ogden_generalized",
    "load_material",
    "second_pk_stress",
    "stress_tensor",
    "stress_coefficients",
    "MATERIALS",
]


class PotentialModel:
    """Scalar strain energy ``phi(I1, I2, J; theta)``.

    Subclasses implement :meth:`energy`; everything else is shared.
    """

    name = "potential"
    param_names: tuple = ()

    def __init__(self, theta):
        self.theta = np.array(theta, dtype=float)

    def params(self):
        return self.theta.copy()

    def with_params(self, theta):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.theta = np.array(theta, dtype=float)
        return new

    def energy(self, i1, i2, j, theta):
        raise NotImplementedError

    def theta_arg(self):
        """Parameters in the form :meth:`energy` expects."""
        return list(self.theta)

    def eval(self, i1, i2, j):
        """Energy with invariant derivatives up to second order."""
        return self.energy(*Dual2.seed(i1, i2, j), self.theta_arg())

    def __call__(self, t):
        return self.eval(*t)

    def eval_with(self, i1, i2, j, theta):
        """Like :meth:`eval` with an explicit (possibly dual or taped) theta."""
        return self.energy(*Dual2.seed(i1, i2, j), list(theta))

    def param_sensitivity(self, i1, i2, j, k):
        """``eval`` whose components are :class:`Dual1` numbers along theta_k."""
        theta = list(self.theta)
        theta[k] = Dual1(self.theta[k], 1.0)
        return self.eval_with(i1, i2, j, theta)

    def to_dict(self):
        return {"model": self.name,
                "params": {n: float(v) for n, v in zip(self.param_names, self.theta)}}

    def __repr__(self):
        return f"{type(self).__name__}({', '.join(f'{v:.6g}' for v in self.theta)})"


class Normalized(PotentialModel):
    """Shift a potential to zero energy and zero stress at the reference state.

    ``phi_hat = phi - phi(3,3,1) - n (J - 1)`` with
    ``n = 2 phi_1 + 4 phi_2 + phi_J`` evaluated at ``(3, 3, 1)``.
    """

    def __init__(self, base):
        self.base = base
        self.name = base.name
        self.param_names = base.param_names
        self.theta = base.theta

    def theta_arg(self):
        return self.base.theta_arg()

    def with_params(self, theta):
        return Normalized(self.base.with_params(theta))

    def shift(self, theta=None):
        """Return ``(phi0, n)``, the two normalization constants."""
        theta = self.base.theta_arg() if theta is None else theta
        ref = self.base.energy(*Dual2.seed(3.0, 3.0, 1.0), theta)
        return ref.v, 2.0 * ref.g[0] + 4.0 * ref.g[1] + ref.g[2]

    def energy(self, i1, i2, j, theta):
        raw = self.base.energy(i1, i2, j, theta)
        phi0, n = self.shift(theta)
        return raw - phi0 - n * (j - 1.0)

    def to_dict(self):
        d = self.base.to_dict()
        phi0, n = self.shift()
        d["normalization"] = {"phi0": float(phi0), "n": float(n)}
        return d


def normalize(model):
    return Normalized(model)


# ---------------------------------------------------------------------------
# analytic materials

class GentGent(PotentialModel):
    """Gent-Gent model: Gent in I1 plus a logarithmic I2 term and a volumetric term."""

    name = "gent_gent"
    param_names = ("mu", "jm", "kappa", "c2")
    # refuse states within 1% of the locking limit
    guard = 0.99

    def __init__(self, mu=2.4195, jm=77.931, kappa=1.20975, c2=None):
        c2 = 0.75 * mu if c2 is None else c2
        super().__init__([mu, jm, kappa, c2])

    def energy(self, i1, i2, j, theta):
        mu, jm, kappa, c2 = theta
        x = np.asarray(dc.value_of(i1)) - 3.0
        if np.any(x >= self.guard * np.asarray(dc.value_of(jm))):
            raise DomainError("Gent-Gent locking limit reached")
        return (-0.5 * mu * jm * dc.log(1.0 - (i1 - 3.0) / jm)
                - c2 * dc.log(i2 / 3.0)
                + kappa * (0.5 * (j * j - 1.0) - dc.log(j)))


class NeoHookean(PotentialModel):
    """Compressible Neo-Hookean model."""

    name = "neo_hookean"
    param_names = ("mu", "lam")

    def __init__(self, mu=1.0, lam=0.333):
        super().__init__([mu, lam])

    def energy(self, i1, i2, j, theta):
        mu, lam = theta
        lnj = dc.log(j)
        return 0.5 * mu * (i1 - 3.0) - mu * lnj + 0.5 * lam * lnj * lnj


class OgdenGeneralized(PotentialModel):
    """Generalized polynomial model in the isochoric invariants.

    The second series uses ``(I2bar^{-3/2} - 3*sqrt(3))`` as written, so the
    energy does not vanish at the reference state; wrap it in
    :class:`Normalized` when that matters.
    """

    name = "ogden_generalized"
    param_names = ("c10", "c20", "c30", "c01", "c02", "c03", "kappa")

    def __init__(self, c10=1.302, c20=0.261, c30=0.246, c01=0.668, c02=0.245, c03=0.143,
                 kappa=0.831):
        super().__init__([c10, c20, c30, c01, c02, c03, kappa])

    def energy(self, i1, i2, j, theta):
        c10, c20, c30, c01, c02, c03, kappa = theta
        i1b = j ** (-2.0 / 3.0) * i1
        i2b = j ** (-4.0 / 3.0) * i2
        a = i1b - 3.0
        b = i2b ** (-1.5) - 3.0 * np.sqrt(3.0)
        out = c10 * a + c20 * a ** 2 + c30 * a ** 3
        out = out + c01 * b + c02 * b ** 2 + c03 * b ** 3
        return out + kappa * (j * j + j ** (-2.0) - 2.0)


MATERIALS = {
    "gent_gent": GentGent,
    "neo_hookean": NeoHookean,
    "ogden_generalized": OgdenGeneralized,
}


def _fixture(name):
    return json.loads(resources.files("pancal.data").joinpath(name).read_text())


def load_material(name):
    """Analytic material with the parameter values from the shipped fixture."""
    if name not in MATERIALS:
        raise KeyError(f"unknown material {name!r}; choose from {sorted(MATERIALS)}")
    doc = _fixture(f"{name}.json")
    return MATERIALS[name](**doc["params"])


def gent_gent(t):
    return load_material("gent_gent").eval(*t)


def neo_hookean(t):
    return load_material("neo_hookean").eval(*t)


def ogden_generalized(t):
    return load_material("ogden_generalized").eval(*t)


# ---------------------------------------------------------------------------
# stresses

def stress_coefficients(d):
    """``(phi_1, phi_2, phi_J)`` as floats/arrays from a Dual2 result."""
    return d.g[0], d.g[1], d.g[2]


def second_pk_stress(model, c_diag):
    """Diagonal second Piola-Kirchhoff stress for a diagonal ``C``.

    ``S_kk = 2 phi_1 + 2 phi_2 (I1 - C_kk) + J phi_J / C_kk``.
    ``c_diag`` may carry leading batch dimensions; the last axis has size 3.
    """
    c = np.asarray(c_diag, dtype=float)
    if np.any(c <= 0):
        raise DomainError("diagonal C entries must be positive")
    i1, i2, j = invariants_of_diag(c)
    d = model.eval(i1, i2, j)
    p1, p2, pj = (np.broadcast_to(np.asarray(x, float), np.shape(i1))[..., None] for x in d.g)
    return 2.0 * p1 + 2.0 * p2 * (i1[..., None] - c) + j[..., None] * pj / c


def stress_tensor(model, C):
    """Full second Piola-Kirchhoff stress ``S = 2 dphi/dC`` for ``C`` (..., 3, 3)."""
    C = np.asarray(C, dtype=float)
    trC = np.trace(C, axis1=-2, axis2=-1)
    i2 = 0.5 * (trC ** 2 - np.einsum("...ij,...ji->...", C, C))
    J = np.sqrt(np.linalg.det(C))
    d = model.eval(trC, i2, J)
    p1, p2, pj = (np.broadcast_to(np.asarray(x, float), trC.shape)[..., None, None] for x in d.g)
    eye = np.eye(3)
    return (2.0 * p1 * eye + 2.0 * p2 * (trC[..., None, None] * eye - C)
            + J[..., None, None] * pj * np.linalg.inv(C))
