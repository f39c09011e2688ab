"""Deformation gradients, invariants and canonical loading paths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "InvariantTriplet",
    "REFERENCE",
    "KinematicsError",
    "invariants_of",
    "invariants_of_diag",
    "reconstruct_diagonal_C",
    "canonical_path",
    "plane_strain_F",
]


class KinematicsError(ValueError):
    """Inadmissible deformation or invariant triplet."""


@dataclass(frozen=True)
class InvariantTriplet:
    i1: float
    i2: float
    j: float

    def as_tuple(self):
        return (self.i1, self.i2, self.j)

    def __iter__(self):
        return iter(self.as_tuple())


REFERENCE = InvariantTriplet(3.0, 3.0, 1.0)

# H below this is treated as a triple root
_H_DEGENERATE = 1e-12
_ACOS_TOL = 1e-10


def invariants_of(F):
    """Return ``(I1, I2, J)`` of ``C = F^T F`` for ``F`` of shape ``(..., 3, 3)``.

    Works elementwise over leading dimensions. Raises if any ``det F <= 0``.
    """
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise KinematicsError("deformation gradient with non-positive determinant")
    C = np.swapaxes(F, -1, -2) @ F
    trC = np.trace(C, axis1=-2, axis2=-1)
    trC2 = np.einsum("...ij,...ji->...", C, C)
    I2 = 0.5 * (trC * trC - trC2)
    if F.ndim == 2:
        return InvariantTriplet(float(trC), float(I2), float(J))
    return trC, I2, J


def invariants_of_diag(c):
    """Invariants ``(I1, I2, J)`` of a diagonal ``C`` given its entries."""
    c = np.asarray(c, dtype=float)
    a, b, d = c[..., 0], c[..., 1], c[..., 2]
    return a + b + d, a * b + b * d + a * d, np.sqrt(a * b * d)


def reconstruct_diagonal_C(t):
    """Squared principal stretches reproducing the triplet ``t``.

    Closed-form trigonometric solution of the characteristic cubic of ``C``.
    Returns the three eigenvalues sorted ascending.
    """
    i1, i2, j = (float(x) for x in t)
    if j <= 0:
        raise KinematicsError("J must be positive")
    i3 = j * j
    H = (i1 * i1 - 3.0 * i2) / 9.0
    if H < -1e-9 * max(1.0, i1 * i1):
        raise KinematicsError(f"no real spectrum: H={H:g} < 0")
    if H < _H_DEGENERATE:
        lam = np.full(3, i1 / 3.0)
    else:
        G = i1 * i2 / 3.0 - i3 - 2.0 * i1 ** 3 / 27.0
        arg = -G / (2.0 * H ** 1.5)
        # G and H carry cancellation error ~eps*I1^3 that grows as H -> 0
        tol = max(_ACOS_TOL, 1e3 * np.finfo(float).eps * max(1.0, i1) ** 3 / (2.0 * H ** 1.5))
        if abs(arg) > 1.0 + tol:
            raise KinematicsError(f"no real spectrum: arccos argument {arg:.6g}")
        beta = np.arccos(np.clip(arg, -1.0, 1.0))
        sH = np.sqrt(H)
        lam = np.array([
            i1 / 3.0 - 2.0 * sH * np.cos((np.pi - beta) / 3.0),
            i1 / 3.0 - 2.0 * sH * np.cos((np.pi + beta) / 3.0),
            i1 / 3.0 + 2.0 * sH * np.cos(beta / 3.0),
        ])
    lam = np.sort(lam)
    if lam[0] <= 0:
        raise KinematicsError("reconstructed spectrum is not positive")
    return lam


def plane_strain_F(F2):
    """Embed in-plane 2x2 gradients (..., 2, 2) into 3x3 with F33 = 1."""
    F2 = np.asarray(F2, dtype=float)
    F = np.zeros(F2.shape[:-2] + (3, 3))
    F[..., :2, :2] = F2
    F[..., 2, 2] = 1.0
    return F


_MODES = ("constrained_uniaxial", "constrained_equibiaxial", "simple_shear")


def canonical_path(mode, amplitude, steps=1):
    """Deformation gradients from the identity to ``amplitude``.

    ``amplitude`` is the stretch for the two constrained modes and the shear
    amount for simple shear.  ``steps`` states are returned, the last one at
    ``amplitude`` (the identity itself is not included unless ``steps`` is 1
    and ``amplitude`` is the reference value).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if mode not in _MODES:
        raise ValueError(f"unknown mode {mode!r}")
    ref = 0.0 if mode == "simple_shear" else 1.0
    ctrl = np.linspace(ref, amplitude, steps + 1)[1:] if steps > 1 else np.array([amplitude])
    return [path_F(mode, c) for c in ctrl]


def path_F(mode, c):
    """Deformation gradient of a canonical mode at control value ``c``."""
    F = np.eye(3)
    if mode == "constrained_uniaxial":
        if c <= 0:
            raise KinematicsError("non-positive stretch")
        F[0, 0] = c
    elif mode == "constrained_equibiaxial":
        if c <= 0:
            raise KinematicsError("non-positive stretch")
        F[0, 0] = F[1, 1] = c
    elif mode == "simple_shear":
        F[0, 1] = c
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return F
