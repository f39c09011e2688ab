"""Plane-strain finite elements for hyperelastic potentials.

Linear triangles with one integration point (constant ``F`` per element),
``F33 = 1``.  Stresses and tangents follow from the invariant derivatives of
the potential:

    P = sum_a phi_a dI_a/dF
    A = sum_ab phi_ab dI_a/dF (x) dI_b/dF + sum_a phi_a d2I_a/dF2

with ``I = (I1, I2, J)``.  The residual is the internal nodal force vector.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import spsolve

from . import diffcore as dc
from .diffcore import DomainError

__all__ = [
    "Mesh2D",
    "plate",
    "plate_with_holes",
    "euler_characteristic",
    "ElementInversion",
    "NewtonFailure",
    "DirichletBC",
    "tension_bc",
    "LoadSchedule",
    "element_kinematics",
    "residual_and_tangent",
    "residual",
    "total_energy",
    "solve_increment",
    "solve_load_path",
    "reaction_force",
    "parameter_residual_sensitivity",
    "scalar_operators",
    "DicStep",
    "DicDataset",
    "synth_dic",
    "write_vtk",
]

log = logging.getLogger(__name__)


class ElementInversion(DomainError):
    """An element reached ``det F <= 0``; the increment should be cut."""


class NewtonFailure(RuntimeError):
    """Newton iterations did not converge even after step cutting."""


# ---------------------------------------------------------------------------
# mesh

@dataclass
class Mesh2D:
    nodes: np.ndarray
    elements: np.ndarray
    sets: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.elements = np.asarray(self.elements, dtype=int)
        self.sets = {k: np.asarray(v, dtype=int) for k, v in self.sets.items()}
        X = self.nodes[self.elements]
        e1, e2 = X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det <= 0):
            raise ValueError("mesh has non-positive element areas")
        self.areas = 0.5 * det
        # shape-function gradients dN_a/dX_j, shape (M, 3, 2)
        inv = np.linalg.inv(np.stack([e1, e2], axis=-1))
        dN = np.zeros((len(self.elements), 3, 2))
        dN[:, 1] = inv[:, 0]
        dN[:, 2] = inv[:, 1]
        dN[:, 0] = -dN[:, 1] - dN[:, 2]
        self.grads = dN
        self.dofs = np.stack([2 * self.elements, 2 * self.elements + 1], axis=-1).reshape(-1, 6)

    @property
    def n_dofs(self):
        return 2 * len(self.nodes)

    def edges(self):
        """Unique edges (sorted node pairs) and the number of elements sharing each."""
        e = np.sort(self.elements[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    def boundary_edges(self):
        uniq, counts = self.edges()
        return uniq[counts == 1]

    def lumped_areas(self):
        """Nodal tributary areas (one third of each adjacent element)."""
        w = np.zeros(len(self.nodes))
        np.add.at(w, self.elements.ravel(), np.repeat(self.areas / 3.0, 3))
        return w

    def to_dict(self):
        return {"nodes": self.nodes.tolist(), "elements": self.elements.tolist(),
                "sets": {k: v.tolist() for k, v in self.sets.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["nodes"], d["elements"], d.get("sets", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _edge_sets(nodes, width, height, tol=1e-9):
    x, y = nodes[:, 0], nodes[:, 1]
    return {"bottom": np.flatnonzero(np.abs(y) < tol),
            "top": np.flatnonzero(np.abs(y - height) < tol),
            "left": np.flatnonzero(np.abs(x) < tol),
            "right": np.flatnonzero(np.abs(x - width) < tol)}


def plate(width=1.0, height=1.0, nx=2, ny=2):
    """Structured triangulation of ``[0, width] x [0, height]``; ``2 nx ny`` elements."""
    xs, ys = np.linspace(0, width, nx + 1), np.linspace(0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    elems = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 2, a + nx + 1
            # alternate the diagonal to avoid a directional bias
            if (i + j) % 2 == 0:
                elems += [(a, b, c), (a, c, d)]
            else:
                elems += [(a, b, d), (b, c, d)]
    return Mesh2D(nodes, np.array(elems), _edge_sets(nodes, width, height))


DEFAULT_HOLES = ((1.5, 1.25), (1.5, 2.5), (1.5, 3.75))


def plate_with_holes(width=3.0, height=5.0, nx=8, ny=13, holes=DEFAULT_HOLES, radius=0.4):
    """Plate with circular holes cut out by element deletion.

    Elements whose centroid lies inside a hole are removed, then nodes on
    the new boundary are moved radially onto the circle unless that would
    distort an element below a quarter of its original area.
    """
    base = plate(width, height, nx, ny)
    nodes, elems = base.nodes.copy(), base.elements
    cent = nodes[elems].mean(axis=1)
    keep = np.ones(len(elems), bool)
    for c in holes:
        keep &= np.sum((cent - c) ** 2, axis=1) > radius ** 2
    elems = elems[keep]
    used = np.unique(elems)
    remap = -np.ones(len(nodes), int)
    remap[used] = np.arange(len(used))
    nodes, elems = nodes[used], remap[elems]

    tmp = Mesh2D(nodes, elems)
    bnodes = np.unique(tmp.boundary_edges())
    outer = set(np.concatenate(list(_edge_sets(nodes, width, height).values())).tolist())
    hole_nodes = []
    for n in bnodes:
        if n in outer:
            continue
        d = [np.hypot(*(nodes[n] - c)) for c in holes]
        k = int(np.argmin(d))
        hole_nodes.append(n)
        old = nodes[n].copy()
        nodes[n] = np.asarray(holes[k]) + radius * (old - holes[k]) / d[k]
        X = nodes[elems]
        e1, e2 = X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]
        area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        if np.any(area < 0.25 * tmp.areas):
            nodes[n] = old
    sets = _edge_sets(nodes, width, height)
    sets["holes"] = np.array(sorted(hole_nodes), dtype=int)
    return Mesh2D(nodes, elems, sets)


def euler_characteristic(mesh):
    """``V - E + F`` of the triangulation (``1 - holes`` for a connected plate)."""
    uniq, _ = mesh.edges()
    return len(mesh.nodes) - len(uniq) + len(mesh.elements)


# ---------------------------------------------------------------------------
# boundary conditions and load schedule

@dataclass
class DirichletBC:
    dofs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.dofs = np.asarray(self.dofs, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        order = np.argsort(self.dofs)
        self.dofs, self.values = self.dofs[order], self.values[order]
        if len(np.unique(self.dofs)) != len(self.dofs):
            raise ValueError("duplicate Dirichlet dofs")

    def scaled(self, s):
        return DirichletBC(self.dofs, self.values * s)


def tension_bc(mesh, uy, clamp_top_x=True, roller_sides=False):
    """Bottom edge fixed, top edge pulled by ``uy``.

    ``clamp_top_x`` also fixes the horizontal top displacement (gripped
    specimen); ``roller_sides`` fixes ``ux`` on the lateral edges.
    """
    fixed = {}
    for n in mesh.sets["bottom"]:
        fixed[2 * n] = 0.0
        fixed[2 * n + 1] = 0.0
    for n in mesh.sets["top"]:
        fixed[2 * n + 1] = uy
        if clamp_top_x:
            fixed[2 * n] = 0.0
    if roller_sides:
        for n in np.concatenate([mesh.sets["left"], mesh.sets["right"]]):
            fixed.setdefault(2 * n, 0.0)
    dofs = np.array(sorted(fixed))
    return DirichletBC(dofs, np.array([fixed[d] for d in dofs]))


@dataclass(frozen=True)
class LoadSchedule:
    total: float = 2.5
    increments: int = 25
    record: tuple = (1, 5, 10, 15, 20, 25)
    height: float = 5.0

    def displacement(self, inc):
        return self.total * inc / self.increments

    def strain(self, inc):
        return self.displacement(inc) / self.height


# ---------------------------------------------------------------------------
# element kinematics, stress and tangent

def element_kinematics(mesh, u):
    """In-plane ``F`` (M, 2, 2) and invariants of the plane-strain ``C``."""
    U = np.asarray(u, float).reshape(-1, 2)[mesh.elements]
    F = np.eye(2) + np.einsum("mai,maj->mij", U, mesh.grads)
    J = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if np.any(J <= 0):
        raise ElementInversion(f"{int(np.sum(J <= 0))} inverted element(s)")
    C = np.einsum("mki,mkj->mij", F, F)
    trC = C[:, 0, 0] + C[:, 1, 1] + 1.0
    trC2 = np.einsum("mij,mji->m", C, C) + 1.0
    I2 = 0.5 * (trC * trC - trC2)
    return F, C, trC, I2, J


def _first_derivs(F, C, I1, J):
    """``dI1/dF, dI2/dF, dJ/dF`` restricted to the plane, each (M, 2, 2)."""
    Finv_T = np.linalg.inv(F).transpose(0, 2, 1)
    d1 = 2.0 * F
    d2 = 2.0 * (I1[:, None, None] * F - F @ C)
    dJ = J[:, None, None] * Finv_T
    return d1, d2, dJ, Finv_T


def _second_derivs(F, C, I1, J, Finv_T):
    eye = np.eye(2)
    B = F @ F.transpose(0, 2, 1)
    dd = np.einsum("ik,JL->iJkL", eye, eye)
    d1 = 2.0 * np.broadcast_to(dd, (len(F),) + dd.shape)
    d2 = (4.0 * np.einsum("miJ,mkL->miJkL", F, F)
          + 2.0 * I1[:, None, None, None, None] * dd
          - 2.0 * (np.einsum("ik,mJL->miJkL", eye, C)
                   + np.einsum("miL,mkJ->miJkL", F, F)
                   + np.einsum("mik,JL->miJkL", B, eye)))
    dJ = J[:, None, None, None, None] * (np.einsum("miJ,mkL->miJkL", Finv_T, Finv_T)
                                         - np.einsum("miL,mkJ->miJkL", Finv_T, Finv_T))
    return d1, d2, dJ


def _as_field(x, m):
    return np.broadcast_to(np.asarray(x, float), (m,))


def _assemble_vector(mesh, fe):
    R = np.zeros(mesh.n_dofs)
    np.add.at(R, mesh.dofs.ravel(), fe.ravel())
    return R


def _element_forces(mesh, P):
    # f_(a,i) = A_e P_ij dN_a/dX_j
    return np.einsum("m,mij,maj->mai", mesh.areas, P, mesh.grads).reshape(-1, 6)


def residual(mesh, model, u):
    F, C, I1, I2, J = element_kinematics(mesh, u)
    d = model.eval(I1, I2, J)
    m = len(F)
    g = [_as_field(x, m) for x in d.g]
    dI = _first_derivs(F, C, I1, J)[:3]
    P = sum(g[a][:, None, None] * dI[a] for a in range(3))
    return _assemble_vector(mesh, _element_forces(mesh, P))


def residual_and_tangent(mesh, model, u):
    """Internal force vector and its sparse Jacobian with respect to ``u``."""
    F, C, I1, I2, J = element_kinematics(mesh, u)
    d = model.eval(I1, I2, J)
    m = len(F)
    g = d.grad_array() if np.ndim(d.v) else d.grad_array()[:, None]
    g = np.broadcast_to(g, (3, m))
    h = np.broadcast_to(d.hess_array().reshape(3, 3, -1), (3, 3, m))
    d1, d2, dJ, Finv_T = _first_derivs(F, C, I1, J)
    dI = (d1, d2, dJ)
    P = sum(g[a][:, None, None] * dI[a] for a in range(3))
    A = sum(g[a][:, None, None, None, None] * s
            for a, s in enumerate(_second_derivs(F, C, I1, J, Finv_T)))
    for a in range(3):
        for b in range(3):
            A = A + h[a, b][:, None, None, None, None] * np.einsum("miJ,mkL->miJkL", dI[a], dI[b])
    R = _assemble_vector(mesh, _element_forces(mesh, P))
    Ke = np.einsum("m,miJkL,maJ,mbL->maibk", mesh.areas, A, mesh.grads, mesh.grads).reshape(-1, 6, 6)
    rows = np.repeat(mesh.dofs, 6, axis=1).ravel()
    cols = np.tile(mesh.dofs, (1, 6)).ravel()
    K = sps.csr_matrix((Ke.ravel(), (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs))
    return R, K


def total_energy(mesh, model, u):
    """Stored energy ``sum_e A_e phi(F_e)``."""
    F, C, I1, I2, J = element_kinematics(mesh, u)
    return float(np.sum(mesh.areas * _as_field(model.eval(I1, I2, J).v, len(F))))


def _dual_parts(x, m):
    if isinstance(x, dc.Dual1):
        return _as_field(x.v, m), _as_field(x.d, m)
    return _as_field(x, m), np.zeros(m)


def parameter_residual_sensitivity(mesh, model, u, k):
    """``dR/dtheta_k`` at fixed ``u`` using a parameter dual number."""
    F, C, I1, I2, J = element_kinematics(mesh, u)
    d = model.param_sensitivity(I1, I2, J, k)
    m = len(F)
    dg = [_dual_parts(x, m)[1] for x in d.g]
    dI = _first_derivs(F, C, I1, J)[:3]
    dP = sum(dg[a][:, None, None] * dI[a] for a in range(3))
    return _assemble_vector(mesh, _element_forces(mesh, dP))


# ---------------------------------------------------------------------------
# nonlinear solution

def _newton(mesh, model, u, bc, tol, max_iter):
    free = np.setdiff1d(np.arange(mesh.n_dofs), bc.dofs)
    for it in range(max_iter + 1):
        R, K = residual_and_tangent(mesh, model, u)
        rf = R[free]
        if not np.all(np.isfinite(rf)):
            raise NewtonFailure("non-finite residual")
        if np.linalg.norm(rf) < tol * max(1.0, np.linalg.norm(R)):
            return u, it
        if it == max_iter:
            break
        du = spsolve(K[free][:, free].tocsc(), -rf)
        u = u.copy()
        u[free] += du
    raise NewtonFailure(f"no convergence in {max_iter} iterations")


def solve_increment(mesh, model, u_prev, bc, tol=1e-10, max_iter=25, max_cuts=4, info=None):
    """Equilibrium state with Dirichlet data ``bc``, starting from ``u_prev``.

    A linearized predictor carries the change of prescribed values into the
    free dofs.  On inversion or non-convergence the increment is halved
    (recursively, at most ``max_cuts`` times).
    """
    u_prev = np.asarray(u_prev, float)
    info = {} if info is None else info
    info.setdefault("iterations", [])
    info.setdefault("cuts", 0)

    def attempt(u0, target, depth):
        try:
            free = np.setdiff1d(np.arange(mesh.n_dofs), bc.dofs)
            dd = target - u0[bc.dofs]
            u = u0.copy()
            if np.any(dd != 0) and len(free):
                R, K = residual_and_tangent(mesh, model, u0)
                rhs = -(R[free] + K[free][:, bc.dofs] @ dd)
                u[free] += spsolve(K[free][:, free].tocsc(), rhs)
            u[bc.dofs] = target
            u, it = _newton(mesh, model, u, DirichletBC(bc.dofs, target), tol, max_iter)
            info["iterations"].append(it)
            return u
        except (ElementInversion, NewtonFailure, DomainError, np.linalg.LinAlgError) as err:
            if depth >= max_cuts:
                raise NewtonFailure(f"increment failed after {max_cuts} cuts: {err}") from err
            info["cuts"] += 1
            mid = 0.5 * (u0[bc.dofs] + target)
            u_mid = attempt(u0, mid, depth + 1)
            return attempt(u_mid, target, depth + 1)

    return attempt(u_prev, bc.values, 0)


def solve_load_path(mesh, model, schedule=LoadSchedule(), bc_factory=None, tol=1e-10):
    """Solve all increments; return ``{increment: u}`` for recorded increments.

    ``bc_factory(uy)`` builds the Dirichlet data (default :func:`tension_bc`).
    """
    bc_factory = bc_factory or (lambda uy: tension_bc(mesh, uy))
    u = np.zeros(mesh.n_dofs)
    out, iters = {}, {}
    for inc in range(1, schedule.increments + 1):
        info = {}
        u = solve_increment(mesh, model, u, bc_factory(schedule.displacement(inc)), tol, info=info)
        iters[inc] = info["iterations"]
        if inc in schedule.record:
            out[inc] = u.copy()
    return out, iters


def reaction_force(mesh, model, u, edge_set="top", direction=1):
    """Sum of internal nodal forces on ``edge_set`` in ``direction``."""
    R = residual(mesh, model, u)
    return float(np.sum(R[2 * mesh.sets[edge_set] + direction]))


# ---------------------------------------------------------------------------
# scalar operators for random fields

def scalar_operators(mesh):
    """Linear-triangle stiffness ``K``, mass ``M``, boundary mass ``Mb`` and lumped mass."""
    G, A = mesh.grads, mesh.areas
    Ke = np.einsum("m,maj,mbj->mab", A, G, G)
    Me = A[:, None, None] * (np.ones((3, 3)) + np.eye(3)) / 12.0
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    n = len(mesh.nodes)
    K = sps.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))
    M = sps.csr_matrix((Me.ravel(), (rows, cols)), shape=(n, n))
    be = mesh.boundary_edges()
    L = np.linalg.norm(mesh.nodes[be[:, 0]] - mesh.nodes[be[:, 1]], axis=1)
    Mbe = L[:, None, None] * (np.ones((2, 2)) + np.eye(2)) / 6.0
    Mb = sps.csr_matrix((Mbe.ravel(), (np.repeat(be, 2, axis=1).ravel(), np.tile(be, (1, 2)).ravel())),
                        shape=(n, n))
    return K, M, Mb, np.asarray(M.sum(axis=1)).ravel()


# ---------------------------------------------------------------------------
# synthetic DIC

@dataclass
class DicStep:
    increment: int
    strain: float
    u: np.ndarray
    force: float
    uy: float


@dataclass
class DicDataset:
    steps: list
    seed: int
    noise: dict
    schedule: dict = field(default_factory=dict)
    material: dict = field(default_factory=dict)

    def to_dict(self):
        return {"steps": [{"increment": s.increment, "strain": s.strain, "uy": s.uy,
                           "u": np.asarray(s.u).tolist(), "force": s.force} for s in self.steps],
                "seed": self.seed, "noise": self.noise, "schedule": self.schedule,
                "material": self.material}

    @classmethod
    def from_dict(cls, d):
        steps = [DicStep(s["increment"], s["strain"], np.asarray(s["u"], float), s["force"],
                         s.get("uy", 0.0)) for s in d["steps"]]
        return cls(steps, d.get("seed", 0), d.get("noise", {}), d.get("schedule", {}),
                   d.get("material", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def synth_dic(mesh, model, schedule=LoadSchedule(), noise=0.005, corr_len=0.33, seed=0,
              bc_factory=None):
    """Synthetic full-field data: solved displacements plus correlated noise.

    ``noise`` is the noise amplitude relative to the largest nodal
    displacement magnitude of each recorded step.  Forces are noiseless.
    """
    from .sampling import grf_noise, grf_operator

    bc_factory = bc_factory or (lambda uy: tension_bc(mesh, uy))
    states, _ = solve_load_path(mesh, model, schedule, bc_factory)
    op = grf_operator(mesh, corr_len) if noise > 0 else None
    steps = []
    for n_rec, (inc, u) in enumerate(sorted(states.items())):
        U = u.reshape(-1, 2)
        amp = noise * float(np.max(np.linalg.norm(U, axis=1)))
        eta = grf_noise(mesh, corr_len, amp, seed=seed + 1000 * n_rec, operator=op) if noise > 0 \
            else np.zeros_like(U)
        steps.append(DicStep(inc, schedule.strain(inc), (U + eta).ravel(),
                             reaction_force(mesh, model, u), schedule.displacement(inc)))
    return DicDataset(steps, seed, {"relative_amplitude": noise, "corr_len": corr_len},
                      {"total": schedule.total, "increments": schedule.increments,
                       "record": list(schedule.record), "height": schedule.height},
                      model.to_dict())


def write_vtk(path, mesh, point_data=None, cell_data=None):
    """Legacy ASCII VTK unstructured grid with optional nodal/cell fields."""
    lines = ["# vtk DataFile Version 3.0", "pancal field", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(mesh.nodes)} double"]
    lines += [f"{x:.10g} {y:.10g} 0" for x, y in mesh.nodes]
    lines.append(f"CELLS {len(mesh.elements)} {4 * len(mesh.elements)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.elements]
    lines.append(f"CELL_TYPES {len(mesh.elements)}")
    lines += ["5"] * len(mesh.elements)
    for kind, data, count in (("POINT_DATA", point_data, len(mesh.nodes)),
                              ("CELL_DATA", cell_data, len(mesh.elements))):
        if not data:
            continue
        lines.append(f"{kind} {count}")
        for name, arr in data.items():
            arr = np.asarray(arr, float).reshape(count, -1)
            if arr.shape[1] == 1:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [f"{v:.10g}" for v in arr[:, 0]]
            else:
                arr3 = np.zeros((count, 3))
                arr3[:, :arr.shape[1]] = arr[:, :3]
                lines.append(f"VECTORS {name} double")
                lines += [" ".join(f"{v:.10g}" for v in row) for row in arr3]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
