"""Training-set construction and synthetic measurement noise.

* Latin-hypercube sampling of deformation gradients around the identity.
* Selection of well-spaced invariant triplets by farthest-point seeding
  followed by simulated annealing on ``alpha d_min + beta mean_nn``.
* Stress labels from an analytic material, canonical test paths.
* Gaussian random fields with Matérn covariance through an SPDE solve on a
  finite element mesh.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .kinematics import InvariantTriplet, REFERENCE, invariants_of, path_F, reconstruct_diagonal_C
from .l0 import LabeledSample
from .materials import second_pk_stress, stress_tensor

__all__ = [
    "SamplerConfig",
    "SaConfig",
    "Cloud",
    "Selection",
    "lhs_defgrads",
    "select_triplets",
    "selection_objective",
    "label_with",
    "canonical_test_data",
    "DEFAULT_RANGES",
    "grf_noise",
]

log = logging.getLogger(__name__)

_DET_MIN = 0.05


@dataclass(frozen=True)
class SamplerConfig:
    n_cloud: int = 50000
    delta: float = 0.2
    k_select: int = 100
    anchor: tuple | None = (3.0, 3.0, 1.0)


@dataclass(frozen=True)
class SaConfig:
    alpha: float = 1.0
    beta: float = 0.25
    T0: float = 1.0
    gamma_cool: float = 0.999
    I_max: int = 20000
    I_stall: int = 5000
    M_cand: int = 256
    n_swap: int = 8
    rescue_every: int = 500
    hill_every: int = 5000
    n_fps: int = 8


@dataclass
class Cloud:
    """Deformation gradients ``F`` (N, 3, 3) and their invariants ``T`` (N, 3)."""

    F: np.ndarray
    T: np.ndarray

    def __len__(self):
        return len(self.T)

    def __iter__(self):
        for F, t in zip(self.F, self.T):
            yield F, InvariantTriplet(*t)


def lhs_defgrads(cfg=SamplerConfig(), seed=0):
    """Latin-hypercube sample ``F = I + U(-delta, delta)`` per component.

    Samples with ``det F <= 0.05`` are rejected, so the returned cloud may be
    slightly smaller than ``cfg.n_cloud``.
    """
    lhs = qmc.LatinHypercube(d=9, seed=np.random.default_rng(seed))
    u = lhs.random(cfg.n_cloud)
    F = np.eye(3) + (2.0 * u - 1.0).reshape(-1, 3, 3) * cfg.delta
    F = F[np.linalg.det(F) > _DET_MIN]
    I1, I2, J = invariants_of(F)
    return Cloud(F, np.column_stack([I1, I2, J]))


# ---------------------------------------------------------------------------
# FPS + simulated annealing

def _pairwise(X):
    d = np.sqrt(np.maximum(np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1), 0.0))
    np.fill_diagonal(d, np.inf)
    return d


def _objective(D, alpha, beta):
    nn = D.min(axis=1)
    return alpha * nn.min() + beta * nn.mean(), nn.min(), nn.mean()


def selection_objective(X, alpha=1.0, beta=0.25):
    """``(J, d_min, mean_nn)`` for the point set ``X`` (k, d)."""
    return _objective(_pairwise(np.asarray(X, float)), alpha, beta)


@dataclass
class Selection:
    indices: np.ndarray
    T: np.ndarray
    F: np.ndarray
    d_min: float
    d_nn: float
    history: list = field(default_factory=list, repr=False)

    def triplets(self):
        return [InvariantTriplet(*t) for t in self.T]


class _Annealer:
    def __init__(self, Z, anchor, sa, rng):
        self.Z, self.anchor, self.sa, self.rng = Z, anchor, sa, rng

    def d_min(self, S):
        return _pairwise(self.Z[S]).min()

    def fps(self, k):
        Z, rng = self.Z, self.rng
        S = [self.anchor] if self.anchor is not None else [int(rng.integers(len(Z)))]
        if self.anchor is not None and k > 1:
            S.append(int(rng.integers(len(Z))))
        r = np.min(np.sum((Z[:, None, :] - Z[S][None]) ** 2, axis=-1), axis=1)
        while len(S) < k:
            q = int(np.argmax(r))
            S.append(q)
            r = np.minimum(r, np.sum((Z - Z[q]) ** 2, axis=1))
        return np.array(S[:k])

    def best_improving_swap(self, S, positions):
        """Best 1-swap over ``positions`` maximizing d_min, or None."""
        cur = self.d_min(S)
        best = (cur, None, None)
        for pos in positions:
            if S[pos] == self.anchor:
                continue
            rest = np.delete(S, pos)
            r = np.min(np.sum((self.Z[:, None, :] - self.Z[rest][None]) ** 2, axis=-1), axis=1)
            q = int(np.argmax(r))
            trial = S.copy()
            trial[pos] = q
            dm = self.d_min(trial)
            if dm > best[0] + 1e-12:
                best = (dm, pos, q)
        return best

    def closest_pair(self, S):
        D = _pairwise(self.Z[S])
        a, b = np.unravel_index(np.argmin(D), D.shape)
        return [a, b]

    def rescue(self, S):
        """One targeted swap of an endpoint of the closest pair, if it raises d_min."""
        dm, pos, q = self.best_improving_swap(S, self.closest_pair(S))
        if pos is not None:
            S = S.copy()
            S[pos] = q
        return S

    def hill_climb(self, S, max_rounds=None):
        """Repeat improving 1-swaps on the closest pair until none is found."""
        max_rounds = max_rounds or 10 * len(S)
        for _ in range(max_rounds):
            dm, pos, q = self.best_improving_swap(S, self.closest_pair(S))
            if pos is None:
                break
            S = S.copy()
            S[pos] = q
        return S


def select_triplets(cloud, cfg=SamplerConfig(), sa=SaConfig(), seed=0):
    """Pick ``cfg.k_select`` well-spaced points of the cloud's invariant set.

    The anchor triplet, when configured, is added to the cloud if needed
    and never swapped out.  Distances are measured on z-scored coordinates.
    """
    rng = np.random.default_rng(seed)
    T = np.asarray(cloud.T, float)
    F = np.asarray(cloud.F, float) if getattr(cloud, "F", None) is not None else None
    anchor = None
    if cfg.anchor is not None:
        hit = np.flatnonzero(np.all(np.isclose(T, cfg.anchor, atol=1e-12), axis=1))
        if len(hit):
            anchor = int(hit[0])
        else:
            T = np.vstack([T, cfg.anchor])
            if F is not None:
                F = np.concatenate([F, np.eye(3)[None]])
            anchor = len(T) - 1
    k = cfg.k_select
    if k > len(T):
        raise ValueError(f"cannot select {k} points from {len(T)}")
    sd = T.std(axis=0)
    Z = (T - T.mean(axis=0)) / np.where(sd > 0, sd, 1.0)

    def result(S, history):
        S = np.asarray(S)
        if len(S) > 1:
            _, dmin, dnn = _objective(_pairwise(Z[S]), sa.alpha, sa.beta)
        else:
            dmin = dnn = float("inf")
        return Selection(S, T[S], None if F is None else F[S], float(dmin), float(dnn), history)

    if k == len(T):
        return result(np.arange(len(T)), [])
    if k == 1:
        return result([anchor if anchor is not None else 0], [])

    ann = _Annealer(Z, anchor, sa, rng)
    seeds = [ann.fps(k) for _ in range(max(1, sa.n_fps))]
    cur = max(seeds, key=ann.d_min)
    Dcur = _pairwise(Z[cur])
    Jcur = _objective(Dcur, sa.alpha, sa.beta)[0]
    best, Jbest, i_best = cur.copy(), Jcur, 0

    # squared distance of every point to the current set, and its owner
    d2 = np.sum((Z[:, None, :] - Z[cur][None]) ** 2, axis=-1)
    owner = np.argmin(d2, axis=1)
    r = d2[np.arange(len(Z)), owner]
    history = [Jbest]
    Temp = sa.T0
    swappable = np.array([s != anchor for s in cur])

    for it in range(1, sa.I_max + 1):
        cdf = np.cumsum(r)
        if cdf[-1] <= 0:
            break
        pool = np.unique(np.searchsorted(cdf, rng.uniform(0, cdf[-1], sa.M_cand), side="right"))
        pool = pool[pool < len(Z)]
        pool = pool[r[pool] > 0]
        if len(pool) == 0:
            break
        for _ in range(sa.n_swap):
            pos = int(rng.choice(np.flatnonzero(swappable)))
            q = int(rng.choice(pool))
            dq = np.sqrt(np.sum((Z[cur] - Z[q]) ** 2, axis=1))
            dq[pos] = np.inf
            Dp = Dcur.copy()
            Dp[pos, :] = dq
            Dp[:, pos] = dq
            Jp = _objective(Dp, sa.alpha, sa.beta)[0]
            dJ = Jp - Jcur
            if dJ >= 0 or rng.uniform() < np.exp(dJ / Temp):
                cur = cur.copy()
                cur[pos] = q
                Dcur, Jcur = Dp, Jp
                # update nearest-selected distances
                dnew = np.sum((Z - Z[q]) ** 2, axis=1)
                lost = np.flatnonzero(owner == pos)
                if len(lost):
                    d2l = np.sum((Z[lost][:, None, :] - Z[cur][None]) ** 2, axis=-1)
                    owner[lost] = np.argmin(d2l, axis=1)
                    r[lost] = d2l[np.arange(len(lost)), owner[lost]]
                closer = dnew < r
                owner[closer] = pos
                r[closer] = dnew[closer]
                if Jcur > Jbest:
                    best, Jbest, i_best = cur.copy(), Jcur, it
                break
        Temp *= sa.gamma_cool
        if it % sa.rescue_every == 0:
            best = ann.rescue(best)
            Jbest = _objective(_pairwise(Z[best]), sa.alpha, sa.beta)[0]
        if it % sa.hill_every == 0:
            best = ann.hill_climb(best)
            Jbest = _objective(_pairwise(Z[best]), sa.alpha, sa.beta)[0]
        history.append(Jbest)
        if it - i_best > sa.I_stall:
            log.info("annealing stalled at iteration %d", it)
            break
    best = ann.hill_climb(best)
    history.append(_objective(_pairwise(Z[best]), sa.alpha, sa.beta)[0])
    return result(best, history)


# ---------------------------------------------------------------------------
# labels and test paths

def label_with(model, triplets):
    """Diagonal second PK stress labels at the reconstructed diagonal ``C``."""
    out = []
    for t in triplets:
        t = InvariantTriplet(*(float(x) for x in t))
        c = reconstruct_diagonal_C(t)
        s = second_pk_stress(model, c)
        out.append(LabeledSample(t, tuple(float(x) for x in s), tuple(float(x) for x in c)))
    return out


DEFAULT_RANGES = {
    "constrained_uniaxial": (0.6, 1.4),
    "constrained_equibiaxial": (0.6, 1.4),
    "simple_shear": (-0.4, 0.4),
}


def canonical_test_data(model, ranges=None, n=81):
    """Full stress along the three canonical deformation modes.

    Returns ``{mode: {"control", "F", "S", "psi"}}`` with ``S`` of shape
    (n, 3, 3) and ``psi`` the energy of ``model``.
    """
    ranges = DEFAULT_RANGES if ranges is None else ranges
    out = {}
    for mode, (lo, hi) in ranges.items():
        ctrl = np.linspace(lo, hi, n)
        F = np.array([path_F(mode, c) for c in ctrl])
        C = np.swapaxes(F, -1, -2) @ F
        I1, I2, J = invariants_of(F)
        out[mode] = {"control": ctrl, "F": F, "S": stress_tensor(model, C),
                     "psi": np.asarray(model.eval(I1, I2, J).v, float)}
    return out


# ---------------------------------------------------------------------------
# Gaussian random fields

def grf_operator(mesh, corr_len=0.33, delta=1.0):
    """Sparse SPDE operator ``gamma K + delta M + gamma sqrt(delta gamma)/1.42 M_b``."""
    from .fem import scalar_operators

    gamma = corr_len ** 2
    K, M, Mb, ml = scalar_operators(mesh)
    A = gamma * K + delta * M + gamma * (np.sqrt(delta * gamma) / 1.42) * Mb
    return A.tocsc(), ml


def grf_noise(mesh, corr_len=0.33, amplitude=1.0, seed=0, n_components=2, operator=None):
    """Matérn-type random field at the mesh nodes, shape (n_nodes, n_components).

    Each component solves ``A G = M^{1/2} xi`` (lumped mass), is rescaled to
    unit empirical standard deviation and multiplied by ``amplitude``.
    """
    from scipy.sparse.linalg import splu

    n_nodes = len(mesh.nodes)
    if amplitude == 0:
        return np.zeros((n_nodes, n_components))
    A, ml = operator if operator is not None else grf_operator(mesh, corr_len)
    lu = splu(A)
    rng = np.random.default_rng(seed)
    out = np.empty((n_nodes, n_components))
    for c in range(n_components):
        g = lu.solve(np.sqrt(ml) * rng.standard_normal(n_nodes))
        out[:, c] = amplitude * g / g.std()
    return out
