"""Sparse pre-training of network potentials with hard-concrete L0 gates.

Each trainable scalar carries a gate ``z in [0, 1]``; the network sees
``w * z``.  Training minimizes the diagonal-stress error plus an expected-L0
complexity term and an input-dependency penalty (and, for the relaxed
variant, the polyconvexity indicator penalty).  Gradients come from the
reverse-mode tape in :mod:`pancal.diffcore`; Adam is implemented here.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .diffcore import Dual2, Tape, tape_gradient
from .kinematics import InvariantTriplet, reconstruct_diagonal_C
from .materials import Normalized
from .pann import IcnnPotential, IcnnWeights, extract_sparse_form, icnn_energy
from .polyconvexity import indicator_terms, penalty_from_terms

__all__ = [
    "GAMMA",
    "ZETA",
    "BETA",
    "GateParams",
    "TrainSchedule",
    "LabeledSample",
    "GatedNetwork",
    "TrainingDiverged",
    "l0_complexity",
    "input_dependency_penalty",
    "r2_score",
    "pretrain",
    "write_telemetry",
]

log = logging.getLogger(__name__)

GAMMA, ZETA, BETA = -0.1, 1.1, 2.0 / 3.0
ROUND_THRESHOLD = 0.05
TAU_INPUT = 1e-3
# initial keep probability 0.8
LOG_ALPHA_INIT = float(np.log(4.0))

TELEMETRY_FIELDS = ("epoch", "lr", "w_l0", "w_input", "loss", "mse", "l0", "input_pen",
                    "indicator_pen", "r2_train", "r2_test", "active")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class GateParams:
    """``log_alpha`` per gated array, keyed like the weight arrays."""

    log_alpha: dict
    gamma: float = GAMMA
    zeta: float = ZETA
    beta: float = BETA

    @classmethod
    def init(cls, weights, value=LOG_ALPHA_INIT):
        return cls({k: np.full(a.shape, value) for k, a in weights.arrays.items()})

    def deterministic(self, threshold=None):
        """Evaluation gates ``clip(sigmoid(log a) (zeta - gamma) + gamma, 0, 1)``.

        With ``threshold`` set, gates below it are rounded to exactly zero.
        """
        out = {}
        for k, la in self.log_alpha.items():
            z = np.clip(_sigmoid(la) * (self.zeta - self.gamma) + self.gamma, 0.0, 1.0)
            if threshold is not None:
                z = np.where(z < threshold, 0.0, z)
            out[k] = z
        return out

    def sample(self, rng, log_alpha=None):
        """Stochastic gates; ``log_alpha`` may hold tape variables."""
        la = self.log_alpha if log_alpha is None else log_alpha
        out = {}
        for k, a in la.items():
            u = rng.uniform(1e-6, 1.0 - 1e-6, np.shape(dc.value_of(a)))
            s = dc.sigmoid((np.log(u) - np.log1p(-u) + a) * (1.0 / self.beta))
            x = s * (self.zeta - self.gamma) + self.gamma
            out[k] = dc.relu(x) - dc.relu(x - 1.0)
        return out

    def n_active(self, threshold=ROUND_THRESHOLD):
        return int(sum(np.count_nonzero(z) for z in self.deterministic(threshold).values()))

    def size(self):
        return int(sum(np.size(v) for v in self.log_alpha.values()))


def l0_complexity(g, log_alpha=None):
    """Expected number of non-zero gates, ``sum sigmoid(log a - beta log(-gamma/zeta))``.

    ``log_alpha`` overrides the stored values (e.g. with tape variables).
    """
    la = g.log_alpha if log_alpha is None else log_alpha
    shift = g.beta * np.log(-g.gamma / g.zeta)
    total = 0.0
    for a in la.values():
        total = total + dc.sigmoid(a - shift).sum()
    return total


def input_dependency_penalty(d, tau=TAU_INPUT):
    """``sum_k relu(tau - mean|dphi/dx_k|)^2`` over the three invariants.

    ``d`` is either a :class:`~pancal.diffcore.Dual2` energy evaluated on a
    batch, or a pair ``(model, triplets)``.
    """
    if not isinstance(d, Dual2):
        model, pts = d
        pts = np.asarray([tuple(p) for p in pts], dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("input-dependency penalty needs data")
        d = model.eval(pts[:, 0], pts[:, 1], pts[:, 2])
    total = 0.0
    for k in range(3):
        gk = d.d(k)
        m = dc.absolute(gk).mean() if isinstance(gk, dc.Var) else np.mean(np.abs(gk))
        total = total + dc.relu(tau - m) ** 2
    return total


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 2800
    batch: int = 10
    lr0: float = 0.1
    lr_step: int = 700
    lr_factor: float = 0.1
    penalty_activation_epoch: int = 1000
    warmup: int = 500
    w_l0_target: float = 1.0
    w_input_target: float = 1e4
    w_indicator: float = 1.0
    train_fraction: float = 0.8

    @classmethod
    def scaled(cls, epochs, **overrides):
        """The default schedule compressed to ``epochs`` epochs."""
        base = cls()
        f = epochs / base.epochs
        s = replace(base, epochs=epochs,
                    lr_step=max(1, round(base.lr_step * f)),
                    penalty_activation_epoch=round(base.penalty_activation_epoch * f),
                    warmup=max(1, round(base.warmup * f)))
        return replace(s, **overrides)

    def lr(self, epoch):
        return self.lr0 * self.lr_factor ** (epoch // self.lr_step)

    def ramp(self, epoch):
        """Penalty multiplier in [0, 1]: zero before activation, linear warm-up."""
        return float(np.clip((epoch - self.penalty_activation_epoch) / self.warmup, 0.0, 1.0))


@dataclass(frozen=True)
class LabeledSample:
    t: InvariantTriplet
    s_diag: tuple
    c_diag: tuple | None = None


def _as_arrays(data):
    """``(T, C, S)`` arrays of shape (N, 3) from samples or a dict of columns."""
    if isinstance(data, dict):
        T = np.column_stack([data["I1"], data["I2"], data["J"]]).astype(float)
        S = np.column_stack([data["S11"], data["S22"], data["S33"]]).astype(float)
        C = data.get("C")
    else:
        T = np.array([tuple(s.t) for s in data], dtype=float).reshape(-1, 3)
        S = np.array([s.s_diag for s in data], dtype=float).reshape(-1, 3)
        C = None if any(s.c_diag is None for s in data) else np.array([s.c_diag for s in data])
    if C is None:
        C = np.array([reconstruct_diagonal_C(t) for t in T]).reshape(-1, 3)
    return T, np.asarray(C, float), S


def predict_stress(d, T, C):
    """Diagonal second PK stress from an energy Dual2 on a batch."""
    i1, j = T[:, 0:1], T[:, 2:3]
    p1, p2, pj = (x.reshape(-1, 1) if np.ndim(dc.value_of(x)) else x for x in d.g)
    return 2.0 * p1 + p2 * (2.0 * (i1 - C)) + pj * (j / C)


def r2_score(pred, true):
    """Mean over stress components of ``1 - SS_res / SS_tot``.

    Components whose labels are constant are skipped.
    """
    pred, true = np.asarray(pred, float), np.asarray(true, float)
    scores = []
    for k in range(true.shape[1]):
        sst = np.sum((true[:, k] - true[:, k].mean()) ** 2)
        if sst <= 1e-14 * max(1.0, np.sum(true[:, k] ** 2)):
            continue
        scores.append(1.0 - np.sum((pred[:, k] - true[:, k]) ** 2) / sst)
    return float(np.mean(scores)) if scores else float("nan")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``checkpoint`` holds the last finite state."""

    def __init__(self, msg, checkpoint):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class GatedNetwork:
    weights: IcnnWeights
    gates: GateParams
    telemetry: list = field(default_factory=list)
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    sparse_form: object = None

    def effective_weights(self, threshold=ROUND_THRESHOLD):
        z = self.gates.deterministic(threshold)
        return IcnnWeights(self.weights.config,
                           {k: a * z[k] for k, a in self.weights.arrays.items()})

    def potential(self, threshold=ROUND_THRESHOLD):
        """Normalized potential of the deterministically gated network."""
        return Normalized(IcnnPotential(self.effective_weights(threshold)))

    def gate_fraction_closed(self, threshold=ROUND_THRESHOLD):
        return 1.0 - self.gates.n_active(threshold) / self.gates.size()


class _Adam:
    def __init__(self, shapes, b1=0.9, b2=0.999, eps=1e-8):
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.b1, self.b2, self.eps, self.t = b1, b2, eps, 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _batch_loss(arrays, T, C, S, layers, variant, w_input, w_ind):
    """Stress MSE and penalty terms for one batch; arrays may be tape variables."""
    d = icnn_energy(arrays, *Dual2.seed(T[:, 0], T[:, 1], T[:, 2]), layers)
    diff = predict_stress(d, T, C) - S
    mse = (diff * diff).mean()
    pen_in = input_dependency_penalty(d) if w_input > 0 else 0.0
    pen_ind = 0.0
    if variant == "relaxed" and w_ind > 0:
        g1, g2, _ = indicator_terms(d, T[:, 0], T[:, 1])
        pen_ind = penalty_from_terms(g1, g2)
    return mse, pen_in, pen_ind


def _predict(arrays, T, C, layers):
    d = icnn_energy(arrays, *Dual2.seed(T[:, 0], T[:, 1], T[:, 2]), layers)
    return predict_stress(d, T, C)


def pretrain(config, data, schedule=None, seed=0, use_input_penalty=True,
             telemetry_path=None, init=None):
    """Train a gated network on labeled diagonal-stress data.

    Returns a :class:`GatedNetwork` whose ``telemetry`` holds one row per
    epoch and whose ``sparse_form`` is the extracted closed form.
    """
    schedule = schedule or TrainSchedule()
    rng = np.random.default_rng(seed)
    T, C, S = _as_arrays(data)
    n = len(T)
    perm = rng.permutation(n)
    n_train = int(round(schedule.train_fraction * n)) if n > 1 else n
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])

    weights = init.copy() if init is not None else IcnnWeights.init(config, rng)
    weights.project()
    gates = GateParams.init(weights)
    net = GatedNetwork(weights, gates, [], tr, te)
    masks = weights.masks()
    shapes = {("w", k): a.shape for k, a in weights.arrays.items()}
    shapes.update({("a", k): a.shape for k, a in gates.log_alpha.items()})
    opt = _Adam(shapes)

    writer = None
    fh = None
    if telemetry_path is not None:
        fh = open(telemetry_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(TELEMETRY_FIELDS)
    try:
        for epoch in range(schedule.epochs):
            lr = schedule.lr(epoch)
            ramp = schedule.ramp(epoch)
            w_l0 = schedule.w_l0_target * ramp
            w_in = schedule.w_input_target * ramp if use_input_penalty else 0.0
            w_ind = schedule.w_indicator * ramp
            order = tr[rng.permutation(len(tr))]
            sums = np.zeros(5)
            nb = 0
            for b0 in range(0, len(order), schedule.batch):
                idx = order[b0:b0 + schedule.batch]
                checkpoint = (weights.copy(), {k: v.copy() for k, v in gates.log_alpha.items()})
                tape = Tape()
                W = {k: tape.leaf(a) for k, a in weights.arrays.items()}
                A = {k: tape.leaf(a) for k, a in gates.log_alpha.items()}
                z = gates.sample(rng, A)
                eff = {k: W[k] * z[k] for k in W}
                mse, pen_in, pen_ind = _batch_loss(eff, T[idx], C[idx], S[idx], config.layers,
                                                   config.variant, w_in, w_ind)
                l0 = l0_complexity(gates, A)
                loss = mse + w_l0 * l0
                if w_in > 0:
                    loss = loss + w_in * pen_in
                if isinstance(pen_ind, dc.Var):
                    loss = loss + w_ind * pen_ind
                lv = float(dc.value_of(loss))
                if not np.isfinite(lv):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}",
                                           GatedNetwork(checkpoint[0], GateParams(checkpoint[1]),
                                                        net.telemetry, tr, te))
                keys = [("w", k) for k in W] + [("a", k) for k in A]
                grads = tape_gradient(loss, list(W.values()) + list(A.values()))
                params = {("w", k): weights.arrays[k] for k in W}
                params.update({("a", k): gates.log_alpha[k] for k in A})
                opt.step(params, dict(zip(keys, grads)), lr)
                weights.project()
                sums += [lv, float(dc.value_of(mse)), float(dc.value_of(l0)),
                         float(dc.value_of(pen_in)), float(dc.value_of(pen_ind))]
                nb += 1
            row = _telemetry_row(net, epoch, lr, w_l0, w_in, sums / max(nb, 1), T, C, S)
            net.telemetry.append(row)
            if writer is not None:
                writer.writerow([row[f] for f in TELEMETRY_FIELDS])
            if epoch % 100 == 0:
                log.info("epoch %d loss %.4g r2_test %.4f active %d", epoch, row["loss"],
                         row["r2_test"], row["active"])
    finally:
        if fh is not None:
            fh.close()
    net.sparse_form = extract_sparse_form(weights, gates, ROUND_THRESHOLD)
    return net


def _telemetry_row(net, epoch, lr, w_l0, w_in, means, T, C, S):
    arrays = net.effective_weights().arrays
    layers = net.weights.config.layers
    r2 = {}
    for name, idx in (("r2_train", net.train_idx), ("r2_test", net.test_idx)):
        r2[name] = r2_score(_predict(arrays, T[idx], C[idx], layers), S[idx]) if len(idx) else float("nan")
    return {"epoch": epoch, "lr": lr, "w_l0": w_l0, "w_input": w_in,
            "loss": means[0], "mse": means[1], "l0": means[2], "input_pen": means[3],
            "indicator_pen": means[4], **r2, "active": net.gates.n_active()}


def write_telemetry(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TELEMETRY_FIELDS)
        for r in rows:
            w.writerow([r[f] for f in TELEMETRY_FIELDS])
