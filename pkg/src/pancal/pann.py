"""Physics-augmented network potentials.

Dense input-convex networks over raw invariants ``(I1, I2, J)``, the three
sparse closed forms recovered after L0 pruning, and extraction of a pruned
network into a symbolic expression.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import sympy

from . import diffcore as dc
from .materials import Normalized, PotentialModel, normalize

__all__ = [
    "VARIANTS",
    "IcnnConfig",
    "IcnnWeights",
    "IcnnPotential",
    "StructuralError",
    "icnn_raw_eval",
    "icnn_energy",
    "normalize",
    "SparsePolyconvex",
    "SparseRelaxed",
    "sparse_model",
    "sparse_eval",
    "load_sparse_set",
    "SparseForm",
    "SymbolicPotential",
    "extract_sparse_form",
    "model_to_dict",
    "model_from_dict",
]

VARIANTS = ("polyconvex", "relaxed", "unconstrained")


class StructuralError(ValueError):
    """Network weights violate the sign constraints of their variant."""


@dataclass(frozen=True)
class IcnnConfig:
    layers: int = 2
    hidden: int = 200
    variant: str = "polyconvex"
    activation: str = "softplus"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("layers and hidden must be positive")
        if self.activation != "softplus":
            raise ValueError("only softplus activation is supported")


def _names(layers):
    names = ["Ws0", "b0"]
    for l in range(1, layers):
        names += [f"W{l}", f"Ws{l}"]
    return names + ["Wout", "Wsout"]


class IcnnWeights:
    """Weights of an input-convex network with skip connections.

    Layer 0 maps the invariants into the first hidden layer (with bias);
    each later hidden layer receives the previous one through ``W{l}`` and
    the invariants through ``Ws{l}``; the output is a linear read-out of the
    last hidden layer plus a skip term.  Skip matrices are stored with one
    column per input channel (I1, I2, J).
    """

    def __init__(self, config, arrays):
        self.config = config
        self.arrays = {k: np.array(arrays[k], dtype=float) for k in _names(config.layers)}

    @property
    def names(self):
        return _names(self.config.layers)

    def masks(self):
        """Boolean arrays marking entries constrained to be non-negative."""
        poly = self.config.variant == "polyconvex"
        out = {}
        for name, a in self.arrays.items():
            m = np.zeros(a.shape, dtype=bool)
            if name.startswith("W") and not name.startswith("Ws"):
                m[...] = True
            elif name.startswith("Ws") and poly:
                m[..., :2] = True
            out[name] = m
        return out

    def check_masks(self):
        for name, m in self.masks().items():
            if np.any(self.arrays[name][m] < 0):
                raise StructuralError(f"negative entry in constrained weights {name}")

    def project(self):
        """Clamp constrained entries at zero in place."""
        for name, m in self.masks().items():
            a = self.arrays[name]
            a[m] = np.maximum(a[m], 0.0)

    def parameter_count(self, include_output=True):
        n = sum(a.size for k, a in self.arrays.items() if include_output or k not in ("Wout", "Wsout"))
        return n

    def flat(self):
        return np.concatenate([self.arrays[k].ravel() for k in self.names])

    def copy(self):
        return IcnnWeights(self.config, {k: v.copy() for k, v in self.arrays.items()})

    @classmethod
    def zeros(cls, config):
        H = config.hidden
        shapes = {"Ws0": (H, 3), "b0": (H,), "Wout": (H,), "Wsout": (3,)}
        for l in range(1, config.layers):
            shapes[f"W{l}"] = (H, H)
            shapes[f"Ws{l}"] = (H, 3)
        return cls(config, {k: np.zeros(s) for k, s in shapes.items()})

    @classmethod
    def init(cls, config, rng):
        """Random weights: |N(0, 1/H)| on constrained entries, N(0, 1/H) elsewhere."""
        w = cls.zeros(config)
        masks = w.masks()
        scale = 1.0 / np.sqrt(config.hidden)
        for k, a in w.arrays.items():
            a[...] = rng.normal(0.0, scale, a.shape)
            a[masks[k]] = np.abs(a[masks[k]])
        return w

    def to_dict(self):
        return {k: v.tolist() for k, v in self.arrays.items()}


def icnn_forward(arrays, i1, i2, j, layers):
    """Network output for invariant inputs of any supported numeric type.

    ``arrays`` may hold numpy arrays or tape variables; ``i1, i2, j`` are
    usually seeded :class:`~pancal.diffcore.Dual2` numbers with a common
    batch shape.
    """
    def col(x):
        return x[..., None] if isinstance(x, dc.Dual2) else np.asarray(x)[..., None]

    x1, x2, x3 = col(i1), col(i2), col(j)
    Ws = arrays["Ws0"]
    z = dc.softplus(x1 * Ws[:, 0] + x2 * Ws[:, 1] + x3 * Ws[:, 2] + arrays["b0"])
    for l in range(1, layers):
        Ws = arrays[f"Ws{l}"]
        z = dc.softplus(z @ arrays[f"W{l}"].T + x1 * Ws[:, 0] + x2 * Ws[:, 1] + x3 * Ws[:, 2])
    ws = arrays["Wsout"]
    return z @ arrays["Wout"] + i1 * ws[0] + i2 * ws[1] + j * ws[2]


def icnn_energy(arrays, i1, i2, j, layers):
    """Normalized network energy; ``arrays`` may hold tape variables."""
    ref = icnn_forward(arrays, *dc.Dual2.seed(3.0, 3.0, 1.0), layers)
    n = 2.0 * ref.g[0] + 4.0 * ref.g[1] + ref.g[2]
    return icnn_forward(arrays, i1, i2, j, layers) - ref.v - n * (j - 1.0)


class IcnnPotential(PotentialModel):
    """A dense network viewed as a :class:`PotentialModel`."""

    def __init__(self, weights):
        self.weights = weights
        self.name = f"icnn_{weights.config.variant}"
        self.theta = weights.flat()

    def theta_arg(self):
        return self.weights.arrays

    def eval(self, i1, i2, j):
        return self.energy(*dc.Dual2.seed(i1, i2, j), self.weights.arrays)

    def energy(self, i1, i2, j, theta):
        if not isinstance(theta, dict):
            theta = self.weights.arrays
        return icnn_forward(theta, i1, i2, j, self.weights.config.layers)

    def with_params(self, theta):
        raise NotImplementedError("dense networks are updated through their weights")


def icnn_raw_eval(w, t):
    """Un-normalized network energy at the triplet ``t`` with derivatives."""
    w.check_masks()
    return IcnnPotential(w).eval(*(float(x) for x in t))


# ---------------------------------------------------------------------------
# sparse closed forms

def _sp2(x):
    # log(exp(2x) + 1), the activation pattern of the recovered closed forms
    return dc.softplus(2.0 * x)


class SparsePolyconvex(PotentialModel):
    """13-parameter closed form recovered from the polyconvex network."""

    name = "sparse_polyconvex"
    variant = "polyconvex"
    param_names = tuple(f"theta{i}" for i in range(1, 14))
    # J-channel weights (theta3, theta6) and the bias theta9 are free
    nonneg = np.array([i not in (2, 5, 8) for i in range(13)])

    def __init__(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (13,):
            raise ValueError("polyconvex closed form takes 13 parameters")
        super().__init__(theta)

    def energy(self, i1, i2, j, t):
        t1, t2, t3, t4, t5, t6, t7, t8, t9, t10, t11, t12, t13 = t
        return (t11 * _sp2(t12 * _sp2(i2 * t13))
                + t1 * _sp2(t2 * _sp2(j * t3))
                + t4 * _sp2(t5 * _sp2(j * t6))
                + t7 * _sp2(t8 * _sp2(i1 * t10 + t9)))


class SparseRelaxed(PotentialModel):
    """9-parameter closed form shared by the relaxed and unconstrained networks."""

    name = "sparse_relaxed"
    param_names = tuple(f"theta{i}" for i in range(1, 10))
    # output weights theta1, theta5 and hidden weights theta3, theta6, theta8
    nonneg = np.array([i in (0, 2, 4, 5, 7) for i in range(9)])

    def __init__(self, theta, variant="relaxed"):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (9,):
            raise ValueError("relaxed/unconstrained closed form takes 9 parameters")
        if variant not in ("relaxed", "unconstrained"):
            raise ValueError(f"variant {variant!r} does not use the 9-parameter form")
        super().__init__(theta)
        self.variant = variant
        self.name = f"sparse_{variant}"

    def energy(self, i1, i2, j, t):
        t1, t2, t3, t4, t5, t6, t7, t8, t9 = t
        return (t1 * _sp2(i1 * t2 + t3 * _sp2(i2 * t4))
                + t5 * _sp2(t6 * _sp2(i2 * t7) + t8 * _sp2(j * t9)))


def sparse_model(variant, theta):
    """Raw (un-normalized) closed-form potential for ``variant``."""
    if variant == "polyconvex":
        return SparsePolyconvex(theta)
    return SparseRelaxed(theta, variant)


def sparse_eval(variant, theta, t):
    return sparse_model(variant, theta).eval(*(float(x) for x in t))


_SET_IDS = {1: "polyconvex", 2: "relaxed", 3: "unconstrained"}


def load_sparse_set(which, source="pretrained"):
    """Shipped parameter set as a raw closed-form model.

    ``which`` is a set number (1, 2, 3) or a variant name; ``source`` is
    ``pretrained``, ``calibrated_neo_hookean`` or
    ``calibrated_ogden_generalized``.
    """
    variant = _SET_IDS.get(which, which)
    doc = json.loads(resources.files("pancal.data").joinpath(f"{source}.json").read_text())
    return sparse_model(variant, doc["sets"][variant])


# ---------------------------------------------------------------------------
# extraction of a pruned dense network

class SymbolicPotential(PotentialModel):
    """Potential given by a sympy expression in I1, I2, J and named parameters."""

    def __init__(self, expression, param_names, theta, name="symbolic"):
        super().__init__(theta)
        self.expression = str(expression)
        self.param_names = tuple(param_names)
        self.name = name
        syms = sympy.symbols(("I1", "I2", "J") + self.param_names)
        expr = sympy.sympify(self.expression, locals={s.name: s for s in syms})
        self._fn = sympy.lambdify(syms, expr, modules=[{"exp": dc.exp, "log": dc.log}, "math"])

    def energy(self, i1, i2, j, theta):
        out = self._fn(i1, i2, j, *theta)
        if not isinstance(out, dc.Dual2):
            # expression free of the invariants
            out = dc.Dual2(np.zeros(np.shape(dc.value_of(i1))) + out)
        return out

    def to_dict(self):
        return {"model": "symbolic", "expression": self.expression,
                "param_names": list(self.param_names), "params": self.theta.tolist()}


@dataclass
class SparseForm:
    expression: str
    param_names: list
    params: np.ndarray
    n_initial: int
    constant: bool
    pruned: IcnnWeights = field(repr=False)

    @property
    def n_surviving(self):
        return len(self.params)

    def model(self):
        return SymbolicPotential(self.expression, self.param_names, self.params)

    def to_dict(self):
        return {"expression": self.expression, "param_names": list(self.param_names),
                "params": self.params.tolist(), "n_initial": self.n_initial,
                "n_surviving": self.n_surviving, "constant": self.constant}


def extract_sparse_form(weights, gates=None, threshold=0.05):
    """Prune zero-gated weights and write the survivor as an expression.

    ``gates`` is anything with ``deterministic(threshold)`` returning a dict
    of gate arrays (see :class:`pancal.l0.GateParams`); when omitted the
    weights are used as they are.  Units that cannot reach the output are
    dropped, and each remaining non-zero weight becomes one parameter.
    """
    cfg = weights.config
    eff = {k: v.copy() for k, v in weights.arrays.items()}
    if gates is not None:
        z = gates.deterministic(threshold)
        for k in eff:
            eff[k] = eff[k] * z[k]
    L = cfg.layers

    # backward liveness: a unit lives if a non-zero path reaches the output
    alive = [None] * L
    alive[L - 1] = eff["Wout"] != 0
    for l in range(L - 1, 0, -1):
        alive[l - 1] = np.any(eff[f"W{l}"][alive[l]] != 0, axis=0)
    for l in range(L):
        dead = ~alive[l]
        eff[f"Ws{l}"][dead] = 0.0
        if l == 0:
            eff["b0"][dead] = 0.0
        else:
            eff[f"W{l}"][dead] = 0.0
            eff[f"W{l}"][:, ~alive[l - 1]] = 0.0

    X = sympy.symbols("I1 I2 J")
    names, values = [], []

    def par(v):
        s = sympy.Symbol(f"theta{len(names) + 1}")
        names.append(s.name)
        values.append(float(v))
        return s

    def skip(Wrow):
        return sum((par(Wrow[c]) * X[c] for c in range(3) if Wrow[c] != 0), sympy.Integer(0))

    z = {}
    for h in np.flatnonzero(alive[0]):
        a = skip(eff["Ws0"][h])
        if eff["b0"][h] != 0:
            a = a + par(eff["b0"][h])
        z[h] = sympy.log(sympy.exp(a) + 1)
    for l in range(1, L):
        znew = {}
        for h in np.flatnonzero(alive[l]):
            a = skip(eff[f"Ws{l}"][h])
            for k in np.flatnonzero(eff[f"W{l}"][h]):
                a = a + par(eff[f"W{l}"][h, k]) * z[k]
            znew[h] = sympy.log(sympy.exp(a) + 1)
        z = znew
    y = sympy.Integer(0)
    for h in np.flatnonzero(alive[L - 1]):
        y = y + par(eff["Wout"][h]) * z[h]
    y = y + skip(eff["Wsout"])

    # additive constants are removed by normalization
    _, y = sympy.Add(y, 0).as_independent(*X, as_Add=True)
    used = sorted((s for s in y.free_symbols if s.name.startswith("theta")),
                  key=lambda s: int(s.name[5:]))
    rename = {s: sympy.Symbol(f"theta{i + 1}") for i, s in enumerate(used)}
    values = [values[int(s.name[5:]) - 1] for s in used]
    names = [rename[s].name for s in used]
    y = y.xreplace(rename)

    constant = not (y.free_symbols & set(X))
    n_initial = weights.parameter_count()
    return SparseForm(str(y), names, np.array(values), n_initial, constant,
                      IcnnWeights(cfg, eff))


# ---------------------------------------------------------------------------
# model files

def model_to_dict(model, variant=None, gates=None, extra=None):
    """Serialize a potential to the model-file layout.

    ``{variant, form, params, gates?, normalization: {phi0, n}}``.
    """
    base = model.base if isinstance(model, Normalized) else model
    phi0, n = Normalized(base).shift()
    if isinstance(base, IcnnPotential):
        doc = {"variant": base.weights.config.variant, "form": "dense",
               "config": {"layers": base.weights.config.layers,
                          "hidden": base.weights.config.hidden},
               "params": base.weights.to_dict()}
        if gates is not None:
            doc["gates"] = {k: v.tolist() for k, v in gates.log_alpha.items()}
    elif isinstance(base, (SparsePolyconvex, SparseRelaxed)):
        doc = {"variant": base.variant, "form": "sparse", "params": base.theta.tolist()}
    elif isinstance(base, SymbolicPotential):
        doc = {"variant": variant, "form": "expression", "expression": base.expression,
               "param_names": list(base.param_names), "params": base.theta.tolist()}
    else:
        doc = {"variant": variant, "form": "analytic", "model": base.name,
               "params": {k: float(v) for k, v in zip(base.param_names, base.theta)}}
    doc["normalization"] = {"phi0": float(phi0), "n": float(n)}
    if extra:
        doc.update(extra)
    return doc


def model_from_dict(doc):
    """Inverse of :func:`model_to_dict`; returns the raw (un-normalized) model."""
    form = doc["form"]
    if form == "sparse":
        return sparse_model(doc["variant"], doc["params"])
    if form == "dense":
        cfg = IcnnConfig(layers=doc["config"]["layers"], hidden=doc["config"]["hidden"],
                         variant=doc["variant"])
        return IcnnPotential(IcnnWeights(cfg, doc["params"]))
    if form == "expression":
        return SymbolicPotential(doc["expression"], doc["param_names"], doc["params"])
    if form == "analytic":
        from .materials import MATERIALS
        return MATERIALS[doc["model"]](**doc["params"])
    raise ValueError(f"unknown model form {form!r}")
