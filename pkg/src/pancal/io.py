"""File formats: labeled data and triplet CSVs, model JSON, manifests, config."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
from importlib import metadata

import numpy as np

from . import __version__
from .kinematics import InvariantTriplet
from .l0 import LabeledSample
from .materials import MATERIALS, PotentialModel, load_material
from .pann import (IcnnConfig, IcnnPotential, IcnnWeights, SymbolicPotential, load_sparse_set,
                   model_from_dict, model_to_dict)

__all__ = [
    "write_labeled_csv",
    "read_labeled_csv",
    "write_triplets_csv",
    "read_triplets_csv",
    "save_model",
    "load_model",
    "load_config",
    "config_hash",
    "write_manifest",
]

_F_COLS = [f"F{i}{j}" for i in range(1, 4) for j in range(1, 4)]


def write_labeled_csv(path, samples):
    """Columns ``I1,I2,J,S11,S22,S33,F11..F33``; ``F`` is the diagonal stretch tensor."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["I1", "I2", "J", "S11", "S22", "S33"] + _F_COLS)
        for s in samples:
            F = np.diag(np.sqrt(s.c_diag)) if s.c_diag is not None else None
            w.writerow([repr(float(x)) for x in (*s.t, *s.s_diag)]
                       + ([repr(float(x)) for x in F.ravel()] if F is not None else []))


def read_labeled_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = InvariantTriplet(float(row["I1"]), float(row["I2"]), float(row["J"]))
            s = (float(row["S11"]), float(row["S22"]), float(row["S33"]))
            c = None
            if row.get("F11") not in (None, ""):
                F = np.array([float(row[k]) for k in _F_COLS]).reshape(3, 3)
                c = tuple(np.diag(F.T @ F))
            out.append(LabeledSample(t, s, c))
    return out


def write_triplets_csv(path, T, F=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["I1", "I2", "J"] + (_F_COLS if F is not None else []))
        for k, t in enumerate(np.asarray(T)):
            w.writerow([repr(float(x)) for x in t]
                       + ([repr(float(x)) for x in np.asarray(F[k]).ravel()] if F is not None else []))


def read_triplets_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["I1"]), float(r["I2"]), float(r["J"])] for r in rows]).reshape(-1, 3)


def save_model(path, model, **kw):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, **kw), fh, indent=1)


_SETS = {"set1": 1, "set2": 2, "set3": 3, "polyconvex": 1, "relaxed": 2, "unconstrained": 3}


def load_model(ref, prefer_sparse=True):
    """Raw (un-normalized) potential from a name or a model file.

    ``ref`` is a material name, ``set1``/``set2``/``set3`` (or the variant
    name), optionally suffixed ``@calibrated_neo_hookean`` etc., or a path to
    a model JSON file.  For a dense network file with an extracted sparse
    form, the sparse expression is returned when ``prefer_sparse``.
    """
    if isinstance(ref, PotentialModel):
        return ref
    name, _, source = str(ref).partition("@")
    if name in MATERIALS:
        return load_material(name)
    if name in _SETS:
        return load_sparse_set(_SETS[name], source or "pretrained")
    with open(ref) as fh:
        doc = json.load(fh)
    if doc.get("form") == "dense":
        sf = doc.get("sparse_form")
        if prefer_sparse and sf is not None:
            return SymbolicPotential(sf["expression"], sf["param_names"], sf["params"])
        cfg = IcnnConfig(layers=doc["config"]["layers"], hidden=doc["config"]["hidden"],
                         variant=doc["variant"])
        w = IcnnWeights(cfg, doc["params"])
        if "gates" in doc:
            from .l0 import GateParams, ROUND_THRESHOLD

            z = GateParams({k: np.asarray(v) for k, v in doc["gates"].items()}).deterministic(ROUND_THRESHOLD)
            w = IcnnWeights(cfg, {k: a * z[k] for k, a in w.arrays.items()})
        return IcnnPotential(w)
    return model_from_dict(doc)


def load_config(path):
    if path is None:
        return {}
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _versions():
    out = {"python": platform.python_version(), "pancal": __version__}
    for pkg in ("numpy", "scipy", "sympy"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_manifest(path, command, cfg, seed, outputs=(), extra=None):
    doc = {"command": command, "argv": sys.argv[1:], "config": cfg,
           "config_hash": config_hash(cfg), "seed": seed, "versions": _versions(),
           "outputs": list(outputs)}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, default=str)
    return doc
