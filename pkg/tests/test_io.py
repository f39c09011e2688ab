import json

import numpy as np
import pytest

from pancal import io as pio
from pancal.materials import GentGent, load_material
from pancal.pann import IcnnConfig, IcnnPotential, IcnnWeights, SymbolicPotential
from pancal.sampling import label_with


def test_labeled_round_trip(tmp_path):
    data = label_with(load_material("gent_gent"), [(3.2, 3.3, 1.05), (3.0, 3.0, 1.0)])
    pio.write_labeled_csv(tmp_path / "d.csv", data)
    back = pio.read_labeled_csv(tmp_path / "d.csv")
    for a, b in zip(data, back):
        assert tuple(a.t) == tuple(b.t) and a.s_diag == b.s_diag
        np.testing.assert_allclose(b.c_diag, a.c_diag, rtol=1e-15)


def test_triplets_round_trip(tmp_path, rng):
    T = rng.uniform(1, 4, (5, 3))
    pio.write_triplets_csv(tmp_path / "t.csv", T)
    np.testing.assert_array_equal(pio.read_triplets_csv(tmp_path / "t.csv"), T)


@pytest.mark.parametrize("name,n", [("set1", 13), ("relaxed", 9), ("set3@pretrained", 9)])
def test_load_named_sets(name, n):
    assert len(pio.load_model(name).theta) == n


def test_load_material_and_file(tmp_path):
    m = pio.load_model("gent_gent")
    assert isinstance(m, GentGent)
    pio.save_model(tmp_path / "m.json", m)
    assert pio.load_model(str(tmp_path / "m.json")).theta.tolist() == m.theta.tolist()


def test_dense_file_prefers_sparse(tmp_path, rng):
    from pancal.l0 import GateParams
    from pancal.pann import extract_sparse_form, model_to_dict

    w = IcnnWeights.init(IcnnConfig(1, 3, "polyconvex"), rng)
    g = GateParams.init(w)
    doc = model_to_dict(IcnnPotential(w))
    doc["params"] = w.to_dict()
    doc["gates"] = {k: v.tolist() for k, v in g.log_alpha.items()}
    doc["sparse_form"] = extract_sparse_form(w, g, 0.05).to_dict()
    (tmp_path / "n.json").write_text(json.dumps(doc))
    a = pio.load_model(str(tmp_path / "n.json"))
    b = pio.load_model(str(tmp_path / "n.json"), prefer_sparse=False)
    assert isinstance(a, SymbolicPotential) and isinstance(b, IcnnPotential)
    p = (3.3, 3.4, 1.1)
    assert a.eval(*p).d(0) == pytest.approx(b.eval(*p).d(0), rel=1e-10)


def test_config_and_hash(tmp_path):
    (tmp_path / "c.toml").write_text("seed = 2\n[pretrain]\nepochs = 10\n")
    cfg = pio.load_config(tmp_path / "c.toml")
    assert cfg == {"seed": 2, "pretrain": {"epochs": 10}}
    assert pio.config_hash(cfg) == pio.config_hash({"pretrain": {"epochs": 10}, "seed": 2})
    assert pio.load_config(None) == {}
