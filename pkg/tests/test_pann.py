import json
import math

import numpy as np
import pytest

from pancal import pann
from pancal.materials import second_pk_stress
from pancal.pann import (IcnnConfig, IcnnPotential, IcnnWeights, StructuralError, extract_sparse_form,
                         icnn_raw_eval, load_sparse_set, model_from_dict, model_to_dict, normalize,
                         sparse_model)
from pancal.polyconvexity import indicator_batch

# reference parameter sets at full precision
SET1 = ["0.998645544052124", "5.22694253921509", "-0.695928037166595", "0.149173066020012",
        "1.57681846618652", "-0.584444403648376", "0.0798970237374306", "1.61656022071838",
        "-3.23169875144958", "1.27855789661407", "0.0287286546081305", "0.0713559985160828",
        "0.0418042466044426"]
SET2 = ["0.905308246612549", "0.506476998329163", "1.67390620708466", "-0.210611954331398",
        "1.42899298667908", "1.26648092269897", "-0.772105455398560", "3.65706539154053",
        "-0.521339654922485"]
SET3 = ["0.782256841659546", "0.694582641124725", "3.12386536598206", "-0.192448511719704",
        "1.51982772350311", "1.28323090076447", "-0.803252279758453", "2.79724001884460",
        "-0.574892044067383"]


@pytest.mark.parametrize("k,expected", [(1, SET1), (2, SET2), (3, SET3)])
def test_fixture_bit_for_bit(k, expected):
    assert load_sparse_set(k).theta.tolist() == [float(x) for x in expected]


def _sp2(x):
    return math.log(math.exp(2 * x) + 1)


def relaxed_oracle(t, i1, i2, j):
    t1, t2, t3, t4, t5, t6, t7, t8, t9 = t
    return t1 * _sp2(i1 * t2 + t3 * _sp2(i2 * t4)) + t5 * _sp2(t6 * _sp2(i2 * t7) + t8 * _sp2(j * t9))


def test_set2_matches_scalar_oracle():
    theta = [float(x) for x in SET2]
    d = load_sparse_set(2).eval(6.0, 9.0, 2.0)
    assert d.v == pytest.approx(relaxed_oracle(theta, 6.0, 9.0, 2.0), rel=1e-14)
    h = 1e-6
    assert d.g[1] == pytest.approx((relaxed_oracle(theta, 6, 9 + h, 2) - relaxed_oracle(theta, 6, 9 - h, 2)) / (2 * h),
                                   rel=1e-7)


def test_relaxed_and_unconstrained_share_form(rng):
    theta = rng.normal(size=9)
    p = rng.uniform(1.0, 4.0, (3, 5))
    a = sparse_model("relaxed", theta).eval(*p)
    b = sparse_model("unconstrained", theta).eval(*p)
    np.testing.assert_array_equal(a.v, b.v)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_normalized_sets_are_stress_free(k):
    m = normalize(load_sparse_set(k))
    assert m.eval(3.0, 3.0, 1.0).v == pytest.approx(0.0, abs=1e-14)
    assert np.linalg.norm(second_pk_stress(m, [1.0, 1.0, 1.0])) < 1e-8


def test_wrong_parameter_count():
    with pytest.raises(ValueError):
        sparse_model("polyconvex", np.ones(9))


class TestIcnn:
    def test_parameter_count(self):
        w = IcnnWeights.zeros(IcnnConfig())
        assert w.parameter_count(include_output=False) == 41400
        assert w.parameter_count() == 41603

    def test_zero_weights(self):
        w = IcnnWeights.zeros(IcnnConfig(layers=2, hidden=4))
        d = icnn_raw_eval(w, (3.0, 3.0, 1.0))
        assert d.v == 0.0

    def test_single_unit_is_softplus(self):
        w = IcnnWeights.zeros(IcnnConfig(layers=1, hidden=1))
        w.arrays["Ws0"][0, 0] = 1.0
        w.arrays["Wout"][0] = 1.0
        d = icnn_raw_eval(w, (2.5, 3.0, 1.0))
        assert d.v == pytest.approx(math.log1p(math.exp(2.5)))
        assert d.g[0] == pytest.approx(1 / (1 + math.exp(-2.5)))

    def test_mask_violation(self):
        w = IcnnWeights.zeros(IcnnConfig(layers=2, hidden=3))
        w.arrays["W1"][0, 0] = -0.1
        with pytest.raises(StructuralError):
            icnn_raw_eval(w, (3.0, 3.0, 1.0))

    def test_masks_per_variant(self):
        for variant, skip_nonneg in (("polyconvex", True), ("relaxed", False), ("unconstrained", False)):
            m = IcnnWeights.zeros(IcnnConfig(2, 3, variant)).masks()
            assert m["W1"].all() and m["Wout"].all()
            assert m["Ws0"][:, :2].all() == skip_nonneg
            assert not m["Ws0"][:, 2].any() and not m["b0"].any()

    @pytest.mark.parametrize("variant", ["polyconvex", "relaxed", "unconstrained"])
    def test_convexity_spot_check(self, variant, rng):
        w = IcnnWeights.init(IcnnConfig(2, 16, variant), rng)
        net = IcnnPotential(w)
        a = rng.uniform(0.5, 6.0, (200, 3))
        b = rng.uniform(0.5, 6.0, (200, 3))
        fa, fb = net.eval(*a.T).v, net.eval(*b.T).v
        for lam in (0.25, 0.5, 0.75):
            mid = net.eval(*(lam * a + (1 - lam) * b).T).v
            assert np.all(mid <= lam * fa + (1 - lam) * fb + 1e-9)

    def test_polyconvex_satisfies_indicator(self, rng):
        for s in range(5):
            w = IcnnWeights.init(IcnnConfig(2, 16, "polyconvex"), np.random.default_rng(s))
            p = rng.uniform(1.0, 6.0, (3, 100))
            g1, g2, gj = indicator_batch(normalize(IcnnPotential(w)), *p)
            assert g1.min() >= -1e-9 and g2.min() >= -1e-9 and gj.min() >= -1e-9

    def test_derivatives_vs_fd(self, rng):
        w = IcnnWeights.init(IcnnConfig(2, 8, "relaxed"), rng)
        net = IcnnPotential(w)
        p = np.array([3.3, 3.6, 1.1])
        d = net.eval(*p)
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1e-6
            assert d.g[k] == pytest.approx((net.eval(*(p + e)).v - net.eval(*(p - e)).v) / 2e-6, rel=1e-6)


class _AllGates(dict):
    pass


def _gates(weights, value):
    g = _AllGates({k: np.full(a.shape, value) for k, a in weights.arrays.items()})
    g.deterministic = lambda threshold: g
    return g


class TestExtraction:
    def test_all_open_keeps_count(self, rng):
        w = IcnnWeights.init(IcnnConfig(2, 3, "relaxed"), rng)
        sf = extract_sparse_form(w, _gates(w, 1.0))
        assert sf.n_surviving == sf.n_initial
        assert not sf.constant

    def test_all_closed_is_constant(self, rng):
        w = IcnnWeights.init(IcnnConfig(2, 3, "relaxed"), rng)
        sf = extract_sparse_form(w, _gates(w, 0.0))
        assert sf.constant and sf.n_surviving == 0

    def test_expression_reproduces_network(self, rng):
        w = IcnnWeights.init(IcnnConfig(2, 4, "polyconvex"), rng)
        w.arrays["W1"][:, 2] = 0.0
        w.arrays["Ws1"][0] = 0.0
        sf = extract_sparse_form(w)
        p = rng.uniform(1.0, 4.0, (3, 6))
        a = normalize(IcnnPotential(w)).eval(*p)
        b = normalize(sf.model()).eval(*p)
        np.testing.assert_allclose(a.v, b.v, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(a.hess_array(), b.hess_array(), rtol=1e-8, atol=1e-10)
        assert sf.n_surviving < sf.n_initial


def test_model_json_round_trip(tmp_path):
    m = load_sparse_set(1)
    doc = model_to_dict(m)
    assert doc["form"] == "sparse" and doc["variant"] == "polyconvex"
    back = model_from_dict(json.loads(json.dumps(doc)))
    assert back.theta.tolist() == m.theta.tolist()
    assert doc["normalization"]["phi0"] == pytest.approx(float(m.eval(3.0, 3.0, 1.0).v))


def test_dense_json_round_trip(rng):
    w = IcnnWeights.init(IcnnConfig(2, 4, "relaxed"), rng)
    doc = json.loads(json.dumps(model_to_dict(IcnnPotential(w))))
    back = model_from_dict(doc)
    p = (3.2, 3.3, 1.05)
    assert back.eval(*p).v == pytest.approx(IcnnPotential(w).eval(*p).v, rel=1e-15)
