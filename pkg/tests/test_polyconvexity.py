import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pancal.diffcore import Tape, tape_gradient
from pancal.materials import PotentialModel, load_material, normalize
from pancal.pann import load_sparse_set, sparse_model
from pancal.polyconvexity import (indicator, indicator_batch, indicator_penalty, indicator_terms,
                                  penalty_from_terms)


class Poly(PotentialModel):
    """``a I1^2 + b I2 + c J^2 + d J``."""

    def energy(self, i1, i2, j, theta):
        a, b, c, d = theta
        return a * i1 * i1 + b * i2 + c * j * j + d * j


inv = st.floats(0.2, 20.0)


class TestIndicatorValues:
    def test_square_of_i1(self):
        v = indicator(Poly([1, 0, 0, 0]), (3.0, 3.0, 1.0))
        # 2 + 1.5/3 * 2*3
        assert v.g1 == pytest.approx(5.0)
        assert v.g2 == 0.0 and v.gJ == 0.0
        assert v.satisfied()

    @given(w=inv)
    def test_negative_linear_i2(self, w):
        v = indicator(Poly([0, -1, 0, 0]), (3.0, w, 1.0))
        assert v.g2 == pytest.approx(-1.5 / w)
        assert not v.satisfied()

    @given(i1=inv, i2=inv, j=st.floats(0.2, 5.0), s=st.floats(-3, 3))
    @settings(max_examples=50)
    def test_linear_in_potential(self, i1, i2, j, s):
        a, b = Poly([0.3, -0.2, 0.7, 0.1]), Poly([-0.5, 0.4, 0.2, 1.0])
        both = Poly(a.theta + s * b.theta)
        va, vb, vs = (indicator(m, (i1, i2, j)) for m in (a, b, both))
        for k in ("g1", "g2", "gJ"):
            assert getattr(vs, k) == pytest.approx(getattr(va, k) + s * getattr(vb, k), rel=1e-9, abs=1e-9)

    @given(i1=inv, i2=inv, j=st.floats(0.2, 5.0))
    @settings(max_examples=50)
    def test_invariant_under_normalization(self, i1, i2, j):
        m = load_sparse_set(2)
        a, b = indicator(m, (i1, i2, j)), indicator(normalize(m), (i1, i2, j))
        assert a.g1 == pytest.approx(b.g1, rel=1e-10, abs=1e-12)
        assert a.g2 == pytest.approx(b.g2, rel=1e-10, abs=1e-12)
        assert a.gJ == pytest.approx(b.gJ, rel=1e-10, abs=1e-12)

    def test_second_derivative_vs_fd(self):
        m = load_material("gent_gent")
        t = np.array([4.0, 5.0, 1.2])
        h = 1e-4
        f = lambda *p: float(m.eval(*p).v)
        d11 = (f(t[0] + h, *t[1:]) - 2 * f(*t) + f(t[0] - h, *t[1:])) / h ** 2
        d1 = (f(t[0] + h, *t[1:]) - f(t[0] - h, *t[1:])) / (2 * h)
        assert indicator(m, t).g1 == pytest.approx(d11 + 1.5 / t[0] * d1, rel=1e-5)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            indicator_batch(Poly([1, 0, 0, 0]), [0.0], [1.0], [1.0])


class TestPenalty:
    def test_zero_for_satisfied(self):
        pts = [(3.0, 3.0, 1.0), (4.0, 5.0, 1.1)]
        assert indicator_penalty(Poly([1, 1, 1, 0]), pts) == 0.0

    def test_value(self):
        pts = [(3.0, 2.0, 1.0), (3.0, 4.0, 1.0)]
        expected = (1.5 / 2) ** 2 + (1.5 / 4) ** 2
        assert indicator_penalty(Poly([0, -1, 0, 0]), pts, weight=2.0) == pytest.approx(2 * expected)

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            indicator_penalty(Poly([1, 0, 0, 0]), [(3, 3, 1)], weight=-1.0)

    def test_tape_gradient_vs_fd(self):
        rng = np.random.default_rng(4)
        theta = rng.normal(size=9)
        P = rng.uniform(1.0, 6.0, (40, 3))
        tape = Tape()
        leaves = [tape.leaf(v) for v in theta]
        model = sparse_model("relaxed", theta)
        d = model.eval_with(P[:, 0], P[:, 1], P[:, 2], leaves)
        g1, g2, _ = indicator_terms(d, P[:, 0], P[:, 1])
        loss = penalty_from_terms(g1, g2)
        grads = [float(g) for g in tape_gradient(loss, leaves)]
        base = indicator_penalty(model, P)
        assert base > 0
        assert float(loss.value) == pytest.approx(base, rel=1e-12)
        for k in range(9):
            e = np.zeros(9)
            e[k] = 1e-6
            fd = (indicator_penalty(model.with_params(theta + e), P)
                  - indicator_penalty(model.with_params(theta - e), P)) / 2e-6
            assert grads[k] == pytest.approx(fd, rel=1e-5, abs=1e-8)
