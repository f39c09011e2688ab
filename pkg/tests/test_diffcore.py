import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pancal import diffcore as dc
from pancal.diffcore import DomainError, Dual1, Dual2, Tape, TapeError, tape_gradient


def f_mixed(x, y, z):
    return dc.log(x * y + 1.0) * dc.sqrt(z) + dc.softplus(x - 2.0 * y) / z + (x ** 2.5) * dc.exp(-z)


def fd_grad_hess(f, p, h=1e-4):
    p = np.asarray(p, float)
    g = np.zeros(3)
    H = np.zeros((3, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g[i] = (f(*(p + e)) - f(*(p - e))) / (2 * h)
        for j in range(3):
            e2 = np.zeros(3)
            e2[j] = h
            H[i, j] = (f(*(p + e + e2)) - f(*(p + e - e2)) - f(*(p - e + e2)) + f(*(p - e - e2))) / (4 * h * h)
    return g, H


class TestDual2:
    def test_product_exact(self):
        x, y, z = Dual2.seed(2.0, 3.0, 1.0)
        d = x * y * dc.exp(z)
        e = np.e
        assert d.v == pytest.approx(6 * e)
        np.testing.assert_allclose(d.grad_array(), [3 * e, 2 * e, 6 * e])
        np.testing.assert_allclose(d.hess_array(), [[0, e, 3 * e], [e, 0, 2 * e], [3 * e, 2 * e, 6 * e]])

    def test_constant_has_zero_derivatives(self):
        d = Dual2(4.0)
        assert np.all(d.grad_array() == 0)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.5, 3.0), st.floats(0.5, 3.0), st.floats(0.5, 3.0))
    def test_gradient_and_hessian_vs_fd(self, a, b, c):
        d = f_mixed(*Dual2.seed(a, b, c))
        g, H = fd_grad_hess(lambda *p: f_mixed(*p), (a, b, c))
        np.testing.assert_allclose(d.grad_array(), g, rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(d.hess_array(), H, rtol=1e-4, atol=1e-5)

    def test_vectorized_matches_scalar(self, rng):
        p = rng.uniform(0.5, 2.0, (3, 7))
        d = f_mixed(*Dual2.seed(*p))
        for k in range(7):
            s = f_mixed(*Dual2.seed(*p[:, k]))
            np.testing.assert_allclose(d.hess_array()[..., k], s.hess_array(), rtol=1e-12)

    def test_dual_exponent(self):
        x, y, _ = Dual2.seed(2.0, 0.5, 1.0)
        d = x ** y
        assert d.d(1) == pytest.approx(np.log(2.0) * 2.0 ** 0.5)

    def test_log_domain_error(self):
        x, _, _ = Dual2.seed(-1.0, 1.0, 1.0)
        with pytest.raises(DomainError):
            dc.log(x)

    def test_nested_dual1_parameter_derivative(self):
        def f(theta):
            x, y, z = Dual2.seed(1.5, 2.0, 0.8)
            return theta * dc.log(x * y) + dc.softplus(theta * z) * x

        t = Dual1(0.7, 1.0)
        d = f(t)
        h = 1e-6
        for i in range(3):
            fd = (f(0.7 + h).g[i] - f(0.7 - h).g[i]) / (2 * h)
            assert d.g[i].d == pytest.approx(fd, rel=1e-7)
        fd_h = (f(0.7 + h).dd(0, 2) - f(0.7 - h).dd(0, 2)) / (2 * h)
        assert d.dd(0, 2).d == pytest.approx(fd_h, rel=1e-6)


class TestElementary:
    def test_softplus_no_overflow(self):
        assert dc.softplus(1000.0) == pytest.approx(1000.0)
        assert dc.softplus(-1000.0) == pytest.approx(0.0)
        x, _, _ = Dual2.seed(800.0, 0.0, 0.0)
        d = dc.softplus(x)
        assert np.isfinite(d.v) and d.g[0] == pytest.approx(1.0)

    def test_sigmoid_symmetry(self):
        x = np.linspace(-30, 30, 13)
        np.testing.assert_allclose(dc.sigmoid(x) + dc.sigmoid(-x), 1.0)

    def test_relu_rejects_dual2(self):
        x, _, _ = Dual2.seed(1.0, 1.0, 1.0)
        with pytest.raises(TypeError):
            dc.relu(x)


def _tape_loss(params, X):
    W, b, v = params
    h = dc.softplus(X @ W.T + b)
    s = dc.sigmoid(h @ v) * dc.log(h.sum() + 1.0)
    return (s * s).mean() + (W ** 2).sum() * 0.1 + dc.exp(-1.0 * b[1:3]).sum() + (v / 3.0).sum()


class TestTape:
    def test_gradient_vs_fd(self, rng):
        X = rng.normal(size=(5, 3))
        vals = [rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=4)]
        tape = Tape()
        leaves = [tape.leaf(v) for v in vals]
        grads = tape_gradient(_tape_loss(leaves, X), leaves)
        for k, v in enumerate(vals):
            def f(x, k=k):
                p = list(vals)
                p[k] = x.reshape(v.shape)
                return float(_tape_loss(p, X))
            fd = np.array([(f(v.ravel() + e) - f(v.ravel() - e)) / 2e-6
                           for e in np.eye(v.size) * 1e-6])
            np.testing.assert_allclose(grads[k].ravel(), fd, rtol=1e-5, atol=1e-8)

    def test_single_use(self):
        tape = Tape()
        x = tape.leaf(2.0)
        y = x * x
        tape_gradient(y, [x])
        with pytest.raises(TapeError):
            tape_gradient(y, [x])
        with pytest.raises(TapeError):
            tape.leaf(1.0)

    def test_non_scalar_output_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(TapeError):
            tape.backward(x * 2.0)

    def test_unused_leaf_has_zero_gradient(self):
        tape = Tape()
        x, y = tape.leaf(1.0), tape.leaf(np.ones(2))
        gx, gy = tape_gradient(x * 3.0, [x, y])
        assert gx == pytest.approx(3.0)
        assert np.all(gy == 0)

    def test_var_inside_dual2(self):
        # stress-like quantity differentiated with respect to a weight
        tape = Tape()
        w = tape.leaf(0.8)
        x, y, z = Dual2.seed(3.2, 3.1, 1.05)
        d = dc.softplus(x * w) * w + dc.log(z) * (y * w)
        loss = d.g[0] * d.g[0] + d.dd(0, 0)
        (g,) = tape_gradient(loss, [w])

        def num(wv):
            e = dc.softplus(x * wv) * wv + dc.log(z) * (y * wv)
            return e.g[0] ** 2 + e.dd(0, 0)

        assert g == pytest.approx((num(0.8 + 1e-6) - num(0.8 - 1e-6)) / 2e-6, rel=1e-6)


def test_square_at_zero_has_finite_nested_derivatives():
    x = Dual2.seed(Dual1(0.0, 1.0), 1.0, 1.0)[0]
    y = x ** 2
    assert y.dd(0, 0).v == 2.0 and y.dd(0, 0).d == 0.0
    assert y.d(0).d == 2.0
    tape = Tape()
    a = tape.leaf(0.0)
    (g,) = tape_gradient((a ** 0) * 3.0 + a * a, [a])
    assert g == 0.0
