import numpy as np
import pytest

from pancal.adjoint import CalibrationProblem, calibrate, gradient, lbfgs, objective, write_history
from pancal.fem import LoadSchedule, plate, synth_dic
from pancal.materials import NeoHookean, normalize
from pancal.pann import load_sparse_set

SCHED = LoadSchedule(total=0.3, increments=3, record=(1, 3), height=2.0)


@pytest.fixture(scope="module")
def mesh():
    return plate(1.0, 2.0, 2, 3)


@pytest.fixture(scope="module")
def dic(mesh):
    return synth_dic(mesh, normalize(NeoHookean(1.0, 0.5)), SCHED, noise=0.0)


def _fd(p, theta, h=1e-6):
    out = []
    for k in range(len(theta)):
        e = np.zeros(len(theta))
        e[k] = h
        out.append((objective(p, theta + e)[0] - objective(p, theta - e)[0]) / (2 * h))
    return np.array(out)


class TestGradient:
    def test_neo_hookean_vs_fd(self, mesh, dic):
        p = CalibrationProblem(mesh, NeoHookean(0.7, 0.9), dic, alpha1=0.3, newton_tol=1e-13)
        th = np.array([0.8, 0.6])
        np.testing.assert_allclose(gradient(p, th), _fd(p, th), rtol=1e-6, atol=1e-10)

    def test_sparse_with_indicator_vs_fd(self, mesh, dic):
        m = load_sparse_set(2)
        p = CalibrationProblem(mesh, m, dic, alpha1="auto", indicator_weight=10.0, newton_tol=1e-13)
        th = m.theta + 0.05 * np.random.default_rng(0).normal(size=9)
        np.testing.assert_allclose(gradient(p, th), _fd(p, th), rtol=1e-5, atol=1e-9)

    def test_zero_at_truth(self, mesh, dic):
        p = CalibrationProblem(mesh, NeoHookean(1.0, 0.5), dic, alpha1=1.0, newton_tol=1e-13)
        ev = p.evaluate([1.0, 0.5])
        assert ev.disp < 1e-24 and ev.force < 1e-24
        assert np.linalg.norm(ev.grad) < 1e-8


class TestObjective:
    def test_breakdown_sums(self, mesh, dic):
        p = CalibrationProblem(mesh, load_sparse_set(3), dic, indicator_weight=1.0)
        total, parts = objective(p, p.theta0 * 1.1)
        assert total == pytest.approx(parts["disp"] + parts["force"] + parts["reg"] + parts["indicator"])

    def test_recomputed_from_fields(self, mesh, dic):
        from pancal.fem import reaction_force

        m = NeoHookean(0.7, 0.9)
        p = CalibrationProblem(mesh, m, dic, alpha1=2.0)
        ev = p.evaluate(m.theta, False)
        w = np.repeat(mesh.lumped_areas(), 2)
        disp = sum(0.5 * np.sum(w * (ev.states[s.increment] - s.u) ** 2) for s in dic.steps)
        force = sum(0.5 * (reaction_force(mesh, normalize(m), ev.states[s.increment]) - s.force) ** 2
                    for s in dic.steps)
        assert ev.disp == pytest.approx(disp, rel=1e-12)
        assert ev.force == pytest.approx(force, rel=1e-12)

    def test_alpha1_linear(self, mesh, dic):
        m = NeoHookean(0.7, 0.9)
        a = CalibrationProblem(mesh, m, dic, alpha1=1.0).evaluate(m.theta, False)
        b = CalibrationProblem(mesh, m, dic, alpha1=3.0).evaluate(m.theta, False)
        assert b.force_weighted == pytest.approx(3 * a.force_weighted)
        assert b.disp == a.disp

    def test_auto_alpha1_balances(self, mesh, dic):
        p = CalibrationProblem(mesh, NeoHookean(0.7, 0.9), dic)
        ev = p.evaluate(p.theta0, False)
        assert ev.force_weighted == pytest.approx(ev.disp)

    def test_regularization(self, mesh, dic):
        p = CalibrationProblem(mesh, NeoHookean(0.7, 0.9), dic, alpha1=1.0, alpha2=0.5)
        ev = p.evaluate([0.9, 0.9], False)
        assert ev.reg == pytest.approx(0.5 * 0.04)

    def test_rejects_dense(self, mesh, dic):
        class Big(NeoHookean):
            pass

        m = Big()
        m.theta = np.ones(14)
        with pytest.raises(ValueError):
            CalibrationProblem(mesh, m, dic)


class TestOptimizer:
    def test_lbfgs_rosenbrock(self):
        def f(x):
            v = (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
            g = np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])
            return v, g, None

        x, fx, _ = lbfgs(f, [-1.2, 1.0], max_iter=200, tol=1e-14)
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-4)

    def test_lbfgs_bounds(self):
        f = lambda x: (float(np.sum((x + 1) ** 2)), 2 * (x + 1), None)
        x, _, status = lbfgs(f, [2.0, 3.0], lower=[0.0, -np.inf])
        np.testing.assert_allclose(x, [0.0, -1.0], atol=1e-8)

    def test_inf_triggers_backtracking(self):
        def f(x):
            if x[0] > 1.5:
                return np.inf, None, None
            return float((x[0] - 1) ** 2), np.array([2 * (x[0] - 1)]), None

        x, _, _ = lbfgs(f, [-3.0])
        assert x[0] == pytest.approx(1.0, abs=1e-4)

    def test_start_at_truth(self, mesh, dic):
        p = CalibrationProblem(mesh, NeoHookean(1.0, 0.5), dic, alpha1=1.0)
        res = calibrate(p)
        assert res.status == "converged" and len(res.history) <= 3
        np.testing.assert_allclose(res.theta, [1.0, 0.5], atol=1e-8)

    def test_recovers_parameters(self, mesh, dic, tmp_path):
        p = CalibrationProblem(mesh, NeoHookean(0.7, 0.9), dic, alpha2=0.0)
        res = calibrate(p)
        np.testing.assert_allclose(res.theta, [1.0, 0.5], rtol=1e-3)
        totals = [r["total"] for r in res.history]
        assert all(b <= a + 1e-15 for a, b in zip(totals, totals[1:]))
        write_history(tmp_path / "h.csv", res.history)
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0].endswith("theta1,theta2") and len(lines) == len(res.history) + 1

    def test_projection_keeps_mask(self, mesh, dic):
        m = load_sparse_set(1)
        p = CalibrationProblem(mesh, m, dic, max_iter=5)
        assert p.nonneg.sum() == 10
        res = calibrate(p)
        assert np.all(res.theta[p.nonneg] >= 0)
        q = CalibrationProblem(mesh, load_sparse_set(2), dic)
        assert not q.nonneg.any()
