"""Reverse-mode tape: frozen examples, finite-difference oracles, mode rules."""

import numpy as np
import pytest

from entromc import tape as tp
from entromc.targets import TargetDistribution, make_icg


def std_gaussian(dim):
    return TargetDistribution(
        "std", dim,
        lambda x: 0.5 * np.sum(x * x, axis=1),
        lambda x: x,
        lambda x, v: v)


class TestForwardSemantics:
    def test_exp_single_node(self):
        t = tp.Tape()
        x = t.leaf("x", np.zeros((1, 1)))
        y = tp.exp(x)
        assert y.value[0, 0] == 1.0
        assert len(t.nodes) == 1

    def test_target_grad_forward_is_gradient(self):
        g = std_gaussian(2)
        t = tp.Tape()
        x = t.leaf("x", np.array([[2.0, -1.0]]))
        y = tp.target_grad(g, x)
        assert np.allclose(y.value, [[2.0, -1.0]])

    def test_taped_equals_untaped_bitwise(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(4)
        x = rng.standard_normal((5, 3))

        def program(xv, wv, bv):
            h = tp.elu(tp.affine(xv, wv, bv))
            h = tp.tanh(h) * 2.0 + 0.25
            return tp.mean_all(tp.sum_last(tp.exp(tp.minzero(h))))

        t = tp.Tape()
        taped = program(t.leaf("x", x), t.leaf("w", w), t.leaf("b", b))
        untaped = program(tp.Var(x), tp.Var(w), tp.Var(b))
        assert taped.value == untaped.value

    def test_forward_identical_across_modes(self):
        g = std_gaussian(3)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 3))
        values = []
        for mode in ("full", "stop-grad"):
            t = tp.Tape(mode=mode)
            xv = t.leaf("x", x)
            y = tp.mean_all(tp.sum_last(tp.target_grad(g, tp.exp(xv))))
            values.append(y.value)
        assert values[0] == values[1]

    def test_tracked_broadcast_rejected(self):
        t = tp.Tape()
        a = t.leaf("a", np.ones((1, 1)))
        with pytest.raises(ValueError, match="broadcast"):
            tp.mul(a, np.ones((1, 5)))


class TestBackwardRules:
    def test_product_rule(self):
        t = tp.Tape()
        c = t.leaf("c", np.array([[3.0]]))
        x = t.leaf("x", np.array([[-2.0]]))
        y = tp.mean_all(tp.mul(c, x))
        grads = t.backward(y)
        assert grads["c"][0, 0] == -2.0
        assert grads["x"][0, 0] == 3.0

    def test_target_grad_chain_through_hvp(self):
        # y = 1^T grad_U(theta * x0) for diagonal-Gaussian U has
        # dy/dtheta = sum_i x0_i / sigma_i^2 in full mode, 0 in stop-grad
        icg = make_icg(4, -1.0, 1.0)
        x0 = np.array([[0.5, -1.0, 2.0, 0.25]])
        expect = float(np.sum(x0 / icg.variances))
        for mode, want in (("full", expect), ("stop-grad", 0.0)):
            t = tp.Tape(mode=mode)
            theta = t.leaf("theta", np.array([[1.3]]))
            point = tp.affine(theta, x0, np.zeros(4))
            y = tp.mean_all(tp.sum_last(tp.target_grad(icg, point)))
            grads = t.backward(y)
            assert grads["theta"][0, 0] == pytest.approx(want, abs=1e-12)

    def test_target_energy_backward_is_gradient(self):
        g = std_gaussian(3)
        x = np.array([[1.0, -2.0, 0.5]])
        t = tp.Tape()
        xv = t.leaf("x", x)
        y = tp.mean_all(tp.target_energy(g, xv))
        grads = t.backward(y)
        assert np.allclose(grads["x"], x)

    def test_minzero_subgradient(self):
        t = tp.Tape()
        a = t.leaf("a", np.array([[-1.0, 0.0, 2.0]]))
        y = tp.mean_all(tp.minzero(a))
        grads = t.backward(y)
        assert np.allclose(grads["a"], [[1.0 / 3.0, 0.0, 0.0]])

    def test_hvp_call_counting(self):
        g = std_gaussian(2)
        x = np.ones((2, 2))
        for mode, expect_calls in (("full", 2), ("stop-grad", 0)):
            g.reset_counters()
            t = tp.Tape(mode=mode)
            xv = t.leaf("x", x)
            a = tp.target_grad(g, xv)
            b = tp.target_grad(g, tp.exp(xv))
            y = tp.mean_all(tp.sum_last(a + b))
            t.backward(y)
            assert g.hvp_counter.calls == expect_calls
            assert t.hvp_backward_calls == expect_calls

    def test_replay_determinism(self):
        rng = np.random.default_rng(11)
        t = tp.Tape()
        x = t.leaf("x", rng.standard_normal((6, 3)))
        w = t.leaf("w", rng.standard_normal((3, 3)))
        y = tp.mean_all(tp.sum_last(tp.tanh(tp.affine(x, w, np.zeros(3)))))
        g1 = t.backward(y)
        g2 = t.backward(y)
        for k in g1.keys():
            assert np.array_equal(g1[k], g2[k])

    def test_unused_leaf_gets_zero_gradient(self):
        t = tp.Tape()
        x = t.leaf("x", np.ones((1, 2)))
        t.leaf("unused", np.ones((3, 3)))
        y = tp.mean_all(x)
        grads = t.backward(y)
        assert np.all(grads["unused"] == 0.0)
        assert grads["unused"].shape == (3, 3)


class TestCheckGradients:
    def test_quadratic_is_exact(self):
        params = {"theta": np.array([0.7, -1.2, 2.0])}

        def loss(p):
            t = tp.Tape()
            th = t.leaf("theta", p["theta"])
            y = tp.mean_all(tp.square(th)) * (p["theta"].size / 2.0)
            return y.value, t.backward(y)

        assert tp.check_gradients(loss, params) < 1e-8

    def test_smooth_composite_program(self):
        rng = np.random.default_rng(17)
        params = {
            "w1": rng.standard_normal((4, 8)) * 0.4,
            "b1": rng.standard_normal(8) * 0.1,
            "w2": rng.standard_normal((8, 4)) * 0.4,
            "b2": rng.standard_normal(4) * 0.1,
        }
        x = rng.standard_normal((6, 4))
        icg = make_icg(4, -1.0, 1.0)

        def loss(p):
            t = tp.Tape()
            leaves = {k: t.leaf(k, v) for k, v in p.items()}
            h = tp.elu(tp.affine(x, leaves["w1"], leaves["b1"]))
            out = tp.affine(h, leaves["w2"], leaves["b2"])
            pt = tp.tanh(out) * 0.8
            pieces = tp.concat_last([tp.narrow(pt, 0, 2),
                                     tp.exp(tp.narrow(pt, 2, 2))])
            y = tp.mean_all(tp.sum_last(tp.target_grad(icg, pieces)))
            return y.value, t.backward(y)

        assert tp.check_gradients(loss, params) < 1e-6

    def test_kinked_program_away_from_kink(self):
        rng = np.random.default_rng(23)
        params = {"w": rng.standard_normal((3, 3)) * 0.5}
        x = rng.standard_normal((8, 3))

        def loss(p):
            t = tp.Tape()
            w = t.leaf("w", p["w"])
            r = tp.sum_last(tp.affine(x, w, np.zeros(3)))
            y = tp.mean_all(tp.minzero(r))
            return y.value, t.backward(y)

        # seed chosen so no batch element sits within 1e-6 of the kink
        t0 = tp.Tape()
        r = tp.sum_last(tp.affine(x, t0.leaf("w", params["w"]), np.zeros(3)))
        assert np.min(np.abs(r.value)) > 1e-4
        assert tp.check_gradients(loss, params) < 1e-4

    def test_masked_mean_drops_elements(self):
        vals = np.array([1.0, np.nan, 3.0])
        valid = np.isfinite(vals)
        t = tp.Tape()
        v = t.leaf("v", vals)
        y = tp.masked_mean(v, valid)
        assert y.value == 2.0
        grads = t.backward(y)
        assert np.allclose(grads["v"], [0.5, 0.0, 0.5])
