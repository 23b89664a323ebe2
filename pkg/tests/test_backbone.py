import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_gradients_match, central_difference
from vbllbo.backbone import (
    AdamW,
    BackboneNet,
    backward,
    clip_gradients,
    elu,
    forward,
    global_norm,
    init_backbone,
    input_gradient,
)


def _random_net(rng):
    D = int(rng.integers(1, 6))
    widths = [int(w) for w in rng.integers(1, 9, size=int(rng.integers(1, 4)))]
    return init_backbone((D, *widths), int(rng.integers(2**31)))


class TestInit:
    def test_same_seed_identical(self):
        a, b = init_backbone((3, 8, 8), 5), init_backbone((3, 8, 8), 5)
        for p, q in zip(a.params(), b.params()):
            np.testing.assert_array_equal(p, q)

    def test_different_seeds_differ(self):
        a, b = init_backbone((3, 8, 8), 5), init_backbone((3, 8, 8), 6)
        assert not np.array_equal(a.weights[0], b.weights[0])

    def test_default_architecture_shapes(self):
        net = init_backbone((2, 128, 128, 128), 0)
        assert [W.shape for W in net.weights] == [(2, 128), (128, 128), (128, 128)]
        assert [b.shape for b in net.biases] == [(128,)] * 3
        assert net.feature_dim == 128

    def test_fan_in_bounds(self):
        net = init_backbone((4, 64, 16), 1)
        for W, b in zip(net.weights, net.biases):
            bound = 1.0 / math.sqrt(W.shape[0])
            assert np.all(np.abs(W) <= bound) and np.all(np.abs(b) <= bound)

    def test_rejects_missing_hidden_layer(self):
        with pytest.raises(ValueError):
            init_backbone((3,), 0)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            BackboneNet((2, 3), [np.zeros((3, 2))], [np.zeros(3)])


class TestForward:
    def test_elu_values(self):
        np.testing.assert_allclose(elu(np.array([1.0, -1.0, 0.0])), [1.0, math.exp(-1) - 1, 0.0])
        assert elu(np.array([-1.0]))[0] == pytest.approx(-0.63212, abs=1e-5)

    def test_zero_weights_gives_elu_of_bias(self):
        net = init_backbone((3, 4, 2), 0)
        for W in net.weights:
            W[...] = 0.0
        net.biases[-1][...] = [0.7, -2.0]
        feats, _ = forward(net, [0.1, 0.2, 0.3])
        np.testing.assert_allclose(feats, elu(np.array([0.7, -2.0])))

    def test_finite_on_random_inputs(self, rng):
        net = init_backbone((5, 32, 32, 16), 3)
        X = rng.uniform(size=(1000, 5))
        assert np.all(np.isfinite(forward(net, X)[0]))

    def test_single_and_batch_agree(self, rng):
        net = init_backbone((3, 8, 4), 3)
        X = rng.uniform(size=(5, 3))
        batch = forward(net, X)[0]
        for i in range(5):
            np.testing.assert_allclose(forward(net, X[i])[0], batch[i], rtol=1e-14)

    def test_wrong_input_dimension(self):
        with pytest.raises(ValueError):
            forward(init_backbone((3, 4), 0), np.zeros(2))


class TestBackward:
    def test_zero_upstream_gives_zero(self, rng):
        net = init_backbone((3, 4, 2), 0)
        _, tape = forward(net, rng.uniform(size=3))
        for g in backward(net, tape, np.zeros(2)):
            assert np.all(g == 0.0)

    def test_linear_path(self):
        # single layer, positive pre-activation: d(w.x)/dw = x
        x = np.array([0.3, 0.5])
        net = BackboneNet((2, 1), [np.array([[1.0], [2.0]])], [np.array([0.1])])
        _, tape = forward(net, x)
        gW, gb = backward(net, tape, np.array([1.0]))
        np.testing.assert_allclose(gW[:, 0], x)
        np.testing.assert_allclose(gb, [1.0])

    def test_finite_difference_audit(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            net = _random_net(rng)
            X = rng.uniform(size=(3, net.input_dim))
            up = rng.standard_normal((3, net.feature_dim))
            _, tape = forward(net, X)
            grads = backward(net, tape, up)
            for p, g in zip(net.params(), grads):

                def f(val, p=p):
                    saved = p.copy()
                    p[...] = val
                    out = float(np.sum(forward(net, X)[0] * up))
                    p[...] = saved
                    return out

                assert_gradients_match(g, central_difference(f, p.copy()))

    def test_reference_net_shape(self):
        rng = np.random.default_rng(1)
        net = init_backbone((3, 4, 4, 2), 9)
        x = rng.uniform(size=3)
        up = rng.standard_normal(2)
        _, tape = forward(net, x)
        grads, gx = backward(net, tape, up, input_grad=True)
        f = lambda v: float(forward(net, v)[0] @ up)
        assert_gradients_match(gx, central_difference(f, x))
        np.testing.assert_allclose(input_gradient(net, tape, up), gx, rtol=1e-14)

    def test_out_buffers(self, rng):
        net = init_backbone((3, 5, 4), 2)
        X = rng.uniform(size=(6, 3))
        up = rng.standard_normal((6, 4))
        _, tape = forward(net, X)
        ref = backward(net, tape, up)
        out = [np.empty_like(p) for p in net.params()]
        backward(net, tape, up, out=out)
        for a, b in zip(ref, out):
            np.testing.assert_allclose(a, b, rtol=1e-14)


class TestClipping:
    def test_below_threshold_unchanged(self):
        g = [np.array([0.3, 0.4])]
        np.testing.assert_array_equal(clip_gradients(g, 1.0)[0], g[0])

    def test_single_entry(self):
        np.testing.assert_allclose(clip_gradients([np.array([2.0])], 1.0)[0], [1.0])

    def test_random_sets(self, rng):
        for _ in range(100):
            g = [rng.standard_normal(s) * rng.uniform(0.01, 10) for s in [(3, 4), (4,), (2,)]]
            c = clip_gradients(g, 1.0)
            assert abs(global_norm(c) - min(global_norm(g), 1.0)) <= 1e-12
            for a, b in zip(c, g):
                assert np.all(np.abs(a) <= np.abs(b))

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            clip_gradients([np.ones(2)], 0.0)


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        p = [np.array([1.0, -2.0])]
        opt = AdamW(p, decay_mask=[False])
        opt.step(p, [np.zeros(2)])
        np.testing.assert_array_equal(p[0], [1.0, -2.0])

    def test_zero_gradient_decoupled_decay(self):
        p = [np.array([1.0, -2.0])]
        opt = AdamW(p, lr=0.1, weight_decay=0.01)
        opt.step(p, [np.zeros(2)])
        np.testing.assert_allclose(p[0], np.array([1.0, -2.0]) * (1 - 0.1 * 0.01), rtol=1e-15)

    def test_quadratic_single_step(self):
        # f = theta^2 / 2 from theta=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        p = [np.array([1.0])]
        opt = AdamW(p, lr=1e-3, weight_decay=0.0)
        opt.step(p, [p[0].copy()])
        assert p[0][0] == pytest.approx(1.0 - 1e-3 / (1.0 + 1e-8), rel=1e-12)
        assert p[0][0] < 1.0

    def test_mask_only_decays_flagged(self):
        p = [np.ones(2), np.ones(2)]
        opt = AdamW(p, lr=0.5, weight_decay=0.1, decay_mask=[True, False])
        opt.step(p, [np.zeros(2), np.zeros(2)])
        np.testing.assert_allclose(p[0], 0.95)
        np.testing.assert_array_equal(p[1], 1.0)

    def test_flat_step_matches_list_step(self, rng):
        shapes = [(3, 4), (4,), (4, 2)]
        a = [rng.standard_normal(s) for s in shapes]
        theta = np.concatenate([x.ravel() for x in a])
        views, o = [], 0
        for x in a:
            views.append(theta[o : o + x.size].reshape(x.shape))
            o += x.size
        b = [x.copy() for x in a]
        opt_list = AdamW(b, decay_mask=[True, False, True])
        opt_flat = AdamW(views, decay_mask=[True, False, True])
        for _ in range(5):
            g = [rng.standard_normal(s) for s in shapes]
            opt_list.step(b, clip_gradients(g, 1.0))
            opt_flat.step_flat(theta, np.concatenate([x.ravel() for x in g]), clip_norm=1.0)
        for x, y in zip(b, views):
            np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-15)

    def test_deterministic_trajectory(self, rng):
        X = rng.uniform(size=(8, 2))
        up = rng.standard_normal((8, 3))

        def run():
            net = init_backbone((2, 5, 3), 11)
            opt = AdamW(net.params())
            for _ in range(10):
                _, tape = forward(net, X)
                opt.step(net.params(), backward(net, tape, up))
            return net

        n1, n2 = run(), run()
        for p, q in zip(n1.params(), n2.params()):
            np.testing.assert_array_equal(p, q)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), max_norm=st.floats(1e-3, 10.0))
def test_clip_never_grows_entries(seed, max_norm):
    rng = np.random.default_rng(seed)
    g = [rng.standard_normal((3, 2)) * 5, rng.standard_normal(2)]
    for a, b in zip(clip_gradients(g, max_norm), g):
        assert np.all(np.abs(a) <= np.abs(b))
