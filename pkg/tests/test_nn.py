import numpy as np
import pytest

from loft import nn
from loft.rng import make_rng


def rel_err(a, b):
    scale = max(np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / scale


class TestConvGradients:
    @pytest.mark.parametrize("case", range(20))
    def test_matches_finite_differences(self, case):
        rng = make_rng(case)
        n = int(rng.integers(1, 3))
        h = int(rng.integers(4, 7))
        c = int(rng.integers(1, 3))
        f = int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 4))
        padding = "same" if rng.random() < 0.5 else "valid"
        if padding == "valid" and h < k:
            k = 1
        x = rng.standard_normal((n, h, h, c))
        w = rng.standard_normal((k, k, c, f)) * 0.5
        b = rng.standard_normal(f) * 0.1
        y, cache = nn.conv2d_forward(x, w, b, stride, padding)
        probe = rng.standard_normal(y.shape)

        def loss(x_, w_, b_):
            out, _ = nn.conv2d_forward(x_, w_, b_, stride, padding)
            return float((out * probe).sum())

        dx, dw, db = nn.conv2d_backward(probe, w, cache)
        assert rel_err(dx, nn.numeric_gradient(lambda v: loss(v, w, b), x.copy())) < 1e-4
        assert rel_err(dw, nn.numeric_gradient(lambda v: loss(x, v, b), w.copy())) < 1e-4
        assert rel_err(db, nn.numeric_gradient(lambda v: loss(x, w, v), b.copy())) < 1e-4

    def test_identity_kernel(self):
        x = make_rng(1).standard_normal((2, 5, 5, 3))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0] = np.eye(3)
        y, _ = nn.conv2d_forward(x, w, np.zeros(3), 1, "same")
        assert np.allclose(y, x)

    def test_ones_kernel_on_constant(self):
        x = np.full((1, 6, 6, 1), 2.5)
        w = np.ones((3, 3, 1, 1))
        y, _ = nn.conv2d_forward(x, w, np.zeros(1), 1, "same")
        assert np.allclose(y[0, 1:-1, 1:-1, 0], 9 * 2.5)

    def test_linearity(self):
        rng = make_rng(2)
        x1 = rng.standard_normal((2, 6, 6, 2))
        x2 = rng.standard_normal((2, 6, 6, 2))
        w = rng.standard_normal((3, 3, 2, 4))
        zero_b = np.zeros(4)
        a, b = 1.7, -0.4
        lhs, _ = nn.conv2d_forward(a * x1 + b * x2, w, zero_b, 2, "same")
        y1, _ = nn.conv2d_forward(x1, w, zero_b, 2, "same")
        y2, _ = nn.conv2d_forward(x2, w, zero_b, 2, "same")
        assert np.allclose(lhs, a * y1 + b * y2, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            nn.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))


class TestDenseGradients:
    @pytest.mark.parametrize("case", range(20))
    def test_matches_finite_differences(self, case):
        rng = make_rng(100 + case)
        n, d, u = (int(rng.integers(1, 6)) for _ in range(3))
        x = rng.standard_normal((n, d))
        w = rng.standard_normal((d, u))
        b = rng.standard_normal(u)
        y, cache = nn.dense_forward(x, w, b)
        probe = rng.standard_normal(y.shape)

        def loss(x_, w_, b_):
            return float((nn.dense_forward(x_, w_, b_)[0] * probe).sum())

        dx, dw, db = nn.dense_backward(probe, w, cache)
        assert rel_err(dx, nn.numeric_gradient(lambda v: loss(v, w, b), x.copy())) < 1e-6
        assert rel_err(dw, nn.numeric_gradient(lambda v: loss(x, v, b), w.copy())) < 1e-6
        assert rel_err(db, nn.numeric_gradient(lambda v: loss(x, w, v), b.copy())) < 1e-6

    def test_identity_weight(self):
        x = make_rng(3).standard_normal((4, 5))
        y, _ = nn.dense_forward(x, np.eye(5), np.zeros(5))
        assert np.allclose(y, x)


class TestActivations:
    @pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh"])
    @pytest.mark.parametrize("case", range(7))
    def test_matches_finite_differences(self, kind, case):
        rng = make_rng(200 + case)
        x = rng.standard_normal((3, 4)) + 0.05  # keep relu off its kink
        y, cache = nn.activation_forward(x, kind)
        probe = rng.standard_normal(y.shape)
        dx = nn.activation_backward(probe, kind, cache)
        num = nn.numeric_gradient(
            lambda v: float((nn.activation_forward(v, kind)[0] * probe).sum()), x.copy()
        )
        assert rel_err(dx, num) < 1e-4

    def test_sigmoid_at_zero(self):
        y, _ = nn.activation_forward(np.zeros(3), "sigmoid")
        assert np.allclose(y, 0.5)

    def test_sigmoid_extreme_inputs_stay_finite(self):
        y, _ = nn.activation_forward(np.array([-1e4, 1e4]), "sigmoid")
        assert np.allclose(y, [0.0, 1.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            nn.activation_forward(np.zeros(2), "softplus")


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = make_rng(4).standard_normal((5, 5))
        y, cache = nn.dropout_forward(x, 0.5, train=False)
        assert y is x and cache is None

    def test_backward_uses_mask(self):
        rng = make_rng(5)
        x = rng.standard_normal((4, 4))
        y, mask = nn.dropout_forward(x, 0.5, train=True, rng=make_rng(6))
        dy = rng.standard_normal((4, 4))
        assert np.allclose(nn.dropout_backward(dy, mask), dy * mask)

    def test_preserves_expected_activation(self):
        x = np.full((100,), 2.0)
        rng = make_rng(7)
        total = np.zeros_like(x)
        reps = 10_000
        for _ in range(reps):
            y, _ = nn.dropout_forward(x, 0.5, train=True, rng=rng)
            total += y
        assert abs(total.mean() / reps - 2.0) / 2.0 < 0.02

    def test_rejects_rate_one(self):
        with pytest.raises(ValueError):
            nn.dropout_forward(np.zeros(3), 1.0, train=True, rng=make_rng(0))


class TestResize:
    @pytest.mark.parametrize("case", range(6))
    def test_matches_finite_differences(self, case):
        rng = make_rng(300 + case)
        h = int(rng.integers(2, 5))
        oh = int(rng.integers(h, 3 * h))
        layer = nn.ResizeNearest("r", (oh, oh))
        store = nn.ParamStore()
        layer.build((h, h, 2), store, rng)
        x = rng.standard_normal((2, h, h, 2))
        y, cache = layer.forward(store, x, False, None)
        probe = rng.standard_normal(y.shape)
        dx = layer.backward(store, probe, cache)
        num = nn.numeric_gradient(
            lambda v: float((layer.forward(store, v, False, None)[0] * probe).sum()),
            x.copy(),
        )
        assert rel_err(dx, num) < 1e-6


class TestOptimizers:
    def test_sgd_step(self):
        store = nn.ParamStore()
        store.add("p", np.array([1.0]))
        store.grads["p"][...] = 2.0
        nn.Sgd(lr=0.1).step(store)
        assert np.allclose(store.params["p"], [0.8])

    def test_adam_first_step_magnitude(self):
        store = nn.ParamStore()
        store.add("p", np.array([1.0]))
        store.grads["p"][...] = 7.0
        nn.Adam(lr=0.05).step(store)
        # bias-corrected first step is ~lr regardless of gradient scale
        assert abs((1.0 - store.params["p"][0]) - 0.05) < 1e-7

    def test_zero_gradients_leave_params(self):
        store = nn.ParamStore()
        store.add("p", np.array([3.0]))
        nn.Sgd(lr=0.1).step(store)
        assert store.params["p"][0] == 3.0
        adam = nn.Adam(lr=0.1)
        adam.step(store)
        assert abs(store.params["p"][0] - 3.0) < 1e-12

    def test_empty_store_raises(self):
        with pytest.raises(nn.GradientStateError):
            nn.Adam(lr=0.1).step(nn.ParamStore())

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            nn.make_optimizer("rmsprop", 0.1)


class TestNumericFault:
    def test_conv_raises_on_nan(self):
        x = np.full((1, 4, 4, 1), np.nan)
        with pytest.raises(nn.NumericFaultError):
            nn.conv2d_forward(x, np.ones((3, 3, 1, 1)), np.zeros(1))

    def test_dense_raises_on_inf(self):
        with pytest.raises(nn.NumericFaultError):
            nn.dense_forward(np.array([[np.inf]]), np.ones((1, 1)), np.zeros(1))


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = nn.ParamStore()
        store.add("w", np.zeros(2))
        with pytest.raises(ValueError):
            store.add("w", np.zeros(2))

    def test_load_checks_shapes(self):
        store = nn.ParamStore()
        store.add("w", np.zeros((2, 2)))
        with pytest.raises(ValueError):
            store.load_params({"w": np.zeros(3)})
        with pytest.raises(KeyError):
            store.load_params({"v": np.zeros(1)})


class TestNetworkDeterminism:
    def test_same_seed_same_init_and_forward(self):
        def build():
            rng = make_rng(42)
            return nn.Network(
                "net",
                [
                    nn.Conv2D("net/c1", 4, 3, stride=2),
                    nn.Activation("net/a1", "relu"),
                    nn.Flatten("net/f"),
                    nn.Dense("net/d1", 5),
                ],
                in_shape=(8, 8, 1),
                seed_rng=rng,
            )

        n1, n2 = build(), build()
        for k in n1.store.params:
            assert np.array_equal(n1.store.params[k], n2.store.params[k])
        x = make_rng(1).standard_normal((3, 8, 8, 1))
        y1, _, _ = n1.forward(x)
        y2, _, _ = n2.forward(x)
        assert np.array_equal(y1, y2)
