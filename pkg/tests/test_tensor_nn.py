import numpy as np
import pytest

from volpricer.errors import DomainError, ParseError, ShapeError, StateError
from volpricer.tensor_nn import (
    AdamState,
    Conv2d,
    ConvTranspose2d,
    CosineSchedule,
    Dense,
    Flatten,
    LeakyReLU,
    Reshape,
    adam_step,
    cosine_lr,
    finite_difference_gradients,
    load_params,
    max_relative_error,
    save_params,
)


def rng_for(seed=0):
    return np.random.default_rng(seed)


class TestShapes:
    def test_paper_encoder_trace(self):
        rng = rng_for()
        c1 = Conv2d(1, 16, rng, "c1")
        c2 = Conv2d(16, 32, rng, "c2")
        x = rng.normal(size=(2, 1, 41, 20))
        h1 = c1.forward(x)
        assert h1.shape == (2, 16, 21, 10)
        h2 = c2.forward(h1)
        assert h2.shape == (2, 32, 11, 5)
        assert Flatten().forward(h2).shape == (2, 1760)

    def test_decoder_inverts_exactly(self):
        rng = rng_for()
        t1 = ConvTranspose2d(32, 16, rng, "t1", output_padding=(0, 1))
        t2 = ConvTranspose2d(16, 1, rng, "t2", output_padding=(0, 1))
        z = rng.normal(size=(2, 32, 11, 5))
        y1 = t1.forward(z)
        assert y1.shape == (2, 16, 21, 10)
        assert t2.forward(y1).shape == (2, 1, 41, 20)

    def test_conv_shape_formula(self):
        rng = rng_for()
        conv = Conv2d(1, 1, rng, "c", kernel=3, stride=2, padding=1)
        for h, w in ((41, 20), (21, 10), (9, 9), (5, 7)):
            got = conv.forward(np.zeros((1, 1, h, w))).shape[2:]
            want = ((h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1)
            assert got == want

    def test_conv_identity_kernel_stride1(self):
        rng = rng_for()
        conv = Conv2d(1, 1, rng, "c", kernel=3, stride=1, padding=1)
        conv.weight[...] = 0.0
        conv.weight[0, 0, 1, 1] = 1.0
        conv.bias[...] = 0.0
        x = rng.normal(size=(1, 1, 6, 6))
        assert np.allclose(conv.forward(x), x)

    def test_tconv_unit_identity(self):
        rng = rng_for()
        tcv = ConvTranspose2d(1, 1, rng, "t", kernel=1, stride=1, padding=0,
                              output_padding=(0, 0))
        tcv.weight[...] = 1.0
        tcv.bias[...] = 0.0
        x = rng.normal(size=(2, 1, 4, 5))
        assert np.allclose(tcv.forward(x), x)

    def test_shape_errors(self):
        rng = rng_for()
        conv = Conv2d(3, 4, rng, "c")
        with pytest.raises(ShapeError, match="expected"):
            conv.forward(np.zeros((1, 2, 8, 8)))
        with pytest.raises(ShapeError):
            conv.forward(np.zeros((2, 8, 8)))
        dense = Dense(4, 2, rng, "d")
        with pytest.raises(ShapeError):
            dense.forward(np.zeros((3, 5)))
        with pytest.raises(DomainError):
            ConvTranspose2d(1, 1, rng, "t", stride=2, output_padding=(2, 0))

    def test_backward_before_forward_is_state_error(self):
        rng = rng_for()
        for layer in (Dense(3, 2, rng, "d"), Conv2d(1, 1, rng, "c"),
                      ConvTranspose2d(1, 1, rng, "t"), LeakyReLU(),
                      Flatten(), Reshape((1, 2, 2))):
            with pytest.raises(StateError):
                layer.backward(np.zeros((1, 2)))


class TestDense:
    def test_identity(self):
        rng = rng_for()
        dense = Dense(3, 3, rng, "d")
        dense.weight[...] = np.eye(3)
        dense.bias[...] = 0.0
        x = rng.normal(size=(4, 3))
        assert np.allclose(dense.forward(x), x)

    def test_zero_weight_constant_bias(self):
        rng = rng_for()
        dense = Dense(3, 2, rng, "d")
        dense.weight[...] = 0.0
        dense.bias[...] = [1.5, -2.0]
        out = dense.forward(np.ones((4, 3)))
        assert np.allclose(out, [[1.5, -2.0]] * 4)

    def test_matches_direct_summation(self):
        rng = rng_for(2)
        dense = Dense(4, 3, rng, "d")
        x = rng.normal(size=(1, 4))
        got = dense.forward(x)[0]
        want = np.array([
            sum(dense.weight[i, j] * x[0, j] for j in range(4)) + dense.bias[i]
            for i in range(3)
        ])
        assert np.allclose(got, want)


class TestGradients:
    """Analytic vs central-difference gradients per layer type."""

    def check(self, layer, x_shape, seeds=range(3)):
        for seed in seeds:
            rng = rng_for(seed)
            x = rng.normal(size=x_shape)
            out_shape = layer.forward(x.copy()).shape
            target = rng.normal(size=out_shape)

            def loss():
                return float(((layer.forward(x) - target) ** 2).sum())

            layer.zero_grad()
            out = layer.forward(x)
            layer.backward(2 * (out - target))
            if layer.parameters():
                fd = finite_difference_gradients(loss, layer.parameters())
                assert max_relative_error(layer.gradients(), fd) < 1e-5

    def test_dense(self):
        self.check(Dense(5, 4, rng_for(11), "d"), (3, 5))

    def test_conv(self):
        self.check(Conv2d(1, 2, rng_for(12), "c"), (2, 1, 6, 6))

    def test_conv_input_gradient(self):
        rng = rng_for(13)
        conv = Conv2d(2, 3, rng, "c")
        x = rng.normal(size=(1, 2, 5, 6))
        target = rng.normal(size=conv.forward(x.copy()).shape)

        def loss():
            return float(((conv.forward(x) - target) ** 2).sum())

        conv.zero_grad()
        gx = conv.backward(2 * (conv.forward(x) - target))
        fd = finite_difference_gradients(loss, {"x": x})
        assert max_relative_error({"x": gx}, fd) < 1e-5

    def test_tconv(self):
        self.check(ConvTranspose2d(2, 1, rng_for(14), "t",
                                   output_padding=(1, 0)), (2, 2, 4, 3))

    def test_tconv_input_gradient(self):
        rng = rng_for(15)
        tcv = ConvTranspose2d(2, 2, rng, "t", output_padding=(0, 1))
        x = rng.normal(size=(1, 2, 4, 4))
        target = rng.normal(size=tcv.forward(x.copy()).shape)

        def loss():
            return float(((tcv.forward(x) - target) ** 2).sum())

        tcv.zero_grad()
        gx = tcv.backward(2 * (tcv.forward(x) - target))
        fd = finite_difference_gradients(loss, {"x": x})
        assert max_relative_error({"x": gx}, fd) < 1e-5

    def test_leaky_relu_gradient(self):
        act = LeakyReLU(0.01)
        # Keep pre-activations away from the kink so the central
        # difference is valid.
        x = np.array([[0.5, -0.8, 1.2, -0.3]])
        target = np.array([[0.1, 0.2, -0.4, 0.9]])

        def loss():
            return float(((act.forward(x) - target) ** 2).sum())

        gx = act.backward(2 * (act.forward(x) - target))
        fd = finite_difference_gradients(loss, {"x": x})
        assert max_relative_error({"x": gx}, fd) < 1e-5

    def test_dense_analytic_formula(self):
        # Squared loss on a single dense layer: dL/dW = 2 (Wx + b - y) x^T.
        rng = rng_for(16)
        dense = Dense(4, 3, rng, "d")
        x = rng.normal(size=(1, 4))
        y = rng.normal(size=(1, 3))
        dense.zero_grad()
        out = dense.forward(x)
        dense.backward(2 * (out - y))
        resid = (out - y)[0]
        want = 2 * np.outer(resid, x[0])
        assert np.allclose(dense.grad_weight, want)
        assert np.allclose(dense.grad_bias, 2 * resid)


class TestAdam:
    def params(self):
        return {"w": np.array([1.0, -2.0, 3.0])}

    def test_zero_gradient_keeps_params(self):
        params = self.params()
        state = AdamState.for_params(params)
        state.first_moment["w"][...] = 0.5
        state.second_moment["w"][...] = 0.25
        new_p, new_s = adam_step(params, {"w": np.zeros(3)}, state, lr=1e-3)
        # moments decay toward zero, parameters move by the decayed moment
        assert np.all(new_s.first_moment["w"] == 0.45)
        assert np.all(new_s.second_moment["w"] == 0.25 * 0.999)
        assert new_s.step_count == 1

    def test_zero_gradient_zero_state(self):
        params = self.params()
        state = AdamState.for_params(params)
        new_p, _ = adam_step(params, {"w": np.zeros(3)}, state, lr=1e-3)
        assert np.array_equal(new_p["w"], params["w"])

    def test_single_step_from_zero_state(self):
        # Hand evaluation: m_hat = g, v_hat = g^2, step = lr g / (|g| + eps).
        params = {"w": np.array([0.0])}
        g = np.array([0.3])
        new_p, _ = adam_step(params, {"w": g}, AdamState.for_params(params),
                             lr=0.01)
        want = -0.01 * 0.3 / (0.3 + 1e-8)
        assert new_p["w"][0] == pytest.approx(want, rel=1e-12)

    def test_constant_gradient_update_approaches_lr(self):
        params = {"w": np.array([0.0])}
        state = AdamState.for_params(params)
        g = {"w": np.array([0.7])}
        prev = params["w"].copy()
        for _ in range(50):
            params, state = adam_step(params, g, state, lr=0.01)
        delta = abs(params["w"][0] - prev[0]) / 50
        assert delta == pytest.approx(0.01, rel=0.05)

    def test_purity_and_aliasing(self):
        params = self.params()
        grads = {"w": params["w"]}  # aliases the parameter buffer
        state = AdamState.for_params(params)
        a, _ = adam_step(params, grads, state, lr=1e-3)
        b, _ = adam_step(params, {"w": params["w"].copy()}, state, lr=1e-3)
        assert np.array_equal(a["w"], b["w"])
        assert np.all(params["w"] == [1.0, -2.0, 3.0])  # inputs untouched

    def test_step_count_increments(self):
        params = self.params()
        state = AdamState.for_params(params)
        for i in range(3):
            params, state = adam_step(params, {"w": np.ones(3)}, state, 1e-3)
            assert state.step_count == i + 1

    def test_shape_mismatch(self):
        params = self.params()
        with pytest.raises(ShapeError):
            adam_step(params, {"w": np.zeros(4)}, AdamState.for_params(params),
                      1e-3)


class TestCosine:
    def test_endpoints_and_midpoint(self):
        sched = CosineSchedule(1e-3, 1e-6, 100)
        assert cosine_lr(sched, 0) == pytest.approx(1e-3)
        assert cosine_lr(sched, 100) == pytest.approx(1e-6)
        assert cosine_lr(sched, 50) == pytest.approx((1e-3 + 1e-6) / 2)

    def test_nonincreasing(self):
        sched = CosineSchedule(1e-3, 1e-6, 37)
        lrs = [cosine_lr(sched, e) for e in range(38)]
        assert np.all(np.diff(lrs) <= 0)

    def test_domain_errors(self):
        sched = CosineSchedule(1e-3, 1e-6, 10)
        with pytest.raises(DomainError):
            cosine_lr(sched, -1)
        with pytest.raises(DomainError):
            cosine_lr(sched, 11)
        with pytest.raises(DomainError):
            CosineSchedule(1e-6, 1e-3, 10)
        with pytest.raises(DomainError):
            CosineSchedule(1e-3, 1e-6, 0)


class TestPersistence:
    def test_round_trip_exact(self, tmp_path):
        rng = rng_for(8)
        params = {
            "encoder.conv1.weight": rng.normal(size=(16, 1, 3, 3)),
            "encoder.conv1.bias": rng.normal(size=16),
            "meta.scalar": np.array([41.0, 20.0]),
        }
        path = tmp_path / "model.bin"
        save_params(path, params)
        back = load_params(path)
        assert list(back) == list(params)
        for name in params:
            assert np.array_equal(back[name], params[name])
            assert back[name].dtype == np.float64

    def test_magic_bytes(self, tmp_path):
        path = tmp_path / "model.bin"
        save_params(path, {"w": np.ones(3)})
        assert path.read_bytes()[:4] == b"VAEP"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ParseError):
            load_params(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "model.bin"
        save_params(path, {"w": np.ones(3)})
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(ParseError):
            load_params(path)


class TestDeterminism:
    def test_seeded_init_reproducible(self):
        a = Conv2d(1, 4, rng_for(5), "c").weight
        b = Conv2d(1, 4, rng_for(5), "c").weight
        assert np.array_equal(a, b)

    def test_forward_deterministic(self):
        rng = rng_for(6)
        conv = Conv2d(1, 2, rng, "c")
        x = rng.normal(size=(1, 1, 8, 8))
        assert np.array_equal(conv.forward(x), conv.forward(x))
