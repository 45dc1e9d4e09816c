import numpy as np
import pytest

from coral.backend import (
    OptimizerState,
    ParameterStore,
    Tensor,
    adam_step,
    concat,
    embedding,
    exp,
    finite_difference_check,
    gather_last,
    gelu,
    layer_norm,
    load_arrays,
    log,
    masked_fill,
    matmul,
    max_pool_time,
    mean,
    mul,
    reduce_max,
    relu,
    reshape,
    save_arrays,
    sigmoid,
    softmax,
    softplus,
    sum_,
    tanh,
    transpose,
)


class TestForwardOps:
    def test_softmax_symmetry(self):
        out = softmax(Tensor(np.array([1.0, 1.0, 1.0, 1.0])))
        np.testing.assert_array_equal(out.data, [0.25, 0.25, 0.25, 0.25])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(7, 11)) * 10)
        out = softmax(x, axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_masked_softmax_probability_tiny(self):
        x = Tensor(np.zeros((3, 5)))
        mask = np.array([False, True, False, True, False])
        probs = softmax(masked_fill(x, mask, -1e9), axis=-1)
        assert probs.data[:, mask].max() < 1e-12
        np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_layer_norm_constant_vector(self):
        # zero variance: normalized value is all zeros, the affine adds bias
        g = Tensor(np.ones(6))
        b = Tensor(np.full(6, 0.25))
        out = layer_norm(Tensor(np.full((2, 6), 3.0)), g, b)
        np.testing.assert_allclose(out.data, 0.25, atol=1e-7)

    def test_sigmoid_zero(self):
        assert sigmoid(Tensor(np.array(0.0))).item() == 0.5

    def test_no_nan_inf_on_finite_inputs(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(4, 8)) * 50)
        for op in (lambda t: softmax(t), lambda t: sigmoid(t), lambda t: tanh(t), lambda t: gelu(t), lambda t: softplus(t)):
            assert np.isfinite(op(x).data).all()

    def test_shape_error_names_op(self):
        with pytest.raises(ValueError, match="matmul"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        with pytest.raises(ValueError, match="add"):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((2, 4)))


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = sum_(mul(x, x))
        loss.backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_detached_tensor_has_no_grad(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        d = x.detach()
        loss = sum_(mul(d, d)) + sum_(x)
        loss.backward()
        assert d.grad is None
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            mul(x, x).backward()

    def test_accumulation_on_reuse(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        loss = sum_(x + x)
        loss.backward()
        np.testing.assert_array_equal(x.grad, [2.0])
        # second backward accumulates into the existing buffer
        loss2 = sum_(mul(x, 1.0))
        loss2.backward()
        np.testing.assert_array_equal(x.grad, [3.0])

    def test_broadcast_gradients(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4) * 2.0, requires_grad=True)
        sum_(mul(a, b)).backward()
        np.testing.assert_array_equal(a.grad, np.full((3, 4), 2.0))
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_mlp_matches_finite_differences(self):
        # random small MLP, central differences at h=1e-3 in float64
        rng = np.random.default_rng(7)
        params = ParameterStore()
        params.add("w1", rng.normal(size=(3, 4)))
        params.add("b1", rng.normal(size=4))
        params.add("w2", rng.normal(size=(4, 1)))
        params.add("b2", rng.normal(size=1))
        x = rng.normal(size=(5, 3))

        def build_loss(p):
            h = tanh(matmul(Tensor(x.astype(p["w1"].data.dtype)), p["w1"]) + p["b1"])
            out = matmul(h, p["w2"]) + p["b2"]
            return sum_(mul(out, out))

        err = finite_difference_check(build_loss, params, n_coords=200, rng=np.random.default_rng(0))
        assert err < 1e-3

    def test_assorted_ops_match_finite_differences(self):
        rng = np.random.default_rng(11)
        params = ParameterStore()
        params.add("a", rng.normal(size=(4, 6)))
        params.add("b", rng.normal(size=(6, 3)))
        mask = rng.random((4, 3)) < 0.3

        def build_loss(p):
            z = matmul(p["a"], p["b"])
            z = masked_fill(z, mask, -2.0)
            parts = concat([gelu(z), relu(z), sigmoid(z)], axis=-1)
            pooled = max_pool_time(parts) + mean(parts, axis=0)
            picked = gather_last(reshape(parts, (4, 9)), [0, 3, 5, 8])
            e = embedding(p["a"], [1, 3, 1])
            r = reduce_max(transpose(e), axis=1)
            total = sum_(log(softplus(pooled))) + sum_(exp(mul(picked, 0.1))) + sum_(mul(r, r))
            return reshape(total, ())

        err = finite_difference_check(build_loss, params, n_coords=42, rng=np.random.default_rng(1))
        assert err < 1e-3

    def test_embedding_gradient_scatter(self):
        w = Tensor(np.zeros((4, 2)), requires_grad=True)
        out = embedding(w, [1, 1, 3])
        sum_(out).backward()
        expected = np.zeros((4, 2))
        expected[1] = 2.0
        expected[3] = 1.0
        np.testing.assert_array_equal(w.grad, expected)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            x = Tensor(rng.normal(size=(6, 6)).astype(np.float32), requires_grad=True)
            y = sum_(softmax(matmul(x, transpose(x))))
            y.backward()
            return y.data.copy(), x.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


class TestAdam:
    def _store(self, value=0.0):
        params = ParameterStore()
        params.add("w", np.array([value], dtype=np.float32))
        return params

    def test_warmup_lr(self):
        state = OptimizerState(self._store(), peak_lr=1e-4, warmup_steps=1000, total_steps=10_000)
        assert state.lr_at(500) == pytest.approx(5e-5)

    def test_lr_zero_at_horizon(self):
        state = OptimizerState(self._store(), peak_lr=1e-4, warmup_steps=1000, total_steps=10_000)
        assert state.lr_at(10_000) == 0.0

    def test_first_step_matches_hand_computation(self):
        # m_hat = v_hat = 1 after bias correction, so the step is lr/(1+eps)
        params = self._store(0.0)
        state = OptimizerState(params, peak_lr=0.1, warmup_steps=0, total_steps=0, clip_norm=None)
        params["w"].grad = np.array([1.0], dtype=np.float32)
        adam_step(params, state)
        assert params["w"].data[0] == pytest.approx(-0.1, abs=1e-6)

    def test_zero_grad_no_movement(self):
        params = self._store(1.5)
        state = OptimizerState(params, peak_lr=0.1, warmup_steps=0, total_steps=0)
        adam_step(params, state)
        assert params["w"].data[0] == 1.5

    def test_grads_zeroed_after_step(self):
        params = self._store()
        state = OptimizerState(params, peak_lr=0.1, warmup_steps=0, total_steps=0)
        params["w"].grad = np.array([1.0], dtype=np.float32)
        adam_step(params, state)
        assert params["w"].grad is None

    def test_clipping_bounds_global_norm(self):
        params = ParameterStore()
        params.add("a", np.zeros(3, dtype=np.float32))
        params.add("b", np.zeros(4, dtype=np.float32))
        state = OptimizerState(params, peak_lr=0.0, warmup_steps=0, total_steps=0, clip_norm=1.0)
        params["a"].grad = np.full(3, 10.0, dtype=np.float32)
        params["b"].grad = np.full(4, 10.0, dtype=np.float32)
        from coral.backend import clip_grads

        pre = clip_grads(params, 1.0)
        assert pre > 1.0
        post = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for _, p in params.items()))
        assert post == pytest.approx(1.0, rel=1e-5)
        adam_step(params, state)


class TestCheckpointContainer:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        arrays = {
            "s2s.tok_emb": rng.normal(size=(5, 3)).astype(np.float32),
            "esim.mlp.b1": rng.normal(size=7).astype(np.float32),
            "meta.step": np.array([12.0], dtype=np.float32),
        }
        path = tmp_path / "ckpt.crl"
        save_arrays(path, arrays)
        loaded = load_arrays(path)
        assert list(loaded) == list(arrays)
        for name in arrays:
            assert loaded[name].shape == arrays[name].shape
            assert loaded[name].tobytes() == arrays[name].tobytes()

    def test_magic_bytes(self, tmp_path):
        path = tmp_path / "ckpt.crl"
        save_arrays(path, {"x": np.zeros(2, dtype=np.float32)})
        assert path.read_bytes()[:4] == b"CRL1"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.crl"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_arrays(path)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "ckpt.crl"
        save_arrays(path, {"x": np.arange(8, dtype=np.float32)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(ValueError, match="truncated"):
            load_arrays(path)


class TestParameterStore:
    def test_duplicate_names_rejected(self):
        params = ParameterStore()
        params.add("w", np.zeros(2))
        with pytest.raises(ValueError, match="duplicate"):
            params.add("w", np.zeros(2))

    def test_detached_view_builds_no_graph(self):
        params = ParameterStore()
        params.add("w", np.ones((2, 2)))
        frozen = params.detached()
        out = sum_(mul(frozen["w"], frozen["w"]))
        assert not out.requires_grad
        assert out._backward is None

    def test_astype_roundtrip_values(self):
        params = ParameterStore()
        params.add("w", np.array([0.1, 0.2], dtype=np.float32))
        doubled = params.astype(np.float64)
        assert doubled["w"].data.dtype == np.float64
        np.testing.assert_allclose(doubled["w"].data, params["w"].data)
