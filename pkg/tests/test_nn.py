import numpy as np
import pytest

from unrig.nn import (
    AdamState,
    CheckpointError,
    Mlp,
    MlpSpec,
    TrainingDiverged,
    adam_step,
    backward,
    finite_difference_gradients,
    forward,
    init_mlp,
    load_checkpoint,
    load_tensors,
    relative_gradient_error,
    save_checkpoint,
    save_tensors,
)


def straight_line_eval(net, x):
    """Independent re-evaluation: explicit per-layer loop, no tape."""
    a = np.asarray(x, dtype=float)
    n = len(net.weights)
    for i in range(n):
        z = a @ net.weights[i] + net.biases[i]
        if i < n - 1:
            if net.spec.hidden_activation == "relu":
                a = np.where(z > 0, z, 0.0)
            else:
                a = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)
        else:
            if net.spec.output_activation == "identity":
                a = z
            elif net.spec.output_activation == "sigmoid":
                a = 1.0 / (1.0 + np.exp(-z))
            else:
                e = np.exp(z - z.max())
                a = e / e.sum()
    return a


class TestForward:
    def test_zero_net_zero_output(self):
        spec = MlpSpec([4, 8, 3])
        net = init_mlp(spec, seed=0)
        for w in net.weights:
            w[:] = 0.0
        out, _ = forward(net, np.ones(4))
        assert np.array_equal(out, np.zeros(3))

    def test_single_affine_layer(self):
        spec = MlpSpec([2, 3])
        net = init_mlp(spec, seed=1)
        net.weights[0] = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        net.biases[0] = np.array([0.5, -0.5, 0.0])
        x = np.array([1.0, -1.0])
        out, _ = forward(net, x)
        assert np.allclose(out, x @ net.weights[0] + net.biases[0], atol=0)

    @pytest.mark.parametrize("hidden,out_act", [("relu", "identity"), ("softplus", "sigmoid"), ("relu", "softmax")])
    def test_matches_straight_line_oracle(self, hidden, out_act):
        spec = MlpSpec([5, 16, 16, 4], hidden_activation=hidden, output_activation=out_act)
        net = init_mlp(spec, seed=7)
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = rng.normal(size=5)
            out, _ = forward(net, x)
            assert np.abs(out - straight_line_eval(net, x)).max() < 1e-12

    def test_batch_matches_vector(self):
        net = init_mlp(MlpSpec([3, 8, 2]), seed=5)
        rng = np.random.default_rng(4)
        xs = rng.normal(size=(6, 3))
        batch_out, _ = forward(net, xs)
        for i in range(6):
            single, _ = forward(net, xs[i])
            # gemm vs gemv round differently in the last ulp
            assert np.abs(batch_out[i] - single).max() < 1e-12

    def test_softmax_sums_to_one(self):
        net = init_mlp(MlpSpec([4, 8, 5], output_activation="softmax"), seed=2)
        rng = np.random.default_rng(0)
        out, _ = forward(net, rng.normal(size=(50, 4)))
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12

    def test_sigmoid_in_open_interval(self):
        net = init_mlp(MlpSpec([4, 8, 1], output_activation="sigmoid"), seed=2)
        rng = np.random.default_rng(0)
        out, _ = forward(net, rng.normal(size=(50, 4)))
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_dimension_mismatch(self):
        net = init_mlp(MlpSpec([4, 2]), seed=0)
        with pytest.raises(ValueError):
            forward(net, np.zeros(3))

    def test_deterministic(self):
        net = init_mlp(MlpSpec([4, 16, 2]), seed=11)
        x = np.linspace(-1, 1, 4)
        a, _ = forward(net, x)
        b, _ = forward(net, x)
        assert np.array_equal(a, b)


class TestBackward:
    def test_zero_output_grad(self):
        net = init_mlp(MlpSpec([3, 8, 2]), seed=0)
        _, tape = forward(net, np.ones(3))
        grads, input_grad = backward(net, tape, np.zeros(2))
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads.parameters())
        assert np.array_equal(input_grad, np.zeros(3))

    def test_affine_input_grad_closed_form(self):
        net = init_mlp(MlpSpec([3, 2]), seed=1)
        _, tape = forward(net, np.array([0.2, -0.4, 0.9]))
        g = np.array([1.5, -2.0])
        _, input_grad = backward(net, tape, g)
        assert np.allclose(input_grad, net.weights[0] @ g, atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_difference_params_and_input(self, seed):
        spec = MlpSpec([4, 10, 10, 1], hidden_activation="softplus")
        net = init_mlp(spec, seed=seed)
        rng = np.random.default_rng(seed + 100)
        x = rng.normal(size=4)

        def loss():
            out, _ = forward(net, x)
            return float(out[0] ** 2)

        out, tape = forward(net, x)
        grads, input_grad = backward(net, tape, np.array([2.0 * out[0]]))
        numeric = finite_difference_gradients(loss, net.parameters() + [x])
        analytic = grads.parameters() + [input_grad]
        assert relative_gradient_error(analytic, numeric) < 1e-4

    def test_relu_finite_difference(self):
        net = init_mlp(MlpSpec([3, 12, 1], hidden_activation="relu"), seed=3)
        rng = np.random.default_rng(8)
        x = rng.normal(size=3)

        def loss():
            out, _ = forward(net, x)
            return float(out[0])

        _, tape = forward(net, x)
        grads, _ = backward(net, tape, np.array([1.0]))
        numeric = finite_difference_gradients(loss, net.parameters())
        assert relative_gradient_error(grads.parameters(), numeric) < 1e-4

    def test_batch_grads_sum_of_singles(self):
        net = init_mlp(MlpSpec([3, 6, 2]), seed=4)
        rng = np.random.default_rng(1)
        xs = rng.normal(size=(5, 3))
        gs = rng.normal(size=(5, 2))
        _, tape = forward(net, xs)
        batch_grads, batch_input = backward(net, tape, gs)
        acc = [np.zeros_like(p) for p in net.parameters()]
        for i in range(5):
            _, t = forward(net, xs[i])
            g, gi = backward(net, t, gs[i])
            for a, b in zip(acc, g.parameters()):
                a += b
            assert np.allclose(batch_input[i], gi, atol=1e-12)
        for a, b in zip(acc, batch_grads.parameters()):
            assert np.allclose(a, b, atol=1e-12)

    def test_softmax_backward_finite_difference(self):
        net = init_mlp(MlpSpec([4, 8, 3], output_activation="softmax"), seed=9)
        rng = np.random.default_rng(2)
        x = rng.normal(size=4)
        target = 1

        def loss():
            out, _ = forward(net, x)
            return float(-np.log(out[target]))

        out, tape = forward(net, x)
        dout = np.zeros(3)
        dout[target] = -1.0 / out[target]
        grads, _ = backward(net, tape, dout)
        numeric = finite_difference_gradients(loss, net.parameters())
        assert relative_gradient_error(grads.parameters(), numeric) < 1e-4


class TestAdam:
    def test_zero_gradient_no_change(self):
        net = init_mlp(MlpSpec([2, 4, 1]), seed=0)
        params = net.parameters()
        before = [p.copy() for p in params]
        state = AdamState.for_params(params, learning_rate=0.1)
        adam_step(params, [np.zeros_like(p) for p in params], state)
        assert state.step == 1
        assert all(np.array_equal(a, b) for a, b in zip(params, before))

    def test_first_step_magnitude(self):
        # step 1 with gradient g: m_hat = g, sqrt(v_hat) = |g|, so the
        # update is exactly lr * g / (|g| + eps)
        p = [np.array([1.0])]
        state = AdamState.for_params(p, learning_rate=0.01)
        adam_step(p, [np.array([0.5])], state)
        expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8)
        assert p[0][0] == pytest.approx(expected, abs=1e-12)

    def test_lr_zero_never_moves(self):
        rng = np.random.default_rng(0)
        p = [rng.normal(size=(3, 3))]
        before = [q.copy() for q in p]
        state = AdamState.for_params(p, learning_rate=0.0)
        for _ in range(5):
            adam_step(p, [rng.normal(size=(3, 3))], state)
        assert np.array_equal(p[0], before[0])

    def test_determinism(self):
        def run():
            net = init_mlp(MlpSpec([3, 8, 1]), seed=42)
            params = net.parameters()
            state = AdamState.for_params(params, learning_rate=0.01)
            rng = np.random.default_rng(7)
            for _ in range(20):
                x = rng.normal(size=3)
                out, tape = forward(net, x)
                grads, _ = backward(net, tape, np.array([2 * out[0]]))
                adam_step(params, grads.parameters(), state)
            return [p.copy() for p in params]

        a, b = run(), run()
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_non_finite_gradient_rejected(self):
        p = [np.array([1.0])]
        state = AdamState.for_params(p, learning_rate=0.01)
        with pytest.raises(TrainingDiverged):
            adam_step(p, [np.array([np.nan])], state)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        nets = {
            "f": init_mlp(MlpSpec([5, 16, 8], hidden_activation="softplus"), seed=1),
            "o": init_mlp(MlpSpec([8, 4, 1], output_activation="sigmoid"), seed=2),
        }
        rng = np.random.default_rng(0)
        codes = {"item0": rng.normal(size=8), "item1": rng.normal(size=8)}
        path = tmp_path / "ckpt.unrg"
        save_checkpoint(nets, codes, path)
        nets2, codes2 = load_checkpoint(path)
        assert set(nets2) == set(nets)
        for name in nets:
            assert nets2[name].spec == nets[name].spec
            for a, b in zip(nets[name].parameters(), nets2[name].parameters()):
                assert np.array_equal(a, b)
        for name in codes:
            assert np.array_equal(codes[name], codes2[name])

    def test_corrupted_tail_checksum(self, tmp_path):
        path = tmp_path / "ckpt.unrg"
        save_tensors({"a": np.arange(4.0)}, path)
        blob = bytearray(path.read_bytes())
        blob[-6] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_tensors(path)

    def test_version_mismatch(self, tmp_path):
        import struct
        import zlib

        path = tmp_path / "ckpt.unrg"
        save_tensors({"a": np.arange(4.0)}, path)
        blob = bytearray(path.read_bytes())[:-4]
        blob[4:8] = struct.pack("<I", 99)
        blob += struct.pack("<I", zlib.crc32(bytes(blob)))
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_tensors(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "ckpt.unrg"
        save_tensors({"a": np.arange(100.0)}, path)
        blob = path.read_bytes()[:50]
        path.write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_tensors(path)

    def test_scalar_and_rank3_tensors(self, tmp_path):
        path = tmp_path / "t.unrg"
        tensors = {"scalar": np.float64(3.5), "cube": np.arange(24.0).reshape(2, 3, 4)}
        save_tensors(tensors, path)
        back = load_tensors(path)
        assert back["scalar"].shape == ()
        assert float(back["scalar"]) == 3.5
        assert np.array_equal(back["cube"], tensors["cube"])

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_tensors({"bad": np.array([np.inf])}, tmp_path / "x.unrg")


class TestInit:
    def test_zero_last_layer_constant_zero(self):
        net = init_mlp(MlpSpec([5, 8, 8, 3]), seed=0, zero_last_layer=True)
        rng = np.random.default_rng(1)
        out, _ = forward(net, rng.normal(size=(10, 5)))
        assert np.array_equal(out, np.zeros((10, 3)))

    def test_seeded_reproducibility(self):
        a = init_mlp(MlpSpec([4, 8, 2]), seed=3)
        b = init_mlp(MlpSpec([4, 8, 2]), seed=3)
        assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            MlpSpec([4])
        with pytest.raises(ValueError):
            MlpSpec([4, 0, 2])
        with pytest.raises(ValueError):
            MlpSpec([4, 2], hidden_activation="tanh")
