import numpy as np
import pytest

from oracles import dense_forward, exact_dropout_variance, fd_gradients, rel_error
from uedhvac.neural import (
    AdamState,
    CheckpointError,
    NetworkParams,
    adam_update,
    backward,
    forward,
    init_network,
    load_arrays,
    load_network,
    mc_uncertainty,
    mc_uncertainty_grad,
    sample_mask,
    save_arrays,
    save_network,
)


def net64(sizes, seed, dropout=0.0):
    return init_network(sizes, dropout, np.random.default_rng(seed), dtype=np.float64)


class TestForward:
    def test_zero_network(self):
        p = NetworkParams([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
        np.testing.assert_array_equal(forward(np.ones(3), p), np.zeros(2))

    def test_one_by_one(self):
        p = NetworkParams([np.array([[3.0]])], [np.array([1.0])])
        assert forward(np.array([2.0]), p)[0] == 7.0

    def test_full_zero_mask_gives_bias_chain(self):
        p = net64([3, 5, 4, 2], 0)
        p.biases = [np.full(5, 0.3), np.full(4, -0.2), np.array([0.5, -1.0])]
        masks = [np.zeros(5), np.zeros(4)]
        expect = np.maximum(-0.2, 0) * 0 + np.array([0.5, -1.0])
        np.testing.assert_allclose(forward(np.ones(3), p, masks), expect)

    def test_matches_reference_and_batch(self, rng):
        p = net64([4, 8, 8, 2], 1)
        masks = [(rng.random(8) > 0.3).astype(float) for _ in range(2)]
        x = rng.standard_normal((6, 4))
        got = forward(x, p, masks)
        for i in range(6):
            np.testing.assert_allclose(got[i], dense_forward(x[i], p.weights, p.biases, masks), atol=1e-12)

    def test_p0_mask_equals_no_mask(self, rng):
        p = net64([4, 8, 8, 1], 2)
        x = rng.standard_normal(4)
        np.testing.assert_array_equal(forward(x, p, sample_mask(p, rng, p=0.0)), forward(x, p))

    def test_train_scale(self, rng):
        p = net64([4, 8, 1], 3, dropout=0.25)
        m = [np.ones(8)]
        x = rng.standard_normal(4)
        h = np.maximum(x @ p.weights[0] + p.biases[0], 0) / 0.75
        np.testing.assert_allclose(forward(x, p, m, train_scale=True), h @ p.weights[1] + p.biases[1])

    def test_shape_errors(self):
        p = net64([4, 8, 1], 0)
        with pytest.raises(ValueError):
            forward(np.ones(5), p)
        with pytest.raises(ValueError):
            forward(np.ones(4), p, [np.ones(7)])
        with pytest.raises(ValueError):
            NetworkParams([np.zeros((3, 4)), np.zeros((5, 1))], [np.zeros(4), np.zeros(1)])


class TestBackward:
    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        p = net64([4, 8, 8, 1], seed)
        for b in p.biases:
            b[:] = rng.uniform(-0.1, 0.1, b.shape)
        masks = [(rng.random(8) > 0.3).astype(float) for _ in range(2)]
        x = rng.standard_normal(4)
        up = rng.standard_normal(1)
        g = backward(x, p, masks, up)
        gw, gb, gx = fd_gradients(p, x, masks, up)
        for a, b in zip(g.weights + g.biases, gw + gb):
            assert rel_error(a, b) <= 1e-4
        assert rel_error(g.inputs, gx) <= 1e-4

    def test_zero_upstream(self, rng):
        p = net64([4, 8, 2], 0)
        g = backward(rng.standard_normal(4), p, None, np.zeros(2))
        for a in g.arrays() + [g.inputs]:
            assert not np.any(a)

    def test_batched_is_sum_of_single(self, rng):
        p = net64([4, 8, 2], 5)
        x = rng.standard_normal((3, 4))
        up = rng.standard_normal((3, 2))
        gb = backward(x, p, None, up)
        singles = [backward(x[i], p, None, up[i]) for i in range(3)]
        for k, a in enumerate(gb.arrays()):
            np.testing.assert_allclose(a, sum(s.arrays()[k] for s in singles), atol=1e-12)

    def test_upstream_shape_checked(self):
        p = net64([4, 8, 2], 0)
        with pytest.raises(ValueError):
            backward(np.ones(4), p, None, np.ones(3))


class TestAdam:
    def test_constant_gradient_step_tends_to_lr(self):
        w = [np.zeros(3)]
        st = AdamState.zeros_like(w)
        lr = 0.01
        prev = w[0].copy()
        for _ in range(2000):
            adam_update(w, [np.array([0.5, -2.0, 7.0])], st, lr)
            step = w[0] - prev
            prev = w[0].copy()
        np.testing.assert_allclose(np.abs(step), lr, rtol=1e-5)

    def test_zero_gradient(self):
        w = [np.array([1.0, 2.0])]
        st = AdamState.zeros_like(w)
        adam_update(w, [np.zeros(2)], st, 0.1)
        np.testing.assert_array_equal(w[0], [1.0, 2.0])

    def test_first_step_scale_invariant(self):
        w = [np.zeros(2)]
        st = AdamState.zeros_like(w)
        adam_update(w, [np.array([0.3, 3.0])], st, 0.1)
        assert abs(w[0][0]) == pytest.approx(abs(w[0][1]), rel=1e-6)


class TestUncertainty:
    def test_zero_cases(self, rng):
        p = net64([3, 16, 16, 1], 0, dropout=0.3)
        x = rng.standard_normal(3)
        assert mc_uncertainty(x, p, 50, rng, p=0.0) == 0.0
        assert mc_uncertainty(x, p, 1, rng) == 0.0

    def test_matches_mask_enumeration(self):
        p = net64([3, 2, 1], 4, dropout=0.5)
        p.biases[0][:] = 0.2
        x = np.array([0.7, -0.4, 1.1])
        exact = exact_dropout_variance(p, x, 0.5)
        est = mc_uncertainty(x, p, 100_000, np.random.default_rng(0), p=0.5)
        assert exact > 0
        assert est == pytest.approx(exact, rel=0.02)

    def test_nonnegative_and_deterministic(self, rng):
        p = net64([3, 16, 1], 1, dropout=0.2)
        x = rng.standard_normal(3)
        a = mc_uncertainty(x, p, 10, np.random.default_rng(7))
        b = mc_uncertainty(x, p, 10, np.random.default_rng(7))
        assert a == b and a >= 0

    def test_gradient_matches_finite_difference_with_fixed_masks(self):
        # with a fixed seed every evaluation draws the same masks, so FD is exact
        p = net64([3, 8, 8, 1], 2, dropout=0.3)
        x = np.array([0.3, -0.5, 0.9])
        _, g = mc_uncertainty_grad(x, p, 20, np.random.default_rng(3))
        h = 1e-6
        fd = np.zeros(3)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd[i] = (mc_uncertainty(x + e, p, 20, np.random.default_rng(3))
                     - mc_uncertainty(x - e, p, 20, np.random.default_rng(3))) / (2 * h)
        assert rel_error(g, fd) <= 1e-4


class TestCheckpoint:
    def test_network_round_trip(self, tmp_path):
        p = init_network([17, 32, 32, 2], 0.1, np.random.default_rng(0))
        path = tmp_path / "net.bin"
        save_network(path, p)
        q = load_network(path, like=p)
        assert q.dropout == pytest.approx(0.1)
        for a, b in zip(p.arrays(), q.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_manifest_mismatch(self, tmp_path):
        p = init_network([4, 8, 1], 0.0)
        path = tmp_path / "net.bin"
        save_network(path, p)
        with pytest.raises(CheckpointError, match="manifest"):
            load_network(path, like=init_network([4, 9, 1], 0.0))

    def test_corruption(self, tmp_path):
        path = tmp_path / "a.bin"
        save_arrays(path, {"x": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"k": 1})
        arrays, meta = load_arrays(path, {"x": (2, 3)})
        assert meta == {"k": 1}
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(CheckpointError, match="truncated"):
            load_arrays(path)
        path.write_bytes(raw + b"\0")
        with pytest.raises(CheckpointError, match="trailing"):
            load_arrays(path)
        path.write_bytes(b"XXXXXXXX" + raw[8:])
        with pytest.raises(CheckpointError, match="magic"):
            load_arrays(path)
        with pytest.raises(CheckpointError, match="no such"):
            load_arrays(tmp_path / "missing.bin")

    def test_little_endian_float32_layout(self, tmp_path):
        path = tmp_path / "a.bin"
        save_arrays(path, {"v": np.array([1.5, -2.0])})
        assert path.read_bytes()[-8:] == np.array([1.5, -2.0], dtype="<f4").tobytes()
