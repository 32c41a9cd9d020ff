import numpy as np
import pytest

from mtdpool.data import Dataset, gen_blobs
from mtdpool.errors import RejectedInput
from mtdpool.models import (Model, accuracy, forward, grad_loss, init_model,
                            load_model, loss_on, predict_proba, save_model,
                            train)


def small_model(seed=0, dims=(4, 6, 3)):
    return init_model(dims, seed)


def hand_222():
    w1 = np.array([[1.0, -1.0], [0.5, 2.0]])
    b1 = np.array([0.1, -0.2])
    w2 = np.array([[2.0, 0.0], [-1.0, 1.0]])
    b2 = np.array([0.0, 0.3])
    return Model((w1, w2), (b1, b2))


class TestForward:
    def test_softmax_sums_to_one(self):
        m = small_model()
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = forward(m, rng.uniform(0, 1, 4))
            assert abs(p.sum() - 1.0) <= 1e-9
            assert np.all(p >= 0) and np.all(p <= 1)

    def test_zero_model_is_uniform(self):
        m = Model((np.zeros((5, 3)), np.zeros((4, 5))),
                  (np.zeros(5), np.zeros(4)))
        p = forward(m, np.array([0.3, 0.9, 0.1]))
        assert np.allclose(p, 0.25)

    def test_hand_computed_2_2_2(self):
        m = hand_222()
        x = np.array([0.5, 0.25])
        h = np.maximum(m.weights[0] @ x + m.biases[0], 0.0)
        z = m.weights[1] @ h + m.biases[1]
        e = np.exp(z - z.max())
        assert np.allclose(forward(m, x), e / e.sum(), atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(RejectedInput):
            forward(small_model(), np.zeros(7))

    def test_batch_matches_single(self):
        m = small_model(3)
        xs = np.random.default_rng(2).uniform(0, 1, (10, 4))
        batch = predict_proba(m, xs)
        for i, x in enumerate(xs):
            assert np.allclose(batch[i], forward(m, x))


class TestGradients:
    def test_saturated_loss_vanishes(self):
        # model that is extremely confident and correct on class 0
        w = np.array([[50.0, 0.0], [-50.0, 0.0], [-50.0, 0.0]])
        m = Model((w,), (np.zeros(3),))
        grads, gx, loss = grad_loss(m, np.array([1.0, 0.0]), 0)
        assert loss < 1e-9
        assert np.linalg.norm(gx) < 1e-9

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        h = 1e-5
        for trial in range(5):
            dims = (3, rng.integers(2, 8), rng.integers(2, 6), 3)
            m = init_model(dims, int(rng.integers(1 << 30)))
            x = rng.uniform(0, 1, 3)
            y = int(rng.integers(0, 3))
            grads, gx, _ = grad_loss(m, x, y)
            # every parameter via central differences
            for li in range(len(m.weights)):
                for arr_idx, analytic in ((0, grads[li][0]), (1, grads[li][1])):
                    base = m.weights[li] if arr_idx == 0 else m.biases[li]
                    it = np.nditer(base, flags=["multi_index"])
                    for _ in it:
                        idx = it.multi_index
                        num = _fd_param(m, x, y, li, arr_idx, idx, h)
                        denom = max(abs(num), abs(analytic[idx]), 1e-8)
                        assert abs(num - analytic[idx]) / denom < 1e-4
            for j in range(len(x)):
                num = _fd_input(m, x, y, j, h)
                denom = max(abs(num), abs(gx[j]), 1e-8)
                assert abs(num - gx[j]) / denom < 1e-4

    def test_deterministic(self):
        m = small_model(5)
        x = np.full(4, 0.25)
        g1 = grad_loss(m, x, 1)
        g2 = grad_loss(m, x, 1)
        assert g1[2] == g2[2]
        assert np.array_equal(g1[1], g2[1])
        for (dw1, db1), (dw2, db2) in zip(g1[0], g2[0]):
            assert np.array_equal(dw1, dw2) and np.array_equal(db1, db2)


def _perturbed(model, li, arr_idx, idx, delta):
    ws = [w.copy() for w in model.weights]
    bs = [b.copy() for b in model.biases]
    (ws if arr_idx == 0 else bs)[li][idx] += delta
    return Model(tuple(ws), tuple(bs))


def _fd_param(model, x, y, li, arr_idx, idx, h):
    lo = loss_on(_perturbed(model, li, arr_idx, idx, -h), x, [y])
    hi = loss_on(_perturbed(model, li, arr_idx, idx, +h), x, [y])
    return (hi - lo) / (2 * h)


def _fd_input(model, x, y, j, h):
    xp, xm = x.copy(), x.copy()
    xp[j] += h
    xm[j] -= h
    return (loss_on(model, xp, [y]) - loss_on(model, xm, [y])) / (2 * h)


class TestTrain:
    def test_zero_epochs_is_identity(self):
        m = small_model(7)
        data = gen_blobs(3, 10, 4, 0.5, seed=1)
        out = train(m, data, 0, 0.1, 3)
        assert out is m

    def test_blobs_reach_95_percent(self):
        # 64-32 hidden stack on well-separated clusters
        full = gen_blobs(3, 200, 16, 0.3, seed=13, sigma=0.05)
        order = np.random.default_rng(0).permutation(len(full))
        tr = Dataset(full.x[order[:450]], full.y[order[:450]])
        te = Dataset(full.x[order[450:]], full.y[order[450:]], split="test")
        m = init_model((16, 64, 32, 3), 42)
        m = train(m, tr, 50, 0.05, seed=1, batch_size=32)
        assert accuracy(m, te) > 0.95

    def test_loss_non_increasing_full_batch(self):
        data = gen_blobs(3, 60, 8, 0.4, seed=3, sigma=0.05)
        m = init_model((8, 16, 3), 9)
        losses = [loss_on(m, data.x, data.y)]
        for _ in range(5):
            m = train(m, data, 1, 0.01, seed=0)
            losses.append(loss_on(m, data.x, data.y))
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_bit_identical_under_seed(self):
        data = gen_blobs(3, 30, 6, 0.4, seed=5)
        m = init_model((6, 12, 3), 21)
        a = train(m, data, 8, 0.05, seed=77, batch_size=16)
        b = train(m, data, 8, 0.05, seed=77, batch_size=16)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)
        for ba, bb in zip(a.biases, b.biases):
            assert np.array_equal(ba, bb)

    def test_empty_dataset_rejected(self):
        m = small_model()
        empty = Dataset(np.zeros((0, 4)), np.zeros(0, dtype=int))
        with pytest.raises(RejectedInput):
            train(m, empty, 1, 0.1, 0)
        with pytest.raises(RejectedInput):
            accuracy(m, empty)


class TestAccuracy:
    def test_perfect_and_zero(self):
        w = np.array([[10.0, 0.0], [0.0, 10.0]])
        m = Model((w,), (np.zeros(2),))
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        right = Dataset(x, np.array([0, 1]))
        wrong = Dataset(x, np.array([1, 0]))
        assert accuracy(m, right) == 1.0
        assert accuracy(m, wrong) == 0.0

    def test_three_of_five(self):
        w = np.array([[10.0, 0.0], [0.0, 10.0]])
        m = Model((w,), (np.zeros(2),))
        x = np.array([[1, 0], [1, 0], [1, 0], [0, 1], [0, 1]], dtype=float)
        y = np.array([0, 0, 0, 0, 0])
        assert accuracy(m, Dataset(x, y)) == pytest.approx(0.6)


class TestModelFile:
    def test_round_trip_bit_exact(self, tmp_path):
        m = init_model((5, 9, 4), 123)
        path = tmp_path / "m.model"
        save_model(m, path)
        loaded = load_model(path)
        assert loaded.arch_id == m.arch_id
        for wa, wb in zip(m.weights, loaded.weights):
            assert wa.tobytes() == wb.tobytes()
        for ba, bb in zip(m.biases, loaded.biases):
            assert ba.tobytes() == bb.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.model"
        path.write_bytes(b"not a model\n")
        with pytest.raises(RejectedInput):
            load_model(path)

    def test_arch_id_shared_dims(self):
        a = init_model((4, 8, 2), 0)
        b = init_model((4, 8, 2), 99)
        assert a.arch_id == b.arch_id
        assert a.arch_id != init_model((4, 9, 2), 0).arch_id
