import numpy as np
import pytest

from stnas import tensor as T


def t5(arr, requires_grad=False, dtype=np.float32):
    return T.Tensor(np.asarray(arr, dtype=dtype), requires_grad=requires_grad)


def rand5(rng, shape, dtype=np.float64):
    return T.Tensor(rng.normal(shape, dtype=dtype), requires_grad=True)


class TestBackwardBasics:
    def test_sum_grad_is_ones(self):
        x = t5(np.zeros((1, 1, 1, 2, 2)), requires_grad=True)
        with T.Tape() as tape:
            y = T.sum_all(x)
        g = T.backward(tape, y)
        assert np.array_equal(g[x.slot], np.ones((1, 1, 1, 2, 2), dtype=np.float32))

    def test_square_grad(self):
        x = T.make_tensor([1.0, 2.0, 3.0, 4.0], shape=(1, 1, 1, 2, 2), requires_grad=True)
        with T.Tape() as tape:
            y = T.sum_all(T.mul(x, x))
        g = T.backward(tape, y)
        assert np.allclose(g[x.slot].ravel(), [2, 4, 6, 8])

    def test_relu_subgradient_zero_at_zero(self):
        x = T.make_tensor([-1.0, 0.5, 0.0, 2.0], shape=(1, 1, 1, 2, 2), requires_grad=True)
        with T.Tape() as tape:
            y = T.sum_all(T.relu(x))
        g = T.backward(tape, y)
        assert np.array_equal(g[x.slot].ravel(), [0, 1, 0, 1])

    def test_fanout_accumulates_by_sum(self):
        # f(x) = g(x) + h(x) with g = sum(2x), h = sum(x*x)
        x = T.make_tensor([1.0, -2.0], shape=(1, 1, 1, 1, 2), requires_grad=True)
        with T.Tape() as tape:
            y = T.add(T.sum_all(T.scale(x, 2.0)), T.sum_all(T.mul(x, x)))
        g = T.backward(tape, y)
        assert np.allclose(g[x.slot].ravel(), [2 + 2 * 1.0, 2 + 2 * (-2.0)])

    def test_shared_upstream_grad_not_corrupted(self):
        # add returns the same grad array for both inputs; accumulation on one
        # side must not leak into the other
        x = t5(np.ones((1, 1, 1, 1, 2)), requires_grad=True)
        z = t5(np.ones((1, 1, 1, 1, 2)), requires_grad=True)
        with T.Tape() as tape:
            s = T.add(x, z)
            y = T.add(T.sum_all(s), T.sum_all(x))  # x used twice
        g = T.backward(tape, y)
        assert np.allclose(g[x.slot].ravel(), [2, 2])
        assert np.allclose(g[z.slot].ravel(), [1, 1])

    def test_non_scalar_loss_rejected(self):
        x = t5(np.ones((1, 1, 1, 1, 2)), requires_grad=True)
        with T.Tape() as tape:
            y = T.relu(x)
        with pytest.raises(T.ShapeError):
            T.backward(tape, y)

    def test_wrt_restricts_and_skips(self):
        x = t5(np.ones((1, 1, 1, 1, 2)), requires_grad=True)
        w = t5(np.full((1, 1, 1, 1, 2), 3.0), requires_grad=True)
        with T.Tape() as tape:
            y = T.sum_all(T.mul(x, w))
        g = T.backward(tape, y, wrt=[w])
        assert set(g) == {w.slot}
        assert np.allclose(g[w.slot].ravel(), [1, 1])


class TestFiniteDifference:
    def test_sum_of_squares(self):
        rng = T.Rng(0, "fd")
        x = rand5(rng, (1, 1, 1, 2, 3))
        err = T.finite_difference_check(lambda t: T.sum_all(T.mul(t, t)), x, eps=1e-5)
        assert err < 1e-7

    def test_softmax_cross_entropy_4class(self):
        rng = T.Rng(1, "fd")
        x = rand5(rng, (1, 4, 1, 1, 1))
        labels = np.array([2])

        def f(t):
            return T.softmax_cross_entropy(t, labels)

        err = T.finite_difference_check(f, x, eps=1e-5)
        assert err < 1e-6

    def test_separable_conv_chain(self):
        # 1x3x3 depthwise + pointwise on shape [1,4,2,6,6]
        rng = T.Rng(2, "fd")
        x = rand5(rng, (1, 4, 2, 6, 6))
        dw = rand5(rng, (4, 1, 1, 3, 3))
        pw = rand5(rng, (4, 4, 1, 1, 1))

        def f(t):
            y = T.conv5d(t, dw, groups=4)
            y = T.conv5d(y, pw)
            return T.sum_all(T.mul(y, y))

        err = T.finite_difference_check(f, x, eps=1e-5)
        assert err < 1e-5

    @pytest.mark.parametrize("seed", range(20))
    def test_primitives_randomized(self, seed):
        # every differentiable primitive probed with a fixed random cotangent
        rng = T.Rng(seed, "prop")
        x = rand5(rng, (2, 3, 2, 4, 4))
        w1 = rand5(rng, (3, 3, 1, 3, 3))
        wd = rand5(rng, (3, 1, 1, 3, 3))
        wt = rand5(rng, (3, 3, 3, 1, 1))

        def probe(make):
            cot = {}

            def f(t):
                y = make(t)
                if y.shape not in cot:
                    cot[y.shape] = T.Tensor(T.Rng(seed, "cot").normal(y.shape, dtype=np.float64))
                return T.sum_all(T.mul(y, cot[y.shape]))

            return f

        checks = {
            "conv": probe(lambda t: T.conv5d(t, w1)),
            "conv_stride": probe(lambda t: T.conv5d(t, w1, stride=(1, 2, 2))),
            "conv_dilated": probe(lambda t: T.conv5d(t, w1, dilation=(1, 2, 2))),
            "depthwise": probe(lambda t: T.conv5d(t, wd, groups=3)),
            "temporal": probe(lambda t: T.conv5d(t, wt)),
            "avg_pool": probe(lambda t: T.avg_pool_1x3x3(t)),
            "max_pool": probe(lambda t: T.max_pool_1x3x3(t)),
            "gap": probe(lambda t: T.global_avg_pool(t)),
            "relu": probe(lambda t: T.relu(t)),
        }
        for name, f in checks.items():
            err = T.finite_difference_check(f, x, eps=1e-5)
            assert err < 1e-5, f"{name}: {err}"

    def test_weight_gradient_via_closure(self):
        rng = T.Rng(7, "fd")
        x = T.Tensor(rng.normal((1, 2, 2, 5, 5), dtype=np.float64))
        w = rand5(rng, (2, 2, 1, 3, 3))

        def f(wt):
            y = T.conv5d(x, wt)
            return T.sum_all(T.mul(y, y))

        err = T.finite_difference_check(f, w, eps=1e-5)
        assert err < 1e-5

    def test_batch_norm_train_grad(self):
        rng = T.Rng(3, "fd")
        x = rand5(rng, (2, 3, 2, 3, 3))
        gamma = rand5(rng, (1, 3, 1, 1, 1))
        beta = rand5(rng, (1, 3, 1, 1, 1))
        cot = T.Tensor(T.Rng(3, "cot").normal(x.shape, dtype=np.float64))

        def f(t):
            rm = np.zeros(3, dtype=np.float64)
            rv = np.ones(3, dtype=np.float64)
            y = T.batch_norm(t, gamma, beta, rm, rv, training=True)
            return T.sum_all(T.mul(y, cot))

        assert T.finite_difference_check(f, x, eps=1e-5) < 1e-5

        def fg(gt):
            rm = np.zeros(3, dtype=np.float64)
            rv = np.ones(3, dtype=np.float64)
            y = T.batch_norm(x, gt, beta, rm, rv, training=True)
            return T.sum_all(T.mul(y, cot))

        assert T.finite_difference_check(fg, gamma, eps=1e-5) < 1e-5

    def test_softmax_rows_and_mixed_combine(self):
        rng = T.Rng(4, "fd")
        alpha = rand5(rng, (3, 4, 1, 1, 1))
        xs = [T.Tensor(rng.normal((1, 2, 1, 3, 3), dtype=np.float64)) for _ in range(4)]

        def f(a):
            p = T.softmax_rows(a)
            row = T.gather_row(p, 1)
            y = T.mixed_combine(xs, row)
            return T.sum_all(T.mul(y, y))

        assert T.finite_difference_check(f, alpha, eps=1e-5) < 1e-5


class TestPrimValues:
    def test_conv_same_padding_ones(self):
        x = t5(np.ones((1, 1, 1, 3, 3)))
        w = t5(np.ones((1, 1, 1, 3, 3)))
        y = T.conv5d(x, w)
        expect = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float32)
        assert np.array_equal(y.data[0, 0, 0], expect)

    def test_conv_identity_kernel(self):
        rng = T.Rng(5, "val")
        x = T.Tensor(rng.normal((1, 1, 2, 4, 4)))
        w = np.zeros((1, 1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 0, 1, 1] = 1.0
        y = T.conv5d(x, t5(w))
        assert np.array_equal(y.data, x.data)

    def test_conv_dilated_center(self):
        x = t5(np.ones((1, 1, 1, 7, 7)))
        w = t5(np.ones((1, 1, 1, 3, 3)))
        y = T.conv5d(x, w, dilation=(1, 2, 2))
        # taps at +-2 offsets are all inside a 7x7 frame at the center
        assert y.data[0, 0, 0, 3, 3] == 9.0

    def test_conv_output_extent_ceil(self):
        x = t5(np.ones((1, 2, 5, 9, 9)))
        w = t5(np.ones((4, 2, 1, 3, 3)))
        y = T.conv5d(x, w, stride=(2, 2, 2))
        assert y.shape == (1, 4, 3, 5, 5)

    def test_max_pool_matches_bruteforce(self):
        rng = T.Rng(6, "val")
        x = T.Tensor(rng.normal((2, 3, 2, 5, 5)))
        y = T.max_pool_1x3x3(x, stride=(1, 1, 1))
        N, C, Tt, H, W = x.shape
        xp = np.pad(x.data, ((0, 0),) * 2 + ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
        for n in range(N):
            for c in range(C):
                for t in range(Tt):
                    for i in range(H):
                        for j in range(W):
                            win = xp[n, c, t, i : i + 3, j : j + 3]
                            assert y.data[n, c, t, i, j] == win.max()

    def test_softmax_cross_entropy_values(self):
        logits = T.make_tensor(
            np.zeros(4, dtype=np.float32), shape=(1, 4, 1, 1, 1)
        )
        loss = T.softmax_cross_entropy(logits, np.array([0]))
        assert abs(loss.item() - np.log(4.0)) < 1e-6

        logits = T.make_tensor([2.0, 1.0, 0.0, -1.0], shape=(1, 4, 1, 1, 1))
        loss = T.softmax_cross_entropy(logits, np.array([0]))
        assert abs(loss.item() - 0.4402) < 1e-4

    def test_large_logit_gap_drives_loss_to_zero(self):
        logits = T.make_tensor([40.0, 0.0, 0.0, 0.0], shape=(1, 4, 1, 1, 1))
        loss = T.softmax_cross_entropy(logits, np.array([0]))
        assert loss.item() < 1e-6

    def test_topk_tie_break_by_class_index(self):
        logits = np.zeros((3, 8, 1, 1, 1), dtype=np.float32)
        labels = np.array([0, 1, 7])
        assert T.topk_hits(logits, labels, 1) == 1  # only class 0 wins ties
        assert T.topk_hits(logits, labels, 5) == 2

    def test_batch_norm_standardizes(self):
        rng = T.Rng(8, "val")
        x = T.Tensor(rng.normal((4, 2, 3, 5, 5)) * 2.0 + 5.0)
        rm = np.zeros(2, dtype=np.float32)
        rv = np.ones(2, dtype=np.float32)
        y = T.batch_norm(x, None, None, rm, rv, training=True)
        mean = y.data.mean(axis=(0, 2, 3, 4))
        var = y.data.var(axis=(0, 2, 3, 4))
        assert np.all(np.abs(mean) < 1e-5)
        assert np.all(np.abs(var - 1) < 1e-4)

    def test_batch_norm_affine(self):
        rng = T.Rng(9, "val")
        x = T.Tensor(rng.normal((4, 2, 3, 5, 5)))
        gamma = t5(np.full((1, 2, 1, 1, 1), 2.0))
        beta = t5(np.ones((1, 2, 1, 1, 1)))
        rm = np.zeros(2, dtype=np.float32)
        rv = np.ones(2, dtype=np.float32)
        y = T.batch_norm(x, gamma, beta, rm, rv, training=True)
        assert np.all(np.abs(y.data.mean(axis=(0, 2, 3, 4)) - 1.0) < 1e-5)
        assert np.all(np.abs(y.data.std(axis=(0, 2, 3, 4)) - 2.0) < 1e-3)

    def test_batch_norm_running_update(self):
        rng = T.Rng(10, "val")
        x = T.Tensor(rng.normal((4, 2, 3, 5, 5)) + 3.0)
        rm = np.zeros(2, dtype=np.float32)
        rv = np.ones(2, dtype=np.float32)
        T.batch_norm(x, None, None, rm, rv, training=True)
        batch_mean = x.data.mean(axis=(0, 2, 3, 4))
        batch_var = x.data.var(axis=(0, 2, 3, 4))
        assert np.allclose(rm, 0.1 * batch_mean, atol=1e-6)
        assert np.allclose(rv, 0.9 * 1.0 + 0.1 * batch_var, atol=1e-6)

    def test_batch_norm_eval_uses_running(self):
        x = t5(np.full((2, 1, 1, 2, 2), 7.0))
        rm = np.full(1, 5.0, dtype=np.float32)
        rv = np.full(1, 4.0, dtype=np.float32)
        y = T.batch_norm(x, None, None, rm, rv, training=False)
        assert np.allclose(y.data, (7.0 - 5.0) / np.sqrt(4.0 + 1e-5), atol=1e-6)


class TestStochastic:
    def test_dropout_identity_cases(self):
        rng = T.Rng(0, "do")
        x = t5(np.ones((4, 3, 1, 1, 1)))
        assert T.dropout(x, 0.0, rng, True) is x
        assert T.dropout(x, 0.5, rng, False) is x

    def test_drop_path_identity_cases(self):
        rng = T.Rng(0, "dp")
        x = t5(np.ones((4, 3, 2, 2, 2)))
        assert T.drop_path(x, 0.0, rng, True) is x
        assert T.drop_path(x, 0.3, rng, False) is x

    def test_drop_path_zeroes_whole_samples(self):
        rng = T.Rng(123, "dp")
        x = t5(np.ones((64, 2, 1, 2, 2)))
        y = T.drop_path(x, 0.5, rng, True)
        per_sample = y.data.reshape(64, -1)
        for row in per_sample:
            assert np.all(row == 0.0) or np.allclose(row, 2.0)

    def test_drop_path_preserves_expectation(self):
        # E[drop_path(x)] = x, Monte Carlo over 1e4 draws
        p = 0.1
        draws = 10_000
        rng = T.Rng(7, "dp-mc")
        acc = 0.0
        for _ in range(draws):
            m = rng.keep_mask((1,), p) / (1.0 - p)
            acc += float(m[0])
        mean = acc / draws
        sigma = np.sqrt(p / (1 - p) / draws)  # std of the scaled Bernoulli mean
        assert abs(mean - 1.0) < 3 * sigma


class TestRngAndInit:
    def test_same_seed_bit_identical(self):
        a = T.Rng(42, "s").normal((3, 4))
        b = T.Rng(42, "s").normal((3, 4))
        assert np.array_equal(a, b)

    def test_streams_differ(self):
        a = T.Rng(42, "s1").normal((8,))
        b = T.Rng(42, "s2").normal((8,))
        assert not np.array_equal(a, b)

    def test_bn_init_values(self):
        rng = T.Rng(0, "init")
        g = T.seeded_init("bn-gamma-one", (1, 8, 1, 1, 1), rng)
        b = T.seeded_init("bn-beta-zero", (1, 8, 1, 1, 1), rng)
        assert np.array_equal(g.data.ravel(), np.ones(8, dtype=np.float32))
        assert np.array_equal(b.data.ravel(), np.zeros(8, dtype=np.float32))

    def test_alpha_init_small_and_frozen(self):
        rng = T.Rng(0, "alpha")
        a = T.seeded_init("alpha-small-normal", (3, 1, 1, 1, 1), rng)
        assert np.all(np.abs(a.data) < 0.01)
        # golden values pinned to the documented philox4x64 stream
        again = T.seeded_init("alpha-small-normal", (3, 1, 1, 1, 1), T.Rng(0, "alpha"))
        assert np.array_equal(a.data, again.data)

    def test_conv_init_std_param(self):
        # 1x1x1 conv with C_in=2: std = sqrt(2/2) = 1
        rng = T.Rng(0, "init")
        w = T.seeded_init("conv-fan-in-normal", (64, 2, 1, 1, 1), rng)
        assert abs(w.data.std() - 1.0) < 0.15

    def test_zero_fan_in_rejected(self):
        with pytest.raises(ValueError):
            T.seeded_init("conv-fan-in-normal", (4, 0, 1, 3, 3), T.Rng(0))

    def test_seeded_compute_bit_identical(self):
        def run():
            rng = T.Rng(11, "repro")
            x = T.Tensor(rng.normal((2, 3, 2, 4, 4)))
            w = T.Tensor(rng.normal((3, 3, 1, 3, 3)), requires_grad=True)
            with T.Tape() as tape:
                y = T.sum_all(T.relu(T.conv5d(x, w)))
            g = T.backward(tape, y)
            return y.item(), g[w.slot].copy()

        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2
        assert np.array_equal(g1, g2)


class TestGuards:
    def test_rank5_enforced(self):
        with pytest.raises(T.ShapeError):
            T.Tensor(np.zeros((2, 3)))

    def test_finite_check_on_tape(self):
        x = t5(np.array([1.0]).reshape(1, 1, 1, 1, 1), requires_grad=True)
        big = t5(np.array([1e38]).reshape(1, 1, 1, 1, 1))
        with pytest.raises(T.NonFiniteError):
            with T.Tape(check_finite=True):
                y = T.mul(T.add(x, big), big)  # overflows float32

    def test_nonfinite_loss_rejected(self):
        x = t5(np.array([np.inf]).reshape(1, 1, 1, 1, 1), requires_grad=True)
        with T.Tape() as tape:
            y = T.scale(x, 1.0)
        with pytest.raises(T.NonFiniteError):
            T.backward(tape, y)

    def test_fd_check_requires_float64(self):
        x = t5(np.ones((1, 1, 1, 1, 1)), requires_grad=True)
        with pytest.raises(T.TensorError):
            T.finite_difference_check(lambda t: T.sum_all(t), x)
