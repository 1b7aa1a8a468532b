import numpy as np
import pytest

from gaitlab import autodiff as ad
from gaitlab.autodiff import (BatchNorm2ChState, Parameter, Tensor, batchnorm_2ch,
                              concat, grad_check, l2_normalize, layer_norm, linear,
                              msa, no_grad)
from gaitlab.errors import (DegenerateEmbedding, EmptyBatch, HeadConfigError,
                            ShapeError)


def numeric_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f(x) w.r.t. array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_op(build, shapes, seed, rtol=1e-5, atol=1e-7):
    """Compare analytic and numeric gradients of scalar build(*params)."""
    rng = np.random.default_rng(seed)
    params = [Parameter(rng.normal(0, 1, size=s), f"p{i}")
              for i, s in enumerate(shapes)]
    for p in params:
        p.zero_grad()
    build(*params).backward()
    for p in params:
        with no_grad():
            num = numeric_grad(lambda: build(*params).item(), p.data)
        np.testing.assert_allclose(p.grad, num, rtol=rtol, atol=atol)


class TestElementwiseGrads:
    def test_add_broadcast(self):
        check_op(lambda a, b: (a + b).sum(), [(3, 4), (4,)], seed=0)

    def test_sub(self):
        check_op(lambda a, b: ((a - b) * (a - b)).sum(), [(5,), (5,)], seed=1)

    def test_mul_broadcast(self):
        check_op(lambda a, b: (a * b).sum(), [(2, 3, 4), (3, 1)], seed=2)

    def test_div(self):
        rng = np.random.default_rng(3)
        a = Parameter(rng.normal(size=(4, 4)), "a")
        b = Parameter(rng.uniform(1.0, 2.0, size=(4, 4)), "b")
        for p in (a, b):
            p.zero_grad()
        (a / b).sum().backward()
        with no_grad():
            na = numeric_grad(lambda: (a / b).sum().item(), a.data)
            nb = numeric_grad(lambda: (a / b).sum().item(), b.data)
        np.testing.assert_allclose(a.grad, na, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(b.grad, nb, rtol=1e-5, atol=1e-8)

    def test_pow(self):
        rng = np.random.default_rng(4)
        a = Parameter(rng.uniform(0.5, 2.0, size=(6,)), "a")
        a.zero_grad()
        (a ** 3).sum().backward()
        np.testing.assert_allclose(a.grad, 3 * a.data ** 2, rtol=1e-12)

    def test_sqrt_exp(self):
        rng = np.random.default_rng(5)
        a = Parameter(rng.uniform(0.5, 2.0, size=(3, 3)), "a")
        a.zero_grad()
        (a.sqrt() + a.exp()).sum().backward()
        np.testing.assert_allclose(a.grad, 0.5 / np.sqrt(a.data) + np.exp(a.data),
                                   rtol=1e-12)

    def test_relu_gradient_mask(self):
        a = Parameter(np.array([-2.0, -0.5, 0.5, 3.0]), "a")
        a.zero_grad()
        a.relu().sum().backward()
        np.testing.assert_array_equal(a.grad, [0.0, 0.0, 1.0, 1.0])

    def test_neg(self):
        check_op(lambda a: (-a * a).sum(), [(7,)], seed=6)


class TestMatmulGrads:
    def test_plain(self):
        check_op(lambda a, b: (a @ b).sum(), [(3, 4), (4, 5)], seed=7)

    def test_batched(self):
        check_op(lambda a, b: (a @ b).sum(), [(2, 3, 4), (2, 4, 5)], seed=8)

    def test_broadcast_weight(self):
        # shared weight across a batch dimension
        check_op(lambda a, b: (a @ b).sum(), [(2, 3, 4), (4, 5)], seed=9)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((3, 4))) @ Tensor(np.zeros((5, 6)))

    def test_vector_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros(4)) @ Tensor(np.zeros((4, 2)))


class TestShapeOps:
    def test_reshape(self):
        check_op(lambda a: (a.reshape(6, 2) @ a.reshape(2, 6)).sum(), [(3, 4)], seed=10)

    def test_transpose(self):
        check_op(lambda a: (a.transpose((1, 0)) * a.transpose((1, 0))).sum(),
                 [(3, 4)], seed=11)

    def test_swapaxes(self):
        check_op(lambda a: (a.swapaxes(0, 2) ** 2).sum(), [(2, 3, 4)], seed=12)

    def test_getitem_row(self):
        check_op(lambda a: (a[1] * a[1]).sum(), [(4, 5)], seed=13)

    def test_getitem_fancy_accumulates(self):
        # repeated indices must sum their gradient contributions
        a = Parameter(np.arange(4.0), "a")
        a.zero_grad()
        a[np.array([1, 1, 2])].sum().backward()
        np.testing.assert_array_equal(a.grad, [0.0, 2.0, 1.0, 0.0])

    def test_concat(self):
        check_op(lambda a, b: (concat([a, b], axis=-1) ** 2).sum(),
                 [(3, 2), (3, 4)], seed=14)

    def test_concat_axis0(self):
        check_op(lambda a, b: (concat([a, b], axis=0) ** 2).sum(),
                 [(2, 3), (4, 3)], seed=15)


class TestReductions:
    def test_sum_axis(self):
        check_op(lambda a: (a.sum(axis=1) ** 2).sum(), [(3, 4)], seed=16)

    def test_sum_keepdims(self):
        check_op(lambda a: (a * a.sum(axis=0, keepdims=True)).sum(), [(3, 4)], seed=17)

    def test_mean(self):
        a = Parameter(np.arange(12.0).reshape(3, 4), "a")
        a.zero_grad()
        a.mean().backward()
        np.testing.assert_allclose(a.grad, np.full((3, 4), 1.0 / 12))

    def test_mean_axis_value(self):
        rng = np.random.default_rng(18)
        a = Tensor(rng.normal(size=(3, 4)))
        np.testing.assert_allclose(a.mean(axis=0).data, a.data.mean(axis=0))


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(19)
        for _ in range(20):
            x = Tensor(rng.normal(0, 5, size=(4, 7)))
            s = x.softmax(axis=-1).data
            np.testing.assert_allclose(s.sum(axis=-1), np.ones(4), rtol=1e-12)
            assert np.all(s >= 0)

    def test_shift_invariance(self):
        rng = np.random.default_rng(20)
        x = rng.normal(size=(3, 5))
        a = Tensor(x).softmax(axis=-1).data
        b = Tensor(x + 100.0).softmax(axis=-1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_extreme_logits_stable(self):
        s = Tensor(np.array([[1000.0, 0.0, -1000.0]])).softmax(axis=-1).data
        assert np.all(np.isfinite(s))
        np.testing.assert_allclose(s[0, 0], 1.0, atol=1e-12)

    def test_gradient(self):
        check_op(lambda a: (a.softmax(axis=-1) * np.arange(5.0)).sum(),
                 [(3, 5)], seed=21)


class TestBackwardMechanics:
    def test_requires_scalar(self):
        a = Parameter(np.zeros((2, 2)), "a")
        with pytest.raises(ShapeError):
            (a * 2).backward()

    def test_grad_accumulates_across_backwards(self):
        a = Parameter(np.ones(3), "a")
        a.zero_grad()
        (a * 2).sum().backward()
        (a * 2).sum().backward()
        np.testing.assert_array_equal(a.grad, [4.0, 4.0, 4.0])

    def test_zero_grad_resets(self):
        a = Parameter(np.ones(3), "a")
        a.zero_grad()
        (a * a).sum().backward()
        a.zero_grad()
        np.testing.assert_array_equal(a.grad, np.zeros(3))

    def test_shared_node_counted_once_per_use(self):
        a = Parameter(np.array([2.0]), "a")
        a.zero_grad()
        y = a * 3
        (y + y).sum().backward()   # d/da (6a) = 6
        np.testing.assert_allclose(a.grad, [6.0])

    def test_no_grad_blocks_graph(self):
        a = Parameter(np.ones(2), "a")
        with no_grad():
            y = (a * a).sum()
        assert not y.requires_grad

    def test_diamond_graph(self):
        check_op(lambda a: ((a * a) + (a * 3) + (a * a * a)).sum(), [(4,)], seed=22)


class TestLayers:
    def test_linear_shape_check(self):
        with pytest.raises(ShapeError):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_linear_matches_numpy(self):
        rng = np.random.default_rng(23)
        x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
        y = linear(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(y, x @ w + b, rtol=1e-12)

    def test_layer_norm_moments(self):
        rng = np.random.default_rng(24)
        x = Tensor(rng.normal(3, 5, size=(6, 8)))
        y = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(y.mean(axis=-1), np.zeros(6), atol=1e-12)
        np.testing.assert_allclose(y.std(axis=-1), np.ones(6), rtol=1e-4)

    def test_layer_norm_gradient(self):
        def build(x, g, b):
            return (layer_norm(x, g, b) ** 2).sum()
        check_op(build, [(3, 6), (6,), (6,)], seed=25, rtol=1e-4, atol=1e-6)

    def test_l2_normalize_unit_norm(self):
        rng = np.random.default_rng(26)
        x = Tensor(rng.normal(size=(7, 5)))
        y = l2_normalize(x).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.ones(7), rtol=1e-12)

    def test_l2_normalize_rejects_zero(self):
        with pytest.raises(DegenerateEmbedding):
            l2_normalize(Tensor(np.zeros((1, 4))))

    def test_l2_normalize_gradient(self):
        check_op(lambda a: (l2_normalize(a) * np.arange(4.0)).sum(), [(2, 4)], seed=27)

    def test_msa_head_mismatch(self):
        rng = np.random.default_rng(28)
        d = 6
        params = {}
        for n in ("wq", "wk", "wv", "wo"):
            params[n] = Tensor(rng.normal(size=(d, d)))
            params[f"b{n[1]}"] = Tensor(np.zeros(d))
        with pytest.raises(HeadConfigError):
            msa(Tensor(rng.normal(size=(2, 3, d))), params, n_heads=4)

    def test_msa_single_head_oracle(self):
        # one head: out = softmax(q k^T / sqrt(d)) v projected by wo
        rng = np.random.default_rng(29)
        d, t = 4, 5
        x = rng.normal(size=(t, d))
        params = {n: Tensor(rng.normal(size=(d, d))) for n in ("wq", "wk", "wv", "wo")}
        for n in ("bq", "bk", "bv", "bo"):
            params[n] = Tensor(rng.normal(size=d))
        y = msa(Tensor(x[None]), params, n_heads=1).data[0]
        q = x @ params["wq"].data + params["bq"].data
        k = x @ params["wk"].data + params["bk"].data
        v = x @ params["wv"].data + params["bv"].data
        logits = q @ k.T / np.sqrt(d)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        attn = e / e.sum(axis=-1, keepdims=True)
        expect = (attn @ v) @ params["wo"].data + params["bo"].data
        np.testing.assert_allclose(y, expect, rtol=1e-10)

    def test_msa_permutation_equivariant(self):
        # self-attention with no positional signal commutes with token shuffles
        rng = np.random.default_rng(30)
        d, t = 8, 6
        x = rng.normal(size=(1, t, d))
        params = {n: Tensor(rng.normal(size=(d, d))) for n in ("wq", "wk", "wv", "wo")}
        for n in ("bq", "bk", "bv", "bo"):
            params[n] = Tensor(np.zeros(d))
        perm = rng.permutation(t)
        y = msa(Tensor(x), params, n_heads=2).data[0]
        yp = msa(Tensor(x[:, perm]), params, n_heads=2).data[0]
        np.testing.assert_allclose(yp, y[perm], rtol=1e-9, atol=1e-12)

    def test_msa_gradient(self):
        rng = np.random.default_rng(31)
        d, t = 4, 3
        x = rng.normal(size=(2, t, d))

        def build(*ws):
            params = dict(zip(("wq", "wk", "wv", "wo"), ws[:4]))
            params.update(zip(("bq", "bk", "bv", "bo"), ws[4:]))
            return (msa(Tensor(x), params, n_heads=2) ** 2).sum()
        check_op(build, [(d, d)] * 4 + [(d,)] * 4, seed=32, rtol=1e-4, atol=1e-6)


class TestBatchNorm:
    def test_training_moments(self):
        rng = np.random.default_rng(33)
        x = Tensor(rng.normal(2, 3, size=(50, 18, 2)))
        state = BatchNorm2ChState.create()
        y = batchnorm_2ch(x, state, training=True).data
        np.testing.assert_allclose(y.reshape(-1, 2).mean(axis=0), [0, 0], atol=1e-10)
        np.testing.assert_allclose(y.reshape(-1, 2).std(axis=0), [1, 1], rtol=1e-3)

    def test_running_stats_ema_oracle(self):
        rng = np.random.default_rng(34)
        state = BatchNorm2ChState.create(momentum=0.1)
        mean_ref = np.zeros(2)
        var_ref = np.ones(2)
        for _ in range(5):
            x = rng.normal(1.0, 2.0, size=(8, 18, 2))
            batchnorm_2ch(Tensor(x), state, training=True)
            mu = x.reshape(-1, 2).mean(axis=0)
            var = x.reshape(-1, 2).var(axis=0)
            mean_ref = 0.9 * mean_ref + 0.1 * mu
            var_ref = 0.9 * var_ref + 0.1 * var
        np.testing.assert_allclose(state.running_mean, mean_ref, rtol=1e-10)
        np.testing.assert_allclose(state.running_var, var_ref, rtol=1e-10)

    def test_eval_uses_running_stats(self):
        state = BatchNorm2ChState.create()
        state.running_mean = np.array([1.0, 2.0])
        state.running_var = np.array([4.0, 9.0])
        x = Tensor(np.array([[[3.0, 5.0]]]))
        y = batchnorm_2ch(x, state, training=False).data
        np.testing.assert_allclose(
            y, [[[2.0 / np.sqrt(4 + 1e-5), 3.0 / np.sqrt(9 + 1e-5)]]], rtol=1e-9)

    def test_eval_does_not_touch_running_stats(self):
        state = BatchNorm2ChState.create()
        before = state.running_mean.copy(), state.running_var.copy()
        batchnorm_2ch(Tensor(np.ones((4, 18, 2))), state, training=False)
        np.testing.assert_array_equal(state.running_mean, before[0])
        np.testing.assert_array_equal(state.running_var, before[1])

    def test_empty_batch(self):
        state = BatchNorm2ChState.create()
        with pytest.raises(EmptyBatch):
            batchnorm_2ch(Tensor(np.zeros((0, 18, 2))), state, training=True)

    def test_wrong_channels(self):
        state = BatchNorm2ChState.create()
        with pytest.raises(ShapeError):
            batchnorm_2ch(Tensor(np.zeros((4, 18, 3))), state, training=True)

    def test_gamma_beta_gradient(self):
        rng = np.random.default_rng(35)
        x = rng.normal(size=(6, 18, 2))

        def build(gamma, beta):
            state = BatchNorm2ChState(gamma=gamma, beta=beta,
                                      running_mean=np.zeros(2), running_var=np.ones(2))
            return (batchnorm_2ch(Tensor(x), state, training=True) ** 2).sum()
        check_op(build, [(2,), (2,)], seed=36, rtol=1e-5, atol=1e-7)


class TestGradCheck:
    def test_passes_on_correct_graph(self):
        rng = np.random.default_rng(37)
        w = Parameter(rng.normal(size=(4, 3)), "w")
        x = rng.normal(size=(5, 4))

        def f():
            return ((Tensor(x) @ w) ** 2).sum()
        report = grad_check(f, [w])
        assert report.passed
        assert report.max_rel_err < 1e-6

    def test_detects_wrong_gradient(self):
        rng = np.random.default_rng(38)
        w = Parameter(rng.normal(size=(3,)), "w")

        def f():
            # plant a broken backward rule
            out = Tensor(np.array(float((w.data ** 2).sum())))
            out.requires_grad = True
            out._parents = (w,)
            out._backward = lambda g: w._accumulate(g * 3.0 * w.data)  # should be 2w
            return out
        report = grad_check(f, [w])
        assert not report.passed
        assert report.worst_param == "w"

    def test_subsampling_requires_rng(self):
        w = Parameter(np.zeros(100), "w")
        with pytest.raises(ValueError):
            grad_check(lambda: (w * w).sum(), [w], max_coords_per_param=5)

    def test_zero_gradient_param_passes(self):
        # a parameter multiplied by zero has exactly zero gradient; the atol
        # guard must keep finite-difference noise from flagging it
        rng = np.random.default_rng(39)
        w = Parameter(rng.normal(size=(4,)), "w")
        u = Parameter(rng.normal(size=(4,)), "u")

        def f():
            return (w * u).sum() * 0.0 + (u * u).sum()
        report = grad_check(f, [w, u])
        assert report.passed
