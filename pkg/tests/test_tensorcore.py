import math

import numpy as np
import pytest
import scipy.sparse as sp

from ipmbev.tensorcore import (AdamW, Conv2d, Linear, Schedule, Tensor, cosine_lr, grad_check, load_checkpoint,
                               make_optimizer, no_grad, optimizer_step, save_checkpoint)
from ipmbev.tensorcore import functional as F
from ipmbev.tensorcore.nn import Module

SEEDS = range(20)


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def away_from_zero(rng, shape, gap=0.1):
    v = rng.standard_normal(shape)
    return np.where(v >= 0, v + gap, v - gap)


# each builder returns (output tensor thunk, params); the scalar is a random projection of the output
def _build(name, rng):
    n, c, h, w = rng.integers(1, 3), rng.integers(1, 4), rng.integers(3, 6), rng.integers(3, 6)
    x = T(rng.standard_normal((n, c, h, w)))
    if name == "add":
        y = T(rng.standard_normal((c, 1, w)))
        return lambda: x + y, [x, y]
    if name == "sub":
        y = T(rng.standard_normal((1, h, 1)))
        return lambda: x - y, [x, y]
    if name == "mul":
        y = T(rng.standard_normal((h, w)))
        return lambda: x * y, [x, y]
    if name == "div":
        y = T(away_from_zero(rng, (w,), 0.5))
        return lambda: x / y, [x, y]
    if name == "pow":
        # away from 0, where x**3 has a vanishing slope but a fixed finite-difference error
        p = T(away_from_zero(rng, (n, c, h), 0.5))
        return lambda: p ** 3, [p]
    if name == "matmul":
        a, b = T(rng.standard_normal((n, h, w))), T(rng.standard_normal((w, c)))
        return lambda: a @ b, [a, b]
    if name == "sum_mean":
        return lambda: x.sum(axis=1) + x.mean(axis=(0, 2)).sum(), [x]
    if name == "reshape_transpose":
        return lambda: x.transpose(0, 2, 3, 1).reshape(n, -1), [x]
    if name == "getitem":
        return lambda: x[:, :, 1:, ::2], [x]
    if name == "fancy_getitem":
        idx = rng.integers(0, h, 7)
        return lambda: x[:, :, idx], [x]
    if name == "exp_log":
        p = T(rng.uniform(0.5, 2.0, (n, c)))
        return lambda: p.log() + (p * 0.3).exp(), [p]
    if name == "abs":
        p = T(away_from_zero(rng, (n, c, h)))
        return lambda: p.abs(), [p]
    if name == "relu":
        p = T(away_from_zero(rng, (n, c, h)))
        return lambda: F.relu(p), [p]
    if name == "sigmoid":
        return lambda: F.sigmoid(x), [x]
    if name == "silu":
        return lambda: F.silu(x), [x]
    if name == "softplus":
        return lambda: F.softplus(x * 3.0), [x]
    if name == "softmax":
        return lambda: F.softmax(x, axis=1), [x]
    if name == "log_softmax":
        return lambda: F.log_softmax(x, axis=-1), [x]
    if name == "concat_stack":
        y = T(rng.standard_normal((n, 2, h, w)))
        return lambda: F.stack([F.concat([x, y], axis=1), F.concat([y, x], axis=1)], axis=0), [x, y]
    if name == "flip":
        return lambda: F.flip(x, (2, 3)), [x]
    if name == "pad":
        return lambda: F.pad2d(x, (1, 0, 2, 1)), [x]
    if name == "upsample":
        return lambda: F.upsample_nearest(x, 2), [x]
    if name == "avg_pool":
        return lambda: F.avg_pool(x, 2), [x]
    if name == "linear":
        wt, b = T(rng.standard_normal((w, c + 1))), T(rng.standard_normal(c + 1))
        return lambda: F.linear(x, wt, b), [x, wt, b]
    if name == "batched_linear":
        k = int(rng.integers(1, 4))
        xx = T(rng.standard_normal((k, 3, h, w)))
        wt, b = T(rng.standard_normal((k, w, 2))), T(rng.standard_normal((k, 2)))
        return lambda: F.batched_linear(xx, wt, b), [xx, wt, b]
    if name == "conv2d":
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        wt, b = T(rng.standard_normal((2, c, 3, 3))), T(rng.standard_normal(2))
        return lambda: F.conv2d(x, wt, b, stride=stride, padding=pad), [x, wt, b]
    if name == "dsconv":
        wd, wp = T(rng.standard_normal((c, 3, 3))), T(rng.standard_normal((2, c, 1, 1)))
        bd, bp = T(rng.standard_normal(c)), T(rng.standard_normal(2))
        return lambda: F.depthwise_separable_conv(x, wd, wp, bd, bp, padding=1), [x, wd, wp, bd, bp]
    if name == "layer_norm":
        g, b = T(rng.standard_normal(w)), T(rng.standard_normal(w))
        return lambda: F.layer_norm(x, g, b), [x, g, b]
    if name == "batch_norm":
        xx = T(rng.standard_normal((2, c, h, w)))
        g, b = T(rng.standard_normal(c)), T(rng.standard_normal(c))
        return lambda: F.batch_norm(xx, g, b), [xx, g, b]
    if name == "batch_norm_eval":
        g, b = T(rng.standard_normal(c)), T(rng.standard_normal(c))
        rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2, c)
        return lambda: F.batch_norm(x, g, b, rm, rv, training=False), [x, g, b]
    if name == "cross_entropy":
        t = rng.integers(0, c, (n, h, w))
        wts = rng.uniform(0.5, 3, c)
        return lambda: F.cross_entropy(x, t, wts), [x]
    if name == "bce":
        t = rng.uniform(0, 1, x.shape)
        return lambda: F.binary_cross_entropy_with_logits(x, t), [x]
    if name == "l1_masked":
        y = T(x.data + away_from_zero(rng, x.shape))
        m = rng.random(x.shape) > 0.3
        m.flat[0] = True
        return lambda: F.l1_masked_mean(x, y, m), [x, y]
    if name == "linear_recurrence":
        a = T(rng.uniform(-0.9, 0.9, (n, 11, c)))
        b = T(rng.standard_normal((n, 11, c)))
        return lambda: F.linear_recurrence(a, b, axis=1), [a, b]
    if name == "spmm":
        S = sp.random(5, w, density=0.5, random_state=int(rng.integers(1 << 30)), format="csr")
        return lambda: F.spmm(x, S), [x]
    if name == "astype":
        return lambda: x.astype(np.float64) * 2.0, [x]
    raise KeyError(name)


PRIMITIVES = ["add", "sub", "mul", "div", "pow", "matmul", "sum_mean", "reshape_transpose", "getitem",
              "fancy_getitem", "exp_log", "abs", "relu", "sigmoid", "silu", "softplus", "softmax",
              "log_softmax", "concat_stack", "flip", "pad", "upsample", "avg_pool", "linear",
              "batched_linear", "conv2d", "dsconv", "layer_norm", "batch_norm", "batch_norm_eval",
              "cross_entropy", "bce", "l1_masked", "linear_recurrence", "spmm", "astype"]


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients(name):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        out, params = _build(name, rng)
        proj = rng.standard_normal(out().shape)
        worst = max(worst, grad_check(lambda: (out() * proj).sum(), params, max_coords=6, rng=seed))
    assert worst < 1e-5, f"{name}: {worst:.2e}"


class TestConv:
    def test_identity_1x1(self, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        w = np.eye(3)[:, :, None, None]
        np.testing.assert_array_equal(F.conv2d(x, w, np.zeros(3)).data, x)

    def test_c421_halves(self, rng):
        y = F.conv2d(rng.standard_normal((1, 2, 8, 8)), rng.standard_normal((3, 2, 4, 4)), stride=2, padding=1)
        assert y.shape == (1, 3, 4, 4)

    def test_hand_case(self):
        y = F.conv2d(np.array([[[[1.0, 2], [3, 4]]]]), np.ones((1, 1, 2, 2)))
        np.testing.assert_array_equal(y.data, [[[[10.0]]]])

    def test_against_loops(self, rng):
        x, w, b = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 2)), rng.standard_normal(4)
        y = F.conv2d(x, w, b, stride=(2, 1), padding=(1, 0)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)))
        ref = np.zeros_like(y)
        for n in range(2):
            for k in range(4):
                for i in range(y.shape[2]):
                    for j in range(y.shape[3]):
                        ref[n, k, i, j] = (xp[n, :, 2 * i:2 * i + 3, j:j + 2] * w[k]).sum() + b[k]
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_linearity(self, rng):
        w = rng.standard_normal((2, 3, 3, 3))
        x1, x2 = rng.standard_normal((2, 1, 3, 6, 6))
        lhs = F.conv2d(2 * x1 - 3 * x2, w, padding=1).data
        rhs = 2 * F.conv2d(x1, w, padding=1).data - 3 * F.conv2d(x2, w, padding=1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_errors(self, rng):
        with pytest.raises(ValueError, match="channels"):
            F.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
        with pytest.raises(ValueError, match="kernel"):
            F.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))

    def test_relu_chain_gradcheck(self, rng):
        x = T(rng.standard_normal((1, 2, 6, 6)))
        w = T(rng.standard_normal((3, 2, 3, 3)))
        pre = F.conv2d(x, w, padding=1).data
        keep = np.abs(pre) > 1e-2
        assert grad_check(lambda: (F.relu(F.conv2d(x, w, padding=1)) * keep).sum(), [x, w], max_coords=None) < 1e-6


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(F.linear(x, np.eye(3), np.zeros(3)).data, x)

    def test_hand(self):
        y = F.linear(np.array([1.0, 2.0]), np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([1.0, 1.0]))
        np.testing.assert_array_equal(y.data, [2.0, 5.0])

    def test_zero_input(self):
        np.testing.assert_array_equal(F.linear(np.zeros((3, 2)), np.ones((2, 4)), np.arange(4.0)).data,
                                      np.broadcast_to(np.arange(4.0), (3, 4)))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="input dim"):
            F.linear(np.zeros(3), np.zeros((2, 2)))

    def test_linearity(self, rng):
        w = rng.standard_normal((5, 3))
        a, b = rng.standard_normal((2, 4, 5))
        np.testing.assert_allclose(F.linear(a + b, w).data, F.linear(a, w).data + F.linear(b, w).data, atol=1e-6)

    def test_gradcheck_tight(self, rng):
        x, w, b = T(rng.standard_normal((6, 4))), T(rng.standard_normal((4, 3))), T(rng.standard_normal(3))
        t = rng.integers(0, 3, 6)
        assert grad_check(lambda: F.cross_entropy(F.linear(x, w, b), t), [x, w, b], max_coords=None) < 1e-7


class TestNormsActs:
    def test_layer_norm_constant(self):
        np.testing.assert_array_equal(F.layer_norm(np.full((2, 5), 3.0)).data, np.zeros((2, 5)))

    def test_silu_at_zero(self):
        x = T([0.0])
        y = F.silu(x)
        y.backward(np.ones(1))
        assert y.data[0] == 0.0 and x.grad[0] == pytest.approx(0.5)

    def test_elementwise_mul_ones(self, rng):
        a = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(F.elementwise_mul(a, np.ones_like(a)).data, a)

    def test_softmax_sums_to_one(self, rng):
        np.testing.assert_allclose(F.softmax(rng.standard_normal((3, 7)) * 50).data.sum(-1), 1.0, atol=1e-12)

    def test_batch_norm_running_stats(self, rng):
        x = rng.standard_normal((4, 2, 3, 3)) * 2 + 1
        rm, rv = np.zeros(2), np.ones(2)
        F.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_avg_pool_and_pad(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(F.avg_pool(x, 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
        assert F.pad2d(x, (1, 2, 3, 4)).shape == (1, 1, 7, 11)
        np.testing.assert_array_equal(F.crop2d(F.pad2d(x, (1, 2, 3, 4)), (1, 2, 3, 4)).data, x)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            F.avg_pool(np.zeros((1, 1, 1, 1)), 2)
        with pytest.raises(ValueError):
            F.depthwise_conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 3, 3)))


class TestCrossEntropy:
    def test_perfect(self):
        z = np.zeros((1, 3, 1, 2))
        z[0, 1, 0, 0] = z[0, 2, 0, 1] = 200.0
        assert F.cross_entropy(z, np.array([[[1, 2]]])).item() < 1e-30

    def test_uniform(self):
        assert F.cross_entropy(np.zeros((2, 4, 3, 3)), np.zeros((2, 3, 3), int)).item() == pytest.approx(math.log(4))

    def test_hand_two_class(self):
        z = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
        expect = -math.log(math.e / (math.e + 1))
        assert F.cross_entropy(z, np.zeros((1, 1, 1), int)).item() == pytest.approx(expect)
        assert expect == pytest.approx(0.3133, abs=1e-4)

    def test_bad_class(self):
        with pytest.raises(ValueError, match="class id"):
            F.cross_entropy(np.zeros((1, 3, 2, 2)), np.full((1, 2, 2), 3))


class TestGradCheck:
    def test_square(self):
        x = T([3.0])
        y = x * x
        y.sum().backward()
        assert x.grad[0] == 6.0
        assert grad_check(lambda: (x * x).sum(), [x]) < 1e-9

    def test_detects_wrong_gradient(self):
        x = T([1.5])
        bad = lambda: Tensor.make(x.data ** 2, (x,), lambda g: (g * 3.0 * x.data,))
        assert grad_check(lambda: bad().sum(), [x]) > 0.1

    def test_scalar_ops_keep_dtype(self):
        x = Tensor(np.ones(3, np.float32))
        for y in (1.0 - x, x * 0.1, x / 3, 2 + x):
            assert y.dtype == np.float32


class TestOptim:
    def test_sgd_step(self):
        p = {"w": Tensor(np.zeros(1))}
        optimizer_step(p, {"w": np.ones(1)}, "sgd", 0.1)
        assert p["w"].data[0] == pytest.approx(-0.1)

    def test_momentum(self):
        p = {"w": Tensor(np.zeros(1))}
        opt = make_optimizer("sgd_momentum", p, 0.1)
        opt.step({"w": np.ones(1)})
        opt.step({"w": np.ones(1)})
        assert p["w"].data[0] == pytest.approx(-0.1 - 0.1 * 1.9)

    def test_adamw_hand_step(self):
        p = {"w": Tensor(np.array([1.0]))}
        AdamW(p, lr=0.01, weight_decay=0.0).step({"w": np.ones(1)})
        # first Adam step moves by lr * g / |g| regardless of scale
        assert p["w"].data[0] == pytest.approx(1.0 - 0.01, abs=1e-9)
        q = {"w": Tensor(np.array([1.0]))}
        AdamW(q, lr=0.01, weight_decay=0.1).step({"w": np.ones(1)})
        assert q["w"].data[0] == pytest.approx(1.0 * (1 - 0.001) - 0.01, abs=1e-9)

    def test_cosine_endpoints(self):
        assert cosine_lr(0, 500, 2.5e-4, 1e-5) == pytest.approx(2.5e-4)
        assert cosine_lr(500, 500, 2.5e-4, 1e-5) == pytest.approx(1e-5)
        assert cosine_lr(250, 500, 2.5e-4, 1e-5) == pytest.approx(0.5 * (2.5e-4 + 1e-5))
        assert cosine_lr(900, 500, 2.5e-4, 1e-5) == pytest.approx(1e-5)
        assert Schedule("constant").lr(123, 0.3) == 0.3

    def test_nonfinite_names_path(self):
        p = {"enc.w": Tensor(np.zeros(2))}
        with pytest.raises(FloatingPointError, match="enc.w"):
            optimizer_step(p, {"enc.w": np.array([1.0, np.nan])}, "adamw", 0.1)

    def test_unknown_rule(self):
        with pytest.raises(ValueError, match="unknown optimizer"):
            make_optimizer("lion", {}, 0.1)


class Tiny(Module):
    def __init__(self, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.conv = Conv2d(rng, 2, 3, 3, padding=1)
        self.fc = Linear(rng, 3, 2)

    def __call__(self, x):
        return self.fc(F.relu(self.conv(x)).mean(axis=(2, 3)))


class TestModulesAndCheckpoints:
    def test_deterministic_init_and_forward(self, rng):
        x = rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
        a, b = Tiny(3), Tiny(3)
        assert all(np.array_equal(a.state_dict()[k], b.state_dict()[k]) for k in a.state_dict())
        assert np.array_equal(a(x).data, b(x).data)
        assert not np.array_equal(Tiny(4)(x).data, a(x).data)

    def test_round_trip(self, tmp_path, rng):
        m = Tiny()
        opt = AdamW(m.parameters(), 0.01)
        x = rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
        m(x).sum().backward()
        opt.step()
        save_checkpoint(tmp_path / "c.npz", m, opt, {"step": 1})
        header, arrays = load_checkpoint(tmp_path / "c.npz")
        assert header["meta"] == {"step": 1}
        m2 = Tiny(9)
        m2.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("optim/")})
        np.testing.assert_array_equal(m2(x).data, m(x).data)

    def test_version_check(self, tmp_path):
        import json
        arrays = {"__header__": np.frombuffer(json.dumps({"version": 99}).encode(), np.uint8)}
        np.savez(tmp_path / "bad.npz", **arrays)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(tmp_path / "bad.npz")

    def test_no_grad(self):
        x = T([1.0, 2.0])
        with no_grad():
            y = x * 2
        assert not y.requires_grad


@pytest.mark.parametrize("shape", [(1, 3), (37, 2, 3), (200, 40, 30)])
@pytest.mark.parametrize("with_h0", [False, True])
def test_scan_methods_match_loop(shape, with_h0):
    rng = np.random.default_rng(len(shape))
    a, b = rng.uniform(-1, 1, shape), rng.standard_normal(shape)
    h0 = rng.standard_normal(shape[1:]) if with_h0 else None
    ref, h = np.empty(shape), (np.zeros(shape[1:]) if h0 is None else h0)
    for t in range(shape[0]):
        h = a[t] * h + b[t]
        ref[t] = h
    for method in ("sequential", "blocked", "auto"):
        np.testing.assert_allclose(F.scan_kernel(a, b, h0, method=method), ref, atol=1e-10)
    with pytest.raises(ValueError, match="scan method"):
        F.scan_kernel(a, b, method="magic")
