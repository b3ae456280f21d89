import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from sanet import autodiff as ad
from sanet.autodiff import Parameter, Tape, Tensor, float64_mode
from sanet.gradcheck import TOLERANCE, check


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def loop_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for f in range(o):
            for y in range(ho):
                for z in range(wo):
                    acc = b[f]
                    for ch in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += w[f, ch, dy, dx] * xp[i, ch, y * stride + dy, z * stride + dx]
                    out[i, f, y, z] = acc
    return out


def test_matmul_identity_and_scalar():
    b = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)
    assert ad.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_against_triple_loop(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    got = ad.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, loop_matmul(a, b), atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 1, 5, 5)).astype(np.float32)
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1, 0)
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_kernel_gives_bias(rng):
    out = ad.conv2d(Tensor(rng.normal(size=(2, 3, 6, 6))), Tensor(np.zeros((4, 3, 3, 3))),
                    Tensor([0.5, -1.0, 2.0, 3.0]), 1, 1)
    for f, b in enumerate([0.5, -1.0, 2.0, 3.0]):
        assert np.all(out.data[:, f] == np.float32(b))


@pytest.mark.parametrize("stride,pad,size", [(1, 1, 5), (2, 1, 7), (2, 2, 8), (1, 0, 6)])
def test_conv_against_six_loop_oracle(rng, stride, pad, size):
    x = rng.normal(size=(1, 2, size, size))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    with float64_mode():
        got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, loop_conv(x, w, b, stride, pad), atol=1e-5)


def test_conv_output_size_uses_floor():
    assert ad.conv_output_size(8, 3, 2, 1) == 4
    assert ad.conv_output_size(7, 3, 2, 1) == 4
    with pytest.raises(ValueError):
        ad.conv_output_size(2, 5, 1, 0)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)), 1, 1)


def test_slice_relu_pool_basics():
    x = Tensor(np.arange(128.0).reshape(1, 8, 4, 4))
    top, bottom = ad.split_spatial(x, "height")
    assert top.shape == bottom.shape == (1, 8, 2, 4)
    np.testing.assert_array_equal(np.concatenate([top.data, bottom.data], axis=2), x.data)
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    pooled = ad.global_avg_pool(Tensor(np.full((2, 3, 5, 5), 0.75)))
    np.testing.assert_array_equal(pooled.data, np.full((2, 3), 0.75, np.float32))


def test_slice_rejects_uneven_extent():
    with pytest.raises(ValueError):
        ad.slice_spatial(Tensor(np.zeros((1, 1, 5, 4))), "height", 0)


def test_softmax_ce_cases(rng):
    assert ad.softmax_cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(math.log(10), abs=1e-6)
    logits = np.zeros((2, 5))
    logits[0, 1] = logits[1, 3] = 1000.0
    assert ad.softmax_cross_entropy(Tensor(logits), [1, 3]).item() == pytest.approx(0.0, abs=1e-6)
    z = rng.normal(size=(4, 6))
    y = np.array([0, 5, 2, 2])
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    oracle = -np.mean(np.log(p[np.arange(4), y]))
    with float64_mode():
        assert ad.softmax_cross_entropy(Tensor(z), y).item() == pytest.approx(oracle, abs=1e-6)


def test_softmax_ce_rejects_bad_labels():
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_gradient_of_sum_and_square(rng):
    with float64_mode():
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with Tape() as tape:
            s = ad.tsum(x)
            q = ad.tsum(ad.mul(x, x))
        np.testing.assert_array_equal(tape.gradient(s, [x])[0], np.ones((3, 4)))
        np.testing.assert_allclose(tape.gradient(q, [x])[0], 2 * x.data)


def test_gradient_rejects_non_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, 2.0)
    with pytest.raises(ValueError):
        tape.gradient(y, [x])


def test_unreachable_tensor_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    other = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(x)
    assert np.all(tape.gradient(loss, [other])[0] == 0)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.mul(x, 3.0)
    assert y.node_id is None


def test_shared_tensor_accumulates(rng):
    with float64_mode():
        x = Tensor(rng.normal(size=4), requires_grad=True)
        with Tape() as tape:
            loss = ad.tsum(ad.add(ad.mul(x, 3.0), ad.mul(x, x)))
        np.testing.assert_allclose(tape.gradient(loss, [x])[0], 3.0 + 2 * x.data)


def test_parameter_group_validation():
    with pytest.raises(ValueError):
        Parameter("w", Tensor(np.zeros(2)), "decoder")


def test_float32_default_and_float64_mode():
    assert Tensor([1.0]).data.dtype == np.float32
    with float64_mode():
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_batch_norm_normalizes(rng):
    with float64_mode():
        x = Tensor(rng.normal(3.0, 2.0, size=(8, 4, 3, 3)))
        y, mu, var = ad.batch_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-9)
    np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1, atol=1e-3)
    np.testing.assert_allclose(mu, x.data.mean(axis=(0, 2, 3)))


OPS = {
    "matmul": (ad.matmul, [(4, 5), (5, 3)]),
    "linear": (ad.linear, [(4, 5), (3, 5), (3,)]),
    "conv2d": (lambda x, k, b: ad.conv2d(x, k, b, 1, 1), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_s2": (lambda x, k, b: ad.conv2d(x, k, b, 2, 1), [(2, 2, 7, 7), (3, 2, 3, 3), (3,)]),
    "gap": (ad.global_avg_pool, [(2, 3, 4, 4)]),
    "concat": (lambda a, b: ad.concat([a, b]), [(3, 2), (3, 4)]),
    "slice": (lambda x: ad.slice_spatial(x, "width", 1), [(2, 3, 4, 4)]),
    "pairwise_sq": (ad.pairwise_sq_dist, [(5, 3)]),
    "batch_norm": (lambda x, g, b: ad.batch_norm(x, g, b)[0], [(4, 3, 2, 2), (3,), (3,)]),
    "channel_affine": (ad.channel_affine, [(2, 3, 2, 2), (3,), (3,)]),
    "broadcast_add": (ad.add, [(3, 4), (4,)]),
    "broadcast_mul": (ad.mul, [(3, 4), (3, 1)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_finite_difference(name, rng):
    fn, shapes = OPS[name]
    for _ in range(5):
        with float64_mode():
            inputs = [Tensor(rng.normal(size=s)) for s in shapes]
        assert check(fn, inputs, rng) < TOLERANCE


def test_softmax_ce_finite_difference(rng):
    labels = rng.integers(0, 6, size=4)
    with float64_mode():
        z = Tensor(rng.normal(size=(4, 6)))
    assert check(lambda t: ad.softmax_cross_entropy(t, labels), [z], rng) < TOLERANCE


@settings(deadline=None, max_examples=40)
@given(arrays(np.float64, (3, 5), elements=st.floats(-5, 5)),
       arrays(np.float64, (5, 2), elements=st.floats(-5, 5)))
def test_matmul_matches_numpy(a, b):
    with float64_mode():
        got = ad.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, a @ b, atol=1e-9)


@settings(deadline=None, max_examples=40)
@given(arrays(np.float64, (2, 7), elements=st.floats(-50, 50)))
def test_softmax_ce_is_shift_invariant(z):
    with float64_mode():
        base = ad.softmax_cross_entropy(Tensor(z), [0, 6]).item()
        shifted = ad.softmax_cross_entropy(Tensor(z + 17.0), [0, 6]).item()
    assert base >= 0
    assert shifted == pytest.approx(base, rel=1e-9, abs=1e-9)
