"""Gradient checks for the reverse-mode engine against central differences."""

import numpy as np
import pytest

from attrfield import autodiff as ad

RNG = np.random.default_rng(7)


def numeric_grads(f, arrays, eps=1e-6):
    """Central-difference gradients of a scalar-valued f over each array."""
    arrays = [a.copy() for a in arrays]
    grads = []
    for k in range(len(arrays)):
        flat = arrays[k].reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(f(*arrays))
            flat[i] = keep - eps
            lo = float(f(*arrays))
            flat[i] = keep
            g[i] = (hi - lo) / (2.0 * eps)
        grads.append(g.reshape(arrays[k].shape))
    return grads


def check(f, *arrays, eps=1e-6, tol=1e-6):
    """Run f on Tensors and on ndarrays; compare grads and forward values."""
    params = [ad.parameter(a) for a in arrays]
    out = f(*params)
    assert isinstance(out, ad.Tensor)
    np.testing.assert_allclose(out.data, f(*arrays), rtol=1e-12)
    out.backward()
    num = numeric_grads(f, list(arrays), eps=eps)
    for p, n in zip(params, num):
        assert p.grad is not None
        denom = np.maximum(np.abs(n), 1.0)
        assert np.max(np.abs(p.grad - n) / denom) < tol


def test_add_mul_broadcast():
    check(lambda a, b: ad.summe(a * b + a), RNG.normal(size=(3, 4)), RNG.normal(size=(4,)))


def test_sub_div():
    a = RNG.normal(size=(5,))
    b = RNG.normal(size=(5,)) + 3.0
    check(lambda a, b: ad.summe((a - b) / b), a, b)


def test_scalar_mix_and_rops():
    check(lambda a: ad.summe(2.0 * a + (1.0 - a) / 2.0 - (-a)), RNG.normal(size=(6,)))


def test_pow():
    check(lambda a: ad.summe(a ** 3), RNG.normal(size=(4,)) + 2.0)


def test_unary_chain():
    a = np.abs(RNG.normal(size=(8,))) + 0.5

    def f(a):
        return ad.summe(ad.exp(-a) + ad.log(a) * ad.sqrt(a))

    check(f, a)


def test_tanh_sigmoid():
    check(lambda a: ad.summe(ad.tanh(a) + ad.sigmoid(3.0 * a)), RNG.normal(size=(9,)))


def test_abs_away_from_kink():
    a = RNG.normal(size=(7,))
    a[np.abs(a) < 0.2] = 0.5
    check(lambda a: ad.summe(ad.absolute(a)), a)


def test_matmul():
    check(
        lambda a, b: ad.summe((a @ b) ** 2),
        RNG.normal(size=(3, 4)),
        RNG.normal(size=(4, 2)),
    )


def test_sum_axes_and_mean():
    a = RNG.normal(size=(3, 4, 2))

    def f(a):
        return ad.summe(ad.summe(a, axis=1) * 2.0) + ad.mean(a, axis=(0, 2)).sum()

    check(f, a)


def test_cumsum():
    check(lambda a: ad.summe(ad.cumsum(a, axis=1) ** 2), RNG.normal(size=(3, 5)))


def test_where():
    a = RNG.normal(size=(6,))
    cond = a > 0
    check(lambda a: ad.summe(ad.where(cond, a * 3.0, a ** 2)), a)


def test_concatenate_stack():
    a, b = RNG.normal(size=(2, 3)), RNG.normal(size=(4, 3))

    def f(a, b):
        c = ad.concatenate([a, b], axis=0)
        s = ad.stack([ad.summe(a, axis=0), ad.summe(b, axis=0)], axis=0)
        return ad.summe(c ** 2) + ad.summe(s * 0.5)

    check(f, a, b)


def test_getitem_take_scatter_accumulates():
    a = RNG.normal(size=(5, 3))
    idx = np.array([0, 2, 2, 4])

    def f(a):
        return ad.summe(ad.take(a, idx) ** 2) + ad.summe(a[1:3] * 3.0)

    check(f, a)


def test_clip_interior():
    a = RNG.normal(size=(10,)) * 2.0
    a[np.abs(np.abs(a) - 1.0) < 0.2] = 0.0  # keep samples off the clip edges

    def f(a):
        return ad.summe(ad.clip(a, -1.0, 1.0) ** 2)

    check(f, a)


def test_reshape_transpose():
    a = RNG.normal(size=(3, 4))

    def f(a):
        return ad.summe(ad.reshape(a, (2, 6)) ** 2) + ad.summe(ad.transpose(a, (1, 0))[0])

    check(f, a)


def test_diamond_reuse_accumulates():
    a = RNG.normal(size=(4,))

    def f(a):
        b = a * 2.0
        return ad.summe(b * b + b + a)

    check(f, a)


def test_backward_values_simple():
    x = ad.parameter([1.0, 2.0, 3.0])
    y = (x * x).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_constant_branch_gets_no_grad():
    x = ad.parameter([1.0, 2.0])
    c = ad.constant([3.0, 4.0])
    out = (x * c).sum()
    out.backward()
    assert c.grad is None
    np.testing.assert_allclose(x.grad, [3.0, 4.0])


def test_numpy_ndarray_passthrough():
    a = RNG.normal(size=(3, 3))
    assert isinstance(ad.exp(a), np.ndarray)
    assert isinstance(ad.summe(a, axis=0), np.ndarray)
    np.testing.assert_allclose(ad.sigmoid(a), 1.0 / (1.0 + np.exp(-a)))


def test_sigmoid_stable_in_tails():
    big = np.array([800.0, -800.0])
    out = ad.sigmoid(big)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_matmul_rejects_non_2d():
    with pytest.raises(ValueError):
        ad.parameter(np.zeros((2, 2, 2))) @ ad.parameter(np.zeros((2, 2)))
