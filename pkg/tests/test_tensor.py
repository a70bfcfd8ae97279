"""Autodiff engine: graph mechanics, dunder arithmetic, reductions."""

import numpy as np
import pytest

from canet.tensor import Tensor, grad_enabled, no_grad

from _gradcheck import gradcheck, weighted_sum


def test_dtype_policy():
    assert Tensor(np.zeros(3, dtype=np.float32)).dtype == np.float32
    assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64
    # everything else becomes float32
    assert Tensor(np.zeros(3, dtype=np.int64)).dtype == np.float32
    assert Tensor([1, 2, 3]).dtype == np.float32


def test_scalar_ops_preserve_dtype():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    for y in (x + 1, 1 + x, x * 2.0, -x, x - 1, 1 - x, x / 2, 2 / x,
              x ** 2, x.log(), x.clamp(0.0, 2.0)):
        assert y.dtype == np.float32, y


def test_backward_requires_scalar():
    x = Tensor(np.ones(4), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2).backward()


def test_backward_simple_chain():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = ((x * 2 + 1) ** 2).sum()
    y.backward()
    # d/dx (2x+1)^2 = 4(2x+1)
    np.testing.assert_allclose(x.grad, 4 * (2 * x.data + 1))


def test_grad_accumulates_across_backwards():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = (x * 3).sum()
    y.backward()
    y.backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_diamond_graph_accumulation():
    x = Tensor(np.array([3.0]), requires_grad=True)
    a = x * 2
    b = x * 5
    (a * b).sum().backward()  # d/dx 10x^2 = 20x
    np.testing.assert_allclose(x.grad, [60.0])


def test_reuse_same_tensor_twice():
    x = Tensor(np.array([4.0]), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        assert not grad_enabled()
        y = x * 2 + 1
    assert grad_enabled()
    assert y._backward is None and y._parents == ()
    with pytest.raises(ValueError):
        y.sum().backward()


def test_no_grad_tensor_creation():
    with no_grad():
        x = Tensor(np.ones(3), requires_grad=True)
    assert not x.requires_grad


def test_detach():
    x = Tensor(np.ones(3), requires_grad=True)
    d = (x * 2).detach()
    assert not d.requires_grad
    assert d._parents == ()


def test_leaf_only_grads():
    x = Tensor(np.ones(3), requires_grad=True)
    mid = x * 2
    mid.sum().backward()
    assert mid.grad is None
    assert x.grad is not None


def test_broadcasting_unbroadcast():
    a = np.random.default_rng(0).normal(size=(3, 4))
    b = np.random.default_rng(1).normal(size=(4,))
    ta = Tensor(a, requires_grad=True)
    tb = Tensor(b, requires_grad=True)
    (ta * tb).sum().backward()
    np.testing.assert_allclose(ta.grad, np.broadcast_to(b, (3, 4)))
    np.testing.assert_allclose(tb.grad, a.sum(axis=0))


def test_broadcasting_keepdims_axis():
    a = np.ones((2, 1, 3))
    b = np.ones((2, 5, 3))
    ta = Tensor(a, requires_grad=True)
    tb = Tensor(b, requires_grad=True)
    (ta + tb).sum().backward()
    assert ta.grad.shape == (2, 1, 3)
    np.testing.assert_allclose(ta.grad, 5.0)
    np.testing.assert_allclose(tb.grad, 1.0)


def test_sub_div_pow_values():
    x = Tensor(np.array([2.0, 4.0]))
    np.testing.assert_allclose((3 - x).data, [1.0, -1.0])
    np.testing.assert_allclose((x / 4).data, [0.5, 1.0])
    np.testing.assert_allclose((8 / x).data, [4.0, 2.0])
    np.testing.assert_allclose((x ** 3).data, [8.0, 64.0])
    with pytest.raises(TypeError):
        x ** x  # tensor exponent unsupported


def test_clamp_masks_gradient():
    x = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
    x.clamp(0.0, 1.0).sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])


def test_sum_mean_axes():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(2, 3, 4))
    t = Tensor(a)
    np.testing.assert_allclose(t.sum().data, a.sum())
    np.testing.assert_allclose(t.sum(axis=1).data, a.sum(axis=1))
    np.testing.assert_allclose(
        t.mean(axis=(0, 2), keepdims=True).data,
        a.mean(axis=(0, 2), keepdims=True),
    )


def test_reshape_transpose_roundtrip():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(2, 3, 4))
    t = Tensor(a, requires_grad=True)
    out = t.reshape(3, 8).reshape(2, 3, 4).transpose(2, 0, 1)
    assert out.shape == (4, 2, 3)
    weighted = out.transpose(1, 2, 0)
    (weighted * Tensor(a)).sum().backward()
    np.testing.assert_allclose(t.grad, a)


@pytest.mark.parametrize("trial", range(10))
def test_gradcheck_arithmetic_compositions(trial):
    rng = np.random.default_rng(100 + trial)
    a = rng.normal(size=(3, 4)) + 3.0  # keep away from log/division trouble
    b = rng.normal(size=(4,)) * 0.5

    def build(ts):
        ta, tb = ts
        out = (ta * tb + 2.0) / (ta + 5.0) - tb ** 2 + ta.log()
        return weighted_sum(out, np.random.default_rng(trial))

    gradcheck(build, [a, b])


@pytest.mark.parametrize("trial", range(5))
def test_gradcheck_reductions(trial):
    rng = np.random.default_rng(200 + trial)
    a = rng.normal(size=(2, 3, 4))

    def build(ts):
        (t,) = ts
        out = t.mean(axis=(0, 2), keepdims=True) + t.sum(axis=1).mean()
        return weighted_sum(out, np.random.default_rng(trial))

    gradcheck(build, [a])


def test_item_and_size():
    t = Tensor(np.array([[2.5]]))
    assert t.item() == 2.5
    assert t.size == 1
    assert Tensor(np.ones((2, 3))).size == 6
