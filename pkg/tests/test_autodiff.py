import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peftlab import autodiff as ad
from peftlab.autodiff import Tensor, grad_check
from peftlab.exceptions import DimensionError, GraphError


def _t(rng, *shape, positive=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


UNARY = {
    "exp": lambda x: ad.tsum(ad.exp(x)),
    "log": lambda x: ad.tsum(ad.log(x)),
    "tanh": lambda x: ad.tsum(ad.tanh(x)),
    "relu": lambda x: ad.tsum(ad.relu(x) * ad.relu(x)),
    "gelu": lambda x: ad.tsum(ad.gelu(x)),
    "power": lambda x: ad.tsum(ad.power(x, 3.0)),
    "neg": lambda x: ad.tsum(-x * x),
    "mean": lambda x: ad.tmean(x * x),
    "reshape": lambda x: ad.tsum(ad.reshape(x, (-1,)) * ad.reshape(x, (-1,))),
    "transpose": lambda x: ad.tsum(ad.transpose(x, (1, 0)) * np.arange(12.0).reshape(4, 3)),
    "swapaxes": lambda x: ad.tsum(ad.swapaxes(x, 0, 1) * np.arange(12.0).reshape(4, 3)),
    "getitem": lambda x: ad.tsum(x[1:, ::2] * x[1:, ::2]),
    "softmax": lambda x: ad.tsum(ad.softmax(x) * np.arange(12.0).reshape(3, 4)),
    "log_softmax": lambda x: ad.tsum(ad.log_softmax(x) * np.arange(12.0).reshape(3, 4)),
    "broadcast_to": lambda x: ad.tsum(ad.broadcast_to(x, (2, 3, 4)) * np.arange(24.0).reshape(2, 3, 4)),
    "sum_axis": lambda x: ad.tsum(ad.tsum(x, axis=1) ** 2),
    "div": lambda x: ad.tsum(1.0 / x),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitives_match_finite_differences(name, rng):
    positive = name in ("log", "div")
    x = _t(rng, 3, 4, positive=positive)
    assert grad_check(UNARY[name], x) < 1e-4


def test_binary_broadcast_gradients(rng):
    b = rng.normal(size=(1, 4))
    for op in (ad.add, ad.sub, ad.mul, ad.div):
        x = _t(rng, 3, 4, positive=True)
        assert grad_check(lambda t: ad.tsum(op(t, Tensor(b)) ** 2), x) < 1e-4
        y = _t(rng, 1, 4, positive=True)
        a = rng.normal(size=(3, 4))
        assert grad_check(lambda t: ad.tsum(op(Tensor(a), t) ** 2), y) < 1e-4


def test_matmul_and_linear(rng):
    a = rng.normal(size=(2, 3, 5))
    w = _t(rng, 5, 4)
    assert grad_check(lambda t: ad.tsum(ad.matmul(Tensor(a), t) ** 2), w) < 1e-4
    x = _t(rng, 2, 3, 5)
    W = rng.normal(size=(5, 4))
    assert grad_check(lambda t: ad.tsum(ad.linear(t, Tensor(W), Tensor(np.ones(4))) ** 2), x) < 1e-4
    bias = _t(rng, 4)
    assert grad_check(lambda t: ad.tsum(ad.linear(Tensor(a), Tensor(W), t) ** 2), bias) < 1e-4


def test_layer_norm_all_inputs(rng):
    x0, g0, b0 = rng.normal(size=(2, 3, 6)), rng.normal(size=6), rng.normal(size=6)
    weights = rng.normal(size=(2, 3, 6))
    for which in range(3):
        args = [Tensor(x0), Tensor(g0), Tensor(b0)]
        target = _t(rng, *args[which].shape)
        target.data = args[which].data.copy()

        def f(t, which=which):
            a = list(args)
            a[which] = t
            return ad.tsum(ad.layer_norm(*a) * weights)

        assert grad_check(f, target) < 1e-4


def test_concat_embedding_cross_entropy(rng):
    x = _t(rng, 2, 3)
    other = Tensor(rng.normal(size=(2, 2)))
    assert grad_check(lambda t: ad.tsum(ad.concat([t, other, t], axis=1) ** 2), x) < 1e-4
    w = _t(rng, 7, 3)
    ids = np.array([[1, 4, 4], [0, 6, 2]])
    assert grad_check(lambda t: ad.tsum(ad.embedding(t, ids) ** 2), w) < 1e-4
    logits = _t(rng, 2, 3, 7)
    targets = np.array([[1, 2, 5], [2, 0, 6]])
    for reduction in ("mean", "sum"):
        f = lambda t: ad.cross_entropy_label_smoothed(t, targets, 0.2, pad_id=2, reduction=reduction)
        assert grad_check(f, logits) < 1e-4


def test_dropout_gradient_uses_same_mask(rng):
    x = _t(rng, 4, 5)
    seed = 3

    def f(t):
        return ad.tsum(ad.dropout(t, 0.3, np.random.default_rng(seed)) ** 2)

    assert grad_check(f, x) < 1e-4


def test_cross_entropy_value_oracle():
    logits = Tensor(np.log(np.array([[0.5, 0.25, 0.25]])))
    # -log(0.5) with no smoothing
    assert ad.cross_entropy_label_smoothed(logits, np.array([0])).item() == pytest.approx(np.log(2), abs=1e-12)
    smoothed = ad.cross_entropy_label_smoothed(logits, np.array([0]), smoothing=0.3).item()
    expected = 0.7 * np.log(2) + 0.3 * (np.log(2) + 2 * np.log(4)) / 3
    assert smoothed == pytest.approx(expected, abs=1e-12)


def test_pad_positions_do_not_contribute():
    logits = Tensor(np.zeros((1, 2, 5)), requires_grad=True)
    loss = ad.cross_entropy_label_smoothed(logits, np.array([[4, 2]]), pad_id=2)
    loss.backward()
    assert np.all(logits.grad[0, 1] == 0)
    assert loss.item() == pytest.approx(np.log(5))


def test_double_backward_raises(rng):
    x = _t(rng, 3)
    y = ad.tsum(x * x)
    y.backward()
    with pytest.raises(GraphError):
        y.backward()


def test_non_scalar_backward_raises(rng):
    with pytest.raises(GraphError):
        (_t(rng, 3) * 2.0).backward()


def test_shape_mismatch_names_shapes(rng):
    with pytest.raises(DimensionError, match=r"\(3, 4\)"):
        ad.matmul(_t(rng, 3, 4), _t(rng, 3, 4))


def test_no_grad_records_nothing(rng):
    x = _t(rng, 3)
    with ad.no_grad():
        y = x * x
    assert y.is_leaf and not y.requires_grad


def test_precision_switch():
    with ad.default_dtype("f32"):
        assert Tensor([1.0]).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(ValueError):
        ad.set_default_dtype("f16")


def test_grad_check_rejects_f32():
    with pytest.raises(TypeError):
        grad_check(lambda t: ad.tsum(t), Tensor(np.ones(2), dtype=np.float32))


def test_gradient_accumulates_over_reuse(rng):
    x = _t(rng, 4)
    ad.tsum(x * 3.0 + x * 2.0).backward()
    np.testing.assert_allclose(x.grad, 5.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=30, size=(rows, cols))
    out = ad.softmax(Tensor(x)).numpy()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_layer_norm_output_is_standardized(d, seed):
    x = np.random.default_rng(seed).normal(scale=5, size=(3, d))
    out = ad.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).numpy()
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
