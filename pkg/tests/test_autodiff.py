import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridad import autodiff as ad
from hybridad.autodiff import Tensor, no_grad
from hybridad.errors import (
    DegenerateBatchError,
    DimensionError,
    GraphError,
    NonFiniteError,
    ParameterError,
)

from conftest import check_grads, projected


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


# -- construction and graph --------------------------------------------------

def test_nonfinite_data_is_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_dot_product_swaps_operands():
    x, y = leaf([1.0, 2.0, 3.0]), leaf([4.0, -5.0, 6.0])
    (x * y).sum().backward()
    assert np.array_equal(x.grad, y.data)
    assert np.array_equal(y.grad, x.data)


def test_backward_twice_accumulates():
    x = leaf([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    assert np.array_equal(x.grad, 2 * first)


def test_shared_node_visited_once():
    # y feeds two branches; its backward must see the summed gradient exactly once
    x = leaf([2.0])
    y = x * x
    (y + y * 3.0).sum().backward()
    assert x.grad[0] == pytest.approx(4 * 2.0 * 2.0)


def test_backward_needs_scalar():
    with pytest.raises(GraphError):
        (leaf([1.0, 2.0]) * 2.0).backward()


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_broadcast_gradient_is_reduced():
    a = leaf(np.ones((3, 4)))
    b = leaf(np.ones(4))
    (a + b).sum().backward()
    assert np.array_equal(b.grad, np.full(4, 3.0))


# -- matmul ----------------------------------------------------------------

def test_matmul_identity_and_hand_sum():
    eye = Tensor(np.eye(2))
    assert np.array_equal(ad.matmul(eye, eye).data, np.eye(2))
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_gradient(rng):
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    assert check_grads(projected(lambda: ad.matmul(a, b), rng), [a, b]) < 1e-6


# -- conv2d ----------------------------------------------------------------

def test_conv_all_ones_is_nine():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv_stride_two_shape():
    out = ad.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    assert out.shape == (1, 1, 2, 2)


def test_conv_matches_direct_loops(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    k = rng.standard_normal((4, 3, 3, 2))
    stride, pad = 2, 1
    got = ad.conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (6 + 2 * pad - 3) // stride + 1
    wo = (5 + 2 * pad - 2) // stride + 1
    want = np.zeros((2, 4, ho, wo))
    for n, f, i, j in itertools.product(range(2), range(4), range(ho), range(wo)):
        patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 2]
        want[n, f, i, j] = (patch * k[f]).sum()
    assert np.allclose(got, want, atol=1e-12)


def test_conv_gradient(rng):
    x = leaf(rng.standard_normal((2, 3, 8, 8)))
    k = leaf(rng.standard_normal((4, 3, 3, 3)))
    f = projected(lambda: ad.conv2d(x, k, stride=1, padding=1), rng)
    assert check_grads(f, [x, k]) < 1e-6


def test_conv_rejects_bad_geometry():
    with pytest.raises(ParameterError):
        ad.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=0)
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 2, 2))))
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# -- maxpool ---------------------------------------------------------------

def test_maxpool_of_four():
    out = ad.maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
    assert out.data.reshape(-1).tolist() == [4.0]


def test_maxpool_ties_route_to_first_index():
    x = leaf(np.full((1, 1, 4, 4), 5.0))
    out = ad.maxpool2d(x, 2, 2)
    assert np.array_equal(out.data, np.full((1, 1, 2, 2), 5.0))
    out.sum().backward()
    want = np.zeros((4, 4))
    want[0::2, 0::2] = 1.0
    assert np.array_equal(x.grad[0, 0], want)


def test_maxpool_gradient(rng):
    # distinct, well separated values so small probes cannot flip an argmax
    x = leaf((rng.permutation(72).reshape(1, 2, 6, 6) / 72.0))
    f = projected(lambda: ad.maxpool2d(x, 2, 2), rng)
    assert check_grads(f, [x], eps=1e-6) < 1e-5


def test_overlapping_pool_gradient(rng):
    x = leaf(rng.permutation(50).reshape(1, 2, 5, 5) / 50.0)
    assert check_grads(projected(lambda: ad.maxpool2d(x, 3, 1), rng), [x], eps=1e-6) < 1e-5


# -- batchnorm -------------------------------------------------------------

def _bn(x, gamma, beta, training=True, rm=None, rv=None):
    c = gamma.shape[0]
    rm = np.zeros(c) if rm is None else rm
    rv = np.ones(c) if rv is None else rv
    return ad.batchnorm(x, gamma, beta, rm, rv, training)


def test_batchnorm_train_standardises(rng):
    x = rng.standard_normal((8, 3, 4, 4)) * 5 + 2
    out = _bn(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-9
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-6
    # eps keeps the variance just under one: exactly var / (var + eps)
    v = x.var(axis=(0, 2, 3))
    assert np.allclose(out.var(axis=(0, 2, 3)), v / (v + 1e-5), rtol=0, atol=1e-13)


def test_batchnorm_zero_gamma_gives_beta(rng):
    beta = np.array([0.5, -1.0, 2.0])
    out = _bn(Tensor(rng.standard_normal((4, 3, 2, 2))), Tensor(np.zeros(3)), Tensor(beta)).data
    assert np.array_equal(out, np.broadcast_to(beta.reshape(1, 3, 1, 1), out.shape))


def test_batchnorm_running_stats_and_infer(rng):
    x = rng.standard_normal((6, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    _bn(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), True, rm, rv)
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))
    out = _bn(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), False, rm, rv).data
    want = (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5)
    assert np.allclose(out, want)


def test_batchnorm_single_sample_train_rejected():
    with pytest.raises(DegenerateBatchError):
        _bn(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_batchnorm_gradient(rng):
    x = leaf(rng.standard_normal((4, 3, 5, 5)))
    g, b = leaf(rng.uniform(0.5, 1.5, 3)), leaf(rng.standard_normal(3))
    assert check_grads(projected(lambda: _bn(x, g, b), rng), [x, g, b]) < 1e-5


def test_batchnorm_infer_gradient(rng):
    x = leaf(rng.standard_normal((3, 2, 2, 2)))
    g, b = leaf(rng.uniform(0.5, 1.5, 2)), leaf(rng.standard_normal(2))
    rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
    f = projected(lambda: _bn(x, g, b, False, rm, rv), rng)
    assert check_grads(f, [x, g, b]) < 1e-6


# -- layernorm -------------------------------------------------------------

def test_layernorm_constant_row_is_zero():
    out = ad.layernorm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_layernorm_hand_row():
    out = ad.layernorm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-15)
    s = math.sqrt(1.5)
    assert np.allclose(out.data, [[-s, 0.0, s]], atol=1e-9)


def test_layernorm_eps_must_be_positive():
    with pytest.raises(ParameterError):
        ad.layernorm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)


def test_layernorm_gradient(rng):
    x = leaf(rng.standard_normal((2, 4, 8)))
    g, b = leaf(rng.uniform(0.5, 1.5, 8)), leaf(rng.standard_normal(8))
    assert check_grads(projected(lambda: ad.layernorm(x, g, b), rng), [x, g, b]) < 1e-6


# -- activations and dropout -----------------------------------------------

def test_relu_values():
    assert ad.activation(Tensor([-1.0, 0.0, 2.0]), "relu").data.tolist() == [0.0, 0.0, 2.0]


@pytest.mark.parametrize("c", [-1e3, 0.0, 7.5, 1e3])
def test_softmax_uniform_for_equal_logits(c):
    assert np.array_equal(ad.softmax(Tensor(np.full(4, c))).data, np.full(4, 0.25))


def test_softmax_gradient(rng):
    x = leaf(rng.standard_normal(4))
    assert abs(ad.softmax(x).data.sum() - 1.0) < 1e-9
    assert check_grads(projected(lambda: ad.softmax(x), rng), [x]) < 1e-6


def test_gelu_gradient_and_values(rng):
    x = leaf(rng.standard_normal(7))
    want = 0.5 * x.data * (1 + np.vectorize(math.erf)(x.data / math.sqrt(2)))
    assert np.allclose(ad.gelu(x).data, want, atol=1e-15)
    assert check_grads(projected(lambda: ad.gelu(x), rng), [x]) < 1e-6


def test_unknown_activation():
    with pytest.raises(ParameterError):
        ad.activation(Tensor([1.0]), "swish")


def test_dropout_identities(rng):
    x = Tensor(rng.standard_normal(10))
    assert ad.dropout(x, 0.5, training=False) is x
    assert ad.dropout(x, 0.0, training=True, rng=rng) is x


def test_dropout_survivor_rate():
    x = Tensor(np.ones(10_000))
    out = ad.dropout(x, 0.5, True, np.random.default_rng(7)).data
    assert abs((out > 0).mean() - 0.5) < 0.02
    assert set(np.unique(out)) <= {0.0, 2.0}


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rate_bounds(rate):
    with pytest.raises(ParameterError):
        ad.dropout(Tensor([1.0]), rate, True, np.random.default_rng(0))


# -- composite --------------------------------------------------------------

def test_two_layer_mlp_gradient(rng):
    x = Tensor(rng.standard_normal((5, 4)))
    w1, b1 = leaf(rng.standard_normal((4, 6))), leaf(rng.standard_normal(6))
    w2, b2 = leaf(rng.standard_normal((6, 3))), leaf(rng.standard_normal(3))

    def loss():
        h = ad.gelu(ad.matmul(x, w1) + b1)
        return ad.nll_of_probs(ad.softmax(ad.matmul(h, w2) + b2), np.array([0, 1, 2, 0, 1]))
    assert check_grads(loss, [w1, b1, w2, b2]) < 1e-5


def test_library_oracle_agrees_with_test_oracle(rng):
    a = leaf(rng.standard_normal((3, 3)))
    f = projected(lambda: ad.gelu(a), rng)
    assert ad.gradient_check(f, [a]) < 1e-8
    assert check_grads(f, [a]) < 1e-8


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 3), c=st.integers(1, 3), h=st.integers(3, 7), w=st.integers(3, 7),
       k=st.integers(1, 3), stride=st.integers(1, 3), pad=st.integers(0, 2),
       seed=st.integers(0, 2**31))
def test_conv_shape_formula(n, c, h, w, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((n, c, h, w)))
    kern = Tensor(rng.standard_normal((2, c, k, k)))
    if k > h + 2 * pad or k > w + 2 * pad:
        with pytest.raises(DimensionError):
            ad.conv2d(x, kern, stride=stride, padding=pad)
        return
    out = ad.conv2d(x, kern, stride=stride, padding=pad)
    assert out.shape == (n, 2, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


@settings(max_examples=25, deadline=None)
@given(shape=st.lists(st.integers(1, 4), min_size=1, max_size=3), seed=st.integers(0, 2**31))
def test_mean_and_reshape_gradients(shape, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.standard_normal(shape))
    f = lambda: (x.reshape(-1).mean() * 3.0 + x.transpose().sum())  # noqa: E731
    assert check_grads(f, [x]) < 1e-8
