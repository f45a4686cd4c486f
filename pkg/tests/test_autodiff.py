import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relgraph import autodiff as ad
from relgraph.autodiff import Tape, Tensor, grad
from relgraph.encoders import lstm_scan
from relgraph.gradcheck import check


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)


def test_softmax_singleton():
    assert ad.softmax([42.0]).tolist() == [1.0]


def test_softmax_log_ratios():
    out = ad.softmax([math.log(1), math.log(2), math.log(3)])
    np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_softmax_group_subset():
    out = ad.softmax([5.0, 0.0, 0.0], group=[1, 2])
    assert out[0] == 0.0
    np.testing.assert_allclose(out[1:], [0.5, 0.5])


def test_softmax_empty_group():
    with pytest.raises(ValueError, match="empty normalization set"):
        ad.softmax([1.0, 2.0], group=[])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)))
def test_softmax_is_probability_vector(x):
    out = ad.softmax(x)
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) <= 1e-9


def test_grad_square_matches_central_difference():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
    (g,) = grad(tape, y, [x])
    h = 1e-5
    fd = ((3 + h) ** 2 - (3 - h) ** 2) / (2 * h)
    assert g == pytest.approx(6.0)
    assert abs(g - fd) / abs(fd) < 1e-6


def test_grad_constant_function_is_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.sum(Tensor(np.arange(3.0)))
        y = y + 0.0
    gx, gw = grad(tape, y, [x, w])
    assert not gx.any() and not gw.any()


def test_grad_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        grad(tape, y, [x])


def test_tape_records_in_topological_order():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        a = x * 2.0
        b = a + x
        c = ad.sum(b * a)
    seen = set()
    for rec in tape.records:
        for inp in rec.inputs:
            if inp.requires_grad and inp is not x:
                assert id(inp) in seen
        seen.add(id(rec.output))
    assert tape.records[-1].output is c


def test_untracked_without_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 3.0
    assert not y.requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(FloatingPointError):
        ad.log(Tensor([0.0]))


def test_segment_sum_matches_loop():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(7, 3))
    seg = np.array([2, 0, 2, 1, 0, 2, 2])
    out = ad.segment_sum(Tensor(vals), seg, 4).value
    expect = np.zeros((4, 3))
    for i, s in enumerate(seg):
        expect[s] += vals[i]
    np.testing.assert_allclose(out, expect, atol=1e-15)


def test_segment_softmax_groups_sum_to_one():
    logits = np.array([1.0, 2.0, -3.0, 0.5, 700.0, -700.0])
    seg = np.array([0, 0, 1, 1, 1, 3])
    out = ad.segment_softmax(Tensor(logits), seg, 4).value
    for s in (0, 1, 3):
        assert abs(out[seg == s].sum() - 1) < 1e-12
    np.testing.assert_allclose(out[:2], ad.softmax(logits[:2]), atol=1e-15)


OPS = {
    "add_broadcast": (lambda p: ad.sum(ad.tanh(p["a"] + p["b"][0])),
                      {"a": (3, 2), "b": (1, 2)}),
    "mul_div": (lambda p: ad.sum(p["a"] * p["b"] / (p["b"] * p["b"] + 2.0)), {"a": (3, 2), "b": (3, 2)}),
    "matmul": (lambda p: ad.sum(ad.tanh(p["a"] @ p["b"])), {"a": (3, 4), "b": (4, 2)}),
    "sigmoid_softplus": (lambda p: ad.sum(ad.sigmoid(p["a"]) + ad.softplus(p["a"] * 3.0)), {"a": (5,)}),
    "power_exp_log": (lambda p: ad.sum(ad.log(ad.exp(p["a"]) + 1.0) * ad.power(p["a"] * p["a"] + 1.0, -0.5)),
                      {"a": (4,)}),
    "mean_axis": (lambda p: ad.sum(ad.mean(p["a"], axis=0) * ad.mean(p["a"], axis=1, keepdims=True)),
                  {"a": (3, 3)}),
    "concat_take": (lambda p: ad.sum(ad.tanh(ad.take(ad.concat([p["a"], p["b"]], axis=0), [0, 3, 3, 1]))),
                    {"a": (2, 3), "b": (2, 3)}),
    "slice_transpose": (lambda p: ad.sum(ad.tanh(p["a"][:, 1:3].T @ p["a"][:, :2])), {"a": (3, 4)}),
    "segment_softmax": (lambda p: ad.sum(ad.segment_softmax(p["a"], [0, 0, 1, 1, 1], 2) * Tensor(np.arange(5.0))),
                        {"a": (5,)}),
    "softmax_rows": (lambda p: ad.sum(ad.softmax_rows(p["a"]) * Tensor(np.arange(6.0).reshape(2, 3))),
                     {"a": (2, 3)}),
    "segment_sum": (lambda p: ad.sum(ad.tanh(ad.segment_sum(p["a"], [1, 0, 1], 3))), {"a": (3, 2)}),
    "relu_reshape": (lambda p: ad.sum(ad.reshape(ad.relu(p["a"]), (-1,)) * Tensor(np.arange(6.0))), {"a": (2, 3)}),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_primitive_gradients(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(1)
    params = {k: rng.normal(size=s) + 0.1 for k, s in shapes.items()}
    errors = check(fn, params)
    assert max(errors.values()) < 1e-6, errors


def test_lstm_scan_gradient_with_padding():
    rng = np.random.default_rng(3)
    hidden, batch = 2, 2
    step_rows = [np.array([0, 3]), np.array([1, 4]), np.array([2, 3])]
    masks = [np.array([True, True]), np.array([True, True]), np.array([True, False])]
    params = {"proj": rng.normal(size=(5, 4 * hidden)), "wh": rng.normal(size=(hidden, 4 * hidden)),
              "b": rng.normal(size=4 * hidden)}
    weights = Tensor(rng.normal(size=(3 * batch, hidden)))

    def f(p):
        return ad.sum(lstm_scan(p["proj"], step_rows, masks, p["wh"], p["b"]) * weights)

    errors = check(f, params)
    assert max(errors.values()) < 1e-6, errors
