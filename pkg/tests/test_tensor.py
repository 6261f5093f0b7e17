"""Tensor-core tests: hand oracles, finite differences, optimizer contracts."""

import math

import numpy as np
import pytest

from geofuse.errors import ContractError
from geofuse.optim import AdamW, ParamSet
from geofuse.tensor import (Tensor, concat_cols, concat_rows, cross_entropy,
                            finite_difference_check, gelu, interleave_rows,
                            layernorm, matmul, no_grad, slice_cols, softmax,
                            take_rows, tensor_mean, tensor_sum, transpose)


def rand_tensor(rng, *shape, requires_grad=True):
    return Tensor(rng.normal(0, 1, shape), requires_grad=requires_grad)


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(eye, a).data, a.data)


def test_matmul_hand_product():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0], [4.0]])
    assert matmul(a, b).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ContractError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matmul_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = rand_tensor(rng, 3, 4)
    b_data = rng.normal(0, 1, (4, 2))

    def f(x):
        return tensor_sum(matmul(x, Tensor(b_data)))

    assert finite_difference_check(f, a) < 1e-4


# -- gelu ---------------------------------------------------------------------


def test_gelu_zero_and_asymptotes():
    x = Tensor([[0.0, 8.0, -8.0]])
    out = gelu(x).data[0]
    assert out[0] == 0.0
    assert abs(out[1] - 8.0) < 1e-6
    assert abs(out[2]) < 1e-6


def test_gelu_value_at_one_matches_closed_form():
    expected = 0.5 * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (1.0 + 0.044715)))
    assert abs(gelu(Tensor([[1.0]])).data[0, 0] - expected) < 1e-12

    x = Tensor([[1.0]], requires_grad=True)
    assert finite_difference_check(lambda t: tensor_sum(gelu(t)), x) < 1e-4


# -- cross entropy ---------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 4)))
    loss = cross_entropy(logits, [0, 1, 2])
    assert abs(loss.item() - math.log(4)) < 1e-12


def test_cross_entropy_confident_correct():
    logits = np.full((2, 5), -30.0)
    logits[0, 3] = 30.0
    logits[1, 1] = 30.0
    loss = cross_entropy(Tensor(logits), [3, 1])
    assert loss.item() < 1e-9


def test_cross_entropy_matches_naive_loop_oracle():
    rng = np.random.default_rng(42)
    logits = rng.normal(0, 2, (5, 7))
    targets = rng.integers(0, 7, 5)

    total = 0.0
    for row, tgt in zip(logits, targets):
        z = sum(math.exp(v) for v in row)
        total += -math.log(math.exp(row[tgt]) / z)
    expected = total / 5

    got = cross_entropy(Tensor(logits), targets).item()
    assert abs(got - expected) < 1e-10


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# -- backward contracts ------------------------------------------------------------


def test_backward_rejects_non_scalar():
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        t.backward()


@pytest.mark.parametrize("seed", [10, 11, 12])
def test_backward_on_random_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rand_tensor(rng, 4, 3)
    w = Tensor(rng.normal(0, 1, (3, 3)))
    g = Tensor(rng.normal(0, 1, 3))
    b = Tensor(rng.normal(0, 1, 3))
    c = Tensor(rng.normal(0, 1, (4, 3)))

    def f(t):
        h = gelu(matmul(t, w) + b)
        h = layernorm(h, g, b)
        return tensor_sum(softmax(h) * c)

    assert finite_difference_check(f, x) < 1e-4


def test_intermediate_tensors_receive_gradients():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    mid = gelu(x)
    loss = tensor_sum(mid)
    loss.backward()
    assert mid.grad is not None and x.grad is not None


def test_non_finite_result_raises():
    big = Tensor([[1e308]])
    with np.errstate(over="ignore"), pytest.raises(ContractError):
        matmul(big, Tensor([[1e308]]))


# -- finite_difference_check itself -------------------------------------------------


def test_fd_check_linear_function_is_exact():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    assert finite_difference_check(tensor_sum, x) < 1e-9


def test_fd_check_quadratic():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def f(t):
        return tensor_sum(t * t)

    err = finite_difference_check(f, x, h=1e-6)
    assert err < 1e-6
    assert np.allclose(x.grad, [2.0, 4.0])


# -- FD sweep across every differentiable op ------------------------------------------


def _op_cases(rng):
    w = Tensor(rng.normal(0, 1, (3, 3)))
    gain = Tensor(rng.normal(1, 0.1, 4))
    bias = Tensor(rng.normal(0, 0.1, 4))
    other = Tensor(rng.normal(0, 1, (2, 4)))
    weave = Tensor(rng.normal(0, 1, (4, 4)))
    return {
        "add": ((2, 4), lambda t: tensor_sum(t + other)),
        "add_bias": ((2, 4), lambda t: tensor_sum(t + bias)),
        "mul": ((2, 4), lambda t: tensor_sum(t * other)),
        "mul_scalar": ((2, 4), lambda t: tensor_sum(t * 1.7)),
        "matmul": ((2, 3), lambda t: tensor_sum(matmul(t, w))),
        "transpose": ((2, 3), lambda t: tensor_sum(matmul(transpose(t), t))),
        "gelu": ((2, 4), lambda t: tensor_sum(gelu(t))),
        "softmax": ((2, 4), lambda t: tensor_sum(softmax(t) * other)),
        "layernorm": ((2, 4), lambda t: tensor_sum(layernorm(t, gain, bias) * other)),
        "sum": ((2, 4), lambda t: tensor_sum(t * t)),
        "mean": ((2, 4), lambda t: tensor_mean(t * t)),
        "concat_rows": ((2, 4), lambda t: tensor_sum(concat_rows([t, other]) * 1.3)),
        "interleave_rows": ((2, 4), lambda t: tensor_sum(interleave_rows(t, other) * weave)),
        "take_rows": ((4, 3), lambda t: tensor_sum(take_rows(t, [0, 2, 2]))),
        "slice_cols": ((2, 4), lambda t: tensor_sum(slice_cols(t, 1, 3) * 2.0)),
        "concat_cols": ((2, 4), lambda t: tensor_sum(concat_cols([t, other]) * 0.5)),
        "cross_entropy": ((3, 5), lambda t: cross_entropy(t, [1, 0, 4])),
    }


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_op_passes_finite_difference_check(seed):
    rng = np.random.default_rng(100 + seed)
    for name, (shape, f) in _op_cases(rng).items():
        x = rand_tensor(rng, *shape)
        err = finite_difference_check(f, x)
        assert err < 1e-4, f"op {name} failed FD check: {err}"


# -- determinism -------------------------------------------------------------------


def test_identical_seeds_give_bit_identical_results():
    def run(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(0, 1, (4, 4)), requires_grad=True)
        w = Tensor(rng.normal(0, 1, (4, 4)))
        out = tensor_sum(softmax(gelu(matmul(x, w))))
        out.backward()
        return out.data.copy(), x.grad.copy()

    v1, g1 = run(7)
    v2, g2 = run(7)
    assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


# -- no_grad ------------------------------------------------------------------------


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        y = gelu(x)
    assert y.requires_grad is False and y._parents == ()


# -- AdamW ---------------------------------------------------------------------------


def _single_param(value):
    ps = ParamSet()
    ps.add("w", Tensor(np.array([value]), requires_grad=True))
    return ps


def test_adamw_moves_against_gradient():
    ps = _single_param(1.0)
    ps["w"].grad = np.array([1.0])
    AdamW(ps, lr=0.1).step()
    assert ps["w"].data[0] < 1.0


def test_adamw_frozen_param_bit_identical():
    ps = _single_param(1.0)
    ps.add("f", Tensor(np.array([2.0]), requires_grad=True))
    ps.freeze("f")
    before = ps["f"].data.tobytes()
    opt = AdamW(ps, lr=0.5)
    for _ in range(5):
        ps["w"].grad = np.array([1.0])
        ps["f"].grad = np.array([123.0])
        opt.step()
    assert ps["f"].data.tobytes() == before


def test_adamw_missing_grad_raises():
    ps = _single_param(1.0)
    with pytest.raises(ContractError):
        AdamW(ps).step()


def test_adamw_converges_on_quadratic_bowl():
    ps = _single_param(0.0)
    opt = AdamW(ps, lr=0.1)
    for _ in range(200):
        ps.zero_grad()
        w = ps["w"]
        loss = tensor_sum((w - Tensor(np.array([3.0]))) * (w - Tensor(np.array([3.0]))))
        loss.backward()
        opt.step()
    assert abs(ps["w"].data[0] - 3.0) < 1e-2
