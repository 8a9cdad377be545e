from __future__ import annotations

import pytest
import torch
from torch.autograd import gradcheck

from backend.autodiff_core import backward, instance_norm, layer_norm, log_softmax, matmul, softmax
from backend.errors import ContractError, EmptyInputError, NumericError, ShapeError


def _double(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def test_matmul_identity_and_arithmetic():
    m = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
    assert torch.equal(matmul(torch.eye(2, dtype=torch.float64), m), m)
    assert matmul(torch.tensor([[1.0, 2.0]]), torch.tensor([[3.0], [4.0]])).item() == 11.0


def test_matmul_matches_triple_loop():
    a, b = _double(4, 3, seed=1), _double(3, 5, seed=2)
    ref = torch.zeros(4, 5, dtype=torch.float64)
    for i in range(4):
        for j in range(5):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    assert (matmul(a, b) - ref).abs().max().item() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_softmax_cases():
    assert torch.allclose(softmax(torch.tensor([0.0, 0.0])), torch.tensor([0.5, 0.5]))
    out = softmax(torch.tensor([1000.0, 0.0], dtype=torch.float64))
    assert abs(out[0].item() - 1.0) < 1e-12 and out[1].item() < 1e-12
    assert abs(softmax(_double(7)).sum().item() - 1.0) < 1e-12


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        softmax(torch.tensor([float("nan"), 0.0]))
    with pytest.raises(NumericError):
        log_softmax(torch.tensor([float("inf"), 0.0]))


def test_layer_norm_cases():
    assert torch.allclose(layer_norm(torch.full((4,), 3.0)), torch.zeros(4))
    out = layer_norm(torch.tensor([1.0, 3.0], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([-1.0, 1.0], dtype=torch.float64), atol=1e-5)


def test_instance_norm_statistics_and_invariance():
    x = _double(50, 4, seed=3)
    y = instance_norm(x)
    assert y.mean(dim=0).abs().max().item() < 1e-9
    assert (y.var(dim=0, unbiased=False) - 1).abs().max().item() < 1e-4
    z = instance_norm(2.5 * x + 7.0)
    assert (z - y).abs().max().item() < 1e-4

    const = torch.cat([torch.full((10, 1), 4.0, dtype=torch.float64), _double(10, 1)], dim=1)
    assert instance_norm(const)[:, 0].abs().max().item() == 0.0


def test_instance_norm_ignores_padding():
    x = _double(2, 6, 3, seed=4)
    lengths = torch.tensor([6, 4])
    y = instance_norm(x, lengths)
    assert torch.allclose(y[1, :4], instance_norm(x[1, :4]))
    assert torch.count_nonzero(y[1, 4:]) == 0


def test_instance_norm_empty_raises():
    with pytest.raises(EmptyInputError):
        instance_norm(torch.zeros(0, 3))


def test_primitive_gradients():
    a, b = _double(3, 4, seed=5).requires_grad_(), _double(4, 2, seed=6).requires_grad_()
    assert gradcheck(matmul, (a, b))
    x = _double(3, 5, seed=7).requires_grad_()
    assert gradcheck(lambda t: softmax(t, axis=-1), (x,))
    assert gradcheck(lambda t: log_softmax(t, axis=-1), (x,))
    gain, bias = _double(5, seed=8).requires_grad_(), _double(5, seed=9).requires_grad_()
    assert gradcheck(lambda t, g, c: layer_norm(t, g, c), (x, gain, bias))
    s = _double(6, 3, seed=10).requires_grad_()
    assert gradcheck(instance_norm, (s,))


def test_backward_contracts():
    x = _double(4).requires_grad_()
    (g,) = backward(x.sum(), [x])
    assert torch.equal(g, torch.ones(4, dtype=torch.float64))

    y = _double(3, seed=1).requires_grad_()
    (g,) = backward((y * y).sum(), [y])
    assert torch.allclose(g, 2 * y.detach())

    with pytest.raises(ContractError):
        backward(x * 2, [x])


def test_backward_accumulates_and_zero_fills():
    x = _double(3).requires_grad_()
    unused = _double(2).requires_grad_()
    loss = (x * 2).sum() + (x * 3).sum()
    gx, gu = backward(loss, [x, unused])
    assert torch.allclose(gx, torch.full((3,), 5.0, dtype=torch.float64))
    assert torch.count_nonzero(gu) == 0

    backward((x * 1).sum(), [x])
    assert torch.allclose(x.grad, torch.full((3,), 6.0, dtype=torch.float64))


def test_second_backward_on_same_graph_fails():
    x = _double(3).requires_grad_()
    loss = (x.exp()).sum()
    backward(loss, [x])
    with pytest.raises(RuntimeError):
        backward(loss, [x])
