import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from maskplan.errors import NumericError, ShapeError
from maskplan.numerics import DTYPE, AttentionBlock, Rng, grad_check, init_normal, softmax_rows


def test_rng_streams_are_reproducible_and_path_addressed():
    a = Rng(5).child("data", 3).generator().random(4)
    b = Rng(5).child("data", 3).generator().random(4)
    c = Rng(5).child("data", 4).generator().random(4)
    d = Rng(6).child("data", 3).generator().random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_rng_stream_does_not_depend_on_sibling_draws():
    root = Rng(0)
    root.child("x").generator().random(1000)
    assert np.array_equal(root.child("y").generator().random(3), Rng(0).child("y").generator().random(3))


def test_rng_rejects_negative_keys():
    with pytest.raises(ValueError):
        Rng(0).child(-1)


def test_softmax_matches_direct_formula():
    x = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    e = np.exp(x)
    assert np.allclose(softmax_rows(x), e / e.sum(axis=1, keepdims=True), rtol=0, atol=1e-15)


def test_softmax_is_stable_for_large_logits():
    p = softmax_rows(np.array([[1000.0, 1000.0, -1000.0]]))
    assert np.allclose(p, [[0.5, 0.5, 0.0]])


def test_softmax_rank_check():
    with pytest.raises(ShapeError):
        softmax_rows(np.zeros(3))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariance(row, c):
    x = np.array([row])
    p = softmax_rows(x)
    assert np.allclose(p, softmax_rows(x + c), atol=1e-12)
    assert abs(p.sum() - 1.0) < 1e-12


def test_grad_check_on_exact_quadratic():
    x = torch.tensor([0.3, -1.2, 2.0], dtype=DTYPE)
    # central differences are exact for quadratics up to rounding
    assert grad_check(lambda t: (t * t).sum() + 3.0 * t[0], x) < 1e-8


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return (x**3).sum()

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 2.0 * x  # should be 3 x^2


def test_grad_check_flags_wrong_backward():
    x = torch.tensor([1.0, 2.0], dtype=DTYPE)
    assert grad_check(_WrongGrad.apply, x) > 0.1


def test_grad_check_parameter_list_mode():
    w = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=DTYPE)
    b = torch.tensor([0.5, -0.5], dtype=DTYPE)
    x = torch.tensor([0.1, 0.7], dtype=DTYPE)
    assert grad_check(lambda: torch.tanh(w @ x + b).sum(), [w, b]) < 1e-7
    assert not w.requires_grad


def test_grad_check_non_finite():
    x = torch.tensor([0.0], dtype=DTYPE)
    with pytest.raises(NumericError):
        grad_check(lambda t: torch.log(t).sum(), x)


def test_init_normal_is_seeded():
    a = init_normal(Rng(1), (3, 4), 0.5)
    assert a.dtype == DTYPE
    assert torch.equal(a, init_normal(Rng(1), (3, 4), 0.5))


def test_attention_block_is_permutation_equivariant():
    # without positional input, full attention commutes with token permutations
    block = AttentionBlock(8, 2, 16, Rng(0))
    x = init_normal(Rng(1), (5, 8), 1.0)
    perm = torch.tensor([3, 0, 4, 1, 2])
    assert torch.allclose(block(x)[perm], block(x[perm]), atol=1e-12)


def test_attention_block_is_not_causal():
    block = AttentionBlock(8, 2, 16, Rng(0))
    x = init_normal(Rng(1), (4, 8), 1.0)
    y = x.clone()
    y[3] += torch.arange(8, dtype=DTYPE)
    # changing the last token changes the first output
    assert not torch.allclose(block(x)[0], block(y)[0])


def test_attention_block_batched_matches_single():
    block = AttentionBlock(8, 4, 16, Rng(2))
    x = init_normal(Rng(3), (2, 5, 8), 1.0)
    out = block(x)
    assert torch.allclose(out[1], block(x[1]), atol=1e-13)


def test_attention_block_gradients():
    block = AttentionBlock(4, 2, 8, Rng(0))
    x = init_normal(Rng(1), (3, 4), 1.0)
    assert grad_check(lambda t: (block(t) ** 2).sum(), x) < 1e-6


def test_attention_block_width_checks():
    with pytest.raises(ShapeError):
        AttentionBlock(6, 4, 8, Rng(0))
    with pytest.raises(ShapeError):
        AttentionBlock(8, 2, 8, Rng(0))(torch.zeros(3, 4, dtype=DTYPE))
