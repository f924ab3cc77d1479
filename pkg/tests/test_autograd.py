"""Tensor engine: forward semantics, gradients vs. finite differences, tape rules."""

from __future__ import annotations

import numpy as np
import pytest

from gridstitch import autograd as ag
from gridstitch import nn
from gridstitch.autograd import (
    NonFiniteError,
    ShapeMismatch,
    TapeError,
    Tensor,
    backward,
    tape,
)

FD_H = 1e-5
FD_TOL = 1e-4


def finite_diff_grad(f, x: Tensor, h: float = FD_H) -> np.ndarray:
    """Central-difference gradient of scalar-valued f with respect to x."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.abs(b), 1.0)
    return float(np.max(np.abs(a - b) / denom))


def check_op(build_loss, leaves: list[Tensor]) -> None:
    """Compare autograd grads of every leaf against central differences."""
    with tape():
        loss = build_loss()
    for leaf in leaves:
        leaf.grad = None
    backward(loss)
    for leaf in leaves:
        fd = finite_diff_grad(lambda: build_loss().item(), leaf)
        assert leaf.grad is not None
        assert rel_err(leaf.grad, fd) < FD_TOL


def proj_loss(out: Tensor, rng: np.random.Generator) -> Tensor:
    r = Tensor(rng.standard_normal(out.shape))
    return ag.sum(ag.mul(out, r))


# ---------------------------------------------------------------------------
# forward semantics

def test_softmax_of_zeros_is_uniform():
    out = ag.softmax_last(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_layer_norm_constant_row_is_zero():
    out = ag.layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]))
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_matmul_identity_preserves():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4))
    out = ag.matmul(Tensor(np.eye(3)), Tensor(x))
    assert np.array_equal(out.data, x)


def test_scalar_broadcast_only():
    x = Tensor(np.ones((2, 2)))
    assert np.allclose(ag.add(x, 1.5).data, 2.5)
    assert np.allclose(ag.mul(x, Tensor([2.0])).data, 2.0)
    with pytest.raises(ShapeMismatch, match=r"add.*\(2, 2\).*\(2,\)"):
        ag.add(x, Tensor([1.0, 2.0]))


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeMismatch, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch, match="masked_fill"):
        ag.masked_fill(Tensor(np.ones((2, 2))), np.zeros((3, 3), dtype=bool), 0.0)


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError, match="add"):
        ag.add(Tensor([np.inf]), Tensor([1.0]))
    with pytest.raises(NonFiniteError, match="gelu"):
        ag.gelu(Tensor([np.nan]))


def test_log_requires_positive():
    with pytest.raises(NonFiniteError, match="log"):
        ag.log(Tensor([0.0]))


# ---------------------------------------------------------------------------
# backward basics

def test_grad_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with tape():
        loss = ag.sum(ag.mul(x, x))
    backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0], atol=1e-14)


def test_cross_entropy_saturates_at_large_gap():
    # perfect logit row: gradient vanishes as the gap grows; checked at 30
    gap = 30.0
    x = Tensor([gap, 0.0, 0.0], requires_grad=True)
    onehot = Tensor([1.0, 0.0, 0.0])
    with tape():
        lse = ag.log(ag.sum(ag.exp(x)))
        picked = ag.sum(ag.mul(x, onehot))
        loss = ag.add(lse, ag.mul(picked, -1.0))
    backward(loss)
    assert np.max(np.abs(x.grad)) < 1e-6


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with tape():
        y = ag.mul(x, x)
    with pytest.raises(TapeError, match="scalar"):
        backward(y)


def test_tape_consumed_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with tape():
        loss = ag.sum(ag.mul(x, x))
    backward(loss)
    with pytest.raises(TapeError, match="consumed"):
        backward(loss)


def test_backward_without_tape_errors():
    loss = ag.sum(Tensor([1.0]))
    with pytest.raises(TapeError, match="tape"):
        backward(loss)


def test_leaf_grads_accumulate_across_tapes():
    x = Tensor([3.0], requires_grad=True)
    for _ in range(2):
        with tape():
            loss = ag.sum(ag.mul(x, x))
        backward(loss)
    assert np.allclose(x.grad, [12.0])


def test_param_used_twice_accumulates_in_one_pass():
    x = Tensor([2.0], requires_grad=True)
    with tape():
        loss = ag.sum(ag.add(ag.mul(x, x), x))
    backward(loss)
    assert np.allclose(x.grad, [5.0])


# ---------------------------------------------------------------------------
# gradients vs. central differences, per primitive

def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    w1 = Tensor(rng.standard_normal((4, 8)) * 0.5, requires_grad=True)
    b1 = Tensor(rng.standard_normal(8) * 0.1, requires_grad=True)
    w2 = Tensor(rng.standard_normal((8, 3)) * 0.5, requires_grad=True)
    b2 = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    r = Tensor(rng.standard_normal((5, 3)))

    def build():
        h = ag.gelu(nn.linear(x, w1, b1))
        out = nn.linear(h, w2, b2)
        return ag.sum(ag.mul(out, r))

    check_op(build, [x, w1, b1, w2, b2])


def _random_primitive_case(op_idx: int, rng: np.random.Generator):
    """Build (loss_fn, leaves) for one primitive with a random shape."""
    def shp(nd_max=3, lo=2, hi=5):
        nd = int(rng.integers(1, nd_max + 1))
        return tuple(int(rng.integers(lo, hi)) for _ in range(nd))

    if op_idx == 0:  # add
        s = shp()
        a, b = Tensor(rng.standard_normal(s), requires_grad=True), Tensor(rng.standard_normal(s), requires_grad=True)
        return lambda: proj_loss(ag.add(a, b), np.random.default_rng(0)), [a, b]
    if op_idx == 1:  # mul
        s = shp()
        a, b = Tensor(rng.standard_normal(s), requires_grad=True), Tensor(rng.standard_normal(s), requires_grad=True)
        return lambda: proj_loss(ag.mul(a, b), np.random.default_rng(1)), [a, b]
    if op_idx == 2:  # matmul 2d
        m, k, n = (int(rng.integers(2, 5)) for _ in range(3))
        a = Tensor(rng.standard_normal((m, k)), requires_grad=True)
        b = Tensor(rng.standard_normal((k, n)), requires_grad=True)
        return lambda: proj_loss(ag.matmul(a, b), np.random.default_rng(2)), [a, b]
    if op_idx == 3:  # matmul batched
        bsz, m, k, n = (int(rng.integers(2, 4)) for _ in range(4))
        a = Tensor(rng.standard_normal((bsz, m, k)), requires_grad=True)
        b = Tensor(rng.standard_normal((bsz, k, n)), requires_grad=True)
        return lambda: proj_loss(ag.matmul(a, b), np.random.default_rng(3)), [a, b]
    if op_idx == 4:  # transpose
        s = shp(3)
        perm = list(range(len(s)))
        rng.shuffle(perm)
        a = Tensor(rng.standard_normal(s), requires_grad=True)
        return lambda: proj_loss(ag.transpose(a, perm), np.random.default_rng(4)), [a]
    if op_idx == 5:  # reshape
        s = (2, 6)
        a = Tensor(rng.standard_normal(s), requires_grad=True)
        return lambda: proj_loss(ag.reshape(a, (3, 4)), np.random.default_rng(5)), [a]
    if op_idx == 6:  # concat_last
        lead = shp(2)
        parts = [Tensor(rng.standard_normal(lead + (int(rng.integers(1, 4)),)), requires_grad=True)
                 for _ in range(3)]
        return lambda: proj_loss(ag.concat_last(parts), np.random.default_rng(6)), parts
    if op_idx == 7:  # slice_axis
        s = (4, 5)
        a = Tensor(rng.standard_normal(s), requires_grad=True)
        axis = int(rng.integers(0, 2))
        start = int(rng.integers(0, 2))
        stop = int(rng.integers(start + 1, s[axis] + 1))
        return lambda: proj_loss(ag.slice_axis(a, axis, start, stop), np.random.default_rng(7)), [a]
    if op_idx == 8:  # embedding
        table = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
        idx = rng.integers(0, 6, size=(2, 4))
        return lambda: proj_loss(ag.embedding(table, idx), np.random.default_rng(8)), [table]
    if op_idx == 9:  # softmax
        s = shp()
        a = Tensor(rng.standard_normal(s), requires_grad=True)
        return lambda: proj_loss(ag.softmax_last(a), np.random.default_rng(9)), [a]
    if op_idx == 10:  # layer_norm
        s = shp(2) + (int(rng.integers(3, 6)),)
        a = Tensor(rng.standard_normal(s), requires_grad=True)
        return lambda: proj_loss(ag.layer_norm(a), np.random.default_rng(10)), [a]
    if op_idx == 11:  # gelu
        s = shp()
        a = Tensor(rng.standard_normal(s), requires_grad=True)
        return lambda: proj_loss(ag.gelu(a), np.random.default_rng(11)), [a]
    if op_idx == 12:  # exp
        s = shp()
        a = Tensor(rng.standard_normal(s), requires_grad=True)
        return lambda: proj_loss(ag.exp(a), np.random.default_rng(12)), [a]
    if op_idx == 13:  # log
        s = shp()
        a = Tensor(rng.random(s) + 0.5, requires_grad=True)
        return lambda: proj_loss(ag.log(a), np.random.default_rng(13)), [a]
    if op_idx == 14:  # sum / mean over a random axis
        s = shp(3)
        a = Tensor(rng.standard_normal(s), requires_grad=True)
        axis = int(rng.integers(0, len(s))) if rng.random() < 0.8 else None
        keep = bool(rng.random() < 0.5)
        red = ag.sum if rng.random() < 0.5 else ag.mean
        return lambda: proj_loss(red(a, axis=axis, keepdims=keep), np.random.default_rng(14)), [a]
    if op_idx == 15:  # masked_fill
        s = shp()
        a = Tensor(rng.standard_normal(s), requires_grad=True)
        mask = rng.random(s) < 0.4
        return lambda: proj_loss(ag.masked_fill(a, mask, -3.0), np.random.default_rng(15)), [a]
    if op_idx == 16:  # affine (fused matmul + row bias)
        n, k, m = (int(rng.integers(2, 5)) for _ in range(3))
        x = Tensor(rng.standard_normal((n, k)), requires_grad=True)
        w = Tensor(rng.standard_normal((k, m)), requires_grad=True)
        b = Tensor(rng.standard_normal(m), requires_grad=True)
        return lambda: proj_loss(ag.affine(x, w, b), np.random.default_rng(16)), [x, w, b]
    # scale_shift (row-broadcast gain/bias)
    s = shp(2) + (int(rng.integers(2, 5)),)
    x = Tensor(rng.standard_normal(s), requires_grad=True)
    gn = Tensor(rng.standard_normal(s[-1]), requires_grad=True)
    bs = Tensor(rng.standard_normal(s[-1]), requires_grad=True)
    return lambda: proj_loss(ag.scale_shift(x, gn, bs), np.random.default_rng(17)), [x, gn, bs]


N_PRIMITIVE_CASES = 18


@pytest.mark.parametrize("seed", range(100))
def test_primitive_gradients_random_shapes(seed):
    rng = np.random.default_rng(seed)
    build, leaves = _random_primitive_case(seed % N_PRIMITIVE_CASES, rng)
    check_op(build, leaves)


# ---------------------------------------------------------------------------
# determinism and masking

def test_bitwise_determinism():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((6, 2)), requires_grad=True)
        with tape():
            loss = ag.sum(ag.gelu(ag.matmul(x, w)))
        backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_masked_positions_get_exactly_zero_grad():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    mask = np.triu(np.ones((4, 4), dtype=bool), k=1)
    with tape():
        filled = ag.masked_fill(x, mask, -1e9)
        probs = ag.softmax_last(filled)
        loss = ag.sum(ag.mul(probs, Tensor(rng.standard_normal((4, 4)))))
    backward(loss)
    assert np.all(x.grad[mask] == 0.0)
    assert np.any(x.grad[~mask] != 0.0)


def test_dropout_modes():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((1000,)))
    out_eval = nn.dropout(x, 0.5, None, training=False)
    assert out_eval is x
    out_train = nn.dropout(x, 0.5, rng, training=True)
    kept = out_train.data[out_train.data > 0]
    assert np.allclose(kept, 2.0)  # inverted scaling
    assert 0.4 < np.mean(out_train.data > 0) < 0.6
