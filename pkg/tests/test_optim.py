"""AdamW update rules against closed-form moment recursions."""

from __future__ import annotations

import numpy as np
import pytest

from gridstitch.autograd import Tensor
from gridstitch.optim import AdamW


def test_zero_grad_zero_decay_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1)
    p.grad = np.zeros(2)
    for _ in range(5):
        opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_constant_gradient_displacement_approaches_lr():
    # oracle: simulate the moment recursions directly
    lr, b1, b2, eps, g = 0.01, 0.9, 0.999, 1e-8, 0.37
    m = v = 0.0
    expected = []
    for t in range(1, 51):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        expected.append(lr * mh / (np.sqrt(vh) + eps))

    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=lr, betas=(b1, b2), eps=eps)
    prev = p.data.copy()
    for t in range(50):
        p.grad = np.array([g])
        opt.step()
        step_size = float(np.abs(p.data - prev)[0])
        assert step_size == pytest.approx(expected[t], abs=1e-14)
        prev = p.data.copy()
    # adaptive normalization limit: |step| -> lr
    assert step_size == pytest.approx(lr, rel=1e-6)


def test_decoupled_decay_multiplies_by_one_minus_lr_lambda():
    lr, wd = 0.05, 0.2
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=lr, weight_decay=wd)
    for t in range(1, 4):
        p.grad = np.zeros(1)
        opt.step()
        assert p.data[0] == pytest.approx(2.0 * (1 - lr * wd) ** t, rel=1e-12)


def test_nonpositive_lr_rejected():
    p = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ValueError, match="learning rate"):
        AdamW({"p": p}, lr=0.0)
    opt = AdamW({"p": p}, lr=0.1)
    opt.lr = -1.0
    p.grad = np.ones(1)
    with pytest.raises(ValueError, match="learning rate"):
        opt.step()


def test_unused_param_untouched():
    p = Tensor(np.array([1.0]), requires_grad=True)
    q = Tensor(np.array([5.0]), requires_grad=True)
    opt = AdamW({"p": p, "q": q}, lr=0.1, weight_decay=0.5)
    p.grad = np.ones(1)
    q.grad = None
    opt.step()
    assert q.data[0] == 5.0
    assert p.data[0] != 1.0
