"""Parameter initialization and small network building blocks.

Everything operates on dicts of named Tensors so the same checkpoint
format serves transformers and critic MLPs alike.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def init_param(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02) -> Tensor:
    if std == 0.0:
        return Tensor(np.zeros(shape), requires_grad=True)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def add_linear(params: dict[str, Tensor], rng: np.random.Generator, name: str,
               n_in: int, n_out: int, std: float = 0.02, zero: bool = False) -> None:
    params[f"{name}.w"] = init_param(rng, (n_in, n_out), 0.0 if zero else std)
    params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Apply x @ w + b on the last axis of a 2D or 3D input."""
    lead = x.shape[:-1]
    if not lead:
        return ag.affine(ag.reshape(x, (1, x.shape[-1])), w, b)
    rows = int(np.prod(lead))
    y = ag.affine(ag.reshape(x, (rows, x.shape[-1])), w, b)
    return ag.reshape(y, lead + (w.shape[-1],))


def layer_norm_affine(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ag.scale_shift(ag.layer_norm(x), gain, bias)


def mlp(x: Tensor, params: dict[str, Tensor], prefix: str, n_hidden_layers: int = 2) -> Tensor:
    h = x
    for i in range(n_hidden_layers):
        h = ag.gelu(linear(h, params[f"{prefix}.h{i}.w"], params[f"{prefix}.h{i}.b"]))
    return linear(h, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def add_mlp(params: dict[str, Tensor], rng: np.random.Generator, prefix: str,
            n_in: int, n_hidden: int, n_out: int, n_hidden_layers: int = 2) -> None:
    d = n_in
    for i in range(n_hidden_layers):
        add_linear(params, rng, f"{prefix}.h{i}", d, n_hidden, std=1.0 / np.sqrt(d))
        d = n_hidden
    add_linear(params, rng, f"{prefix}.out", d, n_out, std=1.0 / np.sqrt(d))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted-scaling dropout; identity unless training with p > 0."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng stream")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return ag.mul(x, Tensor(mask))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads in place so their global L2 norm is <= max_norm."""
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm
