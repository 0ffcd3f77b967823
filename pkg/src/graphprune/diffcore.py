"""Differentiable primitives used by the encoder, policy, autoencoder and evaluator.

Reverse-mode differentiation is delegated to torch autograd.  This module
adds the shape contracts the rest of the package relies on, the Bernoulli
likelihood terms, orthogonal initialisation, a plain Adam recurrence and a
central finite-difference checker that is independent of autograd.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NonScalarLossError, RankError, ShapeMismatchError

LOGIT_CLAMP = 30.0


@contextlib.contextmanager
def precision(dtype: torch.dtype):
    """Temporarily change torch's default dtype (float64 = check mode)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def _same_shape(op: str, *xs: torch.Tensor) -> None:
    shapes = {tuple(x.shape) for x in xs}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"{op}: incompatible shapes {[tuple(x.shape) for x in xs]}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # only bias-add broadcasting: b may be a vector matching a's last axis
    if a.shape != b.shape and not (b.dim() == 1 and a.shape[-1:] == b.shape):
        raise ShapeMismatchError(f"add: {tuple(a.shape)} + {tuple(b.shape)}")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape("mul", a, b)
    return a * b


def leaky_relu(x: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    return F.leaky_relu(x, negative_slope=slope)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softmax(x: torch.Tensor, axis: int = -1, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get zero weight."""
    if mask is not None:
        if mask.shape != x.shape[-mask.dim():]:
            raise ShapeMismatchError(f"softmax: mask {tuple(mask.shape)} vs input {tuple(x.shape)}")
        x = x.masked_fill(~mask, float("-inf"))
    return torch.softmax(x, dim=axis)


def concat(xs: Sequence[torch.Tensor], axis: int = -1) -> torch.Tensor:
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis % len(ref)):
            raise ShapeMismatchError(f"concat: {[tuple(x.shape) for x in xs]} along {axis}")
    return torch.cat(list(xs), dim=axis)


def slice_(x: torch.Tensor, start: int, stop: int, axis: int = -1) -> torch.Tensor:
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeMismatchError(f"slice: [{start}:{stop}] out of range for axis of size {x.shape[axis]}")
    return x.narrow(axis, start, stop - start)


def sum_(x: torch.Tensor, axis: int | None = None) -> torch.Tensor:
    return x.sum() if axis is None else x.sum(dim=axis)


def mean(x: torch.Tensor, axis: int | None = None) -> torch.Tensor:
    return x.mean() if axis is None else x.mean(dim=axis)


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    _same_shape("bce_with_logits", logits, targets)
    per = torch.clamp(logits, min=0) - logits * targets + torch.log1p(torch.exp(-logits.abs()))
    return per.sum() if reduction == "sum" else per.mean()


def mse(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    _same_shape("mse", pred, target)
    sq = (pred - target) ** 2
    return sq.sum() if reduction == "sum" else sq.mean()


def bernoulli_logprob(logits: torch.Tensor, actions: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Sum of per-bit Bernoulli log-likelihoods over the last axis."""
    _same_shape("bernoulli_logprob", logits, actions)
    logits = logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    per = actions * F.logsigmoid(logits) + (1.0 - actions) * F.logsigmoid(-logits)
    if valid is not None:
        per = per * valid
    return per.sum(dim=-1)


def bernoulli_entropy(logits: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    logits = logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    p = torch.sigmoid(logits)
    per = p * F.softplus(-logits) + (1.0 - p) * F.softplus(logits)
    if valid is not None:
        per = per * valid
    return per.sum(dim=-1)


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    if loss.numel() != 1:
        raise NonScalarLossError(f"loss has shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss.reshape(()), list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def orthogonal_init(shape: Sequence[int], gain: float, rng: np.random.Generator, dtype=None) -> torch.Tensor:
    """Orthogonal matrix scaled by ``gain`` (W W^T = gain^2 I when rows <= cols)."""
    if len(shape) != 2:
        raise RankError(f"orthogonal_init needs a rank-2 shape, got {tuple(shape)}")
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    w = q if rows >= cols else q.T
    return torch.tensor(gain * w, dtype=dtype or torch.get_default_dtype())


@dataclass
class Adam:
    """Adam with bias correction, operating in place on a fixed parameter list."""

    params: list[torch.Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.m:
            self.m = [torch.zeros_like(p) for p in self.params]
            self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, grads: Sequence[torch.Tensor]) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))


def clip_grad_norm(grads: list[torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total


def finite_difference_grads(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-4) -> list[torch.Tensor]:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``params``."""
    out = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(f())
                flat[i] = orig - h
                down = float(f())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            out.append(g)
    return out


def gradient_error(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-4) -> float:
    """Max relative error between autograd and central differences.

    The error of each parameter tensor is ``max|g_ad - g_fd| / max(|g_ad|, |g_fd|)``
    (norm-wise, so vanishing individual entries do not blow up the ratio); the
    worst tensor is returned.
    """
    analytic = backward(f(), params)
    numeric = finite_difference_grads(f, params, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(float(a.abs().max()), float(n.abs().max()))
        if scale < 1e-8:  # both numerically zero
            continue
        worst = max(worst, float((a - n).abs().max()) / scale)
    return worst
