"""Dense float32 tensor primitives, reverse-mode gradients and a finite-difference oracle.

Tensors are ``torch.Tensor`` values and the autograd graph plays the role of the
tape. The primitives below add the shape validation the rest of the package
relies on; ``finite_difference_check`` never touches autograd for its own
estimate, so it stays an independent check of ``backward``.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
from torch import Tensor

DTYPE = torch.float32


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


def tensor(data, requires_grad: bool = False) -> Tensor:
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


def _broadcastable(a: Tensor, b: Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{op}: cannot broadcast {tuple(a.shape)} with {tuple(b.shape)}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "add")
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "mul")
    return a * b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError:
        raise ShapeError(f"matmul: batch dims {tuple(a.shape)} vs {tuple(b.shape)}") from None
    return a @ b


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit (biased) variance, no affine."""
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps)


def silu(x: Tensor) -> Tensor:
    return x * torch.sigmoid(x)


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat: no operands")
    ref = list(parts[0].shape)
    ax = axis % len(ref)
    for p in parts[1:]:
        shp = list(p.shape)
        if len(shp) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(shp, ref)) if i != ax):
            raise ShapeError(f"concat: {[tuple(q.shape) for q in parts]} along axis {axis}")
    return torch.cat(list(parts), dim=axis)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for last axis {x.shape[-1]}")
    return x[..., start:stop]


def backward(loss: Tensor, params: Sequence[Tensor], retain_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to each of ``params``.

    Parameters that ``loss`` does not depend on get an exact zero gradient.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    params = list(params)
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True, retain_graph=retain_graph)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def finite_difference_check(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3) -> float:
    """Max over coordinates of |g_fd - g_ad| / max(1, |g_fd|, |g_ad|).

    ``g_fd`` is the central difference of ``fn`` at ``x``; ``g_ad`` comes from
    :func:`backward`. Evaluation happens in ``x``'s dtype.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = x.detach().clone()
    xv = x0.clone().requires_grad_(True)
    out = fn(xv)
    if not torch.isfinite(out).all():
        raise FloatingPointError(f"fn is not finite at x: {out}")
    (g_ad,) = backward(out, [xv])

    g_fd = torch.zeros_like(x0)
    flat = x0.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            fp = fn(x0).item()
            flat[i] = orig - step
            fm = fn(x0).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"fn is not finite near coordinate {i}")
            fd_flat[i] = (fp - fm) / (2.0 * step)

    g_ad = g_ad.detach().to(g_fd.dtype)
    denom = torch.maximum(torch.ones_like(g_fd), torch.maximum(g_fd.abs(), g_ad.abs()))
    return float(((g_fd - g_ad).abs() / denom).max())
