"""Dense kernels for the tiny transformer, seeded randomness and gradient checking.

Reverse-mode gradients come from ``torch.autograd``; every kernel here is a thin
functional wrapper with shape checks so the model code reads in terms of the
operations it needs. :func:`grad_check` is deliberately independent of autograd
for the reference side: it perturbs parameters in place and evaluates the
scalar function with central differences.

Randomness
----------
All randomness flows through :func:`make_rng`, which returns a numpy
``Generator`` backed by PCG64. Streams are split by name: the child stream for
``(seed, name)`` is ``SeedSequence(seed, spawn_key=(crc32(name),))``. Parameter
initialization draws from numpy and copies into torch, so identical seeds give
identical weights regardless of torch's own generator.
"""

from __future__ import annotations

import math
import zlib
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

LN_EPS = 1e-6


class NonFiniteError(FloatingPointError):
    """Raised when an activation or loss leaves the finite reals."""


def make_rng(seed: int, stream: str | None = None) -> np.random.Generator:
    if stream is None:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    key = zlib.crc32(stream.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


def configure_determinism(threads: int | None = None) -> None:
    """Pin torch to a fixed reduction order (single thread unless told otherwise)."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads or 1)


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``y = x W^T + b`` over the last axis of ``x``."""
    _require(weight.dim() == 2, f"weight must be 2-D, got {tuple(weight.shape)}")
    _require(
        x.shape[-1] == weight.shape[1],
        f"linear: input dim {x.shape[-1]} does not match weight {tuple(weight.shape)}",
    )
    if bias is not None:
        _require(bias.shape == (weight.shape[0],), f"linear: bias shape {tuple(bias.shape)}")
    return F.linear(x, weight, bias)


def layer_norm(x: torch.Tensor, weight: torch.Tensor | None = None, bias: torch.Tensor | None = None,
               eps: float = LN_EPS) -> torch.Tensor:
    if weight is not None:
        _require(weight.shape == (x.shape[-1],), "layer_norm: weight shape mismatch")
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return F.softmax(x, dim=dim)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact erf form, not the tanh approximation."""
    return F.gelu(x, approximate="none")


def multi_head_attention(x: torch.Tensor, qkv_w: torch.Tensor, qkv_b: torch.Tensor,
                         proj_w: torch.Tensor, proj_b: torch.Tensor, heads: int) -> torch.Tensor:
    """Scaled dot-product self-attention over ``x`` of shape (B, N, D)."""
    _require(x.dim() == 3, f"attention expects (B, N, D), got {tuple(x.shape)}")
    b, n, d = x.shape
    _require(d % heads == 0, f"dim {d} not divisible by {heads} heads")
    _require(qkv_w.shape == (3 * d, d), f"qkv weight shape {tuple(qkv_w.shape)} for dim {d}")
    hd = d // heads
    qkv = linear(x, qkv_w, qkv_b).reshape(b, n, 3, heads, hd).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = softmax((q @ k.transpose(-2, -1)) / math.sqrt(hd), dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(b, n, d)
    return linear(out, proj_w, proj_b)


def gelu_mlp(x: torch.Tensor, w1: torch.Tensor, b1: torch.Tensor,
             w2: torch.Tensor, b2: torch.Tensor) -> torch.Tensor:
    return linear(gelu(linear(x, w1, b1)), w2, b2)


# -- initialization from the numpy stream ------------------------------------

def uniform_init(shape: Sequence[int], bound: float, rng: np.random.Generator,
                 dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.as_tensor(rng.uniform(-bound, bound, size=tuple(shape)), dtype=dtype)


def xavier_uniform(shape: tuple[int, int], rng: np.random.Generator,
                   dtype: torch.dtype = torch.float32) -> torch.Tensor:
    fan_out, fan_in = shape
    return uniform_init(shape, math.sqrt(6.0 / (fan_in + fan_out)), rng, dtype)


def normal_init(shape: Sequence[int], std: float, rng: np.random.Generator,
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.as_tensor(rng.normal(0.0, std, size=tuple(shape)), dtype=dtype)


# -- finite differences -------------------------------------------------------

def grad_check(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-5) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``f`` must recompute a scalar from the current values of ``params`` on each
    call. The relative error per coordinate is
    ``|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss):
        raise NonFiniteError("grad_check: f is not finite at params")
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g_ad = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            g_flat = g_ad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteError("grad_check: f is not finite near params")
                fd = (up - down) / (2.0 * h)
                ad = g_flat[i].item()
                err = abs(ad - fd) / max(1e-12, abs(ad) + abs(fd))
                worst = max(worst, err)
    return worst
