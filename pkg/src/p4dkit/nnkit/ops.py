"""Differentiable primitives shared by the teacher, the student and the trainer.

All functions operate on torch tensors so that reverse-mode gradients come from
autograd; ``gelu_grad`` is the hand-derived derivative used as a cross-check.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch.nn import functional as F

DEFAULT_TIMESCALE = 10_000.0


def smooth_l1(a: torch.Tensor, b: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Mean Smooth-L1 distance between ``a`` and ``b``.

    Quadratic ``0.5 * d**2 / delta`` below ``delta``, linear ``|d| - 0.5 * delta``
    above it, so value and slope are continuous at the transition.
    """
    if a.shape != b.shape:
        raise ValueError(f"smooth_l1 shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    d = a - b
    ad = d.abs()
    per = torch.where(ad < delta, 0.5 * d * d / delta, ad - 0.5 * delta)
    return per.mean()


def smooth_l1_per_frame(a: torch.Tensor, b: torch.Tensor, delta: float = 1.0, frame_dim: int = 0) -> torch.Tensor:
    """Smooth-L1 averaged inside each frame; returns one value per frame."""
    if a.shape != b.shape:
        raise ValueError(f"smooth_l1 shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    d = a - b
    ad = d.abs()
    per = torch.where(ad < delta, 0.5 * d * d / delta, ad - 0.5 * delta)
    per = per.movedim(frame_dim, 0)
    return per.reshape(per.shape[0], -1).mean(dim=1)


def cross_entropy(logits: torch.Tensor, target, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Negative log-softmax of ``target`` under ``logits`` (last axis is the vocabulary).

    With leading batch axes the per-position losses are averaged, restricted to
    ``mask`` when given. The max-subtraction inside ``log_softmax`` keeps large
    logits stable.
    """
    if not torch.isfinite(logits).all():
        raise ValueError("cross_entropy received non-finite logits")
    target = torch.as_tensor(target, device=logits.device, dtype=torch.long)
    vocab = logits.shape[-1]
    if (target < 0).any() or (target >= vocab).any():
        raise ValueError(f"target index out of range for vocabulary of size {vocab}")
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    logp = shifted - torch.logsumexp(shifted, dim=-1, keepdim=True)
    nll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    if mask is None:
        return nll.mean()
    mask = mask.to(nll.dtype)
    denom = mask.sum()
    if denom <= 0:
        return nll.sum() * 0.0
    return (nll * mask).sum() / denom


def sinusoidal_encoding(t, dim: int, timescale: float = DEFAULT_TIMESCALE, dtype=None) -> torch.Tensor:
    """Sinusoidal encoding of time ``t`` (seconds): even channels sin, odd channels cos.

    Channel pair ``(2i, 2i+1)`` uses the divisor ``timescale ** (2i / dim)``.
    ``t`` may be a scalar or a 1-D sequence; the result has shape ``(..., dim)``.
    """
    if dim % 2:
        raise ValueError(f"encoding width must be even, got {dim}")
    if timescale <= 0:
        raise ValueError("timescale must be positive")
    dtype = dtype or torch.get_default_dtype()
    t = torch.as_tensor(t, dtype=dtype)
    i = torch.arange(dim // 2, dtype=dtype)
    divisor = torch.pow(torch.as_tensor(timescale, dtype=dtype), 2.0 * i / dim)
    angle = t.unsqueeze(-1) / divisor
    out = torch.empty(*t.shape, dim, dtype=dtype)
    out[..., 0::2] = torch.sin(angle)
    out[..., 1::2] = torch.cos(angle)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """GELU, tanh approximation (torch's fused kernel of the same closed form)."""
    return F.gelu(x, approximate="tanh")


def gelu_grad(x: torch.Tensor) -> torch.Tensor:
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = torch.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner


def _fans(shape: Sequence[int]) -> tuple[int, int]:
    if len(shape) < 2:
        raise ValueError(f"cannot derive fan_in/fan_out from shape {tuple(shape)}")
    # torch Linear layout: (out, in, *receptive)
    receptive = math.prod(shape[2:]) if len(shape) > 2 else 1
    fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    if fan_in == 0 or fan_out == 0:
        raise ValueError(f"zero fan for shape {tuple(shape)}")
    return fan_in, fan_out


def xavier_bound(shape: Sequence[int]) -> float:
    fan_in, fan_out = _fans(shape)
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(shape: Sequence[int], seed: int | torch.Generator, dtype=None) -> torch.Tensor:
    """Uniform Glorot initialisation on ``[-b, b]`` with ``b = sqrt(6 / (fan_in + fan_out))``."""
    bound = xavier_bound(shape)
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    dtype = dtype or torch.get_default_dtype()
    u = torch.rand(tuple(shape), generator=gen, dtype=torch.float64)
    return ((2.0 * u - 1.0) * bound).to(dtype)


def zero_init(shape: Sequence[int], dtype=None) -> torch.Tensor:
    return torch.zeros(tuple(shape), dtype=dtype or torch.get_default_dtype())
