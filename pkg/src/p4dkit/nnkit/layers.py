"""Small layer library: Xavier-initialised affine maps, GELU, pre-norm transformer blocks."""

from __future__ import annotations

import math

import torch
from torch import nn

from .ops import gelu, xavier_init, zero_init


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, gen: torch.Generator, bias: bool = True, zero: bool = False):
        super().__init__()
        w = zero_init((d_out, d_in)) if zero else xavier_init((d_out, d_in), gen)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(zero_init((d_out,))) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x @ self.weight.t()
        if self.bias is not None:
            y = y + self.bias
        return y


class GELU(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gelu(x)


class MLP(nn.Module):
    """Affine layers with GELU between consecutive layers (none after the last)."""

    def __init__(self, widths: list[int], gen: torch.Generator, zero_last: bool = False):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("MLP needs at least an input and an output width")
        n = len(widths) - 1
        self.layers = nn.ModuleList(
            Linear(widths[i], widths[i + 1], gen, zero=zero_last and i == n - 1) for i in range(n)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nn.functional.layer_norm(x, self.weight.shape, self.weight, self.bias, 1e-5)


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int, gen: torch.Generator, causal: bool):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"width {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.causal = causal
        self.qkv = Linear(dim, 3 * dim, gen)
        self.out = Linear(dim, dim, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, C = x.shape
        hd = C // self.n_heads
        q, k, v = self.qkv(x).split(C, dim=-1)
        q = q.view(B, L, self.n_heads, hd).transpose(1, 2)
        k = k.view(B, L, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, L, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        if self.causal:
            mask = torch.ones(L, L, dtype=torch.bool).triu(1)
            att = att.masked_fill(mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, C)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, n_heads: int, gen: torch.Generator, causal: bool, mlp_ratio: int = 2):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, n_heads, gen, causal)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP([dim, mlp_ratio * dim, dim], gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))
