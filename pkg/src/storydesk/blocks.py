"""Shared neural building blocks and deterministic-initialization helpers."""

from __future__ import annotations

import contextlib
import math
from collections.abc import Iterator

import torch
from torch import nn
from torch.nn import functional as F


@contextlib.contextmanager
def deterministic_init(seed: int) -> Iterator[None]:
    """Scope in which module construction draws from a fixed RNG stream.

    Forks the global torch RNG state so callers outside the scope are
    unaffected.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Classic sin/cos positional code for integer timesteps.

    t: (B,) integer or float tensor. Returns (B, dim) float32.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class SequenceSelfAttention(nn.Module):
    """Multi-head self-attention over a (B, L, D) token sequence."""

    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, length, dim = x.shape
        head_dim = dim // self.heads

        def shape(t: torch.Tensor) -> torch.Tensor:
            return t.reshape(b, length, self.heads, head_dim).transpose(1, 2)

        q, k, v = shape(self.to_q(x)), shape(self.to_k(x)), shape(self.to_v(x))
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, length, dim)
        return self.to_out(out)


class TransformerLayer(nn.Module):
    """Pre-norm transformer block: self-attention + gelu MLP, both residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SequenceSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def zero_module(module: nn.Module) -> nn.Module:
    """Zero every parameter in place and return the module."""
    for p in module.parameters():
        nn.init.zeros_(p)
    return module
