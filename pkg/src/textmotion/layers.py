"""Transformer building blocks shared by the text stub and the motion transformer."""

from __future__ import annotations

import torch
import torch.nn as nn

from . import numerics as nx
from .errors import ShapeError

INIT_STD = 0.02


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, zero: bool = False):
        super().__init__()
        w = torch.zeros(d_in, d_out) if zero else torch.randn(d_in, d_out) * INIT_STD
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(d_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.matmul(x, self.weight) + self.bias


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, n_heads: int, zero_out: bool = False):
        super().__init__()
        if d % n_heads:
            raise ShapeError(f"width {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = Linear(d, 3 * d)
        self.out = Linear(d, d, zero=zero_out)

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor | None = None) -> torch.Tensor:
        """``x`` (B, S, d); ``key_valid`` (B, S) marks slots that may be attended to."""
        B, S, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(B, S, 3, h, d // h).permute(2, 0, 3, 1, 4)
        mask = None if key_valid is None else key_valid[:, None, None, :]
        o = nx.attention(q, k, v, mask)
        return self.out(o.transpose(1, 2).reshape(B, S, d))


class Ffn(nn.Module):
    """W2 act(W1 x + b1) + b2."""

    def __init__(self, d: int, d_ff: int, activation: str = "relu", zero_out: bool = False):
        super().__init__()
        self.fc1 = Linear(d, d_ff)
        self.fc2 = Linear(d_ff, d, zero=zero_out)
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(nx.activation(self.fc1(x), self.activation))


class StandardLayer(nn.Module):
    """Pre-norm block: h + Attn(LN(h)), then + FFN(LN(.))."""

    def __init__(self, d: int, n_heads: int, d_ff: int, activation: str = "relu", zero_init: bool = False):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, zero_out=zero_init)
        self.ln2 = LayerNorm(d)
        self.ffn = Ffn(d, d_ff, activation, zero_out=zero_init)

    def forward(self, h: torch.Tensor, key_valid: torch.Tensor | None = None, **_: object) -> torch.Tensor:
        h = h + self.attn(self.ln1(h), key_valid)
        return h + self.ffn(self.ln2(h))
