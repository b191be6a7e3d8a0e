"""Transformer encoder over the flattened backbone feature grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Conv2d, LayerNorm, Linear, Module, Parameter
from .tensor import ShapeError, Tensor, matmul, permute, reshape, transpose


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 256
    d_ffn: int = 1024
    n_layers: int = 4
    n_heads: int = 8
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


def flatten_grid(x: Tensor) -> Tensor:
    """N x d x H x W -> N x (H*W) x d, token index = row * W + col."""
    n, d, h, w = x.shape
    return permute(reshape(x, (n, d, h * w)), (0, 2, 1))


def unflatten_grid(seq: Tensor, grid: tuple[int, int]) -> Tensor:
    n, length, d = seq.shape
    if length != grid[0] * grid[1]:
        raise ShapeError(f"sequence length {length} does not match grid {grid}")
    return reshape(permute(seq, (0, 2, 1)), (n, d, grid[0], grid[1]))


class Projection(Module):
    """1x1 convolution to the encoder width followed by grid flattening."""

    def __init__(self, cin: int, d_model: int, rng: np.random.Generator):
        super().__init__()
        self.in_channels = cin
        self.conv = Conv2d(cin, d_model, 1, rng, bias=True)

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"projection expects {self.in_channels} channels, got shape {x.shape}")
        y = self.conv(x)
        if trace is not None:
            trace.append(("project", y.shape))
        seq = flatten_grid(y)
        if trace is not None:
            trace.append(("flatten", seq.shape))
        return seq


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.attention: np.ndarray | None = None
        self.retain = True

    def _split(self, t: Tensor) -> Tensor:
        n, length, _ = t.shape
        return permute(reshape(t, (n, length, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def forward(self, x: Tensor) -> Tensor:
        n, length, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        attn = F.softmax(matmul(q, transpose(k)) * (1.0 / math.sqrt(self.d_head)), axis=-1)
        if self.retain:
            self.attention = attn.data
        ctx = reshape(permute(matmul(attn, v), (0, 2, 1, 3)), (n, length, d))
        return self.out(ctx)


class EncoderLayer(Module):
    """Post-norm layer: x = LN(x + MHA(x)); x = LN(x + FFN(x))."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.dropout = cfg.dropout
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ff1 = Linear(cfg.d_model, cfg.d_ffn, rng)
        self.ff2 = Linear(cfg.d_ffn, cfg.d_model, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self._rng = None

    def forward(self, x: Tensor) -> Tensor:
        a = F.dropout(self.attn(x), self.dropout, self._rng, self.training)
        x = self.norm1(x + a)
        f = self.ff2(F.dropout(F.relu(self.ff1(x)), self.dropout, self._rng, self.training))
        return self.norm2(x + F.dropout(f, self.dropout, self._rng, self.training))


class TransformerEncoder(Module):
    """Learnable position embedding added once, then ``n_layers`` encoder layers."""

    def __init__(self, cfg: EncoderConfig, seq_len: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.seq_len = seq_len
        self.pos_embedding = Parameter(rng.normal(0.0, 0.02, size=(seq_len, cfg.d_model)))
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]

    def forward(self, seq: Tensor) -> Tensor:
        if seq.ndim != 3 or seq.shape[1:] != (self.seq_len, self.cfg.d_model):
            raise ShapeError(f"encoder expects N x {self.seq_len} x {self.cfg.d_model}, got {seq.shape}")
        x = seq + self.pos_embedding
        for layer in self.layers:
            x = layer(x)
        return x

    def attention(self) -> np.ndarray | None:
        """Retained maps stacked as (n_layers, N, heads, L, L)."""
        maps = [layer.attn.attention for layer in self.layers]
        if any(m is None for m in maps):
            return None
        return np.stack(maps)

    def set_retain(self, flag: bool) -> None:
        for layer in self.layers:
            layer.attn.retain = flag
            if not flag:
                layer.attn.attention = None
