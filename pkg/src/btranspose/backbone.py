"""Bottleneck-Transformer backbone: stem, ResNet block groups and MHSA block groups."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import BatchNorm2d, Conv2d, Module, Parameter
from .tensor import ShapeError, Tensor, matmul, permute, reshape, transpose

EXPANSION = 4


@dataclass(frozen=True)
class BlockGroupSpec:
    kind: str  # "conv" or "mhsa"
    width: int
    n_blocks: int
    stride: int = 1
    heads: int = 0

    @property
    def out_channels(self) -> int:
        return EXPANSION * self.width


class Stem(Module):
    """7x7/2 convolution, batch norm, ReLU and 3x3/2 max pool (overall /4)."""

    def __init__(self, channels: int, rng: np.random.Generator, in_channels: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.conv = Conv2d(in_channels, channels, 7, rng, stride=2, padding=3)
        self.bn = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"stem expects N x {self.in_channels} x H x W images, got {x.shape}")
        return F.max_pool2d(F.relu(self.bn(self.conv(x))), 3, 2, 1)


def relative_logits(q: Tensor, table_h: Tensor, table_w: Tensor, height: int, width: int) -> Tensor:
    """Position logits ``q[p] . (table_h[di] + table_w[dj])`` for every query/key pair.

    ``q`` has shape (..., H*W, d); the tables have shapes (2H-1, d) and
    (2W-1, d) and are indexed by the key-minus-query offset shifted by H-1
    (resp. W-1).  Returns (..., H*W, H*W).
    """
    lead = q.shape[:-2]
    if q.shape[-2] != height * width:
        raise ShapeError(f"query length {q.shape[-2]} does not match grid {height}x{width}")
    if table_h.shape[0] != 2 * height - 1 or table_w.shape[0] != 2 * width - 1:
        raise ShapeError(f"relative tables {table_h.shape}, {table_w.shape} do not match grid {height}x{width}")
    d = q.shape[-1]
    k = len(lead)
    q5 = reshape(q, lead + (height, width, d))
    # width offsets: (..., H, W, W) indexed [i, j, j']
    rel_w = F.rel_to_abs(matmul(q5, transpose(table_w)))
    # height offsets: swap grid axes so the query row sits second to last
    swap = tuple(range(k)) + (k + 1, k, k + 2)
    rel_h = F.rel_to_abs(matmul(permute(q5, swap), transpose(table_h)))
    rel_h = permute(rel_h, swap)  # (..., H, W, H) indexed [i, j, i']
    full = reshape(rel_h, lead + (height, width, height, 1)) + reshape(rel_w, lead + (height, width, 1, width))
    return reshape(full, lead + (height * width, height * width))


class MHSA2d(Module):
    """All-to-all multi-head self-attention over a 2-D grid with relative position logits.

    The relative tables are shared across heads.  The last forward's attention
    maps (N, heads, L, L) are kept in ``attention`` when ``retain`` is set.
    """

    def __init__(self, dim: int, heads: int, grid: tuple[int, int], rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"MHSA channels {dim} not divisible by heads {heads}")
        self.heads = heads
        self.grid = grid
        self.d_head = dim // heads
        self.q = Conv2d(dim, dim, 1, rng)
        self.k = Conv2d(dim, dim, 1, rng)
        self.v = Conv2d(dim, dim, 1, rng)
        std = self.d_head ** -0.5
        self.table_h = Parameter(rng.normal(0.0, std, size=(2 * grid[0] - 1, self.d_head)))
        self.table_w = Parameter(rng.normal(0.0, std, size=(2 * grid[1] - 1, self.d_head)))
        self.retain = True
        self.attention: np.ndarray | None = None

    def _heads(self, t: Tensor) -> Tensor:
        n, c, h, w = t.shape
        return permute(reshape(t, (n, self.heads, self.d_head, h * w)), (0, 1, 3, 2))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c % self.heads:
            raise ShapeError(f"MHSA channels {c} not divisible by heads {self.heads}")
        if (h, w) != self.grid:
            raise ShapeError(f"MHSA built for grid {self.grid}, got {h}x{w}")
        q, k, v = self._heads(self.q(x)), self._heads(self.k(x)), self._heads(self.v(x))
        logits = matmul(q, transpose(k)) + relative_logits(q, self.table_h, self.table_w, h, w)
        attn = F.softmax(logits * (1.0 / math.sqrt(self.d_head)), axis=-1)
        if self.retain:
            self.attention = attn.data
        out = matmul(attn, v)  # (N, heads, L, d)
        return reshape(permute(out, (0, 1, 3, 2)), (n, c, h, w))


class Bottleneck(Module):
    """1x1 -> (3x3 conv | MHSA) -> 1x1 residual block with 4x channel expansion."""

    def __init__(self, cin: int, width: int, stride: int, rng: np.random.Generator,
                 heads: int = 0, grid: tuple[int, int] | None = None):
        super().__init__()
        self.in_channels = cin
        self.conv1 = Conv2d(cin, width, 1, rng)
        self.bn1 = BatchNorm2d(width)
        if heads:
            if stride != 1:
                raise ValueError("MHSA blocks do not downsample; use stride 1")
            self.mhsa = MHSA2d(width, heads, grid, rng)
            self.conv2 = None
        else:
            self.mhsa = None
            self.conv2 = Conv2d(width, width, 3, rng, stride=stride, padding=1)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, EXPANSION * width, 1, rng)
        self.bn3 = BatchNorm2d(EXPANSION * width)
        if stride != 1 or cin != EXPANSION * width:
            self.proj = Conv2d(cin, EXPANSION * width, 1, rng, stride=stride)
            self.proj_bn = BatchNorm2d(EXPANSION * width)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"block expects {self.in_channels} input channels, got {x.shape[1]}")
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.mhsa(out) if self.mhsa is not None else self.conv2(out)
        out = F.relu(self.bn2(out))
        out = self.bn3(self.conv3(out))
        shortcut = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return F.relu(out + shortcut)


class Backbone(Module):
    """Stem followed by the convolutional and MHSA block groups."""

    def __init__(self, groups: list[BlockGroupSpec], stem_channels: int, input_size: tuple[int, int],
                 rng: np.random.Generator):
        super().__init__()
        self.group_specs = list(groups)
        self.stem = Stem(stem_channels, rng)
        h, w = input_size[0] // 4, input_size[1] // 4
        cin = stem_channels
        self.blocks: list[Bottleneck] = []
        self.group_ends: list[int] = []
        for g in groups:
            for b in range(g.n_blocks):
                stride = g.stride if b == 0 else 1
                if stride != 1:
                    h, w = (h - 1) // stride + 1, (w - 1) // stride + 1
                heads = g.heads if g.kind == "mhsa" else 0
                self.blocks.append(Bottleneck(cin, g.width, stride, rng, heads=heads, grid=(h, w)))
                cin = g.out_channels
            self.group_ends.append(len(self.blocks))
        self.out_channels = cin
        self.out_grid = (h, w)

    def mhsa_layers(self) -> list[MHSA2d]:
        return [b.mhsa for b in self.blocks if b.mhsa is not None]

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        x = self.stem(x)
        if trace is not None:
            trace.append(("stem", x.shape))
        start = 0
        for g, end in zip(self.group_specs, self.group_ends):
            for blk in self.blocks[start:end]:
                x = blk(x)
            start = end
            if trace is not None:
                trace.append((g.kind, x.shape))
        return x
