"""Multi-head attention, overlapping window partitions and the local-global block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear
from .tensor import ParameterStore, Tensor


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    heads: int
    horizontal: tuple = (2, 8)
    vertical: tuple = (8, 2)
    square: tuple = (4, 4)
    stride_fraction: float = 0.5
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0 < self.stride_fraction <= 1:
            raise ValueError("stride_fraction must be in (0, 1]")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


class WindowPartition:
    """Equal-shaped, possibly overlapping windows over an H x W token grid.

    ``index`` lists, window by window, the flat cell index of every window
    position; ``weights`` gives each (window, position) entry the reciprocal
    of its cell's coverage count so that overlapping outputs average.
    """

    def __init__(self, grid: tuple, windows: list):
        self.grid = tuple(grid)
        self.windows = [np.asarray(w, dtype=np.int64) for w in windows]
        sizes = {w.size for w in self.windows}
        if len(sizes) != 1:
            raise ValueError("all windows in a partition must have the same size")
        self.window_size = sizes.pop()
        self.index = np.concatenate(self.windows)
        length = grid[0] * grid[1]
        if self.index.min() < 0 or self.index.max() >= length:
            raise ValueError("window cell outside the grid")
        counts = np.bincount(self.index, minlength=length)
        if (counts == 0).any():
            raise ValueError("partition leaves grid cells uncovered")
        self.coverage = counts
        self.weights = 1.0 / counts[self.index]

    @property
    def n_windows(self) -> int:
        return len(self.windows)

    @classmethod
    def tiled(cls, grid: tuple, window: tuple, stride_fraction: float = 0.5) -> "WindowPartition":
        gh, gw = grid
        wh, ww = min(window[0], gh), min(window[1], gw)
        sh = max(1, int(wh * stride_fraction))
        sw = max(1, int(ww * stride_fraction))
        rows = _starts(gh, wh, sh)
        cols = _starts(gw, ww, sw)
        cells = np.arange(gh * gw).reshape(gh, gw)
        wins = [cells[r:r + wh, c:c + ww].reshape(-1) for r in rows for c in cols]
        return cls(grid, wins)

    @classmethod
    def whole(cls, grid: tuple) -> "WindowPartition":
        return cls(grid, [np.arange(grid[0] * grid[1])])

    def cell_weight_sums(self) -> np.ndarray:
        return np.bincount(self.index, weights=self.weights, minlength=self.grid[0] * self.grid[1])


def _starts(extent: int, size: int, stride: int) -> list:
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


class MultiHeadAttention:
    """Q/K/V projections (no bias), fused SDPA, output projection W^O."""

    def __init__(self, store: ParameterStore, name: str, d: int, heads: int, zero_out: bool = True):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.d = d
        self.qkv = Linear(store, f"{name}.qkv", d, 3 * d, bias=False)
        self.out = Linear(store, f"{name}.out", d, d, bias=False, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(T.sdpa(self.qkv(x), self.heads))

    def windowed(self, x: Tensor, partition: WindowPartition) -> Tensor:
        # projections are per-token and the overlap average is linear, so
        # Q/K/V are computed once per cell and W^O after the average
        lead, length = x.shape[:-2], x.shape[-2]
        if length != partition.grid[0] * partition.grid[1]:
            raise ValueError(f"token count {length} does not match partition grid {partition.grid}")
        qkv = T.gather_rows(self.qkv(x), partition.index)
        qkv = qkv.reshape(lead + (partition.n_windows, partition.window_size, 3 * self.d))
        y = T.sdpa(qkv, self.heads).reshape(lead + (partition.index.size, self.d))
        return self.out(T.scatter_rows(y, partition.index, length, partition.weights))


def attention(x: Tensor, mha: MultiHeadAttention) -> Tensor:
    return mha(x)


def window_attention(x: Tensor, partition: WindowPartition, mha: MultiHeadAttention) -> Tensor:
    return mha.windowed(x, partition)


class TransformerBlock:
    """Pre-norm block: x + MHA(LN(x)); x + MLP(LN(x))."""

    def __init__(self, store: ParameterStore, name: str, d: int, heads: int, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(store, f"{name}.norm1", d)
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, heads)
        self.norm2 = LayerNorm(store, f"{name}.norm2", d)
        self.mlp = MLP(store, f"{name}.mlp", d, mlp_ratio)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class LocalGlobalBlock:
    """Horizontal, vertical and square window attention, then global attention, then MLP.

    Each of the four attention sub-layers and the MLP is a pre-norm residual.
    """

    SUBLAYERS = ("horizontal", "vertical", "square", "global")

    def __init__(self, store: ParameterStore, name: str, cfg: AttentionConfig, grid: tuple,
                 partitions: dict = None):
        d = cfg.d_model
        self.grid = tuple(grid)
        if partitions is None:
            partitions = {
                "horizontal": WindowPartition.tiled(grid, cfg.horizontal, cfg.stride_fraction),
                "vertical": WindowPartition.tiled(grid, cfg.vertical, cfg.stride_fraction),
                "square": WindowPartition.tiled(grid, cfg.square, cfg.stride_fraction),
            }
        self.partitions = partitions
        self.norms = {k: LayerNorm(store, f"{name}.{k}.norm", d) for k in self.SUBLAYERS}
        self.attns = {k: MultiHeadAttention(store, f"{name}.{k}.attn", d, cfg.heads) for k in self.SUBLAYERS}
        self.norm_mlp = LayerNorm(store, f"{name}.mlp.norm", d)
        self.mlp = MLP(store, f"{name}.mlp", d, cfg.mlp_ratio)

    def __call__(self, x: Tensor) -> Tensor:
        for k in self.SUBLAYERS[:3]:
            x = x + self.attns[k].windowed(self.norms[k](x), self.partitions[k])
        x = x + self.attns["global"](self.norms["global"](x))
        return x + self.mlp(self.norm_mlp(x))


def lgwa_block(x: Tensor, block: LocalGlobalBlock) -> Tensor:
    return block(x)


def transformer_block(x: Tensor, block: TransformerBlock) -> Tensor:
    return block(x)
