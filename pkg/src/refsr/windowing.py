"""Spatial token bookkeeping for window attention.

Token grids are (H, W, C) tensors tagged with the stream they belong to (the
low-resolution input stream or the high-resolution reference stream). Windows
are non-overlapping k x k tiles flattened to k^2 tokens in row-major order;
partition and reverse are exact inverses, as are cyclic shift and its inverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numerics import Parameter, Tensor, linear, reshape, roll, take_rows, transpose

STREAM_LR = "LR"
STREAM_REF = "REF"


@dataclass
class TokenGrid:
    """Spatial token map with a stream tag that survives round trips."""

    tokens: Tensor  # (H, W, C)
    stream: str = STREAM_LR

    @property
    def height(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]


@dataclass
class WindowSet:
    """Grid regrouped as (num_windows, k^2, C) with partition provenance."""

    windows: Tensor
    k: int
    shifted: bool
    origin_shape: tuple[int, int]
    stream: str = STREAM_LR

    @property
    def num_windows(self) -> int:
        return self.windows.shape[0]


def partition_windows(grid: TokenGrid, k: int) -> WindowSet:
    """Tile an (H, W, C) grid into row-major k x k windows.

    H and W must be divisible by k; callers are expected to resize inputs
    rather than pad, so indivisible extents are an error.
    """
    h, w = grid.height, grid.width
    if h % k != 0 or w % k != 0:
        raise ValueError(f"grid extents {h}x{w} not divisible by window size {k}")
    c = grid.dim
    t = reshape(grid.tokens, (h // k, k, w // k, k, c))
    t = transpose(t, (0, 2, 1, 3, 4))
    t = reshape(t, ((h // k) * (w // k), k * k, c))
    return WindowSet(windows=t, k=k, shifted=False, origin_shape=(h, w), stream=grid.stream)


def reverse_windows(ws: WindowSet) -> TokenGrid:
    """Exact inverse of ``partition_windows`` (bit-identical round trip)."""
    h, w = ws.origin_shape
    k = ws.k
    c = ws.windows.shape[-1]
    t = reshape(ws.windows, (h // k, w // k, k, k, c))
    t = transpose(t, (0, 2, 1, 3, 4))
    t = reshape(t, (h, w, c))
    return TokenGrid(tokens=t, stream=ws.stream)


def cyclic_shift(grid: TokenGrid, s: int) -> TokenGrid:
    """Roll tokens by (-s, -s) with wraparound; shift by -s restores exactly."""
    if s == 0:
        return grid
    return TokenGrid(tokens=roll(grid.tokens, (-s, -s), axes=(0, 1)), stream=grid.stream)


def partition_shifted(grid: TokenGrid, k: int, s: int) -> WindowSet:
    """Partition after a cyclic shift of s; records the shifted provenance."""
    ws = partition_windows(cyclic_shift(grid, s), k)
    ws.shifted = s != 0
    return ws


def reverse_shifted(ws: WindowSet, s: int) -> TokenGrid:
    grid = reverse_windows(ws)
    return cyclic_shift(grid, -s)


def patch_embed(crop: np.ndarray, weight: Parameter, bias: Parameter) -> TokenGrid:
    """Embed an M x M RGB crop into an M x M token grid of dim D.

    Patches are single pixels so the reference token grid matches the
    low-resolution grid of the same stage one-to-one, which window-aligned
    cross-attention requires. The map is linear in the pixels (plus bias).
    """
    if crop.ndim != 3 or crop.shape[2] != weight.shape[0]:
        raise ValueError(f"crop shape {crop.shape} incompatible with embedding weight {weight.shape}")
    tokens = linear(Tensor(np.ascontiguousarray(crop)), weight, bias)
    return TokenGrid(tokens=tokens, stream=STREAM_REF)


@lru_cache(maxsize=16)
def relative_index_table(k: int) -> np.ndarray:
    """(k^2, k^2) lookup of flattened coordinate differences in [-k+1, k-1]^2."""
    coords = np.stack(np.meshgrid(np.arange(k), np.arange(k), indexing="ij"), axis=-1).reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :]  # (k^2, k^2, 2)
    idx = (rel[..., 0] + k - 1) * (2 * k - 1) + (rel[..., 1] + k - 1)
    return idx


def relative_position_bias(k: int, table: Parameter, heads: int) -> Tensor:
    """Learnable in-window positional bias, (heads, k^2, k^2).

    ``table`` holds one scalar per (coordinate difference, head) pair, so the
    bias between two tokens depends only on their spatial displacement.
    """
    expected = ((2 * k - 1) ** 2, heads)
    if table.shape != expected:
        raise ValueError(f"bias table shape {table.shape} != {expected}")
    idx = relative_index_table(k)
    bias = take_rows(table, idx)  # (k^2, k^2, heads)
    return transpose(bias, (2, 0, 1))


@lru_cache(maxsize=32)
def sinusoidal_encoding(h: int, w: int, c: int) -> np.ndarray:
    """Deterministic absolute positional encoding, (H, W, C).

    The first half of the channels encodes row position, the second half
    column position. Within each half, even channels are sines and odd
    channels cosines at geometric frequencies 10000^(-2i/half).
    """
    if c % 2 != 0:
        raise ValueError(f"sinusoidal encoding needs an even channel count, got {c}")
    half = c // 2
    out = np.zeros((h, w, c), dtype=np.float64)

    def fill(block: np.ndarray, positions: np.ndarray):
        # block: (len(positions), half) view to fill along the position axis
        for j in range(half):
            freq = 1.0 / (10000.0 ** (2 * (j // 2) / half))
            angle = positions * freq
            block[:, j] = np.sin(angle) if j % 2 == 0 else np.cos(angle)

    rows = np.zeros((h, half))
    fill(rows, np.arange(h, dtype=np.float64))
    cols = np.zeros((w, half))
    fill(cols, np.arange(w, dtype=np.float64))
    out[:, :, :half] = rows[:, None, :]
    out[:, :, half:] = cols[None, :, :]
    out.flags.writeable = False  # cached; callers add it, never mutate
    return out
