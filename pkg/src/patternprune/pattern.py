"""Block partitioning, per-block top-k masks, pattern pools and pattern pruning.

Matrices are tiled into non-overlapping ``p_r x p_c`` blocks (square by
default).  Every block keeps exactly ``keep_k`` entries.  Under the
pool-constrained mode the admissible masks are restricted to the ``K``
most frequent per-block top-k masks of the matrix being pruned.

Tie-breaking is deterministic everywhere:

* equal magnitudes inside a block -> lower row-major index is kept
* equal mask frequencies in the pool -> smaller canonical key first
* equal match scores against the pool -> smaller pool index
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, DimensionError, StateError


class ProjectionMode(str, Enum):
    POOL = "pool"
    TOPK = "topk"


@dataclass(frozen=True)
class SparsityConfig:
    p: int = 4
    keep_k: int = 8
    pool_size: int = 32
    mode: ProjectionMode = ProjectionMode.POOL
    # rectangular blocks only express the N:M case; None means square p x p
    block_rows: int | None = None
    block_cols: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", ProjectionMode(self.mode))
        if self.p < 1:
            raise ConfigError(f"p must be positive, got {self.p}")
        br, bc = self.block_shape
        if br < 1 or bc < 1:
            raise ConfigError(f"block shape must be positive, got {br}x{bc}")
        if not 1 <= self.keep_k <= br * bc:
            raise ConfigError(f"keep_k must be in [1, {br * bc}], got {self.keep_k}")
        if self.pool_size < 1:
            raise ConfigError(f"pool_size must be >= 1, got {self.pool_size}")

    @property
    def block_shape(self):
        return (self.block_rows or self.p, self.block_cols or self.p)

    @property
    def block_size(self):
        r, c = self.block_shape
        return r * c

    @property
    def density(self):
        return self.keep_k / self.block_size


def nm_config(n, m):
    """N:M sparsity as a degenerate pattern config: 1 x N runs keeping M."""
    if m > n:
        raise ConfigError(f"N:M requires M <= N, got N={n}, M={m}")
    return SparsityConfig(p=n, keep_k=m, pool_size=1, mode=ProjectionMode.TOPK,
                          block_rows=1, block_cols=n)


@dataclass(frozen=True)
class BlockGrid:
    rows_in_blocks: int
    cols_in_blocks: int
    block_rows: int
    block_cols: int

    @property
    def n_blocks(self):
        return self.rows_in_blocks * self.cols_in_blocks

    def block_slice(self, i, j):
        return (slice(i * self.block_rows, (i + 1) * self.block_rows),
                slice(j * self.block_cols, (j + 1) * self.block_cols))


def partition(m, p):
    """Describe the tiling of ``m`` into ``p`` x ``p`` blocks.

    ``p`` may also be a ``(rows, cols)`` pair for rectangular blocks.
    """
    br, bc = (p, p) if np.isscalar(p) else p
    rows, cols = np.shape(m)
    if rows % br:
        raise ConfigError(f"row count {rows} is not divisible by block height {br}")
    if cols % bc:
        raise ConfigError(f"column count {cols} is not divisible by block width {bc}")
    return BlockGrid(rows // br, cols // bc, br, bc)


def to_blocks(m, shape):
    """(R, C) matrix -> (n_blocks, br*bc) with blocks in row-major grid order."""
    m = np.asarray(m)
    grid = partition(m, shape)
    br, bc = shape
    b = m.reshape(grid.rows_in_blocks, br, grid.cols_in_blocks, bc).transpose(0, 2, 1, 3)
    return b.reshape(grid.n_blocks, br * bc), grid


def from_blocks(flat, grid):
    br, bc = grid.block_rows, grid.block_cols
    b = flat.reshape(grid.rows_in_blocks, grid.cols_in_blocks, br, bc).transpose(0, 2, 1, 3)
    return b.reshape(grid.rows_in_blocks * br, grid.cols_in_blocks * bc)


def _rank_entries(scores):
    """Per-row ordering, best first; equal scores keep the lower index first."""
    return np.argsort(-scores, axis=-1, kind="stable")


def topk_masks(flat, keep_k, by_value=False):
    """Boolean keep-masks for each row of ``flat`` (n_blocks x block_size)."""
    flat = np.asarray(flat, dtype=np.float64)
    size = flat.shape[-1]
    if not 1 <= keep_k <= size:
        raise ConfigError(f"keep_k must be in [1, {size}], got {keep_k}")
    scores = flat if by_value else np.abs(flat)
    order = _rank_entries(scores)[..., :keep_k]
    masks = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(masks, order, True, axis=-1)
    return masks


def block_topk_mask(block, keep_k):
    block = np.asarray(block, dtype=np.float64)
    return topk_masks(block.reshape(1, -1), keep_k)[0].reshape(block.shape)


def mask_keys(masks):
    """Canonical integer key: mask bits read as a row-major binary number."""
    masks = np.asarray(masks, dtype=bool)
    size = masks.shape[-1]
    if size <= 63:
        weights = np.left_shift(np.int64(1), np.arange(size - 1, -1, -1, dtype=np.int64))
        return masks.astype(np.int64) @ weights
    return np.array([int("".join("1" if b else "0" for b in row), 2) for row in masks],
                    dtype=object)


@dataclass(frozen=True, eq=False)
class PatternPool:
    """Admissible block masks, each of shape ``block_shape``."""

    masks: np.ndarray  # (K, br*bc) bool
    block_shape: tuple
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "masks", np.asarray(self.masks, dtype=bool))
        keys = mask_keys(self.masks)
        if len(set(keys.tolist())) != len(keys):
            raise ValueError("pattern pool masks must be distinct")

    def __len__(self):
        return len(self.masks)

    @property
    def keys(self):
        return mask_keys(self.masks)


def build_pattern_pool(m, cfg, source=""):
    """Most frequent per-block top-k masks of ``m``, at most ``cfg.pool_size``."""
    flat, _ = to_blocks(m, cfg.block_shape)
    masks = topk_masks(flat, cfg.keep_k)
    return _pool_from_masks(masks, cfg, source)


def _pool_from_masks(masks, cfg, source=""):
    keys = mask_keys(masks)
    uniq, first, counts = np.unique(keys, return_index=True, return_counts=True)
    # np.unique sorts keys ascending; a stable sort on -count keeps key order for ties
    order = np.argsort(-counts, kind="stable")[: cfg.pool_size]
    return PatternPool(masks[first[order]], cfg.block_shape, source)


def match_scores(flat, pool):
    """Squared reconstruction error of each block under each pool mask, (n_blocks, K).

    Summing only the discarded entries keeps tiny values from being
    absorbed into a large kept total.
    """
    return (np.asarray(flat, dtype=np.float64) ** 2) @ (~pool.masks).T.astype(np.float64)


def match_blocks(flat, pool):
    if len(pool) == 0:
        raise StateError("cannot match against an empty pattern pool")
    return np.argmin(match_scores(flat, pool), axis=1)


def match_block_to_pool(block, pool):
    block = np.asarray(block, dtype=np.float64)
    if block.shape != tuple(pool.block_shape):
        raise DimensionError(f"block shape {block.shape} does not match pool {pool.block_shape}")
    return int(match_blocks(block.reshape(1, -1), pool)[0])


def pattern_masks(m, cfg, pool=None):
    """Keep-mask for ``m`` as a {0,1} float matrix, plus the pool used (or None)."""
    flat, grid = to_blocks(m, cfg.block_shape)
    if cfg.mode is ProjectionMode.TOPK:
        sel = topk_masks(flat, cfg.keep_k)
        pool = None
    else:
        if pool is None:
            pool = _pool_from_masks(topk_masks(flat, cfg.keep_k), cfg)
        sel = pool.masks[match_blocks(flat, pool)]
    return from_blocks(sel.astype(np.float64), grid), pool


def pattern_prune(m, cfg, pool=None):
    """Return ``(pruned, keep_mask)`` with exactly ``keep_k`` kept entries per block."""
    m = np.asarray(m, dtype=np.float64)
    mask, _ = pattern_masks(m, cfg, pool)
    return m * mask, mask


def block_nonzero_counts(m, cfg):
    flat, _ = to_blocks(m, cfg.block_shape)
    return np.count_nonzero(flat, axis=1)
