"""Brute-force reference computations used by the verify suite and tests.

Nothing here calls into the pattern or ADMM implementations; each oracle
recomputes its answer by enumeration or closed form.
"""

import itertools
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def all_masks(size, keep_k):
    """Every 0/1 vector of length ``size`` with exactly ``keep_k`` ones, (C, size)."""
    combos = list(itertools.combinations(range(size), keep_k))
    out = np.zeros((len(combos), size), dtype=np.float64)
    for i, c in enumerate(combos):
        out[i, list(c)] = 1.0
    out.flags.writeable = False
    return out


def best_mask_error(block, keep_k):
    """Minimum ``||b - b*m||_F`` over all masks with ``keep_k`` ones, and one argmin."""
    b = np.asarray(block, dtype=np.float64).ravel()
    masks = all_masks(b.size, keep_k)
    resid = b[None, :] * (1.0 - masks)
    errs = np.sqrt(np.sum(resid * resid, axis=1))
    i = int(np.argmin(errs))
    return float(errs[i]), masks[i].reshape(np.shape(block))


def reconstruction_error(block, mask):
    b = np.asarray(block, dtype=np.float64)
    r = b - b * mask
    return float(np.sqrt(np.sum(r * r)))


def scan_pool(block, pool_masks):
    """Index of the pool mask with the least reconstruction error; first on ties."""
    best, best_err = 0, None
    for i, m in enumerate(pool_masks):
        e = reconstruction_error(np.ravel(block), np.ravel(m))
        if best_err is None or e < best_err:
            best, best_err = i, e
    return best


def tiebreak_topk(values, keep_k, by_value=False):
    """Top-k by |value| (or value), lower index first on ties, via sorted()."""
    v = np.asarray(values, dtype=np.float64).ravel()
    keyed = sorted(range(v.size), key=lambda i: ((-v[i]) if by_value else -abs(v[i]), i))
    mask = np.zeros(v.size)
    mask[keyed[:keep_k]] = 1.0
    return mask.reshape(np.shape(values))


def mask_frequencies(blocks, keep_k):
    """Counter of top-k masks (as bit tuples) over an iterable of blocks."""
    counts = {}
    for b in blocks:
        key = tuple(int(x) for x in tiebreak_topk(b, keep_k).ravel())
        counts[key] = counts.get(key, 0) + 1
    return counts


def quadratic_best_mask_objective(a, keep_k):
    """min over masks of min_{W, supp W in mask} 0.5||W - A||^2.

    For a fixed mask the restricted minimizer is ``A * mask``, leaving
    ``0.5 * sum(A^2 outside mask)``.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    masks = all_masks(a.size, keep_k)
    vals = 0.5 * np.sum((a[None, :] * (1.0 - masks)) ** 2, axis=1)
    return float(vals.min())
