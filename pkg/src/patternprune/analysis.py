"""Weight-distribution histograms and per-block effective sparsity."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .pattern import to_blocks

TABLE_VERSION = 1


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    section: tuple | None = None  # (row, col) in the section grid, None = whole matrix


def histogram(values, bins=101, limit=None):
    """Uniform bins over ``[-limit, limit]``; ``limit`` defaults to max |value|."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if limit is None:
        limit = float(np.max(np.abs(values))) if values.size else 0.0
    if limit == 0.0:
        limit = 1.0
    edges = np.linspace(-limit, limit, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return Histogram(edges, counts)


def sections(m, s, align=1):
    """Split ``m`` into an ``s`` x ``s`` grid, row-major.

    Cuts fall on multiples of ``align`` and sections are as equal as that
    allows; when the block count divides evenly they are exactly equal.
    """
    m = np.asarray(m)
    r, c = m.shape
    if s < 1 or align < 1 or r % align or c % align or r // align < s or c // align < s:
        raise ConfigError(f"a {r}x{c} matrix does not split into {s}x{s} sections "
                          f"of whole {align}x{align} blocks")

    def cuts(n):
        sizes = [len(a) * align for a in np.array_split(np.arange(n // align), s)]
        return np.concatenate([[0], np.cumsum(sizes)])

    rc, cc = cuts(r), cuts(c)
    return [((i, j), m[rc[i]:rc[i + 1], cc[j]:cc[j + 1]])
            for i in range(s) for j in range(s)]


def section_histograms(m, s=3, bins=101, align=1):
    """Whole-matrix histogram followed by one per section, all on shared bins."""
    whole = histogram(m, bins)
    limit = whole.edges[-1]
    out = [whole]
    for key, sec in sections(m, s, align):
        h = histogram(sec, bins, limit)
        h.section = key
        out.append(h)
    return out


def block_near_zero_fraction(m, block_shape, eps=1e-3):
    """Fraction of entries with ``|w| < eps`` in every block."""
    flat, _ = to_blocks(m, block_shape)
    return (np.abs(flat) < eps).mean(axis=1)


def effective_sparsity_summary(matrices, block_shape, eps=1e-3):
    """Mean/std of per-block near-zero fractions pooled over ``matrices``."""
    fr = np.concatenate([block_near_zero_fraction(m, block_shape, eps) for m in matrices])
    return {
        "epsilon": eps,
        "n_blocks": int(fr.size),
        "block_sparsity_mean": float(fr.mean()),
        "block_sparsity_std": float(fr.std()),
        "global_near_zero_fraction": float(np.mean(np.concatenate(
            [np.abs(np.ravel(m)) < eps for m in matrices]))),
    }


def write_histogram_table(path, hists):
    """Tab-separated table: section_row, section_col, bin_lo, bin_hi, count."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# format-version: {TABLE_VERSION}\n")
        fh.write("section_row\tsection_col\tbin_lo\tbin_hi\tcount\n")
        for h in hists:
            r, c = h.section if h.section is not None else ("all", "all")
            for lo, hi, n in zip(h.edges[:-1], h.edges[1:], h.counts):
                fh.write(f"{r}\t{c}\t{float(lo)!r}\t{float(hi)!r}\t{int(n)}\n")


def read_histogram_table(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("section_row"):
                continue
            r, c, lo, hi, n = line.rstrip("\n").split("\t")
            rows.append((r, c, float(lo), float(hi), int(n)))
    return rows
