"""ADMM machinery for pattern-constrained weight matrices.

Each pruned matrix W carries an auxiliary copy Z restricted to the
pattern-sparse set and a scaled dual U.  One iteration is

    W <- argmin f(W) + rho/2 ||W - Z + U||_F^2     (caller's solver)
    Z <- project(W + U)
    U <- U + W - Z

The sparse set is nonconvex, so the projection is a per-block globally
optimal selection rather than a convex projection; no convex-ADMM
guarantee is implied.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .pattern import (
    ProjectionMode,
    SparsityConfig,
    mask_keys,
    pattern_masks,
    to_blocks,
)

log = logging.getLogger(__name__)


@dataclass(eq=False)
class AdmmState:
    target_id: str
    Z: np.ndarray
    U: np.ndarray
    rho: float
    cfg: SparsityConfig
    iteration: int = 0
    pool: object = None  # PatternPool behind the current Z (pool mode only)
    mask: np.ndarray | None = None  # keep-mask selected by the last projection
    freeze_pool: bool = False


def init_state(target_id, w, cfg, rho=0.01, freeze_pool=False):
    if not rho > 0:
        raise ConfigError(f"rho must be positive, got {rho}")
    w = np.asarray(w)
    return AdmmState(target_id, np.zeros(w.shape), np.zeros(w.shape), float(rho), cfg,
                     freeze_pool=freeze_pool)


def _check_shape(name, a, b):
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"{name}: shape {np.shape(a)} does not match {np.shape(b)}")


def is_feasible(w, cfg, pool=None):
    """Indicator test: every block within the pattern-sparse set.

    Blocks may hold at most ``keep_k`` nonzeros.  In pool mode each block's
    support must also fit inside a pool mask: the given ``pool``, or, if
    none is given, some pool of at most ``cfg.pool_size`` masks.  The
    pool-free search covers partial supports greedily and can report a
    false negative only when supports are partial and the pool budget is
    nearly exhausted.
    """
    flat, _ = to_blocks(w, cfg.block_shape)
    support = flat != 0
    counts = support.sum(axis=1)
    if np.any(counts > cfg.keep_k):
        return False
    if cfg.mode is ProjectionMode.TOPK:
        return True
    if pool is not None:
        pm = pool.masks
        # support inside a mask <=> no support bit outside it
        outside = support.astype(np.int64) @ (~pm).T.astype(np.int64)
        return bool(np.all((outside == 0).any(axis=1)))
    full = support[counts == cfg.keep_k]
    chosen = {int(k): row for k, row in zip(mask_keys(full).tolist(), full)}
    if len(chosen) > cfg.pool_size:
        return False
    masks = list(chosen.values())
    partial = [row for row in support[(counts < cfg.keep_k) & (counts > 0)]]
    open_masks = []  # supports of masks yet to be completed to keep_k bits
    for row in partial:
        if any(not np.any(row & ~m) for m in masks):
            continue
        for i, om in enumerate(open_masks):
            merged = om | row
            if merged.sum() <= cfg.keep_k:
                open_masks[i] = merged
                break
        else:
            open_masks.append(row.copy())
        if len(masks) + len(open_masks) > cfg.pool_size:
            return False
    return True


def penalty(w, st):
    """Augmented-Lagrangian term ``(rho/2)||w - Z + U||_F^2`` and its gradient."""
    w = np.asarray(w, dtype=np.float64)
    _check_shape("penalty", w, st.Z)
    r = w - st.Z + st.U
    return 0.5 * st.rho * float(np.sum(r * r)), st.rho * r


def project(v, cfg, pool=None):
    """Euclidean projection of ``v`` onto the pattern-sparse set."""
    v = np.asarray(v, dtype=np.float64)
    mask, _ = pattern_masks(v, cfg, pool)
    return v * mask


def project_state(st, w):
    """Z-update: ``Z <- project(W + U)``; rebuilds the pool unless frozen."""
    _check_shape("project", w, st.Z)
    v = np.asarray(w, dtype=np.float64) + st.U
    pool = st.pool if (st.freeze_pool and st.pool is not None) else None
    mask, pool = pattern_masks(v, st.cfg, pool)
    st.Z = v * mask
    st.mask = mask
    st.pool = pool
    return st


def dual_update(st, w):
    """``U <- U + W - Z``, advancing the iteration counter."""
    _check_shape("dual_update", w, st.U)
    st.U = st.U + np.asarray(w, dtype=np.float64) - st.Z
    st.iteration += 1
    return st


@dataclass
class AdmmRecord:
    iteration: int
    primal_residual: float
    relative_residual: float
    penalty: float
    task_loss: float


@dataclass
class AdmmReport:
    records: list = field(default_factory=list)
    converged: bool = False
    error: str | None = None

    def __len__(self):
        return len(self.records)

    @property
    def last(self):
        return self.records[-1] if self.records else None


def residuals(states, weights):
    """Aggregate ``||W - Z||_F`` and ``||W - Z||_F / ||W||_F`` over all states."""
    num = den = 0.0
    for st in states:
        w = weights[st.target_id]
        d = w - st.Z
        num += float(np.sum(d * d))
        den += float(np.sum(w * w))
    primal = math.sqrt(num)
    return primal, primal / math.sqrt(den) if den > 0 else 0.0


def total_penalty(states, weights):
    return sum(penalty(weights[st.target_id], st)[0] for st in states)


def project_and_update(states, weights):
    for st in states:
        w = weights[st.target_id]
        project_state(st, w)
        dual_update(st, w)


def admm_iterate(solve_w_subproblem, states, iterations, tol=None, on_record=None):
    """Alternate W-solves with projections and dual updates.

    ``solve_w_subproblem(states)`` minimizes the task loss plus the summed
    penalties and returns ``(weights, task_loss)`` where ``weights`` maps
    each state's ``target_id`` to its current matrix.  Stops early once the
    relative residual drops below ``tol``.  A non-finite task loss aborts
    the run; the partial report is attached to the raised error.
    """
    report = AdmmReport()
    for _ in range(iterations):
        weights, task_loss = solve_w_subproblem(states)
        if not math.isfinite(task_loss):
            report.error = f"non-finite task loss {task_loss}"
            err = NumericError(report.error)
            err.report = report
            raise err
        project_and_update(states, weights)
        primal, rel = residuals(states, weights)
        rec = AdmmRecord(states[0].iteration if states else 0, primal, rel,
                         total_penalty(states, weights), float(task_loss))
        report.records.append(rec)
        log.debug("admm iter %d: residual %.4g (rel %.4g)", rec.iteration, primal, rel)
        if on_record is not None:
            on_record(rec)
        if tol is not None and rel < tol:
            report.converged = True
            break
    return report
