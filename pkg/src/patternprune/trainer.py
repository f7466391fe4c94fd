"""Phased training: dense -> ADMM -> hard prune -> SR-STE retrain -> eval."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import admm
from .autodiff import grad_check
from .data import batches
from .errors import ConfigError, InputError, NumericError
from .model import AttentionPruneConfig, collect_prunable, decay_exempt, forward, loss_and_grads
from .pattern import pattern_prune
from .srste import SrsteConfig, refined_gradient

log = logging.getLogger(__name__)

PHASE_CODES = {"dense": 1, "admm": 2, "retrain": 3}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    weight_decay: float = 0.001
    batch_size: int = 24
    epochs_dense: int = 5
    epochs_admm: int = 5
    epochs_retrain: int = 5
    rho: float = 0.01
    seed: int = 0
    lr_schedule: str = "linear_decay"
    lr_final_fraction: float = 0.1
    grad_clip: float = 1.0
    admm_tol: float | None = 0.05
    freeze_pool: bool = False
    refresh_masks: bool = False
    check_penalty_grad: bool = True
    # before the first ADMM epoch: "none" keeps Z = U = 0, "project" sets
    # Z = project(W), "project-dual" also applies the dual update
    admm_init: str = "project"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("epochs_dense", "epochs_admm", "epochs_retrain"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.admm_init not in ("none", "project", "project-dual"):
            raise ConfigError(f"admm_init must be one of none, project, project-dual, "
                              f"got {self.admm_init!r}")
        if self.lr_schedule not in ("constant", "linear_decay"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'linear_decay', "
                              f"got {self.lr_schedule!r}")


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    n_examples: int


class AdamW:
    """Adam with decoupled weight decay; decay skips biases and layer norms."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads, lr, weight_decay):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, g in grads.items():
            w = params.arrays[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(w)
                self.v[name] = np.zeros_like(w)
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if weight_decay and not decay_exempt(name):
                update = update + lr * weight_decay * w
            params.arrays[name] = w - update


def optimizer_step(params, grads, opt, tc, lr=None):
    opt.step(params, grads, tc.learning_rate if lr is None else lr, tc.weight_decay)


def clip_global_norm(grads, max_norm):
    if not max_norm:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        grads = {k: g * s for k, g in grads.items()}
    return grads


def lr_at(tc, step, total_steps):
    if tc.lr_schedule == "constant" or total_steps <= 1:
        return tc.learning_rate
    frac = step / (total_steps - 1)
    return tc.learning_rate * (1.0 - (1.0 - tc.lr_final_fraction) * frac)


def _pad_multiple(ap):
    return ap.cfg.block_shape[0] if ap and ap.enabled else 1


def _epoch_batches(data, tc, phase, epoch, ap):
    seed = [tc.seed, PHASE_CODES[phase], epoch]
    return batches(data, tc.batch_size, seed=seed, shuffle=True, pad_multiple=_pad_multiple(ap))


def _n_batches(data, tc):
    return -(-len(data) // tc.batch_size)


class _Run:
    """Shared epoch loop; ``adjust`` edits gradients before clipping."""

    def __init__(self, params, data, tc, phase, epochs, ap, masks=None):
        self.params, self.data, self.tc = params, data, tc
        self.phase, self.epochs, self.ap, self.masks = phase, epochs, ap, masks
        self.opt = AdamW()
        self.total = epochs * _n_batches(data, tc)
        self.step = 0

    def epoch(self, epoch, adjust=None):
        tot_loss = correct = n = 0
        for b, (tokens, labels) in enumerate(_epoch_batches(self.data, self.tc, self.phase,
                                                            epoch, self.ap)):
            loss, grads, logits = loss_and_grads(self.params, tokens, labels, self.masks,
                                                 self.ap)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss in {self.phase} epoch {epoch}")
            if adjust is not None:
                grads = adjust(grads, b)
            grads = clip_global_norm(grads, self.tc.grad_clip)
            optimizer_step(self.params, grads, self.opt, self.tc,
                           lr_at(self.tc, self.step, self.total))
            self.step += 1
            tot_loss += loss * len(labels)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
            n += len(labels)
        return {"phase": self.phase, "epoch": epoch, "loss": tot_loss / n,
                "accuracy": correct / n}


def train_dense(params, data, tc, ap=None, on_metrics=None):
    """Plain cross-entropy training for ``tc.epochs_dense`` epochs (in place)."""
    run = _Run(params, data, tc, "dense", tc.epochs_dense, ap)
    metrics = []
    for e in range(tc.epochs_dense):
        rec = run.epoch(e)
        metrics.append(rec)
        log.info("dense epoch %d: loss %.4f acc %.4f", e, rec["loss"], rec["accuracy"])
        if on_metrics:
            on_metrics(rec)
    return params, metrics


@dataclass
class AdmmPhaseResult:
    report: admm.AdmmReport
    states: list
    metrics: list = field(default_factory=list)
    penalty_grad_errors: list = field(default_factory=list)

    @property
    def masks(self):
        return {st.target_id: st.mask for st in self.states}


def _penalty_grad_error(w, st, rng, n_entries=32):
    """Finite-difference check of the penalty gradient on sampled entries."""
    _, g = admm.penalty(w, st)
    entries = rng.choice(w.size, size=min(n_entries, w.size), replace=False)
    # exact on a quadratic for any step; a wide one keeps roundoff out
    return grad_check(lambda a: admm.penalty(a, st)[0], w, 1e-2, grad=g, entries=entries)


def admm_phase(params, data, tc, scfg, ap=None, on_metrics=None):
    """Train on task loss plus ADMM penalties, projecting once per epoch.

    With ``tc.admm_init != "none"`` Z is seeded by projecting the incoming
    weights before the first epoch, so that epoch already pulls toward a
    pattern-sparse target instead of toward zero.
    """
    params.cfg.check_divisible(scfg)
    states = [admm.init_state(t, w, scfg, tc.rho, tc.freeze_pool)
              for t, w in collect_prunable(params)]
    result = AdmmPhaseResult(admm.AdmmReport(), states)
    if tc.epochs_admm == 0:
        return params, result
    weights = lambda: {st.target_id: params[st.target_id] for st in states}  # noqa: E731
    if tc.admm_init == "project-dual":
        admm.project_and_update(states, weights())
    elif tc.admm_init == "project":
        for st in states:
            admm.project_state(st, params[st.target_id])

    run = _Run(params, data, tc, "admm", tc.epochs_admm, ap)
    check_rng = np.random.default_rng([tc.seed, 99])
    epoch_counter = iter(range(tc.epochs_admm))

    def adjust(grads, batch_index):
        for st in states:
            w = params[st.target_id]
            if batch_index == 0 and tc.check_penalty_grad:
                result.penalty_grad_errors.append(_penalty_grad_error(w, st, check_rng))
            grads[st.target_id] = grads[st.target_id] + admm.penalty(w, st)[1]
        return grads

    def solve(_states):
        e = next(epoch_counter)
        rec = run.epoch(e, adjust)
        result.metrics.append(rec)
        if on_metrics:
            on_metrics(rec)
        return weights(), rec["loss"]

    def on_record(r):
        rec = {"phase": "admm-residual", "iteration": r.iteration,
               "primal_residual": r.primal_residual, "relative_residual": r.relative_residual,
               "penalty": r.penalty, "task_loss": r.task_loss}
        log.info("admm iteration %d: relative residual %.4f", r.iteration, r.relative_residual)
        if on_metrics:
            on_metrics(rec)

    result.report = admm.admm_iterate(solve, states, tc.epochs_admm, tol=tc.admm_tol,
                                      on_record=on_record)
    return params, result


def hard_prune(params, scfg):
    """Replace every prunable matrix by its pattern-pruned version (in place)."""
    params.cfg.check_divisible(scfg)
    masks = {}
    for t, w in collect_prunable(params):
        pruned, mask = pattern_prune(w, scfg)
        params[t] = pruned
        masks[t] = mask
    return params, masks


def retrain_srste(params, masks, data, tc, sr=None, ap=None, scfg=None, on_metrics=None):
    """Masked fine-tuning with straight-through gradients and SR-STE decay.

    The refined gradient (task gradient at the pruned weights plus the
    decay on pruned entries) feeds the Adam moments; decoupled weight decay
    stays outside them.  Masks are frozen unless ``tc.refresh_masks`` is set
    (then recomputed from the dense weights each epoch, requiring ``scfg``).
    """
    sr = sr or SrsteConfig()
    missing = [t for t, _ in collect_prunable(params) if t not in masks]
    if missing:
        raise ConfigError(f"masks missing for prunable matrices: {missing}")
    masks = dict(masks)
    run = _Run(params, data, tc, "retrain", tc.epochs_retrain, ap, masks)

    def adjust(grads, _):
        for t, mask in masks.items():
            grads[t] = refined_gradient(params[t], grads[t], mask, sr)
        return grads

    metrics = []
    for e in range(tc.epochs_retrain):
        if tc.refresh_masks and e > 0:
            if scfg is None:
                raise ConfigError("refresh_masks needs the sparsity config")
            for t, w in collect_prunable(params):
                masks[t] = pattern_prune(w, scfg)[1]
            run.masks = masks
        rec = run.epoch(e, adjust)
        metrics.append(rec)
        log.info("retrain epoch %d: loss %.4f acc %.4f", e, rec["loss"], rec["accuracy"])
        if on_metrics:
            on_metrics(rec)
    return params, masks, metrics


def evaluate(params, data, masks=None, ap=None, batch_size=256):
    if len(data) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    tot_loss = correct = 0.0
    for tokens, labels in batches(data, batch_size, shuffle=False,
                                  pad_multiple=_pad_multiple(ap)):
        logits = forward(params, tokens, masks, ap).data
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        tot_loss += float(np.sum(lse - z[np.arange(len(labels)), labels]))
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
    n = len(data)
    return EvalResult(correct / n, tot_loss / n, n)


def masked_weights(params, masks):
    """The weights the forward pass actually uses."""
    return {t: params[t] * masks[t] if masks and t in masks else params[t]
            for t, _ in collect_prunable(params)}


@dataclass
class PipelineResult:
    params: object
    masks: dict
    dense_params: object
    admm_params: object
    dense_eval: EvalResult
    final_eval: EvalResult
    admm_report: admm.AdmmReport
    metrics: list


def run_pipeline(params, train, test, tc, scfg, sr=None, ap=None, on_metrics=None,
                 skip_dense=False):
    """dense -> ADMM -> hard prune -> retrain -> eval, all in place on ``params``.

    ``tc.epochs_admm = 0`` gives the no-ADMM baseline (prune the dense
    weights directly).
    """
    metrics = []

    def emit(rec):
        metrics.append(rec)
        if on_metrics:
            on_metrics(rec)

    if not skip_dense:
        train_dense(params, train, tc, ap, emit)
    dense_params = params.copy()
    dense_eval = evaluate(params, test, None, ap)
    emit({"phase": "eval", "stage": "dense", "accuracy": dense_eval.accuracy,
          "loss": dense_eval.loss, "n_examples": dense_eval.n_examples})
    _, res = admm_phase(params, train, tc, scfg, ap, emit)
    admm_params = params.copy()
    _, masks = hard_prune(params, scfg)
    _, masks, _ = retrain_srste(params, masks, train, tc, sr, ap, scfg, emit)
    final = evaluate(params, test, masks, ap)
    emit({"phase": "eval", "stage": "final", "accuracy": final.accuracy, "loss": final.loss,
          "n_examples": final.n_examples})
    return PipelineResult(params, masks, dense_params, admm_params, dense_eval, final,
                          res.report, metrics)

