"""Desk-scale transformer encoder classifier.

Post-LN encoder layers (attention, residual + LN, GELU FFN, residual +
LN), learned absolute positions, mean pooling over non-pad tokens and a
linear classifier.  Prunable matrices can be replaced by their masked
versions, and attention score maps can be pattern-pruned per forward.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, InputError
from .pattern import ProjectionMode, SparsityConfig, to_blocks, from_blocks, topk_masks

PAD_ID = 0
UNK_ID = 1
PRUNABLE_KINDS = ("W_Q", "W_K", "W_V", "W_O", "W_ff1", "W_ff2")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_classes: int
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    max_seq_len: int = 16

    def __post_init__(self):
        for name in ("vocab_size", "n_classes", "n_layers", "d_model", "n_heads", "d_ff",
                     "max_seq_len"):
            if getattr(self, name) < 1 and not (name == "n_layers" and self.n_layers == 0):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def check_divisible(self, cfg):
        """Raise unless every prunable matrix tiles exactly into ``cfg`` blocks."""
        br, bc = cfg.block_shape
        for name, (r, c) in (("d_model", (self.d_model, self.d_model)),
                             ("d_ff", (self.d_model, self.d_ff)),
                             ("d_ff", (self.d_ff, self.d_model))):
            if r % br or c % bc:
                raise ConfigError(f"{name}: a {r}x{c} weight does not tile into {br}x{bc} blocks")


@dataclass(frozen=True)
class AttentionPruneConfig:
    enabled: bool = False
    cfg: SparsityConfig = field(default_factory=lambda: SparsityConfig(mode=ProjectionMode.TOPK))
    sentinel: float = -1e9
    by_magnitude: bool = False


class ModelParams:
    """Named parameter arrays plus the encoder configuration."""

    def __init__(self, cfg, arrays):
        self.cfg = cfg
        self.arrays = dict(arrays)

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        if np.shape(value) != self.arrays[name].shape:
            raise DimensionError(f"{name}: expected shape {self.arrays[name].shape}, "
                                 f"got {np.shape(value)}")
        self.arrays[name] = np.asarray(value, dtype=np.float64)

    def names(self):
        return list(self.arrays)

    def copy(self):
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})

    @property
    def prunable_set(self):
        return {name for name, _ in collect_prunable(self)}


def init_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

    arrays = {
        "tok_emb": rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)),
        "pos_emb": rng.normal(0.0, 1.0, size=(cfg.max_seq_len, d)),
    }
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        for kind in ("Q", "K", "V", "O"):
            arrays[pre + f"W_{kind}"] = dense(d, d)
            # a key bias shifts each score row by a constant, which softmax cancels
            if kind != "K":
                arrays[pre + f"b_{kind}"] = np.zeros((1, d))
        arrays[pre + "W_ff1"] = dense(d, f)
        arrays[pre + "b_ff1"] = np.zeros((1, f))
        arrays[pre + "W_ff2"] = dense(f, d)
        arrays[pre + "b_ff2"] = np.zeros((1, d))
        for ln in ("ln1", "ln2"):
            arrays[pre + f"{ln}.gain"] = np.ones((1, d))
            arrays[pre + f"{ln}.bias"] = np.zeros((1, d))
    arrays["head.W"] = dense(d, cfg.n_classes)
    arrays["head.b"] = np.zeros((1, cfg.n_classes))
    return ModelParams(cfg, arrays)


def collect_prunable(params):
    """``(target_id, array)`` pairs, layer-major then Q, K, V, O, ff1, ff2."""
    cfg = params.cfg if isinstance(params, ModelParams) else params
    ids = [f"layers.{i}.{kind}" for i in range(cfg.n_layers) for kind in PRUNABLE_KINDS]
    if isinstance(params, ModelParams):
        return [(t, params[t]) for t in ids]
    return [(t, None) for t in ids]


def decay_exempt(name):
    """Biases and layer-norm parameters take neither weight decay nor SR-STE decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b") or leaf in ("gain", "bias") or name == "head.b"


def attention_keep_mask(scores, ap):
    """Per-block top-k keep mask over the last two axes of ``scores``."""
    scores = np.asarray(scores, dtype=np.float64)
    *lead, t1, t2 = scores.shape
    br, bc = ap.cfg.block_shape
    if t1 % br or t2 % bc:
        raise ConfigError(f"attention map {t1}x{t2} does not tile into {br}x{bc} blocks")
    m = scores.reshape(-1, t1, t2)
    keep = np.empty(m.shape, dtype=bool)
    for i, mat in enumerate(m):
        flat, grid = to_blocks(mat, (br, bc))
        sel = topk_masks(flat, ap.cfg.keep_k, by_value=not ap.by_magnitude)
        keep[i] = from_blocks(sel, grid)
    return keep.reshape(scores.shape)


def attention_prune_scores(scores, ap):
    """Set pruned score entries to ``ap.sentinel``; kept entries pass through.

    Accepts a Tensor (returns a Tensor on the graph) or an ndarray.
    """
    if not ap.enabled:
        return scores
    if isinstance(scores, ad.Tensor):
        return ad.masked_fill(scores, attention_keep_mask(scores.data, ap), ap.sentinel)
    scores = np.asarray(scores, dtype=np.float64)
    return np.where(attention_keep_mask(scores, ap), scores, ap.sentinel)


def _weight(leaves, name, masks, straight_through):
    w = leaves[name]
    if masks is None or name not in masks:
        return w
    if straight_through:
        return ad.straight_through_mask(w, masks[name])
    return ad.hadamard(w, np.asarray(masks[name], dtype=np.float64))


def forward(params, tokens, masks=None, ap=None, straight_through=True, leaves=None,
            return_attention=False):
    """Logits Tensor of shape (batch, n_classes).

    ``leaves`` optionally supplies pre-built leaf Tensors keyed by
    parameter name; otherwise fresh named leaves are created, so the
    caller gets per-parameter gradients from ``logits``' graph.
    """
    cfg = params.cfg
    ap = ap or AttentionPruneConfig()
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be (batch, seq_len), got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    B, T = tokens.shape
    if T > cfg.max_seq_len:
        raise DimensionError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if leaves is None:
        leaves = {n: ad.Tensor(a, name=n) for n, a in params.arrays.items()}

    nonpad = tokens != PAD_ID
    # all-pad rows attend uniformly instead of producing NaN
    key_bias = np.where(nonpad | ~nonpad.any(axis=1, keepdims=True), 0.0, ap.sentinel)
    key_bias = key_bias[:, None, None, :]

    x = ad.embed(leaves["tok_emb"], tokens) + ad.embed(leaves["pos_emb"], np.arange(T))
    H, dh = cfg.n_heads, cfg.d_head
    attn_maps = []

    def heads(t):
        return ad.permute(ad.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        W = lambda kind: _weight(leaves, pre + kind, masks, straight_through)  # noqa: E731
        q = heads(x @ W("W_Q") + leaves[pre + "b_Q"])
        k = heads(x @ W("W_K"))
        v = heads(x @ W("W_V") + leaves[pre + "b_V"])
        scores = ad.scale(q @ ad.transpose(k), 1.0 / math.sqrt(dh)) + key_bias
        scores = attention_prune_scores(scores, ap)
        probs = ad.softmax_rows(scores)
        if return_attention:
            attn_maps.append(probs.data)
        ctx = ad.reshape(ad.permute(probs @ v, (0, 2, 1, 3)), (B, T, cfg.d_model))
        x = ad.layer_norm(x + (ctx @ W("W_O") + leaves[pre + "b_O"]),
                          leaves[pre + "ln1.gain"], leaves[pre + "ln1.bias"])
        h = ad.gelu(x @ W("W_ff1") + leaves[pre + "b_ff1"])
        x = ad.layer_norm(x + (h @ W("W_ff2") + leaves[pre + "b_ff2"]),
                          leaves[pre + "ln2.gain"], leaves[pre + "ln2.bias"])

    counts = np.maximum(nonpad.sum(axis=1, keepdims=True), 1)
    pool_w = (nonpad / counts)[:, None, :]
    pooled = ad.reshape(ad.matmul(pool_w, x), (B, cfg.d_model))
    logits = pooled @ leaves["head.W"] + leaves["head.b"]
    if return_attention:
        return logits, attn_maps
    return logits


def loss_and_grads(params, tokens, labels, masks=None, ap=None, straight_through=True):
    """Mean cross-entropy and a name -> gradient dict for every parameter."""
    leaves = {n: ad.Tensor(a, name=n) for n, a in params.arrays.items()}
    logits = forward(params, tokens, masks, ap, straight_through, leaves=leaves)
    loss = ad.cross_entropy(logits, labels)
    loss.backward()
    grads = {n: t.grad if t.grad is not None else np.zeros_like(t.data)
             for n, t in leaves.items()}
    return float(loss.data), grads, logits.data
