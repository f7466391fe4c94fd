"""Run configuration: YAML in, validated dataclasses out, resolved YAML back.

Unknown keys anywhere are errors, so a typo in ``rho`` or ``lambda_w``
cannot silently fall back to a default.
"""

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

import yaml

from .data import SyntheticSpec
from .errors import ConfigError
from .model import AttentionPruneConfig, EncoderConfig
from .pattern import ProjectionMode, SparsityConfig
from .srste import SrsteConfig
from .trainer import TrainConfig

CONFIG_VERSION = 1

ENCODER_KEYS = ("n_layers", "d_model", "n_heads", "d_ff", "max_seq_len")

# tuned so the ADMM phase converges on the desk-scale task; see README
TRAIN_PRESETS = {
    "default": {},
    "toy": {"rho": 0.1, "epochs_admm": 15, "admm_tol": 1e-3},
    "bert": {"learning_rate": 7e-5},
}


@dataclass(frozen=True)
class TsvSource:
    train_tsv: str
    test_tsv: str
    text_column: str = "sentence"
    label_column: str = "label"


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    preset: str = "default"
    encoder: dict = field(default_factory=lambda: {
        "n_layers": 2, "d_model": 32, "n_heads": 2, "d_ff": 64, "max_seq_len": 16})
    train: TrainConfig = field(default_factory=TrainConfig)
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    srste: SrsteConfig = field(default_factory=SrsteConfig)
    attention: AttentionPruneConfig = field(default_factory=AttentionPruneConfig)
    data: object = field(default_factory=SyntheticSpec)

    def encoder_config(self, vocab_size, n_classes):
        return EncoderConfig(vocab_size=vocab_size, n_classes=n_classes, **self.encoder)

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=seed,
                                   train=dataclasses.replace(self.train, seed=seed))

    def validate(self):
        enc = self.encoder
        try:
            EncoderConfig(vocab_size=4, n_classes=2, **enc).check_divisible(self.sparsity)
        except ConfigError as e:
            raise ConfigError(f"encoder: {e}") from None
        if self.attention.enabled:
            br, bc = self.attention.cfg.block_shape
            seq = self.data.seq_len if isinstance(self.data, SyntheticSpec) else enc["max_seq_len"]
            if seq % br or enc["max_seq_len"] % br:
                raise ConfigError(f"attention.p: sequence length {seq} (max "
                                  f"{enc['max_seq_len']}) is not divisible by {br}")
        if isinstance(self.data, SyntheticSpec) and self.data.seq_len > enc["max_seq_len"]:
            raise ConfigError(f"data.seq_len: {self.data.seq_len} exceeds encoder.max_seq_len "
                              f"{enc['max_seq_len']}")
        return self


def _check_keys(section, given, allowed):
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}; "
                          f"allowed: {', '.join(sorted(allowed))}")


def _build(section, cls, values, exclude=()):
    names = [f.name for f in dataclasses.fields(cls) if f.name not in exclude]
    _check_keys(section, values, names)
    try:
        return cls(**values)
    except (ConfigError, ValueError, TypeError) as e:
        raise ConfigError(f"{section}: {e}") from None


def from_dict(doc):
    doc = dict(doc or {})
    top = ("version", "seed", "out", "preset", "encoder", "train", "sparsity", "srste",
           "attention", "data")
    _check_keys("config", doc, top)
    if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported config version {doc['version']!r}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed: expected an integer, got {seed!r}")
    preset = doc.get("preset", "default")
    if preset not in TRAIN_PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}; "
                          f"choose from {', '.join(TRAIN_PRESETS)}")

    encoder = RunConfig().encoder | dict(doc.get("encoder") or {})
    _check_keys("encoder", encoder, ENCODER_KEYS)

    # the run seed lives at top level only
    train_vals = TRAIN_PRESETS[preset] | dict(doc.get("train") or {})
    _check_keys("train", train_vals, [f.name for f in dataclasses.fields(TrainConfig)
                                      if f.name != "seed"])
    train = _build("train", TrainConfig, train_vals | {"seed": seed})

    sparsity = _build("sparsity", SparsityConfig, dict(doc.get("sparsity") or {}))
    srste = _build("srste", SrsteConfig, dict(doc.get("srste") or {}))

    att = dict(doc.get("attention") or {})
    att_keys = ("enabled", "p", "keep_k", "sentinel", "by_magnitude")
    _check_keys("attention", att, att_keys)
    att_sp = _build("attention", SparsityConfig,
                    {"p": att.pop("p", 4), "keep_k": att.pop("keep_k", 8),
                     "mode": ProjectionMode.TOPK})
    attention = _build("attention", AttentionPruneConfig, att | {"cfg": att_sp})

    data_vals = dict(doc.get("data") or {})
    if "train_tsv" in data_vals or "test_tsv" in data_vals:
        data = _build("data", TsvSource, data_vals)
    else:
        data = _build("data", SyntheticSpec, data_vals)

    return RunConfig(seed, str(doc.get("out", "runs/default")), preset, encoder, train,
                     sparsity, srste, attention, data).validate()


def load_config(path=None):
    if path is None:
        return from_dict({})
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(doc)


def _plain(obj):
    if isinstance(obj, Enum):
        return obj.value
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def to_dict(rc):
    """Fully resolved config; ``from_dict(to_dict(rc))`` reproduces ``rc``."""
    train = _plain(rc.train)
    train.pop("seed")
    sp = _plain(rc.sparsity)
    att = _plain(rc.attention)
    att_cfg = att.pop("cfg")
    att["p"], att["keep_k"] = att_cfg["p"], att_cfg["keep_k"]
    return {
        "version": CONFIG_VERSION,
        "seed": rc.seed,
        "out": rc.out,
        # presets are already folded into the explicit train values
        "preset": "default",
        "encoder": dict(rc.encoder),
        "train": train,
        "sparsity": sp,
        "srste": _plain(rc.srste),
        "attention": att,
        "data": _plain(rc.data),
    }


def dump_config(rc, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# format-version: {CONFIG_VERSION}\n")
        yaml.safe_dump(to_dict(rc), fh, sort_keys=False)
