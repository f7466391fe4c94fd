"""Synthetic classification tasks, TSV ingestion, export and batching."""

import csv
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, InputError, ParseError
from .model import PAD_ID, UNK_ID

PAD, UNK = "<pad>", "<unk>"
EXPORT_VERSION = 1


@dataclass
class Dataset:
    examples: list  # (tuple of token ids, label)
    vocab: dict  # token -> id, PAD=0, UNK=1
    n_classes: int
    labels: list = field(default_factory=list)  # label names by class index
    max_seq_len: int = 16

    def __post_init__(self):
        vs = len(self.vocab)
        for ids, y in self.examples:
            if len(ids) > self.max_seq_len:
                raise InputError(f"sequence of length {len(ids)} exceeds max_seq_len")
            if any(not 0 <= t < vs for t in ids):
                raise InputError("token id outside vocabulary")
            if not 0 <= y < self.n_classes:
                raise InputError(f"label {y} outside [0, {self.n_classes})")

    def __len__(self):
        return len(self.examples)

    @property
    def vocab_size(self):
        return len(self.vocab)

    def label_counts(self):
        return np.bincount([y for _, y in self.examples], minlength=self.n_classes)


class TaskKind(str, Enum):
    CONTAINS_BIGRAM = "contains-bigram"
    MAJORITY_TOKEN = "majority-token"
    PARITY_OF_MARKER = "parity-of-marker"


@dataclass(frozen=True)
class SyntheticSpec:
    task: TaskKind = TaskKind.CONTAINS_BIGRAM
    vocab_size: int = 32
    seq_len: int = 16
    n_train: int = 4000
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind(self.task))


def synthetic_vocab(vocab_size):
    vocab = {PAD: PAD_ID, UNK: UNK_ID}
    for i in range(2, vocab_size):
        vocab[f"t{i}"] = i
    return vocab


def task_markers(spec):
    """Designated token ids for the task: the bigram pair or the marker(s)."""
    rng = np.random.default_rng([spec.seed, 7])
    a, b = rng.choice(np.arange(2, spec.vocab_size), size=2, replace=False)
    return int(a), int(b)


def contains_bigram(seq, a, b):
    return any(x == a and y == b for x, y in zip(seq, seq[1:]))


def label_of(spec, seq):
    """Ground-truth rule for a synthetic sequence."""
    a, b = task_markers(spec)
    if spec.task is TaskKind.CONTAINS_BIGRAM:
        return int(contains_bigram(seq, a, b))
    if spec.task is TaskKind.MAJORITY_TOKEN:
        return int(seq.count(a) > seq.count(b))
    return seq.count(a) % 2


def _sample(spec, label, rng):
    L, a, b = spec.seq_len, *task_markers(spec)
    content = np.arange(2, spec.vocab_size)
    if spec.task is TaskKind.CONTAINS_BIGRAM:
        seq = list(rng.choice(content, size=L))
        if label:
            i = int(rng.integers(0, L - 1))
            seq[i], seq[i + 1] = a, b
        else:
            others = content[content != b]
            while True:
                hits = [i for i in range(L - 1) if seq[i] == a and seq[i + 1] == b]
                if not hits:
                    break
                for i in hits:
                    seq[i + 1] = rng.choice(others)
        return [int(t) for t in seq]
    fill = content[(content != a) & (content != b)]
    seq = list(rng.choice(fill, size=L))
    if spec.task is TaskKind.MAJORITY_TOKEN:
        while True:
            ca, cb = rng.multinomial(int(rng.integers(1, L + 1)), [0.5, 0.5])
            if ca != cb and int(ca > cb) == label:
                break
        pos = rng.permutation(L)
        for i in pos[:ca]:
            seq[i] = a
        for i in pos[ca:ca + cb]:
            seq[i] = b
    else:
        c = int(rng.integers(0, L + 1))
        if c % 2 != label:
            c = c - 1 if c > 0 else 1
        for i in rng.permutation(L)[:c]:
            seq[i] = a
    return [int(t) for t in seq]


def gen_synthetic(spec):
    """Seeded ``(train, test)`` datasets; no sequence appears in both splits."""
    if spec.vocab_size < 4:
        raise ConfigError(f"vocab_size must be >= 4, got {spec.vocab_size}")
    min_len = 2 if spec.task is TaskKind.CONTAINS_BIGRAM else 1
    if spec.seq_len < min_len:
        raise ConfigError(f"seq_len {spec.seq_len} is too short for task {spec.task.value}")
    if spec.task is not TaskKind.CONTAINS_BIGRAM and spec.vocab_size < 5:
        raise ConfigError(f"task {spec.task.value} needs vocab_size >= 5")
    rng = np.random.default_rng(spec.seed)
    vocab = synthetic_vocab(spec.vocab_size)
    seen = set()

    def split(n):
        labels = np.array([i % 2 for i in range(n)])
        rng.shuffle(labels)
        out = []
        for y in labels:
            for _ in range(1000):
                seq = tuple(_sample(spec, int(y), rng))
                if seq not in seen:
                    break
            else:
                raise ConfigError("could not draw enough distinct sequences; increase vocab_size or seq_len")
            seen.add(seq)
            out.append((seq, int(y)))
        return Dataset(out, vocab, 2, ["0", "1"], spec.seq_len)

    return split(spec.n_train), split(spec.n_test)


def tokenize(text):
    return text.lower().split()


def _label_key(s):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)


def load_tsv(path, text_column="sentence", label_column="label", max_seq_len=16,
             vocab=None, labels=None):
    """Read a header-first, tab-separated file into a Dataset.

    Passing ``vocab``/``labels`` (from the training split) maps unseen
    tokens to UNK and rejects unseen labels; otherwise both are built from
    this file.
    """
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        for col in (text_column, label_column):
            if col not in header:
                raise ParseError(f"missing column {col!r} in header {header}", line=1)
        ti, li = header.index(text_column), header.index(label_column)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", line=lineno)
            rows.append((lineno, tokenize(row[ti]), row[li].strip()))

    if vocab is None:
        vocab = {PAD: PAD_ID, UNK: UNK_ID}
        for _, toks, _ in rows:
            for t in toks:
                vocab.setdefault(t, len(vocab))
    if labels is None:
        labels = sorted({lab for _, _, lab in rows}, key=_label_key)
    label_index = {lab: i for i, lab in enumerate(labels)}
    examples = []
    for lineno, toks, lab in rows:
        if lab not in label_index:
            raise InputError(f"line {lineno}: unknown label {lab!r}")
        ids = tuple(vocab.get(t, UNK_ID) for t in toks[:max_seq_len])
        examples.append((ids, label_index[lab]))
    return Dataset(examples, dict(vocab), len(labels), list(labels), max_seq_len)


def export_dataset(d, path):
    vocab = sorted(d.vocab.items(), key=lambda kv: kv[1])
    doc = {
        "format": "patternprune-dataset",
        "version": EXPORT_VERSION,
        "max_seq_len": d.max_seq_len,
        "n_classes": d.n_classes,
        "labels": d.labels,
        "vocab": [tok for tok, _ in vocab],
        "examples": [[list(ids), y] for ids, y in d.examples],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_dataset(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != EXPORT_VERSION:
        raise InputError(f"unsupported dataset version {doc.get('version')!r}")
    vocab = {tok: i for i, tok in enumerate(doc["vocab"])}
    examples = [(tuple(ids), y) for ids, y in doc["examples"]]
    return Dataset(examples, vocab, doc["n_classes"], doc["labels"], doc["max_seq_len"])


def pad_batch(seqs, pad_multiple=1):
    T = max(len(s) for s in seqs)
    T = -(-T // pad_multiple) * pad_multiple
    out = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def batches(d, batch_size, seed=0, shuffle=True, pad_multiple=1):
    """Yield ``(tokens, labels)``; the last batch may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(d))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        seqs = [d.examples[i][0] for i in idx]
        yield pad_batch(seqs, pad_multiple), np.array([d.examples[i][1] for i in idx])
