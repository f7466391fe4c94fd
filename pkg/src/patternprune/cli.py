"""Command-line entry point.

    patternprune full-pipeline --config run.yaml --out runs/toy
    patternprune analyze-distribution --checkpoint runs/toy/admm.ckpt --target layers.0.W_Q
    patternprune verify --suite projection
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import analysis, trainer
from .admm import is_feasible
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TsvSource, dump_config, load_config
from .data import gen_synthetic, load_tsv
from .errors import ConfigError, InputError
from .model import collect_prunable, init_params
from .pattern import ProjectionMode, block_nonzero_counts, mask_keys, to_blocks

log = logging.getLogger("patternprune")

METRICS_VERSION = 1


class MetricsWriter:
    """Line-delimited JSON records behind a format-version header line."""

    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8")
        self.write({"format": "patternprune-metrics", "version": METRICS_VERSION})

    def write(self, rec):
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def load_data(rc):
    if isinstance(rc.data, TsvSource):
        msl = rc.encoder["max_seq_len"]
        train = load_tsv(rc.data.train_tsv, rc.data.text_column, rc.data.label_column, msl)
        test = load_tsv(rc.data.test_tsv, rc.data.text_column, rc.data.label_column, msl,
                        vocab=train.vocab, labels=train.labels)
        return train, test
    return gen_synthetic(rc.data)


def audit_masks(params, masks, scfg):
    """Feasibility of the forward weights ``W * mask`` for every prunable matrix."""
    out, kept, total = [], 0, 0
    for t, w in collect_prunable(params):
        mask = masks[t]
        eff = w * mask
        flat, _ = to_blocks(mask, scfg.block_shape)
        counts = flat.sum(axis=1)
        exact = bool(np.all(counts == scfg.keep_k))
        n_patterns = len(set(mask_keys(flat > 0).tolist()))
        pool_ok = scfg.mode is not ProjectionMode.POOL or n_patterns <= scfg.pool_size
        feasible = exact and pool_ok and is_feasible(eff, scfg) and \
            bool(np.all(block_nonzero_counts(eff, scfg) <= scfg.keep_k))
        kept += int(mask.sum())
        total += mask.size
        out.append({"phase": "audit", "target": t, "feasible": feasible,
                    "exact_block_cardinality": exact, "n_patterns": n_patterns})
    return out, 1.0 - kept / total


def _emitter(writer):
    def emit(rec):
        writer.write(rec)
    return emit


def _metrics(rc, command):
    name = "metrics.jsonl" if command == "full-pipeline" else f"metrics.{command}.jsonl"
    return MetricsWriter(os.path.join(rc.out, name))


def _prepare(args):
    rc = load_config(args.config)
    if args.seed is not None:
        rc = rc.with_seed(args.seed)
    if args.out is not None:
        rc = dataclasses.replace(rc, out=args.out)
    os.makedirs(rc.out, exist_ok=True)
    dump_config(rc, os.path.join(rc.out, "config.resolved.yaml"))
    return rc


def _load_stage(path, what):
    if not path:
        raise ConfigError(f"--checkpoint is required for {what}")
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _check_vocab(params, train):
    if params.cfg.vocab_size != train.vocab_size:
        raise InputError(f"checkpoint vocab size {params.cfg.vocab_size} does not match "
                         f"data vocab size {train.vocab_size}")


def _eval_record(stage, res):
    return {"phase": "eval", "stage": stage, "accuracy": res.accuracy, "loss": res.loss,
            "n_examples": res.n_examples}


def cmd_train_dense(args):
    rc = _prepare(args)
    train, test = load_data(rc)
    params = init_params(rc.encoder_config(train.vocab_size, train.n_classes), rc.seed)
    w = _metrics(rc, args.command)
    trainer.train_dense(params, train, rc.train, rc.attention, _emitter(w))
    w.write(_eval_record("dense", trainer.evaluate(params, test, None, rc.attention)))
    w.close()
    save_checkpoint(os.path.join(rc.out, "dense.ckpt"), params, meta={"stage": "dense"})
    return 0


def _admm_and_prune(rc, params, train, emit):
    _, res = trainer.admm_phase(params, train, rc.train, rc.sparsity, rc.attention, emit)
    save_checkpoint(os.path.join(rc.out, "admm.ckpt"), params, meta={"stage": "admm"})
    _, masks = trainer.hard_prune(params, rc.sparsity)
    save_checkpoint(os.path.join(rc.out, "pruned.ckpt"), params, masks, meta={"stage": "pruned"})
    return res, masks


def cmd_admm_prune(args):
    rc = _prepare(args)
    params, _, _ = _load_stage(args.checkpoint, "admm-prune")
    train, test = load_data(rc)
    _check_vocab(params, train)
    w = _metrics(rc, args.command)
    _, masks = _admm_and_prune(rc, params, train, _emitter(w))
    w.write(_eval_record("pruned", trainer.evaluate(params, test, masks, rc.attention)))
    w.close()
    return 0


def cmd_retrain(args):
    rc = _prepare(args)
    params, masks, _ = _load_stage(args.checkpoint, "retrain")
    if masks is None:
        raise InputError(f"{args.checkpoint} has no masks; run admm-prune first")
    train, test = load_data(rc)
    _check_vocab(params, train)
    w = _metrics(rc, args.command)
    _, masks, _ = trainer.retrain_srste(params, masks, train, rc.train, rc.srste, rc.attention,
                                        rc.sparsity, _emitter(w))
    w.write(_eval_record("final", trainer.evaluate(params, test, masks, rc.attention)))
    w.close()
    save_checkpoint(os.path.join(rc.out, "final.ckpt"), params, masks, meta={"stage": "final"})
    return 0


def cmd_eval(args):
    rc = _prepare(args)
    params, masks, meta = _load_stage(args.checkpoint, "eval")
    _, test = load_data(rc)
    w = _metrics(rc, args.command)
    res = trainer.evaluate(params, test, masks, rc.attention)
    rec = _eval_record(meta.get("stage", "checkpoint"), res)
    ok = True
    if masks is not None:
        audit, sparsity = audit_masks(params, masks, rc.sparsity)
        for a in audit:
            w.write(a)
        ok = all(a["feasible"] for a in audit)
        rec.update(feasible=ok, prunable_sparsity=sparsity)
    w.write(rec)
    w.close()
    print(json.dumps(rec, sort_keys=True))
    return 0 if ok else 1


def cmd_full_pipeline(args):
    rc = _prepare(args)
    train, test = load_data(rc)
    params = init_params(rc.encoder_config(train.vocab_size, train.n_classes), rc.seed)
    w = _metrics(rc, args.command)
    emit = _emitter(w)
    trainer.train_dense(params, train, rc.train, rc.attention, emit)
    save_checkpoint(os.path.join(rc.out, "dense.ckpt"), params, meta={"stage": "dense"})
    emit(_eval_record("dense", trainer.evaluate(params, test, None, rc.attention)))
    _, masks = _admm_and_prune(rc, params, train, emit)
    emit(_eval_record("pruned", trainer.evaluate(params, test, masks, rc.attention)))
    _, masks, _ = trainer.retrain_srste(params, masks, train, rc.train, rc.srste, rc.attention,
                                        rc.sparsity, emit)
    save_checkpoint(os.path.join(rc.out, "final.ckpt"), params, masks, meta={"stage": "final"})
    final = trainer.evaluate(params, test, masks, rc.attention)
    audit, sparsity = audit_masks(params, masks, rc.sparsity)
    for a in audit:
        emit(a)
    rec = _eval_record("final", final)
    rec.update(feasible=all(a["feasible"] for a in audit), prunable_sparsity=sparsity)
    emit(rec)
    w.close()
    print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_analyze(args):
    params, masks, meta = load_checkpoint(args.checkpoint)
    valid = [t for t, _ in collect_prunable(params)]
    if args.target not in params.arrays or args.target not in valid:
        raise InputError(f"unknown target {args.target!r}; valid ids: {', '.join(valid)}")
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    w = params[args.target]
    if masks is not None and args.target in masks:
        w = w * masks[args.target]
    block = (args.block, args.block)
    hists = analysis.section_histograms(w, args.sections, args.bins, args.block)
    stem = args.target.replace(".", "_")
    analysis.write_histogram_table(os.path.join(out, f"hist_{stem}_whole.tsv"), hists[:1])
    analysis.write_histogram_table(os.path.join(out, f"hist_{stem}_sections.tsv"), hists[1:])
    summary = {"format": "patternprune-distribution", "version": analysis.TABLE_VERSION,
               "checkpoint_stage": meta.get("stage"), "target": args.target,
               "sections": args.sections, "bins": args.bins, "block": args.block}
    summary["target_matrix"] = analysis.effective_sparsity_summary([w], block, args.epsilon)
    section_stats = []
    for key, sec in analysis.sections(w, args.sections, args.block):
        s = analysis.effective_sparsity_summary([sec], block, args.epsilon)
        section_stats.append({"section": list(key), **s})
    summary["per_section"] = section_stats
    mats = [params[t] * masks[t] if masks and t in masks else params[t] for t in valid]
    summary["all_prunable"] = analysis.effective_sparsity_summary(mats, block, args.epsilon)
    with open(os.path.join(out, f"summary_{stem}.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(json.dumps({"target": args.target, **summary["target_matrix"]}, sort_keys=True))
    return 0


def cmd_verify(args):
    from . import verify

    results = verify.run(suites=args.suite or None, fault=args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.suite}/{r.name}  {r.detail}")
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="patternprune",
                                     description="ADMM pattern pruning for transformers")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_cmd(name, fn, help_, checkpoint=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML run config (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides config)")
        if checkpoint:
            p.add_argument("--checkpoint", help="input checkpoint")
        p.set_defaults(func=fn)

    run_cmd("train-dense", cmd_train_dense, "train the dense model")
    run_cmd("admm-prune", cmd_admm_prune, "ADMM phase then hard prune", checkpoint=True)
    run_cmd("retrain", cmd_retrain, "SR-STE retraining of a pruned checkpoint", checkpoint=True)
    run_cmd("eval", cmd_eval, "evaluate a checkpoint and audit its masks", checkpoint=True)
    run_cmd("full-pipeline", cmd_full_pipeline, "dense -> ADMM -> prune -> retrain -> eval")

    p = sub.add_parser("analyze-distribution", help="weight histograms and block sparsity")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True, help="prunable matrix id, e.g. layers.0.W_Q")
    p.add_argument("--sections", type=int, default=3)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--bins", type=int, default=101)
    p.add_argument("--block", type=int, default=4, help="block edge for effective sparsity")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--suite", action="append",
                   help="restrict to a suite (repeatable); e.g. projection")
    p.add_argument("--inject-fault", choices=["skip-tiebreak"], help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
