import json

import numpy as np
import pytest

from patternprune.checkpoint import load_checkpoint
from patternprune.cli import main

SMALL = """seed: 2
preset: toy
encoder: {n_layers: 1, d_model: 16, d_ff: 32}
train: {epochs_dense: 1, epochs_admm: 2, epochs_retrain: 1}
data: {n_train: 120, n_test: 60}
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(SMALL, encoding="utf-8")
    return str(p)


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


def test_full_pipeline_outputs_and_determinism(cfg, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["full-pipeline", "--config", cfg, "--out", str(a)]) == 0
    assert main(["full-pipeline", "--config", cfg, "--out", str(b)]) == 0
    names = ["config.resolved.yaml", "metrics.jsonl", "dense.ckpt", "admm.ckpt", "pruned.ckpt",
             "final.ckpt"]
    for n in names[1:]:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n
    recs = read_jsonl(a / "metrics.jsonl")
    assert recs[0] == {"format": "patternprune-metrics", "version": 1}
    final = recs[-1]
    assert final["stage"] == "final" and final["feasible"] and final["prunable_sparsity"] == 0.5
    assert any(r.get("phase") == "admm-residual" for r in recs)


def test_resolved_config_reruns_identically(cfg, tmp_path):
    a = tmp_path / "a"
    main(["full-pipeline", "--config", cfg, "--out", str(a)])
    b = tmp_path / "b"
    main(["full-pipeline", "--config", str(a / "config.resolved.yaml"), "--out", str(b)])
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    assert (a / "final.ckpt").read_bytes() == (b / "final.ckpt").read_bytes()


def test_seed_override_changes_run(cfg, tmp_path):
    main(["full-pipeline", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["full-pipeline", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a/dense.ckpt").read_bytes() != (tmp_path / "b/dense.ckpt").read_bytes()


def test_no_admm_path(tmp_path):
    c = tmp_path / "c.yaml"
    c.write_text(SMALL.replace("epochs_admm: 2", "epochs_admm: 0"), encoding="utf-8")
    out = tmp_path / "o"
    assert main(["full-pipeline", "--config", str(c), "--out", str(out)]) == 0
    dense, _, _ = load_checkpoint(str(out / "dense.ckpt"))
    admm_, _, _ = load_checkpoint(str(out / "admm.ckpt"))
    assert all(np.array_equal(dense[n], admm_[n]) for n in dense.names())
    assert not any(r.get("phase", "").startswith("admm") for r in read_jsonl(out / "metrics.jsonl"))


def test_staged_commands_and_eval_audit(cfg, tmp_path, capsys):
    out = str(tmp_path / "s")
    assert main(["train-dense", "--config", cfg, "--out", out]) == 0
    assert main(["admm-prune", "--config", cfg, "--out", out,
                 "--checkpoint", f"{out}/dense.ckpt"]) == 0
    assert main(["retrain", "--config", cfg, "--out", out,
                 "--checkpoint", f"{out}/pruned.ckpt"]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--out", out, "--checkpoint", f"{out}/pruned.ckpt"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["feasible"] is True and rec["prunable_sparsity"] == 0.5
    audit = [r for r in read_jsonl(f"{out}/metrics.eval.jsonl") if r.get("phase") == "audit"]
    assert len(audit) == 6 and all(r["feasible"] for r in audit)
    for stem in ("train-dense", "admm-prune", "retrain"):
        assert (tmp_path / "s" / f"metrics.{stem}.jsonl").exists()


def test_errors(cfg, tmp_path, capsys):
    assert main(["retrain", "--config", cfg, "--out", str(tmp_path),
                 "--checkpoint", str(tmp_path / "none.ckpt")]) == 2
    assert "not found" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  lamda: 1\n", encoding="utf-8")
    assert main(["train-dense", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "train: unknown key(s) lamda" in capsys.readouterr().err
    main(["train-dense", "--config", cfg, "--out", str(tmp_path / "d")])
    assert main(["retrain", "--config", cfg, "--out", str(tmp_path / "d"),
                 "--checkpoint", str(tmp_path / "d/dense.ckpt")]) == 2
    assert "no masks" in capsys.readouterr().err


def test_analyze_distribution(cfg, tmp_path, capsys):
    out = tmp_path / "r"
    main(["full-pipeline", "--config", cfg, "--out", str(out)])
    capsys.readouterr()
    assert main(["analyze-distribution", "--checkpoint", str(out / "pruned.ckpt"),
                 "--target", "layers.0.W_Q", "--sections", "2", "--epsilon", "1e-12"]) == 0
    summary = json.loads((out / "summary_layers_0_W_Q.json").read_text(encoding="utf-8"))
    assert summary["target_matrix"]["block_sparsity_mean"] == 0.5
    assert summary["target_matrix"]["block_sparsity_std"] == 0.0
    assert len(summary["per_section"]) == 4
    whole = (out / "hist_layers_0_W_Q_whole.tsv").read_text(encoding="utf-8")
    assert whole.startswith("# format-version: 1\n")
    assert main(["analyze-distribution", "--checkpoint", str(out / "pruned.ckpt"),
                 "--target", "layers.0.b_Q"]) == 2
    err = capsys.readouterr().err
    assert "valid ids" in err and "layers.0.W_ff2" in err


def test_verify_filter_and_fault(capsys):
    assert main(["verify", "--suite", "projection"]) == 0
    out = capsys.readouterr().out
    assert "projection/topk-equals-exhaustive-argmin" in out and "pool/" not in out
    assert main(["verify", "--suite", "projection", "--inject-fault", "skip-tiebreak"]) == 1
    out = capsys.readouterr().out
    assert "FAIL  projection/topk-tiebreak-deterministic" in out
    assert main(["verify", "--suite", "nonsense"]) == 2
