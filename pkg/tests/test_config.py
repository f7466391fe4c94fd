import pytest
import yaml

from patternprune.config import (TRAIN_PRESETS, TsvSource, dump_config, from_dict, load_config,
                                 to_dict)
from patternprune.errors import ConfigError
from patternprune.pattern import ProjectionMode


def test_defaults():
    rc = load_config(None)
    assert rc.train.rho == 0.01 and rc.train.learning_rate == 3e-3
    assert rc.sparsity.p == 4 and rc.sparsity.keep_k == 8 and rc.sparsity.pool_size == 32
    assert rc.srste.lambda_w == 2e-4 and not rc.attention.enabled


def test_presets():
    assert from_dict({"preset": "bert"}).train.learning_rate == 7e-5
    toy = from_dict({"preset": "toy", "train": {"rho": 0.5}})
    assert toy.train.rho == 0.5 and toy.train.epochs_admm == TRAIN_PRESETS["toy"]["epochs_admm"]
    with pytest.raises(ConfigError, match="preset"):
        from_dict({"preset": "huge"})


@pytest.mark.parametrize("doc,where", [
    ({"train": {"rhoo": 1}}, "train"),
    ({"srste": {"lambda": 1}}, "srste"),
    ({"bogus": 1}, "config"),
    ({"train": {"seed": 3}}, "train"),
    ({"sparsity": {"keep_k": 40}}, "sparsity"),
    ({"encoder": {"d_model": 30}}, "encoder"),
    ({"encoder": {"d_ff": 66}}, "encoder"),
    ({"attention": {"enabled": True, "p": 3, "keep_k": 4}}, "attention"),
    ({"data": {"seq_len": 32}}, "data"),
    ({"train": {"rho": -1}}, "train"),
])
def test_field_level_errors(doc, where):
    with pytest.raises(ConfigError, match=where):
        from_dict(doc)


def test_seed_propagates():
    rc = from_dict({"seed": 9})
    assert rc.train.seed == 9 and rc.with_seed(4).train.seed == 4


def test_round_trip(tmp_path):
    rc = from_dict({"preset": "toy", "seed": 5, "sparsity": {"mode": "topk"},
                    "attention": {"enabled": True, "keep_k": 12}})
    assert rc.sparsity.mode is ProjectionMode.TOPK and rc.attention.cfg.keep_k == 12
    path = tmp_path / "c.yaml"
    dump_config(rc, str(path))
    text = path.read_text(encoding="utf-8")
    assert text.startswith("# format-version: 1\n")
    again = load_config(str(path))
    assert to_dict(again) == to_dict(rc)
    assert again.train == rc.train and again.sparsity == rc.sparsity
    dump_config(again, str(tmp_path / "d.yaml"))
    assert (tmp_path / "d.yaml").read_text(encoding="utf-8") == text


def test_tsv_source(tmp_path):
    rc = from_dict({"data": {"train_tsv": "a.tsv", "test_tsv": "b.tsv"}})
    assert isinstance(rc.data, TsvSource)


def test_bad_yaml(tmp_path):
    p = tmp_path / "x.yaml"
    p.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(str(p))
    p.write_text("train: [unclosed\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(str(p))
    assert yaml.safe_load("a: 1") == {"a": 1}
