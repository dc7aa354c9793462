import dataclasses
import glob
import os
import re

import numpy as np
import pytest

from cpfs3d import checkpoint as ckpt
from cpfs3d.config import RunConfig, load_config, parse_config_text, parse_overrides
from cpfs3d.synthdata import ConfigurationError

SRC = os.path.join(os.path.dirname(__file__), os.pardir, "src", "cpfs3d")

# Published training constants and the config field that carries each.
PUBLISHED = {
    "batch_size": 16, "pretrain_epochs": 36, "finetune_epochs": 5, "lr": 0.008, "weight_decay": 0.01,
    "W": 128, "gamma": 0.999, "tau": 0.2, "lambda1": 0.1, "lambda2": 0.1, "d": 256, "proj_dim": 128,
    "n_seeds": 256, "n_proposals": 64,
}


def test_published_constants_are_config_defaults():
    cfg = RunConfig()
    for name, value in PUBLISHED.items():
        assert getattr(cfg, name) == value, name


def test_every_field_is_consumed_outside_config():
    src = "".join(open(p).read() for p in glob.glob(os.path.join(SRC, "*.py")) if not p.endswith("config.py"))
    unused = [f.name for f in dataclasses.fields(RunConfig) if not re.search(rf"cfg\.{f.name}\b", src)]
    assert unused == []


def test_training_code_has_no_literal_published_constants():
    # the trainer must read these from the config, never spell them out
    text = open(os.path.join(SRC, "train.py")).read()
    for literal in ("0.008", "0.999", "0.01", "36", "128"):
        assert not re.search(rf"(?<![\w.]){re.escape(literal)}(?![\w.])", text), literal


def test_overrides_and_file(tmp_path):
    path = os.path.join(tmp_path, "run.cfg")
    with open(path, "w") as f:
        f.write("# comment\nbatch_size=4\nsa1_widths=8, 8, 16\nuse_projection=false\n")
    cfg = load_config(path, ["lr=0.001"], seed=5)
    assert cfg.batch_size == 4 and cfg.sa1_widths == (8, 8, 16) and cfg.use_projection is False
    assert cfg.lr == 0.001 and cfg.seed == 5


@pytest.mark.parametrize("item", ["bogus=1", "batch_size=abc", "noequals", "use_projection=maybe"])
def test_bad_overrides(item):
    with pytest.raises(ConfigurationError):
        parse_overrides([item])


@pytest.mark.parametrize("text", ["batch_size=0", "gamma=1.5", "tau=0", "n_way=9", "cls_head=mlp",
                                  "bank_init=uniform", "neg_radius=0.1", "lambda1=-1", "n_proposals=999"])
def test_validation_rejects(text):
    with pytest.raises(ConfigurationError):
        parse_config_text(text)


def test_hash_stability():
    a, b = RunConfig(), RunConfig()
    assert a.hash() == b.hash()
    assert a.replace(lr=0.001).hash() != a.hash()
    assert a.replace(seeds=(5,)).training_hash() == a.training_hash()
    assert parse_config_text(a.to_text()) == a


def test_archive_round_trip_bytewise(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"b": rng.normal(size=(3, 4)).astype(np.float32), "a": np.arange(5, dtype=np.float32)}
    meta = {"epoch": 2, "rng": {"x": [1, 2]}}
    p1, p2 = os.path.join(tmp_path, "1.ckpt"), os.path.join(tmp_path, "2.ckpt")
    ckpt.save(p1, arrays, meta)
    arr2, meta2 = ckpt.load(p1)
    ckpt.save(p2, arr2, meta2)
    assert open(p1, "rb").read() == open(p2, "rb").read()
    assert list(arr2) == ["b", "a"] and np.array_equal(arr2["b"], arrays["b"]) and meta2 == meta


def test_archive_corruption(tmp_path):
    data = ckpt.dumps({"a": np.ones(10, dtype=np.float32)}, {})
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(b"junk" + data)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(data[:-8])
