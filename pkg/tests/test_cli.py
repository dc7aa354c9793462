import hashlib
import os
import subprocess
import sys
import xml.etree.ElementTree as ET

import pytest

from cpfs3d import cli
from cpfs3d.detector import NonFiniteLoss
from cpfs3d.synthdata import read_benchmark

from conftest import TINY


def _tiny_cfg_file(path, **extra):
    items = dict(TINY, **extra)
    with open(path, "w") as f:
        for k, v in items.items():
            f.write(f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}\n")
    return str(path)


def _tree_digest(root):
    h = hashlib.sha256()
    for d, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            p = os.path.join(d, name)
            h.update(os.path.relpath(p, root).encode())
            h.update(open(p, "rb").read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """gen-data, pretrain, finetune and eval through the command line entry point."""
    root = tmp_path_factory.mktemp("cli")
    cfg = _tiny_cfg_file(root / "tiny.cfg")
    out = str(root / "out")
    codes = [cli.main([cmd, "--config", cfg, "--out", out]) for cmd in ("gen-data", "pretrain", "finetune", "eval")]
    return cfg, out, codes


def test_chain_exit_codes(chain):
    _, out, codes = chain
    assert codes == [0, 0, 0, 0]
    assert os.path.isfile(os.path.join(out, "eval", "ap_report.json"))
    assert os.path.isfile(os.path.join(out, "ckpt", "finetune_last.ckpt"))


def test_gen_data_is_deterministic(chain, tmp_path, capsys):
    cfg, out, _ = chain
    assert cli.main(["gen-data", "--config", cfg, "--data", str(tmp_path / "again")]) == 0
    assert "annotated train instances per class" in capsys.readouterr().out
    assert _tree_digest(os.path.join(out, "data")) == _tree_digest(tmp_path / "again")
    bench = read_benchmark(str(tmp_path / "again"))
    assert len(bench.train) == TINY["n_train_scenes"] and len(bench.test) == TINY["n_test_scenes"]
    n_files = sum(f.endswith(".scene.json") for f in os.listdir(tmp_path / "again" / "train"))
    assert n_files == TINY["n_train_scenes"]


def test_eval_twice_same_report(chain, tmp_path):
    cfg, out, _ = chain
    first = open(os.path.join(out, "eval", "ap_report.json")).read()
    ck = os.path.join(out, "ckpt", "finetune_last.ckpt")
    before = open(ck, "rb").read()
    assert cli.main(["eval", "--config", cfg, "--out", out]) == 0
    assert open(os.path.join(out, "eval", "ap_report.json")).read() == first
    assert open(ck, "rb").read() == before


def test_plot_scene_has_one_green_box_per_gt(chain):
    cfg, out, _ = chain
    assert cli.main(["plot", "--config", cfg, "--out", out, "--scenes", "2"]) == 0
    pdir = os.path.join(out, "plots")
    assert {"losses.svg", "pr_novel.svg", "pr_base.svg"} <= set(os.listdir(pdir))
    bench = read_benchmark(os.path.join(out, "data"))
    for sc in bench.test[:2]:
        root = ET.parse(os.path.join(pdir, f"scene_{sc.scene_id}.svg")).getroot()
        groups = [g for g in root.iter() if g.get("id", "").startswith("gt-box-")]
        assert len(groups) == len(sc.boxes)
        for g in groups:
            styles = " ".join(el.get("style", "") for el in g.iter())
            assert "stroke: #008000" in styles


def test_plot_is_deterministic(chain, tmp_path):
    cfg, out, _ = chain
    pdir = os.path.join(out, "plots")
    cli.main(["plot", "--config", cfg, "--out", out, "--scenes", "1"])
    snap = {f: open(os.path.join(pdir, f), "rb").read() for f in os.listdir(pdir)}
    cli.main(["plot", "--config", cfg, "--out", out, "--scenes", "1"])
    for f, data in snap.items():
        assert open(os.path.join(pdir, f), "rb").read() == data, f


def test_plot_without_metrics_warns(tmp_path, caplog):
    with caplog.at_level("WARNING"):
        assert cli.main(["plot", "--out", str(tmp_path)]) == 0
    assert "no metrics" in caplog.text


def test_resume_via_cli_is_noop(chain):
    cfg, out, _ = chain
    metrics = os.path.join(out, "metrics_pretrain.jsonl")
    before = open(metrics).read()
    assert cli.main(["pretrain", "--config", cfg, "--out", out]) == 0
    assert open(metrics).read() == before


def test_hash_mismatch_exit_code(chain, capsys):
    cfg, out, _ = chain
    assert cli.main(["pretrain", "--config", cfg, "--out", out, "--set", "lr=0.0001"]) == cli.EXIT_IO
    assert "hash" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["--bogus"], ["train"], ["pretrain", "--set", "nope=1"],
                                  ["pretrain", "--set", "gamma=2"], []])
def test_usage_errors(argv, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path)] if argv else argv) == cli.EXIT_USAGE


def test_missing_data_is_io_error(tmp_path):
    assert cli.main(["pretrain", "--out", str(tmp_path)]) == cli.EXIT_IO


def test_corrupt_checkpoint_is_io_error(chain, tmp_path):
    cfg, out, _ = chain
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert cli.main(["eval", "--config", cfg, "--out", out, "--ckpt", str(bad)]) == cli.EXIT_IO


def test_numeric_failure_exit_code(monkeypatch):
    def boom(args):
        raise NonFiniteLoss("l_total is nan")
    monkeypatch.setitem(cli.COMMANDS, "oracle", boom)
    assert cli.main(["oracle"]) == cli.EXIT_NUMERIC


def test_oracle_command(capsys):
    assert cli.main(["oracle"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_grad_check_command(capsys, tmp_path):
    assert cli.main(["grad-check", "--instances", "3", "--out", str(tmp_path)]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "cpfs3d", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
    r = subprocess.run([sys.executable, "-m", "cpfs3d", "nope"], capture_output=True, text=True)
    assert r.returncode == cli.EXIT_USAGE
