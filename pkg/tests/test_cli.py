import json
import subprocess
import sys

import pytest

from ereformer import cli
from ereformer.events import EventStream, write_bin

SMALL = """\
[model]
base_channels = 8
heads = 1,2,2,4
ffn_ratio = 2

[train]
epochs = 1
t_bptt = 4

[data]
width = 32
height = 32
duration_us = 200000
num_sequences = 3
val_every = 3
"""

SCENE = """\
[scene]
width = 32
height = 32
duration_us = 200000
velocity = 1.5, 0

[plane.0]
depth = 40
seed = 1

[plane.1]
depth = 4
seed = 2
extent = -0.5, 0.5, -1, 1
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL)
    assert cli.main(["simulate", "--dataset", str(root / "small.cfg"), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(root / "small.cfg"), "--data", str(root / "data"),
                     "--out", str(root / "run")]) == 0
    return root


def test_usage_errors_exit_1(capsys):
    assert cli.main([]) == 1
    assert cli.main(["train"]) == 1
    assert cli.main(["frobnicate"]) == 1


def test_help_exits_0(capsys):
    assert cli.main(["--help"]) == 0
    assert "gradcheck" in capsys.readouterr().out


def test_simulate_scene(tmp_path, capsys):
    (tmp_path / "scene.ini").write_text(SCENE)
    assert cli.main(["simulate", "--spec", str(tmp_path / "scene.ini"), "--out", str(tmp_path / "seq")]) == 0
    assert "events" in capsys.readouterr().out
    assert len(list((tmp_path / "seq").glob("depth_*.pfm"))) == 4
    assert (tmp_path / "seq" / "events.bin").exists()


def test_bad_scene_is_usage_error_and_missing_file_is_data_error(tmp_path):
    (tmp_path / "bad.ini").write_text("[scene]\nwidth = wide\n")
    assert cli.main(["simulate", "--spec", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["simulate", "--spec", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "o")]) == 2


def test_train_writes_manifest(trained):
    manifest = json.loads((trained / "run" / "manifest.json").read_text())
    assert manifest["dataset"] == {"train": ["seq_000", "seq_001"], "val": ["seq_002"]}
    assert len(manifest["epochs"]) == 1


def test_eval_prints_report(trained, capsys):
    assert cli.main(["eval", "--ckpt", str(trained / "run" / "best.ckpt"), "--data", str(trained / "data")]) == 0
    out = capsys.readouterr().out
    assert "seq_002: abs_rel" in out and "delta1" in out


def test_infer_and_empty_notice(trained, tmp_path, capsys):
    ckpt = str(trained / "run" / "last.ckpt")
    events = str(trained / "data" / "seq_000" / "events.bin")
    assert cli.main(["infer", "--ckpt", ckpt, "--events", events, "--out", str(tmp_path / "a")]) == 0
    assert len(list((tmp_path / "a").glob("depth_*.pfm"))) == 4
    write_bin(EventStream.empty(32, 32), tmp_path / "empty.bin")
    capsys.readouterr()
    assert cli.main(["infer", "--ckpt", ckpt, "--events", str(tmp_path / "empty.bin"), "--out", str(tmp_path / "b")]) == 0
    assert "notice" in capsys.readouterr().out


def test_data_errors_exit_2(trained, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert cli.main(["eval", "--ckpt", str(bad), "--data", str(trained / "data")]) == 2
    assert cli.main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(trained / "data")]) == 2
    assert cli.main(["eval", "--ckpt", str(trained / "run" / "best.ckpt"), "--data", str(tmp_path)]) == 2


def test_numerical_failure_exits_3(monkeypatch, tmp_path):
    import ereformer.train as tr

    def boom(*a, **k):
        raise tr.NumericalError("non-finite loss")

    monkeypatch.setattr(tr, "train", boom)
    assert cli.main(["train", "--out", str(tmp_path)]) == 3


def test_ablate_needs_three_seeds(capsys):
    assert cli.main(["ablate", "--seeds", "0,1"]) == 1
    assert cli.main(["ablate", "--seeds", "a,b,c"]) == 1


def test_gradcheck_subset():
    assert cli.main(["gradcheck", "--module", "loss"]) == 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ereformer.cli", "gradcheck", "--module", "loss"],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0
    assert "PASS" in proc.stdout and "FAIL" not in proc.stdout
