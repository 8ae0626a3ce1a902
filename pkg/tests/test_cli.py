import hashlib
import json
import os
import subprocess
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from voxda import cli
from voxda.trainer import TrainConfig

SMALL_GEN = ["--classes", "3", "--instances", "3", "--views", "2", "--voxel-size", "8", "--image-size", "16",
             "--target-profile", "wild"]
SMALL_TRAIN = ["--epochs", "2", "--batch-size", "8", "--latent-dim", "16"]
SRC = str(Path(__file__).resolve().parents[1] / "src")


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "data"
    assert run("gen-data", "--out", path, "--seed", 3, *SMALL_GEN) == 0
    return path


@pytest.fixture(scope="module")
def run_dir(data_dir):
    out = data_dir.parent / "run"
    assert run("train", "--data", data_dir, "--out", out, "--method", "dann+class", *SMALL_TRAIN) == 0
    return out


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(path).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def test_gen_data_default_record_count(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "d") == 0
    assert "960 records" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert sorted({r["azimuth_deg"] for r in manifest["records"]}) == list(range(0, 360, 45))


def test_gen_data_is_reproducible(tmp_path, data_dir):
    assert run("gen-data", "--out", tmp_path / "again", "--seed", 3, *SMALL_GEN) == 0
    assert _digest(tmp_path / "again") == _digest(data_dir)


def test_gen_data_refuses_non_empty_dir(tmp_path, capsys):
    (tmp_path / "keep.txt").write_text("x")
    assert run("gen-data", "--out", tmp_path, *SMALL_GEN) == 2
    assert "--force" in capsys.readouterr().err
    assert run("gen-data", "--out", tmp_path, "--force", *SMALL_GEN) == 0
    assert (tmp_path / "keep.txt").exists() and (tmp_path / "manifest.json").exists()


def test_gen_data_bad_values(tmp_path):
    assert run("gen-data", "--out", tmp_path / "a", "--views", "3") == 2
    assert run("gen-data", "--out", tmp_path / "b", "--classes", "9") == 2


def test_threads_env_does_not_change_output(tmp_path, data_dir):
    env = dict(os.environ, VXDA_THREADS="3", PYTHONPATH=SRC)
    subprocess.run([sys.executable, "-m", "voxda.cli", "gen-data", "--out", str(tmp_path / "t"), "--seed", "3",
                    *SMALL_GEN], check=True, env=env, capture_output=True)
    assert _digest(tmp_path / "t") == _digest(data_dir)


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def test_config_file_paths_and_overrides(tmp_path, data_dir):
    cfg_dir = tmp_path / "cfg"
    cfg_dir.mkdir()
    (cfg_dir / "gen.json").write_text(json.dumps({"command": "gen-data", "out": "ds", "seed": 3, "classes": 3,
                                                  "instances": 3, "views": 2, "voxel_size": 8,
                                                  "image_size": 16, "target_profile": "lab"}))
    # the flag wins over the file; the relative path resolves beside the file
    assert run("gen-data", "--config", cfg_dir / "gen.json", "--target-profile", "wild") == 0
    assert _digest(cfg_dir / "ds") == _digest(data_dir)


def test_config_unknown_key_rejected(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"out": "x", "colour": "red"}))
    assert run("gen-data", "--config", tmp_path / "c.json") == 2
    assert "colour" in capsys.readouterr().err


def test_config_wrong_command_rejected(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"command": "train", "out": "x"}))
    assert run("gen-data", "--config", tmp_path / "c.json") == 2


def test_config_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    assert run("gen-data", "--config", tmp_path / "c.json") == 2
    assert run("gen-data", "--config", tmp_path / "missing.json") == 2


def test_missing_required_option():
    assert run("train", "--method", "none") == 2


def test_train_option_mapping(tmp_path):
    parser = cli.build_parser()
    args = parser.parse_args(["train", "--data", "d", "--out", "o", "--method", "none", "--w-coral", "0.5"])
    cfg = cli.train_config_from_options(cli.resolve_options("train", args))
    assert isinstance(cfg, TrainConfig)
    w = cfg.weights
    assert (w.w_domain, w.w_class, w.w_mmd, w.w_coral) == (0, 0, 0, 0.5)
    args = parser.parse_args(["train", "--data", "d", "--out", "o", "--no-refiner"])
    cfg = cli.train_config_from_options(cli.resolve_options("train", args))
    assert cfg.method == "dann+class" and cfg.weights.w_domain > 0 and cfg.weights.w_class > 0
    assert not cfg.network.refiner_enabled


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_outputs(run_dir, capsys):
    names = {p.name for p in run_dir.iterdir()}
    assert names == {"checkpoint.vxda", "train_log.csv", "iou_report.csv", "train_config.json"}
    assert json.loads((run_dir / "train_config.json").read_text())["method"] == "dann+class"


def test_train_bad_method(data_dir, tmp_path, capsys):
    assert run("train", "--data", data_dir, "--out", tmp_path / "o", "--method", "bogus") == 2
    assert "bogus" in capsys.readouterr().err


def test_train_missing_data_dir(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nowhere", "--out", tmp_path / "o") == 2
    assert "not found" in capsys.readouterr().err


def test_train_refuses_non_empty_out(data_dir, run_dir):
    assert run("train", "--data", data_dir, "--out", run_dir, *SMALL_TRAIN) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_abort_exit_code(data_dir, tmp_path, capsys):
    # an absurd learning rate overflows to non-finite gradients
    code = run("train", "--data", data_dir, "--out", tmp_path / "o", "--lr", "1e30", "--method", "none",
               *SMALL_TRAIN)
    assert code == 3
    assert "non-finite" in capsys.readouterr().err


def test_train_is_deterministic(data_dir, run_dir, tmp_path):
    assert run("train", "--data", data_dir, "--out", tmp_path / "o", "--method", "dann+class", *SMALL_TRAIN) == 0
    for name in ("checkpoint.vxda", "train_log.csv", "iou_report.csv"):
        assert (tmp_path / "o" / name).read_bytes() == (run_dir / name).read_bytes()


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_both_domains(run_dir, data_dir, tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert run("eval", "--checkpoint", run_dir / "checkpoint.vxda", "--data", data_dir, "--out", out) == 0
    printed = capsys.readouterr().out.splitlines()
    assert [line.split(",")[1] for line in printed] == ["dann+class@source", "dann+class@target"]
    lines = out.read_text().splitlines()
    assert lines[0] == "class,method,iou,count,threshold"
    assert sum(line.startswith("overall,") for line in lines) == 2
    # matches the report written at the end of training
    assert out.read_text() == (run_dir / "iou_report.csv").read_text()


def test_eval_repeat_is_byte_identical(run_dir, data_dir, tmp_path):
    for name in ("a.csv", "b.csv"):
        assert run("eval", "--checkpoint", run_dir / "checkpoint.vxda", "--data", data_dir, "--domain",
                   "target", "--threshold", "0.3", "--out", tmp_path / name, "--method", "x") == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    text = (tmp_path / "a.csv").read_text()
    assert "x@target" in text and "x@source" not in text and text.rstrip().endswith(",0.3")


def test_eval_incompatible_checkpoint(run_dir, tmp_path):
    other = tmp_path / "other"
    assert run("gen-data", "--out", other, "--classes", "2", "--instances", "2", "--views", "1",
               "--voxel-size", "8", "--image-size", "16") == 0
    assert run("eval", "--checkpoint", run_dir / "checkpoint.vxda", "--data", other,
               "--out", tmp_path / "r.csv") == 2


def test_eval_missing_and_corrupt_checkpoint(data_dir, run_dir, tmp_path):
    assert run("eval", "--checkpoint", tmp_path / "none.vxda", "--data", data_dir) == 2
    bad = tmp_path / "bad.vxda"
    bad.write_bytes((run_dir / "checkpoint.vxda").read_bytes()[:100])
    assert run("eval", "--checkpoint", bad, "--data", data_dir, "--out", tmp_path / "r.csv") == 4


# ---------------------------------------------------------------------------
# embed
# ---------------------------------------------------------------------------

def test_embed_csv_and_svg(run_dir, data_dir, tmp_path):
    csv_path, svg_path = tmp_path / "e.csv", tmp_path / "e.svg"
    assert run("embed", "--checkpoint", run_dir / "checkpoint.vxda", "--data", data_dir, "--out", csv_path,
               "--svg", svg_path, "--samples", 10) == 0
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "x,y,domain,class" and len(rows) == 11
    assert {r.split(",")[2] for r in rows[1:]} == {"source", "target"}
    root = ET.fromstring(svg_path.read_text())
    fills = {c.get("fill") for c in root.iter("{http://www.w3.org/2000/svg}circle")}
    assert len(fills) == 2


def test_embed_too_few_samples(run_dir, data_dir, tmp_path):
    assert run("embed", "--checkpoint", run_dir / "checkpoint.vxda", "--data", data_dir,
               "--out", tmp_path / "e.csv", "--samples", 2) == 2
    assert run("embed", "--checkpoint", run_dir / "checkpoint.vxda", "--data", data_dir,
               "--out", tmp_path / "e.csv", "--samples", 10_000) == 2


# ---------------------------------------------------------------------------
# help
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("command", [[], ["gen-data"], ["train"], ["eval"], ["embed"]])
def test_help_exits_zero_and_lists_flags(command):
    proc = subprocess.run([sys.executable, "-m", "voxda.cli", *command, "--help"], capture_output=True,
                          text=True, env=dict(os.environ, PYTHONPATH=SRC))
    assert proc.returncode == 0
    if command:
        for opt in cli.COMMANDS[command[0]][0]:
            assert opt.flag in proc.stdout
        assert "--config" in proc.stdout


def test_argparse_usage_error_is_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--epochs", "many"])
    assert exc.value.code == 2
