import csv
import filecmp
import json
import subprocess
import sys

import pytest

from essen.cli import main
from essen.data.manifest import read_manifest


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--seed", "0", "--count", "100"]) == 0
    return out


@pytest.fixture(scope="module")
def pretrained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--config", "tiny", "--data", str(data_dir), "--out", str(out),
                 "--steps", "6", "--seed", "0", "--checkpoint-every", "3"]) == 0
    return out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_data_counts(data_dir):
    for task in ("entail", "pairjudge", "refres"):
        recs = [r for s in ("train", "dev", "test") for r in read_manifest(data_dir / task / f"{s}.jsonl")]
        assert len(recs) == 100
        ids = [r.id for r in recs]
        assert len(set(ids)) == 100
        n_images = len(list((data_dir / task / "images").glob("*.ppm")))
        assert n_images == (200 if task == "pairjudge" else 100)
    assert len(read_manifest(data_dir / "pretrain" / "manifest.jsonl")) == 100


def test_gen_data_deterministic(data_dir, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--seed", "0", "--count", "100",
                 "--workers", "2"]) == 0
    cmp = filecmp.dircmp(data_dir, tmp_path)

    def same(c):
        _, mismatch, errors = filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)
        return not (mismatch or errors or c.left_only or c.right_only) and \
            all(same(s) for s in c.subdirs.values())

    assert same(cmp)


def test_pretrain_outputs(pretrained):
    log = rows(pretrained / "loss.csv")
    assert len(log) == 6 and list(log[0]) == ["step", "mlm_loss", "itm_loss", "total", "wall_ms"]
    assert (pretrained / "model.ckpt").exists()
    assert sorted(p.name for p in (pretrained / "checkpoints").iterdir()) == \
        ["step000003.ckpt", "step000006.ckpt"]


def test_pretrain_zero_steps(data_dir, tmp_path):
    assert main(["pretrain", "--data", str(data_dir), "--out", str(tmp_path), "--steps", "0",
                 "--seed", "0"]) == 0
    assert (tmp_path / "model.ckpt").exists() and rows(tmp_path / "loss.csv") == []


def test_pretrain_resume_matches(data_dir, pretrained, tmp_path):
    assert main(["pretrain", "--data", str(data_dir), "--out", str(tmp_path), "--steps", "3",
                 "--seed", "0", "--checkpoint", str(pretrained / "checkpoints" / "step000003.ckpt")]) == 0
    tail = [(r["step"], r["total"]) for r in rows(tmp_path / "loss.csv")]
    full = [(r["step"], r["total"]) for r in rows(pretrained / "loss.csv")][3:]
    assert tail == full


def test_finetune_and_eval(data_dir, pretrained, tmp_path, capsys):
    ft = tmp_path / "ft"
    assert main(["finetune", "--task", "refres", "--checkpoint", str(pretrained / "model.ckpt"),
                 "--data", str(data_dir), "--out", str(ft), "--steps", "4", "--seed", "0",
                 "--eval-interval", "2"]) == 0
    assert len(rows(ft / "metrics.csv")) == 3
    capsys.readouterr()
    outputs = []
    for _ in range(2):
        assert main(["eval", "--task", "refres", "--checkpoint", str(ft / "model.ckpt"),
                     "--data", str(data_dir), "--out", str(tmp_path / "ev")]) == 0
        outputs.append(capsys.readouterr().out)
    assert outputs[0] == outputs[1]
    assert "accuracy:" in outputs[0] and "chance: 0.2000" in outputs[0]
    summary = json.loads((tmp_path / "ev" / "summary.json").read_text())
    assert summary["task"] == "refres" and summary["chance"] == pytest.approx(0.2)


def test_eval_on_empty_split_is_an_error(data_dir, pretrained, tmp_path):
    empty = tmp_path / "data"
    empty.mkdir()
    (empty / "vocab.txt").write_text((data_dir / "vocab.txt").read_text())
    (empty / "entail").mkdir()
    for s in ("train", "dev", "test"):
        (empty / "entail" / f"{s}.jsonl").write_text("")
    code = main(["eval", "--task", "entail", "--checkpoint", str(pretrained / "model.ckpt"),
                 "--data", str(empty), "--out", str(tmp_path / "ev")])
    assert code == 1


def test_finetune_config_mismatch_exit_2(data_dir, pretrained, tmp_path, capsys):
    code = main(["finetune", "--task", "entail", "--config", "tiny-one-tower",
                 "--checkpoint", str(pretrained / "model.ckpt"), "--data", str(data_dir),
                 "--out", str(tmp_path), "--steps", "1", "--seed", "0"])
    assert code == 2
    assert "arch" in capsys.readouterr().err


def test_params_full_fusion(capsys, tmp_path):
    assert main(["params", "--config", "essen-full-fusion", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "6 layers x hidden 320" in out and "fusion" in out
    assert json.loads((tmp_path / "params.json").read_text())["total"] > 0


def test_sweep_params_monotone(tmp_path):
    assert main(["sweep", "--config", "tiny", "--axis", "fusion_layers", "--values", "4,6,8,10",
                 "--out", str(tmp_path), "--seed", "0"]) == 0
    table = rows(tmp_path / "sweep.csv")
    assert [r["fusion_layers"] for r in table] == ["4", "6", "8", "10"]
    params = [int(r["params"]) for r in table]
    assert params == sorted(set(params))


def test_sweep_with_training(data_dir, tmp_path):
    assert main(["sweep", "--config", "tiny", "--axis", "fusion_hidden", "--values", "16,32",
                 "--data", str(data_dir), "--out", str(tmp_path), "--seed", "0", "--steps", "2",
                 "--task", "entail"]) == 0
    table = rows(tmp_path / "sweep.csv")
    assert len(table) == 2 and "entail_dev" in table[0]


@pytest.mark.parametrize("preset", ["gradcheck-two-tower", "gradcheck-one-tower"])
def test_grad_check_passes(preset, capsys):
    assert main(["grad-check", "--config", preset, "--seed", "0"]) == 0
    assert "pass" in capsys.readouterr().out


def test_grad_check_refuses_large(capsys):
    assert main(["grad-check", "--config", "essen", "--seed", "0"]) == 2


def test_wac_command(data_dir, tmp_path):
    assert main(["wac", "--data", str(data_dir), "--out", str(tmp_path)]) == 0
    assert "results" in json.loads((tmp_path / "wac.json").read_text())


@pytest.mark.parametrize("argv", [
    [],
    ["pretrain", "--data", "x", "--out", "y", "--seed", "0"],  # missing --steps
    ["pretrain", "--data", "x", "--out", "y", "--steps", "-1", "--seed", "0"],
    ["finetune", "--task", "caption", "--data", "x", "--out", "y", "--steps", "1", "--seed", "0"],
    ["sweep", "--axis", "depth", "--values", "1", "--out", "y", "--seed", "0"],
    ["sweep", "--axis", "fusion_layers", "--values", "a,b", "--out", "y", "--seed", "0"],
    ["params", "--config", "no-such-preset"],
    ["gen-data", "--out", "y", "--seed", "0", "--workers", "0"],
])
def test_invalid_invocations_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_bad_log_level_exit_2(monkeypatch):
    monkeypatch.setenv("ESSEN_LOG", "verbose")
    assert main(["params"]) == 2


def test_missing_data_is_runtime_failure(tmp_path):
    assert main(["pretrain", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"),
                 "--steps", "1", "--seed", "0"]) == 1


def test_console_script_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "essen.cli", "params", "--config", "tiny"],
                          capture_output=True, text=True, env={"ESSEN_LOG": "info", "PATH": ""})
    assert proc.returncode == 0 and "total" in proc.stdout
