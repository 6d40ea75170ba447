import filecmp
import json
import subprocess
import sys

import pytest

from textuda.cli import build_parser, main


def _tree(root):
    return sorted(p.relative_to(root) for p in root.rglob("*"))


def test_synth_data_reproducible(tmp_path):
    args = ["synth-data", "--seed", "7", "--subjects", "3", "--slices", "2", "--size", "32"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert _tree(a) == _tree(b)
    for rel in _tree(a):
        if (a / rel).is_file():
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_synth_data_compressed_reproducible(tmp_path):
    args = ["synth-data", "--seed", "7", "--subjects", "2", "--slices", "2", "--size", "32", "--compress"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    cmp = filecmp.dircmp(tmp_path / "a" / "source" / "slices", tmp_path / "b" / "source" / "slices")
    assert not cmp.diff_files and not cmp.left_only


@pytest.fixture
def config(tmp_path):
    main(["synth-data", "--seed", "1", "--subjects", "5", "--slices", "2", "--size", "32", "--out",
          str(tmp_path / "d")])
    cfg = {"source_manifest": str(tmp_path / "d" / "source"), "target_manifest": str(tmp_path / "d" / "target"),
           "batch_size": 2, "disc_width": 8, "eval_every": 0, "out_dir": str(tmp_path / "run"), "iterations": 50}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    return path


def test_train_eval_gradcam(tmp_path, config, capsys):
    assert main(["train", "--config", str(config), "--iters", "10"]) == 0
    run = tmp_path / "run"
    assert (run / "last.pt").exists() and len((run / "log.jsonl").read_text().splitlines()) == 10
    assert main(["eval", "--config", str(config), "--csv", str(tmp_path / "r.csv")]) == 0
    report = json.loads((run / "report_target.json").read_text())
    assert report["classes"] == [1, 2, 3, 4] and (tmp_path / "r.csv").exists()
    assert main(["gradcam", "--config", str(config), "--num-slices", "1"]) == 0
    assert list((run / "gradcam").glob("*.png"))


def test_error_exit_codes(tmp_path, config, capsys):
    assert main(["train"]) == 2
    assert main(["eval", "--bogus"]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    (tmp_path / "bad.json").write_text(json.dumps({"lambda_adv": -1}))
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 1
    assert main(["eval", "--config", str(config)]) == 1  # no checkpoint yet
    assert main(["gradcam", "--config", str(config), "--layer", "nope"]) == 1
    assert "error:" in capsys.readouterr().err


def test_help_documents_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    assert set(sub.choices) == {"synth-data", "train", "eval", "gradcam", "ablate", "seed-sweep"}
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            if action.help and action.default not in (None, False) and action.dest != "help":
                assert "default" in text


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "textuda.cli", "ablate", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--budget" in out.stdout and "tiny" in out.stdout


def test_ablate_smoke(tmp_path, capsys):
    assert main(["ablate", "--budget", "smoke", "--seeds", "0", "--out", str(tmp_path / "abl")]) == 0
    out = capsys.readouterr().out
    rows = [l for l in out.splitlines() if l.startswith(("seg+adv", "all"))]
    assert len(rows) == 4 and "target Dice" in out
    assert json.loads((tmp_path / "abl" / "ablation.json").read_text())["summary"].keys() == {
        "seg+adv", "seg+adv+proto", "seg+adv+vlcol", "all"}


def test_seed_sweep_smoke(tmp_path, config, capsys):
    assert main(["seed-sweep", "--config", str(config), "--seeds", "0", "1", "--iters", "3",
                 "--out", str(tmp_path / "sw")]) == 0
    assert "±" in capsys.readouterr().out
