#!/usr/bin/env python3
"""
Command line tests: every subcommand on the tiny rig, run-directory
provenance and the ablation table
"""

import json
import os

import pytest

import app
from conftest import TINY_YAML
from utils.config import TrainConfig
from utils.datasets import load_manifest
from utils.features import read_feature_cache
from utils.synth import MANIFEST_NAME


def manifest_of(records):
    return os.path.join(os.path.dirname(records[0].acoustic_path), MANIFEST_NAME)


def read_run(out):
    with open(os.path.join(out, app.RUN_FILE), "r", encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(autouse=True)
def in_process(monkeypatch):
    monkeypatch.delenv("MAVGRAM_WORKERS", raising=False)


@pytest.fixture(scope="module")
def pretrained_run(tmp_path_factory, source_records):
    root = tmp_path_factory.mktemp("cli")
    tiny = root / "tiny.yaml"
    tiny.write_text(TINY_YAML)
    out = str(root / "pretrain")
    code = app.main(["pretrain", "--config", str(tiny), "--manifest", manifest_of(source_records), "--out", out])
    assert code == 0
    return root, str(tiny), out


# --- synth ---

def test_synth_writes_a_reproducible_dataset(tmp_path):
    runs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert app.main(["synth", "--profile", "target", "--per-class", "2", "--out", out]) == 0
        runs.append(read_run(out))
    records = load_manifest(os.path.join(tmp_path / "a", MANIFEST_NAME))
    assert len(records) == 10
    assert runs[0]["artifacts"] == runs[1]["artifacts"]
    assert runs[0]["seed"] == 0
    assert "config.yaml" in runs[0]["artifacts"]


def test_synth_uo_shaped(tmp_path):
    out = str(tmp_path / "uo")
    assert app.main(["synth", "--profile", "target", "--per-class", "1", "--uo-shaped", "--out", out]) == 0
    records = load_manifest(os.path.join(out, MANIFEST_NAME))
    assert [r.label for r in records].count(0) == 2
    assert len(records) == 6


def test_unknown_profile_lists_the_choices(tmp_path, capsys):
    with pytest.raises(SystemExit) as exit_info:
        app.main(["synth", "--profile", "bogus", "--out", str(tmp_path)])
    assert exit_info.value.code == 2
    err = capsys.readouterr().err
    assert "source" in err and "target" in err


def test_non_empty_run_directory_needs_force(tmp_path, capsys):
    (tmp_path / "keep.txt").write_text("x")
    assert app.main(["synth", "--profile", "target", "--per-class", "1", "--out", str(tmp_path)]) == 1
    assert "--force" in capsys.readouterr().out
    assert (tmp_path / "keep.txt").exists()
    assert app.main(["synth", "--profile", "target", "--per-class", "1", "--out", str(tmp_path), "--force"]) == 0
    assert not (tmp_path / "keep.txt").exists()


# --- training commands ---

def test_pretrain_run_directory(pretrained_run):
    _, _, out = pretrained_run
    run = read_run(out)
    for name in ("model.ckpt", "metrics.jsonl", "config.yaml", "config.source.yaml", "overrides.txt"):
        assert name in run["artifacts"], name
    assert run["argv"][0] == "pretrain"
    assert "timing.jsonl" not in run["artifacts"]
    assert os.path.exists(os.path.join(out, "timing.jsonl"))


def test_pretrain_twice_gives_identical_artifacts(pretrained_run, source_records):
    root, tiny, pre = pretrained_run
    again = str(root / "pretrain-again")
    assert app.main(["pretrain", "--config", tiny, "--manifest", manifest_of(source_records), "--out", again]) == 0
    assert read_run(again)["artifacts"] == read_run(pre)["artifacts"]


def test_finetune_then_eval(pretrained_run, target_records):
    root, _, pre = pretrained_run
    out = str(root / "finetune")
    ckpt = os.path.join(pre, "model.ckpt")
    assert app.main(["finetune", "--ckpt", ckpt, "--manifest", manifest_of(target_records),
                     "--percent", "25", "--out", out]) == 0
    with open(os.path.join(out, "report.txt"), "r", encoding="utf-8") as fh:
        report = fh.read()
    assert "macro_accuracy:" in report
    assert "percent: 25" in report
    assert len(load_manifest(os.path.join(out, "finetune.jsonl"))) == 5
    assert len(load_manifest(os.path.join(out, "test.jsonl"))) == 15
    with open(os.path.join(out, "curve.csv"), "r", encoding="utf-8") as fh:
        assert fh.readline().strip() == "variant,percent,seed,macro_accuracy"

    scored = str(root / "eval")
    assert app.main(["eval", "--ckpt", os.path.join(out, "finetuned.ckpt"),
                     "--manifest", os.path.join(out, "test.jsonl"), "--out", scored]) == 0
    with open(os.path.join(scored, "report.txt"), "r", encoding="utf-8") as fh:
        assert "samples: 15" in fh.read()


def test_finetune_budget_above_a_quarter_fails(pretrained_run, target_records, capsys):
    root, _, pre = pretrained_run
    code = app.main(["finetune", "--ckpt", os.path.join(pre, "model.ckpt"),
                     "--manifest", manifest_of(target_records), "--percent", "30", "--out", str(root / "p30")])
    assert code == 1
    assert "percent" in capsys.readouterr().out


def test_eval_with_other_variant_fails(pretrained_run, target_records, capsys):
    root, _, pre = pretrained_run
    code = app.main(["eval", "--ckpt", os.path.join(pre, "model.ckpt"), "--manifest", manifest_of(target_records),
                     "--variant", "ST", "--out", str(root / "mismatch")])
    assert code == 1
    assert "variant ST" in capsys.readouterr().out


def test_cached_mgrams_give_the_same_checkpoint(pretrained_run, source_records):
    root, tiny, pre = pretrained_run
    features = str(root / "features")
    source = manifest_of(source_records)
    assert app.main(["featurize", "--config", tiny, "--manifest", source, "--out", features]) == 0
    cache = read_feature_cache(os.path.join(features, "features.mavf"))
    assert len(cache) == len(source_records) * 3

    cached = str(root / "pretrain-cached")
    assert app.main(["pretrain", "--config", tiny, "--manifest", source, "--out", cached,
                     "--cache", os.path.join(features, "features.mavf")]) == 0
    with open(os.path.join(pre, "model.ckpt"), "rb") as a, open(os.path.join(cached, "model.ckpt"), "rb") as b:
        assert a.read() == b.read()


# --- ablation ---

def test_format_table():
    text, csv = app.format_table(["MAV", "ST"], [5.0, 10.0], {
        "MAV": {5.0: 0.5, 10.0: 0.25},
        "ST": {5.0: 0.1, 10.0: 1.0},
    })
    assert csv == "setting,5%,10%\nMAV,0.5000,0.2500\nST,0.1000,1.0000\n"
    lines = text.splitlines()
    assert lines[0].split() == ["setting", "5%", "10%"]
    assert lines[2].split() == ["ST", "0.1000", "1.0000"]


def test_ablation_rows():
    cfg = TrainConfig()
    grid = app.ablation_rows(cfg, ["MAV"], [3, 5, 7], [0.1, 0.05, 0.025])
    assert len(grid) == 9
    assert grid["n=5 s=0.05"]["speed"] == {"n": 5, "s": 0.05}
    variants = app.ablation_rows(cfg, ["MAV", "ST", "MV", "AV"], [3], [0.1])
    assert list(variants) == ["MAV", "ST", "MV", "AV"]
    assert variants["AV"]["variant"] == "AV"


def test_ablate_is_reproducible(pretrained_run, source_records, target_records):
    root, tiny, _ = pretrained_run
    tables = []
    for name in ("abl-1", "abl-2"):
        out = str(root / name)
        assert app.main([
            "ablate", "--config", tiny, "--manifest", manifest_of(source_records),
            "--target-manifest", manifest_of(target_records), "--variants", "MAV,ST",
            "--percents", "25", "--seeds", "0", "--out", out,
        ]) == 0
        with open(os.path.join(out, "ablation.csv"), "rb") as fh:
            tables.append(fh.read())
    assert tables[0] == tables[1]
    rows = tables[0].decode().splitlines()
    assert rows[0] == "setting,25%"
    assert [r.split(",")[0] for r in rows[1:]] == ["MAV", "ST"]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
