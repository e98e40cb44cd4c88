"""Command-line interface: every subcommand end to end at toy scale."""

import json
import os

import numpy as np
import pytest

from saccadenet.checkpoint import load_checkpoint
from saccadenet.cli import main
from saccadenet.data import read_saccade_file


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A toy end-to-end pipeline driven purely through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    config = {
        "model": "teacher_vit", "image_size": 16, "patch_size": 8, "dim": 16,
        "depth": 1, "heads": 2, "num_classes": 3, "k": 2,
        "selector_stages": [[4, 1], [8, 1]], "max_epochs": 1, "batch_size": 16,
        "shapes_train": 60, "shapes_test": 16, "seed": 0,
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config))
    return root, str(cfg_path), config


def test_train_teacher_writes_checkpoint_and_history(workdir, capsys):
    root, cfg_path, _ = workdir
    out = str(root / "teacher.ckpt")
    assert main(["train-teacher", "--config", cfg_path, "--out", out]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["checkpoint"] == out
    assert os.path.exists(out)
    assert os.path.exists(out + ".history.jsonl")
    params, config = load_checkpoint(out)
    assert config["model"] == "teacher_vit"
    assert "patch_embed.w" in params


def test_build_targets(workdir, capsys):
    root, cfg_path, _ = workdir
    targets_path = str(root / "targets.sact")
    main(["build-targets", "--checkpoint", str(root / "teacher.ckpt"),
          "--out", targets_path])
    records = read_saccade_file(targets_path)
    assert len(records) == 76  # train + val + test
    assert all(len(r.indices) == 2 for r in records)
    assert "wrote 76 records" in capsys.readouterr().out


def test_train_selector(workdir, capsys):
    root, cfg_path, _ = workdir
    out = str(root / "selector.ckpt")
    main(["train-selector", "--config", cfg_path,
          "--targets", str(root / "targets.sact"), "--out", out])
    payload = json.loads(capsys.readouterr().out)
    assert "test" in payload and "overlap_at_k" in payload["test"]


def test_train_student_with_selector(workdir, capsys):
    root, cfg_path, _ = workdir
    out = str(root / "student.ckpt")
    main(["train-student", "--config", cfg_path,
          "--selector", str(root / "selector.ckpt"), "--out", out])
    payload = json.loads(capsys.readouterr().out)
    assert "accuracy" in payload["test"]
    _, config = load_checkpoint(out)
    assert config["model"] == "sanvit"


def test_eval_checkpoint(workdir, capsys):
    root, cfg_path, _ = workdir
    main(["eval", "--checkpoint", str(root / "teacher.ckpt")])
    metrics = json.loads(capsys.readouterr().out)
    assert 0.0 <= metrics["accuracy"] <= 1.0


def test_rollout_emits_pgm_and_mask(workdir, capsys):
    root, cfg_path, _ = workdir
    heat_path = str(root / "heat.pgm")
    main(["rollout", "--checkpoint", str(root / "teacher.ckpt"),
          "--index", "3", "--out", heat_path])
    payload = json.loads(capsys.readouterr().out)
    assert payload["image_id"] == 3
    blob = open(heat_path, "rb").read()
    assert blob.startswith(b"P5\n2 2\n255\n")
    mask = open(payload["mask"], "rb").read()
    assert mask.startswith(b"P5\n2 2\n255\n")
    assert sorted(payload["topk_indices"]) == payload["topk_indices"]


def test_cost_report(workdir, capsys):
    root, cfg_path, _ = workdir
    out = str(root / "cost.json")
    main(["cost", "--config", cfg_path, "--out", out])
    report = json.loads(open(out).read())
    assert report["model"] == "teacher_vit"
    assert report["params_total"] == sum(report["params_by_component"].values())
    assert report["attention_comparisons"] == 16


def test_cost_defaults_without_config(capsys):
    main(["cost"])
    report = json.loads(capsys.readouterr().out)
    assert report["attention_comparisons"] == 64 * 64


def test_seed_override(workdir, tmp_path, capsys):
    root, cfg_path, _ = workdir
    a = str(tmp_path / "a.ckpt")
    b = str(tmp_path / "b.ckpt")
    main(["train-teacher", "--config", cfg_path, "--out", a, "--seed", "123"])
    main(["train-teacher", "--config", cfg_path, "--out", b, "--seed", "123"])
    capsys.readouterr()
    blob_a = open(a, "rb").read()
    blob_b = open(b, "rb").read()
    assert blob_a == blob_b


def test_compare_command(workdir, tmp_path, capsys):
    root, cfg_path, base = workdir
    teacher_cfg = dict(base)
    baseline_cfg = dict(base, model="simple_vit", seed=1)
    paths = []
    for i, cfg in enumerate((teacher_cfg, baseline_cfg)):
        p = tmp_path / f"cmp_{i}.json"
        p.write_text(json.dumps(cfg))
        paths.append(str(p))
    out = str(tmp_path / "report.json")
    main(["compare", "--config", paths[0], "--config", paths[1], "--out", out])
    stdout = capsys.readouterr().out
    assert "teacher_vit" in stdout and "simple_vit" in stdout
    report = json.loads(open(out).read())
    assert len(report["rows"]) == 2
    assert "flop_ratio_vs_baseline" in report["rows"][0]
