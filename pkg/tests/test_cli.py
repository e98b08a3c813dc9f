import csv
import hashlib
import json

import numpy as np
import pytest

from spatialvl.cli import main
from spatialvl.training.loop import read_loss_csv

TINY = """
[model]
hidden = 16
heads = 2
ffn = 32
[data]
num_examples = 40
[train]
steps = 13
[finetune]
steps = 3
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.ini").write_text(TINY)
    assert main(["gen-data", "--config", str(d / "run.ini"), "--out", str(d / "data.jsonl")]) == 0
    return d


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_data_summary_and_determinism(tmp_path, workdir, capsys):
    out = tmp_path / "again.jsonl"
    assert main(["gen-data", "--config", str(workdir / "run.ini"), "--out", str(out)]) == 0
    assert "examples: 40 " in capsys.readouterr().out
    assert sha(out) == sha(workdir / "data.jsonl")
    manifest = json.loads((tmp_path / "again.jsonl.manifest.json").read_text())
    assert manifest["command"] == "gen-data" and len(manifest["config_hash"]) == 40


def test_gen_data_zero_examples(tmp_path, capsys):
    assert main(["gen-data", "--num-examples", "0", "--out", str(tmp_path / "d.jsonl")]) == 1
    assert "num_examples" in capsys.readouterr().err


def test_seed_changes_data(tmp_path, workdir):
    out = tmp_path / "s.jsonl"
    main(["gen-data", "--config", str(workdir / "run.ini"), "--seed", "5", "--out", str(out)])
    assert sha(out) != sha(workdir / "data.jsonl")


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["pretrain", "--steps", "x"]) == 1


def test_unknown_arm_lists_valid(workdir, tmp_path, capsys):
    code = main(["pretrain", "--data", str(workdir / "data.jsonl"), "--tasks", "MLM+ITM", "--out", str(tmp_path)])
    assert code == 1
    assert "MLM+MRC+SRC+OPR" in capsys.readouterr().err


def test_missing_data_is_io_error(tmp_path):
    assert main(["pretrain", "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == 3


def test_bad_config_is_validation_error(tmp_path):
    (tmp_path / "bad.ini").write_text("[model]\nwidth = 3\n")
    assert main(["gen-data", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "d")]) == 1


@pytest.fixture(scope="module")
def pretrained(workdir):
    out = workdir / "pre"
    code = main(["pretrain", "--config", str(workdir / "run.ini"), "--data", str(workdir / "data.jsonl"),
                 "--tasks", "MLM+MRC", "--steps", "22", "--out", str(out)])
    assert code == 0
    return out


def test_pretrain_outputs(pretrained):
    log = read_loss_csv(pretrained / "loss.csv")
    assert len(log) == 22 and {r.task for r in log} == {"MLM", "MRC"}
    assert sum(r.task == "MLM" for r in log) == 20
    manifest = json.loads((pretrained / "manifest.json").read_text())
    assert manifest["outputs"]["checkpoint"].endswith("checkpoint")
    assert (pretrained / "checkpoint" / "params.bin").exists()


def test_pretrain_rerun_bit_identical(pretrained, workdir, tmp_path):
    out = tmp_path / "pre2"
    main(["pretrain", "--config", str(workdir / "run.ini"), "--data", str(workdir / "data.jsonl"),
          "--tasks", "MLM+MRC", "--steps", "22", "--out", str(out)])
    assert sha(out / "loss.csv") == sha(pretrained / "loss.csv")
    assert sha(out / "checkpoint" / "params.bin") == sha(pretrained / "checkpoint" / "params.bin")


def test_eval_twice_identical(pretrained, workdir, capsys):
    args = ["eval", "--data", str(workdir / "data.jsonl"), "--checkpoint", str(pretrained / "checkpoint")]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first
    assert "accuracy:" in first and "/8)" in first


def test_finetune_reports_accuracy(pretrained, workdir, tmp_path, capsys):
    out = tmp_path / "ft"
    code = main(["finetune", "--config", str(workdir / "run.ini"), "--data", str(workdir / "data.jsonl"),
                 "--checkpoint", str(pretrained / "checkpoint"), "--out", str(out)])
    assert code == 0
    report = json.loads((out / "eval.json").read_text())
    assert report["total"] == 8 and report["correct"] == round(report["accuracy"] * 8)
    assert len(read_loss_csv(out / "loss.csv")) == 3


def test_mismatched_checkpoint_names_parameter(pretrained, tmp_path, capsys):
    (tmp_path / "wide.ini").write_text("[data]\nnum_examples = 10\nfeature_dim = 8\n")
    main(["gen-data", "--config", str(tmp_path / "wide.ini"), "--out", str(tmp_path / "d.jsonl")])
    capsys.readouterr()
    code = main(["eval", "--data", str(tmp_path / "d.jsonl"), "--checkpoint", str(pretrained / "checkpoint")])
    assert code == 1
    assert "vis_feat.W" in capsys.readouterr().err


def test_analyze_single_and_paired(pretrained, workdir, tmp_path):
    single, paired = tmp_path / "a1", tmp_path / "a2"
    data = str(workdir / "data.jsonl")
    ck = str(pretrained / "checkpoint")
    assert main(["analyze", "--data", data, "--checkpoint", ck, "--out", str(single), "--layers", "0,1"]) == 0
    rows = list(csv.DictReader(open(single / "correlation.csv")))
    assert len(rows) == 1 and rows[0]["task_set"] == "MLM+MRC" and rows[0]["n_samples"] == "40"
    att = json.loads((single / "attention.json").read_text())
    assert {a["layer"] for a in att} == {0, 1}
    assert main(["analyze", "--data", data, "--checkpoint", ck, "--compare-checkpoint", ck,
                 "--out", str(paired)]) == 0
    rows = list(csv.DictReader(open(paired / "correlation.csv")))
    assert len(rows) == 2 and float(rows[1]["delta_input_corr"]) == 0.0
    assert (single / "correlation.csv").read_text().splitlines()[1] == \
        (paired / "correlation.csv").read_text().splitlines()[1]


def test_analyze_missing_checkpoint(workdir, tmp_path):
    code = main(["analyze", "--data", str(workdir / "data.jsonl"), "--checkpoint", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o")])
    assert code == 3


def test_analyze_bad_layers(pretrained, workdir, tmp_path):
    code = main(["analyze", "--data", str(workdir / "data.jsonl"), "--checkpoint", str(pretrained / "checkpoint"),
                 "--out", str(tmp_path / "o"), "--layers", "a"])
    assert code == 1


@pytest.mark.slow
def test_grad_check_command(tmp_path, capsys):
    assert main(["grad-check", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "14/14 checks passed" in out and "SRC full model" in out
    rows = json.loads((tmp_path / "gradcheck.json").read_text())
    assert all(r["passed"] for r in rows)


@pytest.mark.slow
def test_grad_check_corrupted_fails(capsys):
    assert main(["grad-check", "--corrupt", "layer0.W1"]) == 2
    assert "FAIL" in capsys.readouterr().out
