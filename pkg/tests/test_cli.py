import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest
from markdown_it import MarkdownIt

from tsxplain.cli import ABLATION_COLUMNS, OPTIONS, main
from tsxplain.datasets import SYNTHETIC_CHANNELS, DatasetBundle
from tsxplain.evaluation import DEFAULT_FRACTIONS
from tsxplain.training import load_checkpoint

from test_datasets import write_energy_csv


def run(*argv):
    return main([str(a) for a in argv])


def json_outputs(out):
    """Every JSON file in ``out``, with the manifest's timestamp field dropped."""
    docs = {}
    for p in sorted(out.glob("*.json")):
        if p.name == "manifest.json":
            doc = json.loads(p.read_text())
            doc.pop("timestamps")
            docs[p.name] = json.dumps(doc, sort_keys=True).encode()
        else:
            docs[p.name] = p.read_bytes()
    return docs


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--n", 200, "--T", 40, "--seed", 7, "--out", root / "data") == 0
    assert run("train", "--data", root / "data" / "data.npz", "--epochs", 3, "--seed", 0,
               "--out", root / "train") == 0
    return root


# -- synth -------------------------------------------------------------------------------------------------


def test_synth_rerun_is_identical(tmp_path):
    for _ in range(2):
        assert run("synth", "--n", 100, "--seed", 7, "--out", tmp_path) == 0
        snap = json_outputs(tmp_path)
        if _ == 0:
            first = snap
    assert snap == first
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert set(man["outputs"]) == {"config.resolved.json", "data.npz", "dataset.json"}


def test_synth_channel_names(pipeline):
    ds = json.loads((pipeline / "data" / "dataset.json").read_text())
    assert ds["channel_names"] == list(SYNTHETIC_CHANNELS)
    assert ds["channel_names"] == ["sine_low", "step", "noise", "sine_high", "quadratic"]
    assert ds["n_samples"] == 200 and ds["T"] == 40


def test_synth_zero_samples_is_a_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("synth", "--n", 0, "--out", tmp_path)
    assert exc.value.code == 2
    assert "--n" in capsys.readouterr().err


def test_resolved_config_is_written(pipeline):
    cfg = json.loads((pipeline / "data" / "config.resolved.json").read_text())
    assert cfg["command"] == "synth" and cfg["n"] == 200 and cfg["seed"] == 7


# -- train ---------------------------------------------------------------------------------------------------


def test_train_outputs(pipeline):
    out = pipeline / "train"
    for name in ("checkpoint_best.npz", "checkpoint_last.npz", "history.json", "metrics.json", "manifest.json"):
        assert (out / name).exists()
    history = json.loads((out / "history.json").read_text())
    assert [h["epoch"] for h in history] == [1, 2, 3]
    ckpt = load_checkpoint(out / "checkpoint_best.npz")
    groups = {k.split(":", 1)[1].split(".")[0] for k in ckpt.params}
    assert {"resnet", "transformer"} <= groups


def test_train_rejects_unknown_model(pipeline, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("train", "--data", pipeline / "data" / "data.npz", "--model", "lstm", "--out", tmp_path)
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "resnet" in err and "transformer" in err and "hybrid" in err


def test_train_on_energy_csv(tmp_path):
    csv_path = write_energy_csv(tmp_path / "energy.csv", 400)
    assert run("train", "--data", csv_path, "--window", 20, "--stride", 5, "--epochs", 2, "--out",
               tmp_path / "run") == 0
    metrics = json.loads((tmp_path / "run" / "metrics.json").read_text())
    assert "rmse" in metrics["test"]


def test_missing_input_exits_3(tmp_path, capsys):
    missing = tmp_path / "nowhere.npz"
    assert run("train", "--data", missing, "--out", tmp_path / "o") == 3
    assert str(missing) in capsys.readouterr().err


# -- explain --------------------------------------------------------------------------------------------------


def test_explain_writes_three_heatmaps_and_report(pipeline, tmp_path):
    out = tmp_path / "ex"
    assert run("explain", "--checkpoint", pipeline / "train" / "checkpoint_best.npz",
               "--data", pipeline / "data" / "data.npz", "--out", out) == 0
    assert sorted(p.name for p in out.glob("heatmap_*.json")) == [
        "heatmap_fused.json", "heatmap_resnet.json", "heatmap_transformer.json"]
    shapes = {json.loads((out / f"heatmap_{n}.json").read_text())["shape"][0] for n in ("resnet", "fused")}
    assert shapes == {40}
    tokens = MarkdownIt("commonmark").enable("table").parse((out / "report.md").read_text())
    assert sum(t.type == "heading_open" for t in tokens) == 6
    assert json.loads((out / "report.json").read_text())["mode"] == "template"


def test_weighted_alpha_one_reproduces_resnet_map(pipeline, tmp_path):
    assert run("explain", "--checkpoint", pipeline / "train" / "checkpoint_best.npz", "--data",
               pipeline / "data" / "data.npz", "--fusion", "weighted", "--alpha", 1, "--out", tmp_path) == 0
    fused = json.loads((tmp_path / "heatmap_fused.json").read_text())
    resnet = json.loads((tmp_path / "heatmap_resnet.json").read_text())
    np.testing.assert_array_equal(fused["values"], resnet["values"])


def test_explain_learned_fusion_runs(pipeline, tmp_path):
    assert run("explain", "--checkpoint", pipeline / "train" / "checkpoint_best.npz", "--data",
               pipeline / "data" / "data.npz", "--fusion", "learned", "--sample-id", 3, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["summary"]["sample_id"] == 3


def test_explain_rejects_bad_sample_id(pipeline, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("explain", "--checkpoint", pipeline / "train" / "checkpoint_best.npz", "--data",
            pipeline / "data" / "data.npz", "--sample-id", 10_000, "--out", tmp_path)
    assert exc.value.code == 2


# -- eval ------------------------------------------------------------------------------------------------------


def test_eval_outputs_and_wilcoxon(pipeline, tmp_path):
    ckpt = pipeline / "train" / "checkpoint_best.npz"
    last = pipeline / "train" / "checkpoint_last.npz"
    assert run("eval", "--checkpoint", ckpt, "--checkpoint-b", last, "--data", pipeline / "data" / "data.npz",
               "--max-samples", 20, "--out", tmp_path) == 0
    rows = list(csv.reader(io.StringIO((tmp_path / "faithfulness.csv").read_text())))
    assert rows[0] == ["fraction", "metric", "random_metric"]
    assert [float(r[0]) for r in rows[1:]] == list(DEFAULT_FRACTIONS)
    report = json.loads((tmp_path / "metrics.json").read_text())
    assert 0.0 <= report["wilcoxon"]["p_value"] <= 1.0
    drop = report["deletion"]["drop_at_0.2"]
    assert set(drop) == {"absolute", "relative", "random_absolute", "random_relative"}
    assert "accuracy" in report["task"] and "score" in report["sensitivity"]


def test_eval_with_precomputed_heatmaps(pipeline, tmp_path):
    data = DatasetBundle.load(pipeline / "data" / "data.npz")
    te = data.subset("test")
    np.savez(tmp_path / "h.npz", values=te.masks[:10].astype(float))
    assert run("eval", "--checkpoint", pipeline / "train" / "checkpoint_best.npz", "--data",
               pipeline / "data" / "data.npz", "--heatmaps", tmp_path / "h.npz", "--max-samples", 10,
               "--out", tmp_path / "o") == 0


def test_eval_rerun_gives_identical_json(pipeline, tmp_path):
    args = ("eval", "--checkpoint", pipeline / "train" / "checkpoint_best.npz", "--data",
            pipeline / "data" / "data.npz", "--max-samples", 15, "--seed", 3, "--out", tmp_path)
    assert run(*args) == 0
    first = json_outputs(tmp_path)
    assert run(*args) == 0
    assert json_outputs(tmp_path) == first


# -- ablate ------------------------------------------------------------------------------------------------------


def test_ablate_without_checkpoint(pipeline, tmp_path):
    assert run("ablate", "--data", pipeline / "data" / "data.npz", "--out", tmp_path) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "ablation.csv").read_text())))
    assert tuple(rows[0]) == ABLATION_COLUMNS
    assert [r["strategy"] for r in rows] == ["multiplicative", "weighted", "learned", "concat_project"]
    assert all(r["consensus_error"] for r in rows) and all(r["deletion_auc"] == "" for r in rows)


def test_ablate_with_checkpoint(pipeline, tmp_path):
    assert run("ablate", "--data", pipeline / "data" / "data.npz", "--checkpoint",
               pipeline / "train" / "checkpoint_best.npz", "--max-samples", 10, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "ablation.json").read_text())
    assert doc["source"] == "model" and all(r["deletion_auc"] is not None for r in doc["rows"])


# -- configuration -----------------------------------------------------------------------------------------------


def test_precedence_flag_over_env_over_file(tmp_path, monkeypatch):
    conf = tmp_path / "run.conf"
    conf.write_text("# synth options\nn = 30\nT = 25\nseed = 1\n")
    monkeypatch.setenv("TSXPLAIN_T", "30")
    assert run("synth", "--config", conf, "--seed", 2, "--out", tmp_path / "o") == 0
    cfg = json.loads((tmp_path / "o" / "config.resolved.json").read_text())
    assert (cfg["n"], cfg["T"], cfg["seed"]) == (30, 30, 2)


def test_bad_config_entries_are_usage_errors(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("colour = blue\n")
    with pytest.raises(SystemExit) as exc:
        run("synth", "--config", conf, "--out", tmp_path / "o")
    assert exc.value.code == 2


@pytest.mark.parametrize("command", sorted(OPTIONS))
def test_help_lists_every_flag(command, capsys):
    with pytest.raises(SystemExit) as exc:
        run(command, "--help")
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for key in OPTIONS[command]:
        assert f"--{key.replace('_', '-')}" in text
    assert "--seed" in text and "--out" in text and "--config" in text


def test_ablate_help_documents_csv_columns(capsys):
    with pytest.raises(SystemExit):
        run("ablate", "--help")
    assert ", ".join(ABLATION_COLUMNS) in " ".join(capsys.readouterr().out.split())


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "tsxplain.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("tsxplain ")
