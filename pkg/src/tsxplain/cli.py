"""``tsxplain`` command line: synth, train, explain, eval and ablate.

Option precedence is defaults < ``--config`` file < ``TSXPLAIN_<KEY>``
environment variables < command-line flags. Every command writes
``config.resolved.json`` and ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as tt
from .datasets import (DataError, DatasetBundle, SyntheticSpec, generate_synthetic, load_energy_csv, manifest,
                       normalize_channels, split)
from .evaluation import (DEFAULT_FRACTIONS, classification_metrics, consensus_experiment,
                         deletion_test, faithfulness_csv, flesch_kincaid, bleu4, regression_metrics, rouge_l,
                         sensitivity_test, tokenize, wilcoxon_paired)
from .explain import (PatternDescriptor, default_template, flag_low_variance_channels, generate_report,
                      identify_regions, render_template)
from .fusion import SalientRegion, FusionConfig, align, fit_projection, fuse_heatmaps, minmax_normalize
from .models import ConfigError, build_model
from .saliency import Heatmap, branch_heatmaps, explain_batch
from .training import (CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint, predict, train)

logger = logging.getLogger("tsxplain")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ENV_PREFIX = "TSXPLAIN_"
ABLATION_COLUMNS = ("strategy", "consensus_error", "deletion_auc", "w_resnet", "w_transformer", "bias")


class UsageError(Exception):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# name -> (type, default, help[, choices]); flags are --name with '_' -> '-'
COMMON = {
    "seed": (int, 0, "root seed"),
    "out": (str, None, "output directory (required)"),
}
OPTIONS = {
    "synth": {
        "n": (int, 2000, "number of samples"),
        "T": (int, 100, "series length"),
        "anomaly_rate": (float, 0.5, "fraction of samples with an injected pattern"),
        "normalize": (str, "zscore", "channel scaling using train statistics", ("zscore", "unit", "none")),
    },
    "train": {
        "data": (str, None, "dataset .npz (from synth) or UCI energy .csv"),
        "model": (str, "hybrid", "architecture", ("resnet", "transformer", "hybrid")),
        "lr": (float, 1e-3, "AdamW learning rate"),
        "batch_size": (int, 32, "minibatch size"),
        "weight_decay": (float, 1e-4, "decoupled weight decay"),
        "epochs": (int, 20, "maximum epochs"),
        "patience": (int, 10, "early-stopping patience"),
        "augment": (_bool, False, "jitter and noise augmentation"),
        "attention": (str, "dense", "attention mode", ("dense", "windowed")),
        "window": (int, 100, "rows per window for CSV input"),
        "stride": (int, 1, "window stride for CSV input"),
    },
    "explain": {
        "checkpoint": (str, None, "checkpoint .npz"),
        "data": (str, None, "dataset .npz or CSV"),
        "sample_id": (int, -1, "sample index; -1 picks the first test sample"),
        "fusion": (str, "multiplicative", "fusion strategy", ("multiplicative", "weighted", "learned")),
        "alpha": (float, None, "fusion alpha (1.0 multiplicative, 0.5 weighted by default)"),
        "smoothing": (int, 1, "odd moving-average window"),
        "quantile": (float, 0.2, "salient-region quantile q"),
        "dtw": (_bool, False, "DTW-align the ResNet map"),
        "domain": (str, "generic", "template domain", ("generic", "industrial", "clinical")),
        "variance_threshold": (float, 0.01, "variance share below which channels are flagged for pruning"),
        "window": (int, 100, "rows per window for CSV input"),
        "stride": (int, 1, "window stride for CSV input"),
    },
    "eval": {
        "checkpoint": (str, None, "checkpoint .npz; give a second one via --checkpoint-b for a Wilcoxon test"),
        "checkpoint_b": (str, None, "optional second checkpoint for a paired comparison"),
        "data": (str, None, "dataset .npz or CSV"),
        "heatmaps": (str, None, "optional .npz with array 'values' (N x T x C) for the test split"),
        "max_samples": (int, 200, "test samples used by the perturbation tests"),
        "fusion": (str, "multiplicative", "fusion strategy for computed heatmaps", ("multiplicative", "weighted")),
        "sigma": (float, 0.5, "noise level of the sensitivity test"),
        "window": (int, 100, "rows per window for CSV input"),
        "stride": (int, 1, "window stride for CSV input"),
    },
    "ablate": {
        "data": (str, None, "dataset .npz with ground-truth masks"),
        "checkpoint": (str, None, "optional checkpoint; without it branch maps are H* plus disjoint noise"),
        "max_samples": (int, 100, "test samples used"),
    },
}
REQUIRED = {
    "synth": ("out",),
    "train": ("data", "out"),
    "explain": ("checkpoint", "data", "out"),
    "eval": ("checkpoint", "data", "out"),
    "ablate": ("data", "out"),
}
HELP = {
    "synth": "generate the synthetic five-channel dataset with planted patterns",
    "train": "train a resnet, transformer or hybrid model",
    "explain": "write resnet, transformer and fused heatmaps plus a Markdown report for one sample",
    "eval": "task metrics, deletion and sensitivity tests, text metrics",
    "ablate": "compare fusion strategies; CSV columns: " + ", ".join(ABLATION_COLUMNS),
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys use underscores."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve_config(command: str, args: argparse.Namespace, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    spec = {**COMMON, **OPTIONS[command]}
    cfg = {k: v[1] for k, v in spec.items()}
    layers = []
    if getattr(args, "config", None):
        layers.append(("config file", read_config_file(args.config)))
    by_env_name = {k.upper(): k for k in spec}
    layers.append(("environment", {by_env_name[k[len(ENV_PREFIX):].upper()]: v for k, v in environ.items()
                                   if k.startswith(ENV_PREFIX) and k[len(ENV_PREFIX):].upper() in by_env_name}))
    for origin, layer in layers:
        for k, v in layer.items():
            if k not in spec:
                raise UsageError(f"unknown option {k!r} in {origin}")
            cfg[k] = _convert(k, v, spec[k])
    for k in spec:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    for k in REQUIRED[command]:
        if cfg.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")
    return cfg


def _convert(key, value, spec):
    typ = spec[0]
    try:
        v = typ(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc
    if len(spec) > 3 and v not in spec[3]:
        raise UsageError(f"{key} must be one of {spec[3]}, got {v!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsxplain", description="Explainable hybrid time-series models.")
    parser.add_argument("--version", action="version", version=f"tsxplain {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="key = value config file")
        for key, spec in {**COMMON, **opts}.items():
            typ, default, text = spec[:3]
            kw = {"type": typ, "default": None, "dest": key,
                  "help": f"{text} (default: {default})" if default is not None else text}
            if len(spec) > 3:
                kw["choices"] = spec[3]
            flag = f"--{key.replace('_', '-')}"
            p.add_argument(flag, **kw)
    return parser


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def file_digest(path: Path) -> str:
    """sha256 of a file; npz archives hash their arrays so zip timestamps do not matter."""
    h = hashlib.sha256()
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            for k in sorted(z.files):
                h.update(k.encode())
                h.update(np.ascontiguousarray(z[k]).tobytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"cannot write to output directory {out}: {exc}") from exc
    return out


def finish(out: Path, command: str, cfg: dict, outputs: list[str], summary: dict | None = None) -> None:
    write_text(out / "config.resolved.json", dump_json({"command": command, **cfg}))
    files = sorted(set(outputs) | {"config.resolved.json"})
    man = {
        "command": command,
        "version": __version__,
        "outputs": {f: file_digest(out / f) for f in files},
        "summary": summary or {},
        # wall-clock information is confined to this field
        "timestamps": {"finished": datetime.now(timezone.utc).isoformat()},
    }
    write_text(out / "manifest.json", dump_json(man))


def load_bundle(path, cfg: dict) -> DatasetBundle:
    """Load a dataset, then split and normalise it if that has not happened yet."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    if path.suffix.lower() == ".csv":
        bundle = load_energy_csv(path, T=cfg.get("window", 100), stride=cfg.get("stride", 1))
    else:
        bundle = DatasetBundle.load(path)
    if bundle.split is None:
        bundle = split(bundle, seed=cfg["seed"])
    if bundle.norm_stats is None:
        bundle = normalize_channels(bundle)
    if bundle.task == "regression" and "target" not in bundle.norm_stats:
        ytr = bundle.y[bundle.indices("train")]
        mu, sd = float(ytr.mean()), float(ytr.std()) or 1.0
        bundle.y = (bundle.y - mu) / sd
        bundle.norm_stats = {**bundle.norm_stats, "target": {"mean": mu, "std": sd}}
    return bundle


def test_split(bundle: DatasetBundle, limit: int | None = None) -> DatasetBundle:
    idx = bundle.indices("test")
    if limit is not None and limit > 0:
        idx = idx[:limit]
    return bundle.take(idx)


def fused_maps(model, X, cfg: FusionConfig, names=None, batch: int = 64):
    """Branch heatmaps (T resolution, normalised) and fused maps for a batch of samples."""
    hr_all, ht_all, fused = [], [], []
    for s in range(0, len(X), batch):
        maps = explain_batch(model, X[s : s + batch])
        for i in range(len(maps.channel_saliency)):
            hr, ht = branch_heatmaps(maps, i, names)
            hr_all.append(minmax_normalize(align(hr, ht, cfg.use_dtw)))
            ht_all.append(minmax_normalize(ht))
            fused.append(fuse_heatmaps(hr, ht, cfg))
    return hr_all, ht_all, fused


def per_sample_loss(outputs: np.ndarray, y: np.ndarray, task: str) -> np.ndarray:
    if task == "classification":
        z = outputs - outputs.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[np.arange(len(y)), y.astype(int)]
    return np.abs(outputs - y)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> dict:
    if cfg["n"] < 1:
        raise UsageError("--n must be >= 1")
    if cfg["T"] < 20:
        raise UsageError("--T must be >= 20")
    out = prepare_out(cfg["out"])
    bundle = generate_synthetic(SyntheticSpec(n_samples=cfg["n"], T=cfg["T"], seed=cfg["seed"],
                                              anomaly_rate=cfg["anomaly_rate"]))
    if cfg["n"] >= 6:
        bundle = split(bundle, seed=cfg["seed"])
        if cfg["normalize"] != "none":
            bundle = normalize_channels(bundle, cfg["normalize"])
    bundle.save(out / "data.npz")
    write_text(out / "dataset.json", dump_json(manifest(bundle)))
    summary = {"n_samples": len(bundle), "positives": int(bundle.y.sum()), "digest": bundle.digest()}
    print(f"wrote {len(bundle)} samples ({summary['positives']} with patterns) to {out / 'data.npz'}")
    finish(out, "synth", cfg, ["data.npz", "dataset.json"], summary)
    return summary


def cmd_train(cfg: dict) -> dict:
    bundle = load_bundle(cfg["data"], cfg)
    out = prepare_out(cfg["out"])
    n_out = int(bundle.y.max()) + 1 if bundle.task == "classification" else 1
    model = build_model(cfg["model"], bundle.C, max(n_out, 2) if bundle.task == "classification" else 1,
                        bundle.task, seed=cfg["seed"],
                        transformer_kwargs={"attention_mode": cfg["attention"], "max_len": max(bundle.T, 512)})
    tcfg = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], weight_decay=cfg["weight_decay"],
                       max_epochs=cfg["epochs"], patience=cfg["patience"], seed=cfg["seed"], augment=cfg["augment"])
    best, history = train(model, bundle, tcfg, checkpoint_dir=out,
                          on_epoch=lambda r: print(f"epoch {r['epoch']}: train {r['train_loss']:.4f} "
                                                   f"val {r['val_loss']:.4f}"))
    te = bundle.subset("test")
    outputs = predict(model, te.X)
    if bundle.task == "classification":
        metrics = classification_metrics(outputs.argmax(axis=1), te.y)
    else:
        metrics = regression_metrics(outputs, te.y)
    metrics = {"test": metrics, "best_epoch": best.epoch, "best_val_loss": best.val_metric}
    write_text(out / "history.json", dump_json(history))
    write_text(out / "metrics.json", dump_json(metrics))
    print(f"test metrics: {json.dumps(metrics['test'])}")
    finish(out, "train", cfg, ["checkpoint_best.npz", "checkpoint_last.npz", "history.json", "metrics.json"], metrics)
    return metrics


def _learned_weights(model, bundle: DatasetBundle, cfg: FusionConfig, limit: int = 64):
    """Fit nonnegative fusion weights on training samples with ground-truth masks."""
    if bundle.masks is None:
        return (0.5, 0.5, 0.0)
    idx = bundle.indices("train")[:limit]
    hr, ht, _ = fused_maps(model, bundle.X[idx], cfg)
    return fit_projection([h.values for h in hr], [h.values for h in ht], bundle.masks[idx].astype(float),
                          nonnegative=True)


def cmd_explain(cfg: dict) -> dict:
    ckpt = load_checkpoint(cfg["checkpoint"])
    bundle = load_bundle(cfg["data"], cfg)
    out = prepare_out(cfg["out"])
    model = ckpt.build_model()
    i = int(bundle.indices("test")[0]) if cfg["sample_id"] < 0 else cfg["sample_id"]
    if not 0 <= i < len(bundle):
        raise UsageError(f"--sample-id {i} outside [0, {len(bundle) - 1}]")
    if not hasattr(model, "resnet"):
        raise UsageError("explain needs a hybrid checkpoint (both branches)")
    alpha = cfg["alpha"] if cfg["alpha"] is not None else (1.0 if cfg["fusion"] == "multiplicative" else 0.5)
    fcfg = FusionConfig(strategy=cfg["fusion"], alpha=alpha, smoothing_window=cfg["smoothing"],
                        threshold_quantile=cfg["quantile"], use_dtw=cfg["dtw"])
    if cfg["fusion"] == "learned":
        fcfg.weights = _learned_weights(model, bundle, fcfg)

    x = bundle.X[i]
    names = bundle.channel_names
    stamps = bundle.timestamps[i] if bundle.timestamps is not None else None
    maps = explain_batch(model, x[None])
    hr, ht = branch_heatmaps(maps, 0, names, stamps)
    hr_t = minmax_normalize(align(hr, ht, fcfg.use_dtw))
    hr_t.timestamps = stamps
    ht_n = minmax_normalize(ht)
    fused = fuse_heatmaps(hr, ht, fcfg)
    for name, h in (("resnet", hr_t), ("transformer", ht_n), ("fused", fused)):
        write_text(out / f"heatmap_{name}.json", h.to_json() + "\n")

    if bundle.task == "classification":
        probs = np.exp(maps.outputs[0] - maps.outputs[0].max())
        probs /= probs.sum()
        prediction = {"predicted class": int(probs.argmax()), "probability": round(float(probs.max()), 4),
                      "true class": int(bundle.y[i])}
    else:
        prediction = {"predicted value (normalised)": round(float(maps.outputs[0]), 4),
                      "true value (normalised)": round(float(bundle.y[i]), 4)}
    if hasattr(model, "gate"):
        prediction["resnet gate"] = round(model.gate, 4)
    regions = identify_regions(fused, names, q=fcfg.threshold_quantile, timestamps=stamps)
    low_var = flag_low_variance_channels(bundle, cfg["variance_threshold"])
    report, md = generate_report(i, prediction, fused, x, regions, template=default_template(cfg["domain"]),
                                 low_variance=low_var)
    write_text(out / "report.md", md)
    write_text(out / "report.json", report.to_json() + "\n")
    outputs = ["heatmap_resnet.json", "heatmap_transformer.json", "heatmap_fused.json", "report.md", "report.json"]
    summary = {"sample_id": i, "regions": len(regions), "fusion": fcfg.strategy, "alpha": alpha}
    print(md)
    finish(out, "explain", cfg, outputs, summary)
    return summary


def _reference_sentence(pattern: dict | None, names, T: int) -> str | None:
    """Template sentence describing the planted pattern, used as a text-metric reference."""
    if not pattern:
        return None
    kind = {"spike": ("pointwise_anomaly", "spike"), "drift": ("interval_trend", "rising"),
            "oscillation": ("interval_trend", "flat")}[pattern["kind"]]
    end = min(pattern["end"], T - 1)
    region = SalientRegion(pattern["channel"], pattern["start"], end, 1.0, pattern["start"],
                           names[pattern["channel"]])
    return render_template(PatternDescriptor(*kind), region)


def cmd_eval(cfg: dict) -> dict:
    ckpt = load_checkpoint(cfg["checkpoint"])
    bundle = load_bundle(cfg["data"], cfg)
    out = prepare_out(cfg["out"])
    model = ckpt.build_model()
    te_full = bundle.subset("test")
    outputs = predict(model, te_full.X)
    task = bundle.task
    if task == "classification":
        metrics = classification_metrics(outputs.argmax(axis=1), te_full.y)
    else:
        metrics = regression_metrics(outputs, te_full.y)
    report = {"task": metrics, "n_test": len(te_full)}

    te = test_split(bundle, cfg["max_samples"])
    fcfg = FusionConfig(strategy=cfg["fusion"], alpha=1.0 if cfg["fusion"] == "multiplicative" else 0.5)
    if cfg["heatmaps"]:
        hp = Path(cfg["heatmaps"])
        if not hp.exists():
            raise FileNotFoundError(f"heatmap file not found: {hp}")
        with np.load(hp, allow_pickle=False) as z:
            heat = np.asarray(z["values"], dtype=np.float64)[: len(te)]
        fused = [Heatmap(h, "fused", normalized=True) for h in heat]
    elif hasattr(model, "resnet"):
        _, _, fused = fused_maps(model, te.X, fcfg, bundle.channel_names)
    else:
        raise UsageError("a single-branch checkpoint needs precomputed --heatmaps")
    fill = np.zeros(bundle.C)  # train mean of z-scored channels
    dele = deletion_test(model, te.X, te.y, fused, DEFAULT_FRACTIONS, fill_values=fill, seed=cfg["seed"])
    f20 = DEFAULT_FRACTIONS.index(0.2)
    base = dele["base"]
    report["deletion"] = {
        **dele,
        "drop_at_0.2": {
            "absolute": base - dele["curve"][f20],
            "relative": (base - dele["curve"][f20]) / base if base else None,
            "random_absolute": base - dele["random_curve"][f20],
            "random_relative": (base - dele["random_curve"][f20]) / base if base else None,
        },
    }
    report["sensitivity"] = sensitivity_test(model, te.X, fused, sigma=cfg["sigma"], seed=cfg["seed"])

    if te.patterns is not None:
        scores = []
        for k in range(len(te)):
            ref = _reference_sentence(te.patterns[k], bundle.channel_names, bundle.T)
            regions = identify_regions(fused[k], bundle.channel_names, q=fcfg.threshold_quantile)
            if ref is None or not regions:
                continue
            _, md = generate_report(k, {}, fused[k], te.X[k], regions[:1])
            sentence = md.split("## Explanations", 1)[1].split("\n- ", 1)[1].split("\n", 1)[0]
            c, r = tokenize(sentence), tokenize(ref)
            scores.append((bleu4(c, [r]), rouge_l(c, r)["f1"], flesch_kincaid(sentence)))
        if scores:
            arr = np.array(scores)
            report["text"] = {"n": len(scores), "bleu4": float(arr[:, 0].mean()),
                              "rouge_l_f1": float(arr[:, 1].mean()), "flesch_kincaid": float(arr[:, 2].mean())}

    if cfg["checkpoint_b"]:
        model_b = load_checkpoint(cfg["checkpoint_b"]).build_model()
        la = per_sample_loss(outputs, te_full.y, task)
        lb = per_sample_loss(predict(model_b, te_full.X), te_full.y, task)
        report["wilcoxon"] = wilcoxon_paired(la, lb)

    write_text(out / "metrics.json", dump_json(report))
    write_text(out / "faithfulness.csv", faithfulness_csv(dele))
    print(json.dumps(report["task"]))
    finish(out, "eval", cfg, ["metrics.json", "faithfulness.csv"], {"task": metrics})
    return report


def cmd_ablate(cfg: dict) -> dict:
    bundle = load_bundle(cfg["data"], cfg)
    if bundle.masks is None:
        raise DataError("ablation needs ground-truth masks (synthetic data)")
    out = prepare_out(cfg["out"])
    te = test_split(bundle, None)
    keep = np.flatnonzero(te.masks.reshape(len(te), -1).any(axis=1))[: cfg["max_samples"]]
    te = te.take(keep)
    masks = te.masks.astype(float)
    model = None
    if cfg["checkpoint"]:
        model = load_checkpoint(cfg["checkpoint"]).build_model()
        hr, ht, _ = fused_maps(model, te.X, FusionConfig())
        hr, ht = [h.values for h in hr], [h.values for h in ht]
        tr = bundle.indices("train")
        tr = tr[bundle.masks[tr].reshape(len(tr), -1).any(axis=1)][: cfg["max_samples"]]
        fr, ft, _ = fused_maps(model, bundle.X[tr], FusionConfig())
        fit_set = ([h.values for h in fr], [h.values for h in ft], bundle.masks[tr].astype(float))
        source = "model"
    else:
        rng = np.random.default_rng(cfg["seed"])
        hr, ht = [], []
        for m in masks:
            blob = max(int(m.sum()), 1)
            free = np.flatnonzero(m.ravel() == 0)
            picks = rng.choice(free, size=min(2 * blob, len(free)), replace=False)
            a, b = m.ravel().copy(), m.ravel().copy()
            a[picks[:blob]] += rng.uniform(0.5, 1.0, len(picks[:blob]))
            b[picks[blob:]] += rng.uniform(0.5, 1.0, len(picks[blob:]))
            hr.append(a.reshape(m.shape))
            ht.append(b.reshape(m.shape))
        fit_set = None
        source = "planted masks plus disjoint noise"
    strategies = ("multiplicative", "weighted", "learned", "concat_project")
    res = consensus_experiment(hr, ht, masks, fit_set=fit_set, seed=cfg["seed"], strategies=strategies)
    means = res.mean_errors()
    rows = []
    for s in strategies:
        w = res.weights.get(s, (None, None, None))
        auc = None
        if model is not None:
            fcfg = FusionConfig(strategy=s, alpha=1.0 if s == "multiplicative" else 0.5,
                                weights=res.weights.get(s, (0.5, 0.5, 0.0)))
            fused = [fuse_heatmaps(Heatmap(a, "resnet"), Heatmap(b, "transformer"), fcfg) for a, b in zip(hr, ht)]
            auc = deletion_test(model, te.X, te.y, fused, seed=cfg["seed"], random_baseline=False)["auc"]
        rows.append({"strategy": s, "consensus_error": means[s], "deletion_auc": auc,
                     "w_resnet": w[0], "w_transformer": w[1], "bias": w[2]})
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if v is None else (f"{v:.10g}" if isinstance(v, float) else v)) for k, v in r.items()})
    write_text(out / "ablation.csv", buf.getvalue())
    write_text(out / "ablation.json", dump_json({"source": source, "n": len(hr), "rows": rows,
                                                 "consensus": res.to_dict()}))
    print(buf.getvalue(), end="")
    finish(out, "ablate", cfg, ["ablation.csv", "ablation.json"], {"ordering": res.ordering()})
    return {"rows": rows}


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "explain": cmd_explain, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        COMMANDS[args.command](cfg)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))
    except (FileNotFoundError, DataError, CheckpointError) as exc:
        print(f"tsxplain: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, tt.NonFiniteError, FloatingPointError) as exc:
        print(f"tsxplain: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
