"""Optimisation loop, early stopping, checkpoints and the fusion-weight grid search."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .datasets import DatasetBundle, augment
from .models import HybridModel, model_config, model_from_config
from .nn import Module

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 32
    weight_decay: float = 1e-4
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    huber_delta: float = 1.0
    aux_weight: float = 1.0  # per-branch losses added for hybrid models
    augment: bool = False
    jitter_frac: float = 0.05
    noise_sigma: float = 0.1
    min_delta: float = 0.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.lr and not 1e-4 <= self.lr <= 1e-3:
            logger.info("lr=%g is outside the usual [1e-4, 1e-3] range", self.lr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[tt.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m.copy()
            out[f"v{i}"] = v.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"m{i}"]
            self.v[i][...] = state[f"v{i}"]


class EarlyStopping:
    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, value: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def task_loss(out: tt.Tensor, y, task: str, huber_delta: float = 1.0, reduction: str = "mean") -> tt.Tensor:
    if task == "classification":
        return tt.cross_entropy(out, y, reduction=reduction)
    return tt.huber(out, np.asarray(y, dtype=np.float64), delta=huber_delta, reduction=reduction)


def model_task(model: Module) -> str:
    return model.task if isinstance(model, HybridModel) else model.cfg.task


def batch_loss(model: Module, X, y, cfg: TrainConfig, rng=None) -> tt.Tensor:
    out, cache = model.forward(X, rng)
    task = model_task(model)
    loss = task_loss(out, y, task, cfg.huber_delta)
    if isinstance(model, HybridModel) and cfg.aux_weight:
        for branch in cache.branch_outputs.values():
            loss = loss + cfg.aux_weight * task_loss(branch, y, task, cfg.huber_delta)
    return loss


def predict(model: Module, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode outputs for every sample, batched."""
    was_training = model.training
    model.eval()
    outs = []
    with tt.no_grad():
        for i in range(0, len(X), batch_size):
            out, _ = model.forward(X[i : i + batch_size])
            outs.append(out.data)
    model.train(was_training)
    return np.concatenate(outs) if outs else np.zeros((0,))


def evaluate_loss(model: Module, X: np.ndarray, y: np.ndarray, cfg: TrainConfig | None = None,
                  batch_size: int = 256) -> float:
    cfg = cfg or TrainConfig()
    out = predict(model, X, batch_size)
    per = task_loss(tt.Tensor(out), y, model_task(model), cfg.huber_delta, reduction="none").data
    value = float(per.mean())
    if not math.isfinite(value):
        raise TrainingDiverged("validation loss is not finite")
    return value


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    epoch: int
    val_metric: float
    config: dict
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def build_model(self) -> Module:
        model = model_from_config(self.config["model"])
        model.load_state_dict(self.params)
        model.eval()
        return model


def make_checkpoint(model: Module, opt: Adam | None, epoch: int, val_metric: float, cfg: TrainConfig,
                    rng: np.random.Generator | None, history, extra: dict | None = None) -> Checkpoint:
    return Checkpoint(
        params=model.state_dict(),
        optimizer=opt.state() if opt is not None else {},
        epoch=epoch,
        val_metric=float(val_metric),
        config={"model": model_config(model), "train": cfg.to_dict()},
        rng_state=rng.bit_generator.state if rng is not None else None,
        history=[dict(h) for h in history],
        extra=dict(extra or {}),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = {
        "format": "tsxplain-checkpoint",
        "version": ckpt.version,
        "epoch": ckpt.epoch,
        "val_metric": ckpt.val_metric,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "extra": ckpt.extra,
    }
    arrays = {f"p/{k}": v for k, v in ckpt.params.items()}
    arrays.update({f"o/{k}": v for k, v in ckpt.optimizer.items()})
    arrays["header"] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            params = {k[2:]: z[k] for k in z.files if k.startswith("p/")}
            optimizer = {k[2:]: z[k] for k in z.files if k.startswith("o/")}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if header.get("format") != "tsxplain-checkpoint":
        raise CheckpointError(f"{path} is not a tsxplain checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')} != supported {CHECKPOINT_VERSION}")
    ckpt = Checkpoint(
        params=params,
        optimizer=optimizer,
        epoch=header["epoch"],
        val_metric=header["val_metric"],
        config=header["config"],
        rng_state=header["rng_state"],
        history=header["history"],
        extra=header.get("extra", {}),
        version=header["version"],
    )
    if ckpt.config_hash != header["config_hash"]:
        raise CheckpointError(f"{path}: stored config hash does not match its config (corrupt file)")
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        raise CheckpointError(f"config hash mismatch: checkpoint {ckpt.config_hash[:12]}, expected {expected_hash[:12]}")
    return ckpt


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(
    model: Module,
    bundle: DatasetBundle,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    checkpoint_dir: str | Path | None = None,
    max_epochs: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Fit ``model`` on the train split, early-stopping on validation loss.

    Returns the best-validation checkpoint and the per-epoch history. With
    ``resume`` the run continues from that (last-epoch) checkpoint exactly.
    """
    if bundle.split is None:
        raise ValueError("bundle must be split-tagged before training")
    task = model_task(model)
    if task != bundle.task:
        raise ValueError(f"model task {task!r} does not match data task {bundle.task!r}")
    tr, va = bundle.indices("train"), bundle.indices("val")
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("need nonempty train and val splits")
    Xtr, ytr = bundle.X[tr], bundle.y[tr]
    Xva, yva = bundle.X[va], bundle.y[va]

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    history: list[dict] = []
    best: Checkpoint | None = None
    start_epoch = 1
    if resume is not None:
        model.load_state_dict(resume.params)
        opt.load_state(resume.optimizer)
        rng.bit_generator.state = resume.rng_state
        history = [dict(h) for h in resume.history]
        stopper.best = resume.extra["best_val"]
        stopper.bad_epochs = resume.extra["bad_epochs"]
        start_epoch = resume.epoch + 1
        logger.info("resuming at epoch %d", start_epoch)

    last_epoch = max_epochs if max_epochs is not None else cfg.max_epochs
    n_batches = max(len(tr) // cfg.batch_size, 1)
    for epoch in range(start_epoch, last_epoch + 1):
        model.train()
        order = rng.permutation(len(tr))
        total = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb = Xtr[idx]
            if cfg.augment:
                xb = np.stack([augment(s, cfg.jitter_frac, cfg.noise_sigma, rng) for s in xb])
            try:
                loss = batch_loss(model, xb, ytr[idx], cfg, rng)
            except tt.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            opt.zero_grad()
            tt.backward(loss)
            opt.step()
            total += loss.item()
        train_loss = total / n_batches
        val_loss = evaluate_loss(model, Xva, yva, cfg)
        improved, stop = stopper.update(val_loss)
        record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
        if isinstance(model, HybridModel):
            record["gate"] = model.gate
        history.append(record)
        logger.info("epoch %d train %.5f val %.5f%s", epoch, train_loss, val_loss, " *" if improved else "")
        if on_epoch is not None:
            on_epoch(record)
        state = {"best_val": stopper.best, "bad_epochs": stopper.bad_epochs}
        if improved:
            best = make_checkpoint(model, opt, epoch, val_loss, cfg, rng, history, {**state, "best_epoch": epoch})
            if checkpoint_dir is not None:
                save_checkpoint(best, Path(checkpoint_dir) / "checkpoint_best.npz")
        if checkpoint_dir is not None:
            last = make_checkpoint(model, opt, epoch, val_loss, cfg, rng, history, state)
            save_checkpoint(last, Path(checkpoint_dir) / "checkpoint_last.npz")
        if stop:
            logger.info("early stop after %d epochs without improvement", stopper.bad_epochs)
            break

    if best is None:
        best = make_checkpoint(model, opt, history[-1]["epoch"] if history else 0,
                               history[-1]["val_loss"] if history else math.inf, cfg, rng, history)
    best.history = [dict(h) for h in history]
    model.load_state_dict(best.params)
    model.eval()
    return best, history


# ---------------------------------------------------------------------------
# Fusion-weight grid search
# ---------------------------------------------------------------------------

DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


def grid_search(objective: Callable[[float], float], grid: Sequence[float], tol: float = 1e-12) -> tuple[float, dict]:
    """Exhaustive argmax over ``grid``; ties go to the value nearest 0.5
    (then the smaller one)."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    scores = {float(a): float(objective(float(a))) for a in grid}
    top = max(scores.values())
    tied = [a for a, s in scores.items() if s >= top - tol]
    best = min(tied, key=lambda a: (abs(a - 0.5), a))
    return best, scores


def grid_search_alpha(hr_set, ht_set, samples, labels, model, grid=DEFAULT_ALPHA_GRID,
                      fill_values=None, fractions=None, seed: int = 0) -> tuple[float, dict]:
    """Pick the weighted-fusion alpha whose fused heatmaps give the largest
    deletion-test AUC (metric drop) on validation data."""
    from .evaluation import DEFAULT_FRACTIONS, deletion_test
    from .fusion import FusionConfig, fuse_heatmaps

    fractions = fractions or DEFAULT_FRACTIONS

    def objective(alpha: float) -> float:
        fused = np.stack([
            fuse_heatmaps(hr, ht, FusionConfig(strategy="weighted", alpha=alpha)).values
            for hr, ht in zip(hr_set, ht_set)
        ])
        res = deletion_test(model, samples, labels, fused, fractions, fill_values=fill_values, seed=seed,
                            random_baseline=False)
        return res["auc"]

    return grid_search(objective, grid)
