"""Synthetic pattern data, UCI appliance-energy ingestion, preprocessing and splits."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SYNTHETIC_CHANNELS = ("sine_low", "step", "noise", "sine_high", "quadratic")
PATTERNS = ("spike", "drift", "oscillation")
# the pure-noise channel never receives an injected pattern
INJECTABLE_CHANNELS = (0, 1, 3, 4)
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class DatasetBundle:
    X: np.ndarray  # N x T x C
    y: np.ndarray
    channel_names: list[str]
    task: str = "classification"
    timestamps: list[list[str]] | None = None
    split: np.ndarray | None = None  # per-sample "train" / "val" / "test"
    masks: np.ndarray | None = None  # N x T x C ground-truth importance (synthetic only)
    patterns: list[dict | None] | None = None
    norm_stats: dict | None = None
    flags: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 3:
            raise DataError(f"samples must be N x T x C, got {self.X.shape}")
        if len(self.y) != len(self.X):
            raise DataError("targets and samples differ in length")
        if len(self.channel_names) != self.X.shape[2]:
            raise DataError("channel_names length does not match C")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def C(self) -> int:
        return self.X.shape[2]

    def indices(self, part: str) -> np.ndarray:
        if self.split is None:
            raise DataError("bundle has no split assignment")
        return np.flatnonzero(self.split == part)

    def subset(self, part: str) -> DatasetBundle:
        return self.take(self.indices(part))

    def take(self, idx) -> DatasetBundle:
        idx = np.asarray(idx)
        return replace(
            self,
            X=self.X[idx],
            y=self.y[idx],
            timestamps=[self.timestamps[i] for i in idx] if self.timestamps is not None else None,
            split=self.split[idx] if self.split is not None else None,
            masks=self.masks[idx] if self.masks is not None else None,
            patterns=[self.patterns[i] for i in idx] if self.patterns is not None else None,
            meta={**self.meta, "sample_ids": [int(i) for i in np.asarray(self.sample_ids)[idx]]},
        )

    @property
    def sample_ids(self) -> list[int]:
        return self.meta.get("sample_ids", list(range(len(self))))

    # -- persistence ----------------------------------------------------
    def save(self, path: str | Path) -> None:
        arrays = {"X": self.X, "y": self.y}
        if self.split is not None:
            arrays["split"] = self.split.astype("U5")
        if self.masks is not None:
            arrays["masks"] = self.masks
        header = {
            "channel_names": self.channel_names,
            "task": self.task,
            "timestamps": self.timestamps,
            "patterns": self.patterns,
            "norm_stats": self.norm_stats,
            "flags": self.flags,
            "meta": self.meta,
        }
        arrays["header"] = np.array(json.dumps(header, sort_keys=True))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> DatasetBundle:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"dataset not found: {path}")
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            return cls(
                X=z["X"],
                y=z["y"],
                split=z["split"] if "split" in z else None,
                masks=z["masks"] if "masks" in z else None,
                **header,
            )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.X.tobytes())
        h.update(np.asarray(self.y, dtype=np.float64).tobytes())
        if self.split is not None:
            h.update("".join(self.split.tolist()).encode())
        if self.masks is not None:
            h.update(self.masks.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_samples: int = 2000
    T: int = 100
    seed: int = 0
    anomaly_rate: float = 0.5
    pattern_mix: dict[str, float] = field(default_factory=lambda: {p: 1 / 3 for p in PATTERNS})

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.T < 20:
            raise ValueError("T must be at least 20")
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise ValueError("anomaly_rate must be in [0, 1]")
        if set(self.pattern_mix) - set(PATTERNS):
            raise ValueError(f"unknown patterns: {set(self.pattern_mix) - set(PATTERNS)}")
        if not math.isclose(sum(self.pattern_mix.values()), 1.0, abs_tol=1e-9):
            raise ValueError("pattern_mix weights must sum to 1")


def clean_channels(T: int, rng: np.random.Generator) -> np.ndarray:
    """The five base signals of one sample, T x 5."""
    t = np.arange(T, dtype=np.float64)
    out = np.empty((T, 5))
    out[:, 0] = np.sin(2 * np.pi * rng.uniform(1.0, 2.0) * t / T + rng.uniform(0, 2 * np.pi))
    step_at = rng.integers(T // 4, 3 * T // 4)
    out[:, 1] = (t >= step_at).astype(np.float64)
    out[:, 2] = rng.normal(0.0, 1.0, T)
    out[:, 3] = np.sin(2 * np.pi * t / rng.uniform(4.0, 6.0) + rng.uniform(0, 2 * np.pi))
    out[:, 4] = t**2 / 100.0
    return out


def channel_scale(signal: np.ndarray) -> float:
    """Injected amplitudes are expressed in units of the clean channel's spread."""
    s = float(signal.std())
    return s if s > 1e-12 else 1.0


def inject_pattern(T: int, kind: str, rng: np.random.Generator) -> tuple[np.ndarray, int, int]:
    """Additive pattern (unit scale) and its [start, end] support."""
    delta = np.zeros(T)
    if kind == "spike":
        width = int(rng.integers(1, 3))
        start = int(rng.integers(5, T - 5 - width))
        delta[start : start + width] = 3.0
    elif kind == "drift":
        length = min(20, T - 1)  # short series get a shortened ramp
        start = int(rng.integers(0, T - length))
        # ramp up to +1.5 over 20 steps, then hold
        delta[start : start + length] = np.linspace(0.0, 1.5, length + 1)[1:]
        delta[start + length :] = 1.5
    elif kind == "oscillation":
        length = min(30, T)
        start = int(rng.integers(0, T - length + 1))
        k = np.arange(length)
        delta[start : start + length] = np.sin(2 * np.pi * (k + 0.5) / 10.0)
    else:
        raise ValueError(f"unknown pattern {kind!r}")
    nz = np.flatnonzero(delta)
    return delta, int(nz[0]), int(nz[-1])


def generate_synthetic(spec: SyntheticSpec) -> DatasetBundle:
    rng = np.random.default_rng(spec.seed)
    N, T = spec.n_samples, spec.T
    X = np.empty((N, T, 5))
    y = np.zeros(N, dtype=np.int64)
    masks = np.zeros((N, T, 5), dtype=bool)
    patterns: list[dict | None] = []
    kinds = [p for p in PATTERNS if spec.pattern_mix.get(p, 0) > 0]
    probs = np.array([spec.pattern_mix[p] for p in kinds])
    for i in range(N):
        X[i] = clean_channels(T, rng)
        if rng.random() < spec.anomaly_rate:
            kind = kinds[int(rng.choice(len(kinds), p=probs))]
            ch = INJECTABLE_CHANNELS[int(rng.integers(len(INJECTABLE_CHANNELS)))]
            delta, start, end = inject_pattern(T, kind, rng)
            delta *= channel_scale(X[i, :, ch])
            X[i, :, ch] += delta
            masks[i, :, ch] = delta != 0
            y[i] = 1
            patterns.append({"kind": kind, "channel": ch, "start": start, "end": end})
        else:
            patterns.append(None)
    return DatasetBundle(
        X=X,
        y=y,
        channel_names=list(SYNTHETIC_CHANNELS),
        task="classification",
        masks=masks,
        patterns=patterns,
        meta={
            "source": "synthetic",
            "spec": {
                "n_samples": N,
                "T": T,
                "seed": spec.seed,
                "anomaly_rate": spec.anomaly_rate,
                "pattern_mix": dict(spec.pattern_mix),
            },
        },
    )


# ---------------------------------------------------------------------------
# UCI appliances energy CSV
# ---------------------------------------------------------------------------


def impute_linear(series) -> np.ndarray:
    """Fill NaN gaps: linear inside, nearest observed value at the edges.

    Works column-wise on 2-D input.
    """
    arr = np.array(series, dtype=np.float64)
    if arr.ndim == 2:
        return np.column_stack([impute_linear(arr[:, j]) for j in range(arr.shape[1])]) if arr.size else arr
    missing = np.isnan(arr)
    if missing.all():
        raise DataError("cannot impute a channel with no observed values")
    if missing.any():
        idx = np.arange(len(arr))
        arr[missing] = np.interp(idx[missing], idx[~missing], arr[~missing])
    return arr


def read_energy_rows(path, date_column: str = "date", allow_missing: bool = True):
    """Parse the CSV into (timestamps, column names, float matrix with NaN gaps)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if date_column not in header:
            raise DataError(f"{path}: missing header or no {date_column!r} column")
        date_idx = header.index(date_column)
        names = [h for i, h in enumerate(header) if i != date_idx]
        stamps: list[datetime] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                stamps.append(datetime.fromisoformat(row[date_idx].strip()))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {row[date_idx]!r}") from None
            values = []
            for j, cell in enumerate(row):
                if j == date_idx:
                    continue
                cell = cell.strip()
                if cell == "" or cell.lower() in ("na", "nan"):
                    if not allow_missing:
                        raise DataError(f"{path}:{lineno}: missing value in {header[j]!r}")
                    values.append(np.nan)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} in {header[j]!r}") from None
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise DataError(f"{path}: timestamps are not strictly increasing")
    return stamps, names, np.array(rows, dtype=np.float64)


def window_starts(n_rows: int, T: int, stride: int, horizon: int = 0) -> np.ndarray:
    last = n_rows - T - horizon
    if last < 0:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, last + 1, stride)


def load_energy_csv(
    path,
    T: int = 100,
    stride: int = 1,
    horizon: int = 0,
    target_column: str = "Appliances",
    date_column: str = "date",
    synthetic_columns: tuple[str, ...] = ("rv1", "rv2"),
    allow_missing: bool = True,
) -> DatasetBundle:
    """Sliding windows over the chronologically ordered rows.

    The regression target is ``target_column`` at row ``start + T - 1 + horizon``;
    the target column itself is not an input channel.
    """
    stamps, names, values = read_energy_rows(path, date_column, allow_missing)
    if target_column not in names:
        raise DataError(f"target column {target_column!r} not in CSV header")
    values = impute_linear(values)
    t_idx = names.index(target_column)
    feat_idx = [j for j in range(len(names)) if j != t_idx]
    features = values[:, feat_idx]
    target = values[:, t_idx]
    starts = window_starts(len(values), T, stride, horizon)
    X = np.stack([features[s : s + T] for s in starts]) if len(starts) else np.zeros((0, T, len(feat_idx)))
    y = np.array([target[s + T - 1 + horizon] for s in starts])
    iso = [s.isoformat(sep=" ") for s in stamps]
    channel_names = [names[j] for j in feat_idx]
    return DatasetBundle(
        X=X,
        y=y,
        channel_names=channel_names,
        task="regression",
        timestamps=[iso[s : s + T] for s in starts],
        flags={"synthetic_channels": [c for c in synthetic_columns if c in channel_names]},
        meta={
            "source": str(path),
            "raw_rows": len(values),
            "window": T,
            "stride": stride,
            "horizon": horizon,
            "target_column": target_column,
            "window_starts": starts.tolist(),
        },
    )


def unwindow(X: np.ndarray) -> np.ndarray:
    """Inverse of non-overlapping (stride == T) windowing."""
    return X.reshape(-1, X.shape[-1])


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def train_statistics(X_train: np.ndarray) -> dict:
    flat = X_train.reshape(-1, X_train.shape[-1])
    return {
        "mean": flat.mean(axis=0).tolist(),
        "std": flat.std(axis=0).tolist(),
        "min": flat.min(axis=0).tolist(),
        "max": flat.max(axis=0).tolist(),
    }


def normalize_channels(bundle: DatasetBundle, mode: str = "zscore") -> DatasetBundle:
    """Per-channel scaling with statistics from the training split only."""
    if mode not in ("zscore", "unit"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    train_idx = bundle.indices("train") if bundle.split is not None else np.arange(len(bundle))
    stats = train_statistics(bundle.X[train_idx])
    if mode == "zscore":
        center = np.array(stats["mean"])
        scale = np.array(stats["std"])
    else:
        center = np.array(stats["min"])
        scale = np.array(stats["max"]) - center
    degenerate = scale < 1e-12
    if degenerate.any():
        logger.warning("zero-variance channels left centred: %s",
                       [bundle.channel_names[i] for i in np.flatnonzero(degenerate)])
    scale = np.where(degenerate, 1.0, scale)
    X = (bundle.X - center) / scale
    flags = dict(bundle.flags)
    flags["zero_variance_channels"] = [bundle.channel_names[i] for i in np.flatnonzero(degenerate)]
    stats.update(mode=mode, center=center.tolist(), scale=scale.tolist())
    return replace(bundle, X=X, norm_stats=stats, flags=flags)


def augment(sample: np.ndarray, jitter_frac: float = 0.05, noise_sigma: float = 0.1, seed=None,
            shift: int | None = None) -> np.ndarray:
    """Circular time shift of up to +-jitter_frac*T steps plus iid Gaussian noise."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sample = np.asarray(sample, dtype=np.float64)
    T = sample.shape[0]
    if shift is None:
        limit = int(round(jitter_frac * T))
        shift = int(rng.integers(-limit, limit + 1)) if limit > 0 else 0
    out = np.roll(sample, shift, axis=0)
    if noise_sigma > 0:
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    return out


def split(bundle: DatasetBundle, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> DatasetBundle:
    """Assign train/val/test tags; stratified by class for classification."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if len(fractions) != 3 or not math.isclose(fractions.sum(), 1.0, abs_tol=1e-9) or (fractions < 0).any():
        raise ValueError("fractions must be three nonnegative numbers summing to 1")
    rng = np.random.default_rng(seed)
    tags = np.empty(len(bundle), dtype="U5")
    if bundle.task == "classification":
        groups = [np.flatnonzero(bundle.y == c) for c in np.unique(bundle.y)]
        n_nonempty = int((fractions > 0).sum())
        for g in groups:
            if len(g) < n_nonempty:
                raise DataError(f"class with {len(g)} samples cannot fill {n_nonempty} splits")
    else:
        groups = [np.arange(len(bundle))]
    for g in groups:
        g = rng.permutation(g)
        counts = _apportion(len(g), fractions)
        edges = np.cumsum(counts)[:-1]
        for part, chunk in zip(SPLITS, np.split(g, edges)):
            tags[chunk] = part
    meta = {**bundle.meta, "split_seed": seed, "split_fractions": fractions.tolist()}
    return replace(bundle, split=tags, meta=meta)


def _apportion(n: int, fractions: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of n * fractions."""
    raw = n * fractions
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def manifest(bundle: DatasetBundle) -> dict:
    return {
        "channel_names": bundle.channel_names,
        "task": bundle.task,
        "n_samples": len(bundle),
        "T": bundle.T,
        "C": bundle.C,
        "meta": {k: v for k, v in bundle.meta.items() if k != "window_starts"},
        "split": bundle.split.tolist() if bundle.split is not None else None,
        "norm_stats": bundle.norm_stats,
        "flags": bundle.flags,
        "digest": bundle.digest(),
    }
