"""Alignment, fusion, normalisation, smoothing and thresholding of heatmaps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .saliency import Heatmap

STRATEGIES = ("multiplicative", "weighted", "learned", "concat_project")
GAP_MERGE = 2


@dataclass
class FusionConfig:
    strategy: str = "multiplicative"
    alpha: float = 1.0
    smoothing_window: int = 1
    threshold_quantile: float = 0.2
    use_dtw: bool = False
    # (w_resnet, w_transformer, bias) for the learned / concat_project strategies
    weights: tuple[float, float, float] = (0.5, 0.5, 0.0)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError("smoothing_window must be an odd integer >= 1")
        if not 0.0 < self.threshold_quantile < 1.0:
            raise ValueError("threshold_quantile must lie in (0, 1)")
        self.weights = tuple(float(w) for w in self.weights)
        if self.strategy == "learned" and min(self.weights[:2]) < 0:
            raise ValueError("learned fusion weights must be nonnegative")


@dataclass
class SalientRegion:
    channel: int
    t_start: int
    t_end: int
    peak_value: float
    peak_time: int
    channel_name: str | None = None
    timestamps: tuple[str, str] | None = None

    @property
    def width(self) -> int:
        return self.t_end - self.t_start + 1

    def to_dict(self) -> dict:
        return {
            "channel": self.channel,
            "channel_name": self.channel_name,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "peak_value": self.peak_value,
            "peak_time": self.peak_time,
            "timestamps": list(self.timestamps) if self.timestamps else None,
        }


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


def upsample_linear(h: Heatmap, target_T: int) -> Heatmap:
    """Per-channel linear interpolation along time with endpoints pinned."""
    if target_T < 1:
        raise ValueError("target_T must be >= 1")
    v = h.values
    T0 = v.shape[0]
    if T0 == target_T:
        return h.with_values(v.copy())
    if T0 == 1:
        out = np.repeat(v, target_T, axis=0)
    else:
        src = np.linspace(0.0, T0 - 1, target_T)
        grid = np.arange(T0)
        out = np.column_stack([np.interp(src, grid, v[:, c]) for c in range(v.shape[1])])
    return h.with_values(out, timestamps=None)


def dtw_align(a, b) -> tuple[np.ndarray, list[tuple[int, int]], float]:
    """Dynamic time warping with |a_i - b_j| cost.

    Returns (warped_a, path, cost); ``warped_a[j]`` averages the a-values the
    path maps onto b-index j.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("dtw_align needs two nonempty sequences")
    dist = np.abs(a[:, None] - b[None, :])
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row_prev, row = acc[i - 1], acc[i]
        d = dist[i - 1]
        for j in range(1, m + 1):
            row[j] = d[j - 1] + min(row_prev[j - 1], row_prev[j], row[j - 1])
    path = []
    i, j = n, m
    while (i, j) != (1, 1):
        path.append((i - 1, j - 1))
        steps = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        # diagonal wins ties
        _, i, j = min(steps, key=lambda s: s[0])
    path.append((0, 0))
    path.reverse()
    sums = np.zeros(m)
    counts = np.zeros(m)
    for pi, pj in path:
        sums[pj] += a[pi]
        counts[pj] += 1
    return sums / counts, path, float(acc[n, m])


def warp_rows(values: np.ndarray, path, length: int) -> np.ndarray:
    """Apply a DTW path (rows of ``values`` -> target index) to every column."""
    out = np.zeros((length, values.shape[1]))
    counts = np.zeros(length)
    for i, j in path:
        out[j] += values[i]
        counts[j] += 1
    return out / counts[:, None]


def align(hr: Heatmap, ht: Heatmap, use_dtw: bool = False) -> Heatmap:
    """Bring the ResNet map onto the Transformer's time grid."""
    if hr.shape[1] != ht.shape[1]:
        raise ValueError(f"channel mismatch between heatmaps: {hr.shape} vs {ht.shape}")
    hr = upsample_linear(hr, ht.shape[0])
    if use_dtw:
        _, path, _ = dtw_align(hr.values.mean(axis=1), ht.values.mean(axis=1))
        hr = hr.with_values(warp_rows(hr.values, path, ht.shape[0]))
    return hr


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------


def fuse(hr: Heatmap, ht: Heatmap, cfg: FusionConfig) -> Heatmap:
    """Cellwise fusion of two aligned, nonnegative heatmaps."""
    if hr.shape != ht.shape:
        raise ValueError(f"heatmap shapes differ: {hr.shape} vs {ht.shape}")
    a, b = hr.values, ht.values
    if (a < 0).any() or (b < 0).any():
        raise ValueError("fusion inputs must be nonnegative")
    if cfg.strategy == "multiplicative":
        out = cfg.alpha * a * b
    elif cfg.strategy == "weighted":
        out = cfg.alpha * a + (1.0 - cfg.alpha) * b
    else:
        wr, wt, bias = cfg.weights
        out = np.maximum(wr * a + wt * b + bias, 0.0)
    return Heatmap(out, "fused", normalized=False, timestamps=ht.timestamps,
                   channel_names=ht.channel_names or hr.channel_names, strategy=cfg.strategy)


def fit_projection(hr_set, ht_set, targets, nonnegative: bool) -> tuple[float, float, float]:
    """Least-squares (w_r, w_t, bias) mapping two heatmaps to a target map.

    With ``nonnegative`` the two weights are constrained >= 0 (learned
    strategy); otherwise they are free (concat_project).
    """
    a = np.concatenate([np.asarray(h, dtype=np.float64).ravel() for h in hr_set])
    b = np.concatenate([np.asarray(h, dtype=np.float64).ravel() for h in ht_set])
    y = np.concatenate([np.asarray(h, dtype=np.float64).ravel() for h in targets])
    if nonnegative:
        from scipy.optimize import lsq_linear

        design = np.column_stack([a, b, np.ones_like(a)])
        res = lsq_linear(design, y, bounds=([0.0, 0.0, -np.inf], [np.inf, np.inf, np.inf]))
        wr, wt, bias = res.x
    else:
        design = np.column_stack([a, b, np.ones_like(a)])
        (wr, wt, bias), *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(wr), float(wt), float(bias)


def minmax_normalize(h: Heatmap, eps: float = 1e-12) -> Heatmap:
    """Global min-max scaling to [0, 1]; a constant map becomes all zeros."""
    v = h.values
    lo, hi = v.min(), v.max()
    if hi - lo < eps:
        out = np.zeros_like(v)
    else:
        out = (v - lo) / (hi - lo)
    return h.with_values(out, normalized=True)


def smooth_moving_average(h: Heatmap, window: int) -> Heatmap:
    """Centred moving average per channel; the window shrinks at the edges."""
    if window < 1 or window % 2 == 0:
        raise ValueError("smoothing window must be an odd integer >= 1")
    if window == 1:
        return h.with_values(h.values.copy())
    v = h.values
    T = v.shape[0]
    if window > T:
        raise ValueError(f"window {window} exceeds series length {T}")
    half = window // 2
    csum = np.vstack([np.zeros((1, v.shape[1])), np.cumsum(v, axis=0)])
    lo = np.clip(np.arange(T) - half, 0, T)
    hi = np.clip(np.arange(T) + half + 1, 0, T)
    out = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    return h.with_values(out, normalized=False)


def fuse_heatmaps(hr: Heatmap, ht: Heatmap, cfg: FusionConfig) -> Heatmap:
    """Full post-processing chain: align, normalise each branch, fuse, smooth,
    normalise."""
    hr = minmax_normalize(align(hr, ht, cfg.use_dtw))
    ht = minmax_normalize(ht)
    fused = fuse(hr, ht, cfg)
    if cfg.smoothing_window > 1:
        fused = smooth_moving_average(fused, cfg.smoothing_window)
    return minmax_normalize(fused)


# ---------------------------------------------------------------------------
# Regions
# ---------------------------------------------------------------------------


def salient_mask(values: np.ndarray, q: float) -> np.ndarray:
    """Cells >= the (1-q)-quantile; zero cells are never salient."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile q must lie in (0, 1)")
    thr = np.quantile(values, 1.0 - q)
    return (values >= thr) & (values > 0)


def runs(mask_1d: np.ndarray, gap_merge: int = GAP_MERGE) -> list[tuple[int, int]]:
    """Maximal True runs, merging runs separated by <= gap_merge False cells."""
    idx = np.flatnonzero(mask_1d)
    if len(idx) == 0:
        return []
    out = []
    start = prev = int(idx[0])
    for t in idx[1:]:
        t = int(t)
        if t - prev - 1 > gap_merge:
            out.append((start, prev))
            start = t
        prev = t
    out.append((start, prev))
    return out


def threshold_regions(h: Heatmap, q: float = 0.2, gap_merge: int = GAP_MERGE) -> list[SalientRegion]:
    if not 0.0 < q < 1.0:
        raise ValueError("quantile q must lie in (0, 1)")
    v = h.values
    mask = salient_mask(v, q)
    regions = []
    for c in range(v.shape[1]):
        for s, e in runs(mask[:, c], gap_merge):
            seg = v[s : e + 1, c]
            k = int(np.argmax(seg))
            regions.append(SalientRegion(
                channel=c,
                t_start=s,
                t_end=e,
                peak_value=float(seg[k]),
                peak_time=s + k,
                channel_name=h.channel_names[c] if h.channel_names else None,
                timestamps=(h.timestamps[s], h.timestamps[e]) if h.timestamps else None,
            ))
    return regions
