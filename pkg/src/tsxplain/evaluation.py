"""Predictive metrics, faithfulness/sensitivity tests and the fusion consensus experiment."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .datasets import impute_linear
from .fusion import FusionConfig, fit_projection, fuse, minmax_normalize
from .nn import Module
from .saliency import Heatmap
from .training import model_task, predict

DEFAULT_FRACTIONS = tuple(round(0.05 * i, 2) for i in range(1, 11))


# ---------------------------------------------------------------------------
# Task metrics
# ---------------------------------------------------------------------------


def classification_metrics(preds, labels) -> dict:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if len(preds) == 0:
        raise ValueError("empty input")
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    f1s = []
    for c in np.union1d(preds, labels):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return {"accuracy": float(np.mean(preds == labels)), "f1": float(np.mean(f1s))}


def regression_metrics(preds, targets) -> dict:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or len(preds) < 2:
        raise ValueError("need two equal-length arrays of at least 2 values")
    resid = targets - preds
    rmse = float(np.sqrt(np.mean(resid**2)))
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    if ss_tot == 0.0:
        return {"rmse": rmse, "r2": None, "r2_undefined": True}
    return {"rmse": rmse, "r2": 1.0 - float(np.sum(resid**2)) / ss_tot, "r2_undefined": False}


def score_outputs(outputs: np.ndarray, targets, task: str) -> float:
    """Scalar performance used by the perturbation tests (higher is better)."""
    if task == "classification":
        return float(np.mean(outputs.argmax(axis=1) == np.asarray(targets)))
    return -float(np.sqrt(np.mean((outputs - np.asarray(targets)) ** 2)))


def task_report(model: Module, X, y) -> dict:
    out = predict(model, X)
    if model_task(model) == "classification":
        return classification_metrics(out.argmax(axis=1), y)
    return regression_metrics(out, y)


# ---------------------------------------------------------------------------
# Perturbation tests
# ---------------------------------------------------------------------------


def rank_cells(heatmap: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flat cell indices from most to least relevant; ties in random order."""
    flat = np.asarray(heatmap, dtype=np.float64).ravel()
    tiebreak = rng.permutation(flat.size)
    return np.lexsort((tiebreak, -flat))


def _n_cells(f: float, total: int) -> int:
    return int(math.floor(f * total + 0.5))


def mask_top(x: np.ndarray, order: np.ndarray, k: int, fill) -> np.ndarray:
    """Replace the first ``k`` ranked cells by ``fill`` (C vector or T x C grid),
    or with ``fill="interpolate"`` by linear interpolation from unmasked neighbours."""
    T, C = x.shape
    out = x.copy().ravel()
    cells = order[:k]
    if isinstance(fill, str):
        if fill != "interpolate":
            raise ValueError(f"unknown fill {fill!r}")
        out[cells] = np.nan
        out = out.reshape(T, C)
        for c in range(C):
            col = out[:, c]
            if np.isnan(col).all():
                col[:] = 0.0
            elif np.isnan(col).any():
                out[:, c] = impute_linear(col[:, None])[:, 0]
        return out
    out[cells] = np.broadcast_to(fill, (T, C)).ravel()[cells]
    return out.reshape(T, C)


def deletion_test(
    model: Module,
    samples: np.ndarray,
    targets,
    heatmaps,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    fill_values=None,
    seed: int = 0,
    random_baseline: bool = True,
) -> dict:
    """Mask the top-f cells of every sample by heatmap rank and re-score.

    ``fill_values`` is a C vector (or T x C grid) used for masked cells, or
    "interpolate"; defaults to zeros, i.e. the mean of z-scored training data.
    Returns the curve, its trapezoid AUC of metric drop, and optionally the
    same quantities for a random ranking.
    """
    samples = np.asarray(samples, dtype=np.float64)
    maps = np.stack([h.values if isinstance(h, Heatmap) else np.asarray(h) for h in heatmaps])
    if maps.shape != samples.shape:
        raise ValueError(f"heatmaps {maps.shape} do not align with samples {samples.shape}")
    fractions = [float(f) for f in fractions]
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    N, T, C = samples.shape
    if fill_values is None:
        fill = np.zeros(C)
    elif isinstance(fill_values, str):
        fill = fill_values
    else:
        fill = np.asarray(fill_values, dtype=np.float64)
    task = model_task(model)
    base = score_outputs(predict(model, samples), targets, task)
    rng = np.random.default_rng(seed)
    orders = np.stack([rank_cells(m, rng) for m in maps])
    rand_orders = np.stack([rng.permutation(T * C) for _ in range(N)]) if random_baseline else None

    def curve(ords):
        vals = []
        for f in fractions:
            k = _n_cells(f, T * C)
            masked = np.stack([mask_top(samples[i], ords[i], k, fill) for i in range(N)])
            vals.append(score_outputs(predict(model, masked), targets, task))
        return vals

    def auc(vals):
        drops = [base - v for v in vals]
        return float(np.trapezoid(drops, fractions)) if len(fractions) > 1 else drops[0]

    vals = curve(orders)
    res = {"fractions": fractions, "base": base, "curve": vals, "auc": auc(vals)}
    if random_baseline:
        rvals = curve(rand_orders)
        res.update(random_curve=rvals, random_auc=auc(rvals))
    return res


def sensitivity_test(model: Module, samples, heatmaps, sigma: float = 0.5, top: float = 0.2,
                     repeats: int = 5, seed: int = 0) -> dict:
    """Output change from noise in the top-``top`` cells over noise in the bottom cells."""
    if sigma <= 0:
        return {"score": None, "undefined": True, "reason": "sigma must be positive"}
    samples = np.asarray(samples, dtype=np.float64)
    maps = np.stack([h.values if isinstance(h, Heatmap) else np.asarray(h) for h in heatmaps])
    N, T, C = samples.shape
    k = max(_n_cells(top, T * C), 1)
    rng = np.random.default_rng(seed)
    base = predict(model, samples)
    orders = np.stack([rank_cells(m, rng) for m in maps])
    deltas = {"top": [], "bottom": []}
    for _ in range(repeats):
        for part, cells in (("top", orders[:, :k]), ("bottom", orders[:, -k:])):
            noisy = samples.reshape(N, -1).copy()
            noise = rng.normal(0.0, sigma, size=(N, k))
            np.put_along_axis(noisy, cells, np.take_along_axis(noisy, cells, axis=1) + noise, axis=1)
            out = predict(model, noisy.reshape(N, T, C))
            deltas[part].append(np.abs(out - base).mean())
    top_d, bot_d = float(np.mean(deltas["top"])), float(np.mean(deltas["bottom"]))
    if bot_d == 0.0:
        return {"score": None, "undefined": True, "top": top_d, "bottom": bot_d}
    return {"score": top_d / bot_d, "undefined": False, "top": top_d, "bottom": bot_d}


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def bootstrap_ci(values, statistic: Callable = np.mean, n_resamples: int = 1000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval; resample r uses seed (seed, r)."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    stats_ = np.empty(n_resamples)
    for r in range(n_resamples):
        rr = np.random.default_rng([seed, r])
        stats_[r] = statistic(values[rr.integers(0, n, n)])
    lo, hi = np.quantile(stats_, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)


def wilcoxon_paired(a, b) -> dict:
    """Wilcoxon signed-rank test; exact null distribution below 20 pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a - b
    if np.all(d == 0):
        return {"statistic": 0.0, "p_value": 1.0, "method": "degenerate", "n": len(d)}
    method = "exact" if len(d) < 20 else "approx"
    res = stats.wilcoxon(a, b, method="exact" if method == "exact" else "approx")
    return {"statistic": float(res.statistic), "p_value": float(res.pvalue), "method": method, "n": len(d)}


def sign_test(wins: int, n: int) -> float:
    """One-sided p-value of observing >= wins successes out of n under p=0.5."""
    return float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue)


# ---------------------------------------------------------------------------
# Consensus experiment
# ---------------------------------------------------------------------------

CONSENSUS_STRATEGIES = ("multiplicative", "weighted", "concat_project")


def explanation_error(fused: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared difference between a min-max normalised map and H*."""
    h = minmax_normalize(Heatmap(fused, "fused")).values
    return float(np.mean((h - np.asarray(truth, dtype=np.float64)) ** 2))


@dataclass
class ConsensusResult:
    errors: dict[str, np.ndarray]
    weights: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    paired: dict[str, dict] = field(default_factory=dict)

    def mean_errors(self) -> dict[str, float]:
        return {k: float(v.mean()) for k, v in self.errors.items()}

    def ordering(self) -> list[str]:
        means = self.mean_errors()
        return sorted(means, key=means.get)

    def win_rate(self, a: str, b: str) -> float:
        return float(np.mean(self.errors[a] < self.errors[b]))

    def to_dict(self) -> dict:
        return {
            "mean_errors": self.mean_errors(),
            "ordering": self.ordering(),
            "weights": {k: list(v) for k, v in self.weights.items()},
            "paired": self.paired,
        }


def consensus_experiment(hr_set, ht_set, masks, concat_weights=None, fit_set=None, n_resamples: int = 1000,
                         seed: int = 0, strategies: Sequence[str] = CONSENSUS_STRATEGIES) -> ConsensusResult:
    """Per-strategy error of the normalised fused map against ground truth.

    ``concat_weights`` fixes the unconstrained projection; otherwise it is fit
    by least squares on ``fit_set`` = (hr, ht, masks) (defaults to the
    evaluation data itself, which favours concat_project).
    """
    if masks is None or len(masks) == 0:
        raise ValueError("consensus experiment needs ground-truth masks")
    hr_set = [h.values if isinstance(h, Heatmap) else np.asarray(h, dtype=np.float64) for h in hr_set]
    ht_set = [h.values if isinstance(h, Heatmap) else np.asarray(h, dtype=np.float64) for h in ht_set]
    masks = [np.asarray(m, dtype=np.float64) for m in masks]
    if not (len(hr_set) == len(ht_set) == len(masks)):
        raise ValueError("hr_set, ht_set and masks differ in length")
    weights = {}
    if "concat_project" in strategies:
        if concat_weights is None:
            fr, ft, fm = fit_set if fit_set is not None else (hr_set, ht_set, masks)
            concat_weights = fit_projection(fr, ft, fm, nonnegative=False)
        weights["concat_project"] = tuple(concat_weights)
    if "learned" in strategies:
        fr, ft, fm = fit_set if fit_set is not None else (hr_set, ht_set, masks)
        weights["learned"] = fit_projection(fr, ft, fm, nonnegative=True)

    cfgs = {
        "multiplicative": FusionConfig("multiplicative", alpha=1.0),
        "weighted": FusionConfig("weighted", alpha=0.5),
        "concat_project": FusionConfig("concat_project", weights=weights.get("concat_project", (0.5, 0.5, 0.0))),
        "learned": FusionConfig("learned", weights=weights.get("learned", (0.5, 0.5, 0.0))),
    }
    errors = {}
    for s in strategies:
        errs = []
        for a, b, m in zip(hr_set, ht_set, masks):
            ha = minmax_normalize(Heatmap(a, "resnet"))
            hb = minmax_normalize(Heatmap(b, "transformer"))
            errs.append(explanation_error(fuse(ha, hb, cfgs[s]).values, m))
        errors[s] = np.array(errs)
    result = ConsensusResult(errors=errors, weights=weights)
    if "multiplicative" in errors:
        for other in errors:
            if other == "multiplicative":
                continue
            diff = errors["multiplicative"] - errors[other]
            lo, hi = bootstrap_ci(diff, n_resamples=n_resamples, seed=seed)
            result.paired[f"multiplicative-{other}"] = {
                "mean_difference": float(diff.mean()),
                "ci95": [lo, hi],
                "win_rate": result.win_rate("multiplicative", other),
            }
    return result


def disjoint_noise_instance(rng: np.random.Generator, T: int = 50, C: int = 4, blob: int = 6,
                            noise_level: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """H* plus two non-overlapping noise blobs, one per branch.

    H* is a binary block on one channel; each branch adds a positive blob on
    cells disjoint from H* and from the other branch's blob.
    """
    truth = np.zeros((T, C))
    c0 = int(rng.integers(C))
    s0 = int(rng.integers(0, T - blob))
    truth[s0 : s0 + blob, c0] = 1.0
    free = np.flatnonzero(truth.ravel() == 0)
    picks = rng.choice(free, size=2 * blob, replace=False)
    n1, n2 = np.zeros(T * C), np.zeros(T * C)
    n1[picks[:blob]] = rng.uniform(0.5, 1.0, blob) * noise_level
    n2[picks[blob:]] = rng.uniform(0.5, 1.0, blob) * noise_level
    return truth + n1.reshape(T, C), truth + n2.reshape(T, C), truth


# ---------------------------------------------------------------------------
# Text metrics
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation (runs of word characters)."""
    return _TOKEN.findall(text.lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """Sentence BLEU-4 with add-one smoothing for n >= 2 when a clipped count is zero."""
    if not references:
        raise ValueError("bleu4 needs at least one reference")
    if not candidate:
        raise ValueError("bleu4 needs a nonempty candidate")
    log_p = 0.0
    for n in range(1, 5):
        cand = _ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            for g, c in _ngrams(ref, n).items():
                max_ref[g] = max(max_ref[g], c)
        clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
        total = sum(cand.values())
        if n >= 2 and clipped == 0:
            clipped, total = clipped + 1, total + 1
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total) / 4.0
    c = len(candidate)
    # closest reference length, shorter wins ties
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> dict:
    if not candidate or not reference:
        return {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    lcs = lcs_length(candidate, reference)
    p, r = lcs / len(candidate), lcs / len(reference)
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "f1": f1, "lcs": lcs}


_VOWEL_GROUP = re.compile(r"[aeiouy]+")


def count_syllables(word: str) -> int:
    """Vowel groups, minus one for a trailing silent 'e' (not '-le'); at least 1."""
    w = word.lower()
    n = len(_VOWEL_GROUP.findall(w))
    if n > 1 and w.endswith("e") and not w.endswith("le") and w[-2] not in "aeiouy":
        n -= 1
    return max(n, 1)


def fk_grade(words: int, sentences: int, syllables: int) -> float:
    return 0.39 * (words / sentences) + 11.8 * (syllables / words) - 15.59


def flesch_kincaid(text: str) -> float:
    words = [w for w in re.findall(r"[A-Za-z]+", text)]
    if not words:
        raise ValueError("text has no words")
    sentences = max(len([s for s in re.split(r"[.!?]+", text) if re.search(r"[A-Za-z]", s)]), 1)
    return fk_grade(len(words), sentences, sum(count_syllables(w) for w in words))


def text_metrics(candidate: str, reference: str) -> dict:
    c, r = tokenize(candidate), tokenize(reference)
    return {
        "bleu4": bleu4(c, [r]),
        "rouge_l_f1": rouge_l(c, r)["f1"],
        "flesch_kincaid": flesch_kincaid(candidate),
    }


def faithfulness_csv(result: dict) -> str:
    lines = ["fraction,metric,random_metric"]
    rand = result.get("random_curve") or [None] * len(result["fractions"])
    for f, v, rv in zip(result["fractions"], result["curve"], rand):
        lines.append(f"{f:.2f},{v:.10g},{'' if rv is None else format(rv, '.10g')}")
    return "\n".join(lines) + "\n"
