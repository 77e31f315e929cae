"""Per-branch relevance maps: Grad-CAM, attention rollout, channel saliency, ERF."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as tt
from .models import ForwardCache, HybridModel, ResNet1D, ResNetConfig, Transformer2D
from .nn import Module

SOURCES = ("resnet", "transformer", "fused")


@dataclass
class Heatmap:
    values: np.ndarray  # T x C, nonnegative
    source: str
    normalized: bool = False
    timestamps: list[str] | None = None
    channel_names: list[str] | None = None
    strategy: str | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError(f"heatmap values must be T x C, got {v.shape}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown heatmap source {self.source!r}")
        if (v < 0).any():
            raise ValueError("heatmap values must be nonnegative")
        if self.channel_names is not None and len(self.channel_names) != v.shape[1]:
            raise ValueError("channel_names length does not match heatmap width")
        if self.timestamps is not None and len(self.timestamps) != v.shape[0]:
            raise ValueError("timestamps length does not match heatmap length")
        self.values = v

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def with_values(self, values, **changes) -> Heatmap:
        return replace(self, values=values, **changes)

    def to_dict(self) -> dict:
        d = {
            "shape": list(self.values.shape),
            "values": self.values.reshape(-1).tolist(),
            "source": self.source,
            "normalized": self.normalized,
            "channel_names": self.channel_names,
        }
        if self.timestamps is not None:
            d["timestamps"] = self.timestamps
        if self.strategy is not None:
            d["strategy"] = self.strategy
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> Heatmap:
        T, C = d["shape"]
        return cls(
            values=np.asarray(d["values"], dtype=np.float64).reshape(T, C),
            source=d["source"],
            normalized=bool(d["normalized"]),
            channel_names=d.get("channel_names"),
            timestamps=d.get("timestamps"),
            strategy=d.get("strategy"),
        )

    @classmethod
    def from_json(cls, text: str) -> Heatmap:
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def _target_score(output: tt.Tensor, target) -> tt.Tensor:
    if output.ndim == 1:  # regression: one scalar output per sample
        if target not in (None, 0):
            raise IndexError(f"regression output has a single index, got {target}")
        return output.sum()
    n, k = output.shape
    tgt = np.broadcast_to(np.asarray(target, dtype=np.int64), (n,))
    if tgt.min() < 0 or tgt.max() >= k:
        raise IndexError(f"target index out of range for {k} outputs")
    return output[np.arange(n), tgt].sum()


def backprop_target(cache: ForwardCache, target=None, output: tt.Tensor | None = None) -> None:
    """Populate ``.grad`` of cached tensors with d(target score)/d(.).

    ``target`` defaults to the predicted class of each sample.
    """
    output = cache.output if output is None else output
    if output is None or not output.requires_grad:
        raise RuntimeError("forward cache has no gradient tape; rerun forward with gradients enabled")
    if target is None and output.ndim == 2:
        target = output.data.argmax(axis=1)
    if cache.input is not None:
        cache.input.grad = None
    tt.backward(_target_score(output, target))


def grad_cam_map(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """relu(sum_k alpha_k A_k(t)) with alpha_k the time-averaged gradient.

    Accepts K x T' or N x K x T' arrays.
    """
    alpha = gradients.mean(axis=-1, keepdims=True)
    return np.maximum((alpha * activations).sum(axis=-2), 0.0)


def grad_cam(cache: ForwardCache, target=None) -> np.ndarray:
    """Temporal Grad-CAM over the ResNet's final feature maps (N x T')."""
    if cache.features is None:
        raise ValueError("cache has no ResNet feature maps")
    out = cache.branch_outputs.get("resnet", cache.output)
    backprop_target(cache, target, out)
    if cache.features.grad is None:
        raise RuntimeError("no gradient reached the feature maps")
    return grad_cam_map(cache.features.data, cache.features.grad)


def channel_saliency(input_grad: np.ndarray) -> np.ndarray:
    """s(c) = mean_t |d output / d x[t, c]| for T x C or N x T x C gradients."""
    return np.abs(input_grad).mean(axis=-2)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def _check_stochastic(a: np.ndarray, tol: float = 1e-6) -> None:
    if (a < -tol).any() or not np.allclose(a.sum(axis=-1), 1.0, atol=tol):
        raise ValueError("attention maps must be row-stochastic")


def attention_rollout(maps: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Rollout of head-averaged, residual-corrected attention.

    ``maps`` holds one array per layer, shaped h x T x T (or N x h x T x T).
    Returns (R, relevance) with R = A_L ... A_1 and relevance the column mean.
    """
    if not maps:
        raise ValueError("need at least one attention layer")
    R = None
    for layer in maps:
        layer = np.asarray(layer, dtype=np.float64)
        _check_stochastic(layer)
        a = layer.mean(axis=-3)
        T = a.shape[-1]
        a = 0.5 * (a + np.eye(T))
        a = a / a.sum(axis=-1, keepdims=True)
        R = a if R is None else a @ R
    return R, R.mean(axis=-2)


def global_attention(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Mean over all layers and heads."""
    if not maps:
        raise ValueError("empty attention cache")
    stacked = np.stack([np.asarray(m, dtype=np.float64) for m in maps])  # L x (N x) h x T x T
    return stacked.mean(axis=(0, -3))


def sample_attention(cache: ForwardCache, i: int) -> list[np.ndarray]:
    return [layer[i] for layer in cache.attention]


def outer_heatmap(r: np.ndarray, s: np.ndarray) -> np.ndarray:
    """r(t) * s(c) with both factors normalised to unit sum (T x C)."""
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    rs, ss = r.sum(axis=-1, keepdims=True), s.sum(axis=-1, keepdims=True)
    r = np.divide(r, rs, out=np.zeros_like(r), where=rs > 0)
    s = np.divide(s, ss, out=np.zeros_like(s), where=ss > 0)
    return r[..., :, None] * s[..., None, :]


# ---------------------------------------------------------------------------
# Whole-model explanation
# ---------------------------------------------------------------------------


@dataclass
class BranchMaps:
    """Raw branch relevance for a batch of samples."""

    grad_cam: np.ndarray | None  # N x T'
    rollout: np.ndarray | None  # N x T
    global_attention: np.ndarray | None  # N x T x T
    channel_saliency: np.ndarray  # N x C
    attention: list[np.ndarray] = field(default_factory=list)
    targets: np.ndarray | None = None
    outputs: np.ndarray | None = None


def explain_batch(model: Module, X: np.ndarray, target=None) -> BranchMaps:
    """One forward pass with gradients, then per-branch backward passes."""
    model.eval()
    x = tt.Tensor(np.asarray(X, dtype=np.float64), requires_grad=True)
    if x.ndim == 2:
        x = tt.Tensor(x.data[None], requires_grad=True)
    out, cache = model.forward(x)
    cache.input = x
    if target is None and out.ndim == 2:
        target = out.data.argmax(axis=1)

    cam = rollout = glob = None
    if isinstance(model, (HybridModel, Transformer2D)):
        t_out = cache.branch_outputs["transformer"]
        backprop_target(cache, target, t_out)
        sal = channel_saliency(x.grad)
        _, rollout = attention_rollout(cache.attention)
        glob = global_attention(cache.attention)
    if isinstance(model, (HybridModel, ResNet1D)):
        r_out = cache.branch_outputs["resnet"]
        backprop_target(cache, target, r_out)
        cam = grad_cam_map(cache.features.data, cache.features.grad)
        if isinstance(model, ResNet1D):
            sal = channel_saliency(x.grad)
    return BranchMaps(
        grad_cam=cam,
        rollout=rollout,
        global_attention=glob,
        channel_saliency=sal,
        attention=cache.attention,
        targets=None if target is None else np.broadcast_to(target, (x.shape[0],)).copy(),
        outputs=out.data,
    )


def resnet_heatmap(cam: np.ndarray, saliency: np.ndarray, channel_names=None, timestamps=None) -> Heatmap:
    """Grad-CAM (T') broadcast over channels and modulated by s(c); stays at T' resolution."""
    return Heatmap(outer_heatmap(cam, saliency), "resnet", channel_names=channel_names,
                   timestamps=timestamps if timestamps is not None and len(timestamps) == len(cam) else None)


def transformer_heatmap(relevance: np.ndarray, saliency: np.ndarray, channel_names=None, timestamps=None) -> Heatmap:
    return Heatmap(outer_heatmap(relevance, saliency), "transformer", channel_names=channel_names,
                   timestamps=timestamps)


def branch_heatmaps(maps: BranchMaps, i: int, channel_names=None, timestamps=None) -> tuple[Heatmap | None, Heatmap | None]:
    hr = ht = None
    if maps.grad_cam is not None:
        hr = resnet_heatmap(maps.grad_cam[i], maps.channel_saliency[i], channel_names)
    if maps.rollout is not None:
        ht = transformer_heatmap(maps.rollout[i], maps.channel_saliency[i], channel_names, timestamps)
    return hr, ht


# ---------------------------------------------------------------------------
# Receptive field and filters
# ---------------------------------------------------------------------------


def effective_receptive_field(layers) -> list[int]:
    """ERF after each layer via ERF_l = ERF_{l-1} + (k_l - 1) * prod_{i<l} s_i.

    ``layers`` is a ResNetConfig or a sequence of (kernel, stride) pairs.
    """
    if isinstance(layers, ResNetConfig):
        layers = layers.layers()
    layers = list(layers)
    if not layers:
        raise ValueError("need at least one layer")
    erf, jump, out = 1, 1, []
    for k, s in layers:
        erf += (k - 1) * jump
        jump *= s
        out.append(erf)
    return out


def first_layer_filters(model: Module) -> dict:
    resnet = model.resnet if isinstance(model, HybridModel) else model
    if not isinstance(resnet, ResNet1D):
        raise TypeError("first-layer filters need a ResNet branch")
    w = resnet.stem.weight.data  # filters x C_in x K
    return {
        "kernel_size": int(w.shape[2]),
        "in_channels": int(w.shape[1]),
        "filters": [{"index": i, "weights": w[i].tolist()} for i in range(w.shape[0])],
    }


def attention_heads_export(maps: Sequence[np.ndarray], i: int = 0) -> dict:
    """Per-layer, per-head T x T maps of sample ``i`` for plotting."""
    return {
        "layers": [
            {"layer": l, "heads": [layer[i, h].tolist() for h in range(layer.shape[1])]}
            for l, layer in enumerate(maps)
        ]
    }
