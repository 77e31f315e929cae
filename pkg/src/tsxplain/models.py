"""1D ResNet and 2D Transformer branches plus the gated hybrid."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tt
from .nn import BatchNorm1d, Conv1d, LayerNorm, Linear, Module
from .tensor import Tensor

TASKS = ("classification", "regression")


class ConfigError(ValueError):
    pass


@dataclass
class ResNetConfig:
    in_channels: int
    num_outputs: int = 2
    task: str = "classification"
    stem_filters: int = 16
    stem_kernel: int = 7
    stem_stride: int = 2
    pool_kernel: int = 2
    pool_stride: int = 2
    stage_filters: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    block_kernel: int = 3

    def __post_init__(self):
        self.stage_filters = tuple(int(f) for f in self.stage_filters)
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if any(b < a for a, b in zip(self.stage_filters, self.stage_filters[1:])):
            raise ConfigError("stage_filters must be nondecreasing")
        if self.stem_kernel % 2 == 0 or self.block_kernel % 2 == 0:
            raise ConfigError("convolution kernels must be odd")
        if self.task == "regression" and self.num_outputs != 1:
            raise ConfigError("regression models have exactly one output")

    def layers(self) -> list[tuple[int, int]]:
        """(kernel, stride) for every layer along the main path, in order."""
        out = [(self.stem_kernel, self.stem_stride), (self.pool_kernel, self.pool_stride)]
        n_blocks = len(self.stage_filters) * self.blocks_per_stage
        out += [(self.block_kernel, 1)] * (2 * n_blocks)
        return out

    def feature_length(self, T: int) -> int:
        pad = self.stem_kernel // 2
        t = (T + 2 * pad - self.stem_kernel) // self.stem_stride + 1
        return (t - self.pool_kernel) // self.pool_stride + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_filters"] = list(self.stage_filters)
        return d


@dataclass
class TransformerConfig:
    in_channels: int
    num_outputs: int = 2
    task: str = "classification"
    embed_dim: int = 32
    layers: int = 3
    heads: int = 4
    head_dim: int = 8
    attention_mode: str = "dense"
    window: int = 5
    window_from_layer: int = 1
    dropout: float = 0.1
    max_len: int = 512
    ff_ratio: int = 4

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.embed_dim != self.heads * self.head_dim:
            raise ConfigError(f"embed_dim {self.embed_dim} != heads*head_dim {self.heads * self.head_dim}")
        if self.layers < 1:
            raise ConfigError("need at least one layer")
        if self.attention_mode not in ("dense", "windowed"):
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if self.attention_mode == "windowed" and self.window % 2 == 0:
            raise ConfigError("attention window must be odd")
        if self.task == "regression" and self.num_outputs != 1:
            raise ConfigError("regression models have exactly one output")

    def windowed_layer(self, index: int) -> bool:
        return self.attention_mode == "windowed" and index >= self.window_from_layer

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardCache:
    """What the saliency methods need from one forward pass."""

    input: Tensor | None = None
    output: Tensor | None = None
    features: Tensor | None = None  # ResNet final conv maps, N x K x T'
    attention: list[np.ndarray] = field(default_factory=list)  # per layer, N x h x T x T
    branch_outputs: dict[str, Tensor] = field(default_factory=dict)


def _as_batch(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 3:
        raise ValueError(f"expected T x C or N x T x C input, got shape {x.shape}")
    return x, False


def _finish(out: Tensor, task: str) -> Tensor:
    return out.reshape(out.shape[0]) if task == "regression" else out


# ---------------------------------------------------------------------------
# ResNet branch
# ---------------------------------------------------------------------------


class ResidualBlock(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        self.conv1 = Conv1d(c_in, c_out, kernel, rng)
        self.bn1 = BatchNorm1d(c_out)
        self.conv2 = Conv1d(c_out, c_out, kernel, rng)
        self.bn2 = BatchNorm1d(c_out)
        self.proj = Conv1d(c_in, c_out, 1, rng, bias=False) if c_in != c_out else None

    def __call__(self, x: Tensor) -> Tensor:
        h = tt.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = self.proj(x) if self.proj is not None else x
        return tt.relu(h + skip)


class ResNet1D(Module):
    def __init__(self, cfg: ResNetConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.stem = Conv1d(cfg.in_channels, cfg.stem_filters, cfg.stem_kernel, rng, stride=cfg.stem_stride)
        self.stem_bn = BatchNorm1d(cfg.stem_filters)
        blocks = []
        c = cfg.stem_filters
        for f in cfg.stage_filters:
            for _ in range(cfg.blocks_per_stage):
                blocks.append(ResidualBlock(c, f, cfg.block_kernel, rng))
                c = f
        self.blocks = blocks
        self.head = Linear(c, cfg.num_outputs, rng)

    def forward(self, x, rng: np.random.Generator | None = None) -> tuple[Tensor, ForwardCache]:
        x, _ = _as_batch(x)
        T = x.shape[1]
        if T < self.cfg.stem_kernel or self.cfg.feature_length(T) < 1:
            raise ValueError(f"T={T} too short for the ResNet downsampling chain")
        h = x.transpose(0, 2, 1)
        h = tt.relu(self.stem_bn(self.stem(h)))
        h = tt.max_pool1d(h, self.cfg.pool_kernel, self.cfg.pool_stride)
        for block in self.blocks:
            h = block(h)
        out = _finish(self.head(tt.global_avg_pool(h)), self.cfg.task)
        return out, ForwardCache(input=x, output=out, features=h, branch_outputs={"resnet": out})

    __call__ = forward


def resnet_forward(x, model: ResNet1D) -> tuple[Tensor, ForwardCache]:
    return model.forward(x)


# ---------------------------------------------------------------------------
# Transformer branch
# ---------------------------------------------------------------------------


class PatchEmbedding(Module):
    """Each timestep's channel vector becomes one token."""

    def __init__(self, c_in: int, dim: int, max_len: int, rng: np.random.Generator):
        self.proj = Linear(c_in, dim, rng)
        self.norm = LayerNorm(dim)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(max_len, dim)), requires_grad=True)
        self.max_len = max_len

    def __call__(self, x: Tensor) -> Tensor:
        T = x.shape[-2]
        if T > self.max_len:
            raise ValueError(f"sequence length {T} exceeds max positions {self.max_len}")
        return self.norm(self.proj(x)) + self.pos[:T]


def patch_embed(x, W_p, b_p, pos=None, eps: float = 1e-5) -> Tensor:
    """Functional form: LayerNorm(x W_p + b_p) (+ positional rows)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    z = tt.layer_norm(x @ W_p + b_p, axis=-1, eps=eps)
    if pos is not None:
        z = z + (pos if isinstance(pos, Tensor) else Tensor(pos))[: x.shape[-2]]
    return z


def window_mask(T: int, w: int) -> np.ndarray:
    idx = np.arange(T)
    return np.abs(idx[:, None] - idx[None, :]) <= w


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, z: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        n, T, d = z.shape
        h, dk = self.heads, self.head_dim

        def split(t: Tensor) -> Tensor:
            return t.reshape(n, T, h, dk).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(z)), split(self.k(z)), split(self.v(z))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
        attn = tt.softmax(scores, axis=-1, mask=mask)
        mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(n, T, d)
        return self.out(mixed), attn.data


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, ff_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_ratio * dim, rng)
        self.ff2 = Linear(ff_ratio * dim, dim, rng)

    def __call__(self, z: Tensor, mask=None, p_drop: float = 0.0, rng=None) -> tuple[Tensor, np.ndarray]:
        a, maps = self.attn(self.norm1(z), mask)
        z = z + tt.dropout(a, p_drop, rng, self.training and rng is not None)
        f = self.ff2(tt.gelu(self.ff1(self.norm2(z))))
        z = z + tt.dropout(f, p_drop, rng, self.training and rng is not None)
        return z, maps


def mhsa_forward(z, block: TransformerBlock, mask=None) -> tuple[Tensor, list[np.ndarray]]:
    """One encoder layer; returns the new tokens and its per-head T x T maps."""
    z, single = _as_batch(z)
    out, maps = block(z, mask)
    if single:
        return out.reshape(out.shape[1:]), list(maps[0])
    return out, list(maps.transpose(1, 0, 2, 3))


class Transformer2D(Module):
    def __init__(self, cfg: TransformerConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.embed = PatchEmbedding(cfg.in_channels, cfg.embed_dim, cfg.max_len, rng)
        self.blocks = [TransformerBlock(cfg.embed_dim, cfg.heads, cfg.ff_ratio, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.embed_dim)
        self.head = Linear(cfg.embed_dim, cfg.num_outputs, rng)

    def forward(self, x, rng: np.random.Generator | None = None) -> tuple[Tensor, ForwardCache]:
        x, _ = _as_batch(x)
        T = x.shape[1]
        z = self.embed(x)
        maps = []
        mask = window_mask(T, self.cfg.window) if self.cfg.attention_mode == "windowed" else None
        for i, block in enumerate(self.blocks):
            z, m = block(z, mask if self.cfg.windowed_layer(i) else None, self.cfg.dropout, rng)
            maps.append(m)
        pooled = self.norm(z).mean(axis=1)
        out = _finish(self.head(pooled), self.cfg.task)
        return out, ForwardCache(input=x, output=out, attention=maps, branch_outputs={"transformer": out})

    __call__ = forward


def transformer_forward(x, model: Transformer2D) -> tuple[Tensor, ForwardCache]:
    return model.forward(x)


# ---------------------------------------------------------------------------
# Hybrid
# ---------------------------------------------------------------------------


def combine(resnet_out, transformer_out, gate) -> Tensor:
    """Convex combination ``gate * resnet + (1 - gate) * transformer``."""
    return gate * resnet_out + (1.0 - gate) * transformer_out


class HybridModel(Module):
    """Both branches share the input; a sigmoid gate mixes their outputs."""

    def __init__(self, resnet: ResNet1D, transformer: Transformer2D):
        if resnet.cfg.task != transformer.cfg.task or resnet.cfg.num_outputs != transformer.cfg.num_outputs:
            raise ConfigError("ResNet and Transformer branches must share task and output size")
        self.resnet = resnet
        self.transformer = transformer
        self.gate_logit = Tensor(np.zeros(1), requires_grad=True)

    @property
    def task(self) -> str:
        return self.resnet.cfg.task

    @property
    def gate(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.gate_logit.data[0])))

    def forward(self, x, rng: np.random.Generator | None = None) -> tuple[Tensor, ForwardCache]:
        x, _ = _as_batch(x)
        r_out, r_cache = self.resnet.forward(x, rng)
        t_out, t_cache = self.transformer.forward(x, rng)
        g = tt.sigmoid(self.gate_logit)
        if self.task == "classification":
            g = g.reshape(1, 1)
        out = combine(r_out, t_out, g)
        cache = ForwardCache(
            input=x,
            output=out,
            features=r_cache.features,
            attention=t_cache.attention,
            branch_outputs={"resnet": r_out, "transformer": t_out},
        )
        return out, cache

    __call__ = forward


def hybrid_predict(x, resnet: ResNet1D, transformer: Transformer2D, gate: float) -> Tensor:
    if resnet.cfg.task != transformer.cfg.task:
        raise ConfigError("task mismatch between branches")
    r_out, _ = resnet.forward(x)
    t_out, _ = transformer.forward(x)
    return combine(r_out, t_out, gate)


def branch_output(model: Module, x, branch: str | None = None) -> tuple[Tensor, ForwardCache]:
    """Forward pass returning the requested branch's own output."""
    out, cache = model.forward(x)
    if branch is not None and branch in cache.branch_outputs:
        out = cache.branch_outputs[branch]
    return out, cache


def build_model(kind: str, in_channels: int, num_outputs: int, task: str, seed: int = 0,
                resnet_kwargs: dict | None = None, transformer_kwargs: dict | None = None) -> Module:
    if kind not in ("resnet", "transformer", "hybrid"):
        raise ConfigError(f"unknown model kind {kind!r}; choose resnet, transformer or hybrid")
    rcfg = ResNetConfig(in_channels, num_outputs, task, **(resnet_kwargs or {}))
    tcfg = TransformerConfig(in_channels, num_outputs, task, **(transformer_kwargs or {}))
    if kind == "resnet":
        return ResNet1D(rcfg, seed)
    if kind == "transformer":
        return Transformer2D(tcfg, seed)
    return HybridModel(ResNet1D(rcfg, seed), Transformer2D(tcfg, seed + 1))


def model_config(model: Module) -> dict:
    if isinstance(model, HybridModel):
        return {"kind": "hybrid", "resnet": model.resnet.cfg.to_dict(), "transformer": model.transformer.cfg.to_dict()}
    if isinstance(model, ResNet1D):
        return {"kind": "resnet", "resnet": model.cfg.to_dict()}
    if isinstance(model, Transformer2D):
        return {"kind": "transformer", "transformer": model.cfg.to_dict()}
    raise TypeError(f"not a tsxplain model: {type(model).__name__}")


def model_from_config(cfg: dict) -> Module:
    kind = cfg["kind"]
    if kind == "resnet":
        return ResNet1D(ResNetConfig(**cfg["resnet"]))
    if kind == "transformer":
        return Transformer2D(TransformerConfig(**cfg["transformer"]))
    if kind == "hybrid":
        return HybridModel(ResNet1D(ResNetConfig(**cfg["resnet"])), Transformer2D(TransformerConfig(**cfg["transformer"])))
    raise ConfigError(f"unknown model kind {kind!r}")
