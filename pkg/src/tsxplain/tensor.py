"""Dense float64 tensors with a reverse-mode gradient tape.

Every op builds a node that remembers its parents and a closure mapping the
upstream gradient to one gradient per parent. ``backward`` orders the graph
reachable from a scalar loss into a :class:`Tape` and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "DetachedError",
    "CyclicTapeError",
    "tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "matmul",
    "conv1d",
    "softmax",
    "log_softmax",
    "layer_norm",
    "batch_norm",
    "max_pool1d",
    "global_avg_pool",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "concat",
    "stack",
    "dropout",
    "cross_entropy",
    "huber",
    "mse",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class DetachedError(RuntimeError):
    """backward() was asked to differentiate something that is not on a tape."""


class CyclicTapeError(RuntimeError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


_next_id = 0


def _new_id() -> int:
    global _next_id
    _next_id += 1
    return _next_id


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.writeable:
            arr = arr.copy()
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = _new_id()
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- reductions / shape ---------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> Tensor:
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self) -> Tensor:
        return transpose(self, None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    nlead = grad.ndim - len(shape)
    if nlead > 0:
        grad = grad.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered nodes reachable from one output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def record(cls, output: Tensor) -> Tape:
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack: list[tuple[Tensor, int]] = [(output, 0)]
        while stack:
            node, i = stack.pop()
            if i == 0:
                if state.get(node.id) == 2:
                    continue
                state[node.id] = 1
            if i < len(node._parents):
                stack.append((node, i + 1))
                parent = node._parents[i]
                st = state.get(parent.id)
                if st == 1:
                    raise CyclicTapeError(f"cycle through node {parent.op}")
                if st is None and parent.requires_grad:
                    stack.append((parent, 0))
            else:
                state[node.id] = 2
                order.append(node)
        return cls(order)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node on the tape.

    Leaves accumulate across calls; intermediate nodes are overwritten so
    activations (e.g. Grad-CAM feature maps) can be inspected afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedError("loss does not depend on any tensor with requires_grad=True")
    if tape is None:
        tape = Tape.record(loss)
    elif not tape.nodes or tape.nodes[-1] is not loss:
        raise DetachedError("loss is not the output recorded on this tape")

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return tape


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    return _node(x**p, (a,), lambda g: (g * p * x ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)  # non-finite results are rejected by _node
    return _node(y, (a,), lambda g: (g / x,), "log")


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _node(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    fancy = _is_fancy(idx)

    def bw(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _node(a.data[idx], (a,), bw, "getitem")


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    n = len(tensors)
    return _node(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


def matmul(a, b) -> Tensor:
    """Batched matrix product; operands need at least two dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# Normalisation, attention and convolution primitives
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax; ``mask`` False entries get probability exactly 0."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    with np.errstate(invalid="ignore"):
        e = np.exp(x - m)
        y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    y = x - lse
    p = np.exp(y)
    return _node(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def _normalize(a: Tensor, axes: tuple[int, ...], eps: float, op: str):
    x = a.data
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (a,), bw, op), mu, var


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-(population-)variance along ``axis``; no affine."""
    out, _, _ = _normalize(a, (axis,), eps, "layer_norm")
    return out


def batch_norm(
    a: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm for N x C x T input.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    shape = (1, -1, 1)
    if training:
        xhat, mu, var = _normalize(a, (0, 2), eps, "batch_norm")
        n = a.shape[0] * a.shape[2]
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.reshape(-1)
        running_var *= momentum
        running_var += (1.0 - momentum) * unbiased
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
        mu = running_mean.reshape(shape)
        xhat = _node((a.data - mu) * inv, (a,), lambda g: (g * inv,), "batch_norm_eval")
    return xhat * gamma.reshape(shape) + beta.reshape(shape)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation.

    x: (C_in, T) or (N, C_in, T); w: (C_out, C_in, K); b: (C_out,).
    Output length is ``(T + 2*padding - K) // stride + 1``.
    """
    unbatched = x.ndim == 2
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d expects (N,C,T) input and (O,C,K) kernels, got {x.shape}, {w.shape}")
    n, cin, t = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ValueError(f"conv1d channel mismatch: input has {cin}, kernels expect {wcin}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if k > t + 2 * padding:
        raise ValueError(f"kernel size {k} exceeds padded length {t + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    tp = xp.shape[2]
    t_out = (tp - k) // stride + 1
    # cols: (N, T_out, C_in, K)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, : (t_out - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n, t_out, cin * k)
    wmat = w.data.reshape(cout, cin * k)
    out = cols @ wmat.T  # (N, T_out, C_out)
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def bw(g):
        gt = g.transpose(0, 2, 1)  # (N, T_out, C_out)
        gw = np.tensordot(gt, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        gcols = (gt @ wmat).reshape(n, t_out, cin, k)
        gxp = np.zeros((n, cin, tp))
        span = (t_out - 1) * stride + 1
        for j in range(k):
            gxp[:, :, j : j + span : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding : padding + t] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    res = _node(out, parents, bw, "conv1d")
    return reshape(res, res.shape[1:]) if unbatched else res


def max_pool1d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Max over windows along the last axis of an (..., T) tensor."""
    stride = stride or kernel
    t = x.shape[-1]
    if kernel > t:
        raise ValueError(f"pool kernel {kernel} exceeds length {t}")
    t_out = (t - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=-1)[..., : (t_out - 1) * stride + 1 : stride, :]
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    src = arg + np.arange(t_out) * stride

    def bw(g):
        # windows overlap when stride < kernel, so scatter with add.at
        flat_g = np.zeros(x.shape).reshape(-1, t)
        flat_src = src.reshape(-1, t_out)
        rows = np.repeat(np.arange(flat_g.shape[0]), t_out)
        np.add.at(flat_g, (rows, flat_src.reshape(-1)), g.reshape(-1))
        return (flat_g.reshape(x.shape),)

    return _node(np.ascontiguousarray(out), (x,), bw, "max_pool1d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the last (time) axis."""
    return tmean(x, axis=-1)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy from raw logits (N x K, or K for one sample)."""
    single = logits.ndim == 1
    if single:
        logits = reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range for {k} classes")
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(n), labels))
    losses = neg(picked)
    if reduction == "none":
        return losses
    return tmean(losses) if reduction == "mean" else tsum(losses)


def huber(pred: Tensor, target, delta: float = 1.0, reduction: str = "mean") -> Tensor:
    r = _as_tensor(pred) - _as_tensor(target)
    rd = r.data
    small = np.abs(rd) <= delta
    val = np.where(small, 0.5 * rd * rd, delta * (np.abs(rd) - 0.5 * delta))
    loss = _node(val, (r,), lambda g: (g * np.where(small, rd, delta * np.sign(rd)),), "huber")
    if reduction == "none":
        return loss
    return tmean(loss) if reduction == "mean" else tsum(loss)


def mse(pred: Tensor, target) -> Tensor:
    r = _as_tensor(pred) - _as_tensor(target)
    return tmean(r * r)
