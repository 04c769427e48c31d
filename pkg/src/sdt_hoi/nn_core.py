"""Minimal reverse-mode autodiff over float64 numpy arrays.

A :class:`Tensor` records the op that produced it and a closure that pushes
its gradient to its parents. Calling :func:`backward` on a scalar walks the
recorded graph in reverse topological order. Only what the interaction model
needs is implemented; every op broadcasts like numpy.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

DTYPE = np.float64
MASK_FILL = -1e9
LN_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar tensor")
        if not self.requires_grad:
            raise RuntimeError("no recorded forward pass: tensor does not depend on any parameter")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(-g)

    return _make(-a.data, (a,), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0

    def bw(g):
        a._accum(g * on)

    return _make(np.where(on, a.data, 0.0), (a,), bw)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(np.atleast_1d(a.data)).reshape(a.shape)

    def bw(g):
        a._accum(g * s * (1.0 - s))

    return _make(s, (a,), bw)


def softplus(a) -> Tensor:
    """``log(1 + exp(x))`` computed without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        a._accum(g * _sigmoid_np(np.atleast_1d(x)).reshape(x.shape))

    return _make(out, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accum(g / a.data)

    return _make(np.log(a.data), (a,), bw)


def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant exponent; ``p == 0`` gives ones."""
    a = as_tensor(a)
    if p == 0:
        return Tensor(np.ones_like(a.data))

    def bw(g):
        a._accum(g * p * a.data ** (p - 1.0))

    return _make(a.data**p, (a,), bw)


# ---------------------------------------------------------------------------
# shape and reduction


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands with at least 2 axes, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold leading axes instead of a batched outer product
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b._accum(gb)

    return _make(a.data @ b.data, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        a._accum(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        a._accum(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bw)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def concat(tensors: list, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(part)

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return _make(a.data[idx], (a,), bw)


# ---------------------------------------------------------------------------
# fused blocks


def softmax(a, bias=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` after adding a constant ``bias`` (e.g. a mask)."""
    a = as_tensor(a)
    x = a.data if bias is None else a.data + bias
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        a._accum(s * (g - np.sum(g * s, axis=axis, keepdims=True)))

    return _make(s, (a,), bw)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        if gain.requires_grad:
            gain._accum(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            gx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
            x._accum(gx)

    return _make(out, (x, gain, bias), bw)


def linear(x, W, b=None) -> Tensor:
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {W.shape}")
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), W), (W.shape[1],))
    else:
        y = matmul(x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape[-1] != W.shape[1]:
            raise ValueError(f"linear: bias {b.shape} does not match weight {W.shape}")
        y = add(y, b)
    return y


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)


def ffn(x, params: Mapping[str, Tensor], prefix: str, dropout_p: float = 0.0, rng=None) -> Tensor:
    """Two linear layers with a rectifier in between: ``{prefix}.w1/b1/w2/b2``."""
    h = relu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    h = dropout(h, dropout_p, rng)
    return linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def softmax_np(row, axis: int = -1) -> np.ndarray:
    return softmax(np.asarray(row, dtype=DTYPE), axis=axis).data


def sigmoid_np(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return _sigmoid_np(np.atleast_1d(x)).reshape(x.shape)


# ---------------------------------------------------------------------------
# parameters, gradients, optimizer


class ParamStore(OrderedDict):
    """Ordered mapping ``name -> Tensor`` of trainable tensors."""

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=not frozen, name=name)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.items()}

    def trainable(self) -> list[str]:
        return [k for k, v in self.items() if v.requires_grad]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self) ^ set(arrays)
        if missing:
            raise ValueError(f"parameter names differ: {sorted(missing)}")
        for k, v in arrays.items():
            v = np.asarray(v, dtype=DTYPE)
            if v.shape != self[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self[k].shape}")
            self[k].data = v.copy()


GradStore = dict  # name -> np.ndarray, shape-matched to ParamStore


def backward(loss: Tensor, params: ParamStore) -> GradStore:
    """Backpropagate ``loss`` and return one gradient array per parameter."""
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor produced by a forward pass")
    params.zero_grad()
    loss.backward()
    grads = GradStore()
    for name, p in params.items():
        grads[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
    return grads


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParamStore,
    eps: float = 1e-4,
    samples: int = 200,
    seed: int = 0,
    exclude: Iterable[str] = (),
) -> tuple[float, dict[str, float]]:
    """Compare analytic gradients against central differences.

    Samples up to ``samples`` coordinates per tensor (all if fewer) and
    returns ``(max_rel_err, per_tensor_max)``. Frozen or excluded tensors are
    skipped and absent from the report.
    """
    rng = np.random.default_rng(seed)
    skip = set(exclude)
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is NaN or infinite")
    grads = backward(loss, params)
    report: dict[str, float] = {}
    for name, p in params.items():
        if name in skip or not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        worst = 0.0
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            lp = float(loss_fn().data)
            flat[k] = orig - eps
            lm = float(loss_fn().data)
            flat[k] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError(f"loss is NaN while perturbing {name}[{k}]")
            num = (lp - lm) / (2.0 * eps)
            ana = float(grads[name].reshape(-1)[k])
            rel = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, rel)
        report[name] = worst
    return (max(report.values()) if report else 0.0), report


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: ParamStore,
    grads: GradStore,
    state: AdamWState,
    lr: float = 2e-4,
    weight_decay: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamWState:
    """One AdamW update in place: decoupled decay, then bias-corrected moments."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def step_lr(base_lr: float, epoch: int, drop_epoch: int, factor: float = 0.1) -> float:
    """Learning rate for 0-based ``epoch``: scaled by ``factor`` from ``drop_epoch`` on."""
    return base_lr * factor if epoch >= drop_epoch else base_lr


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, params: ParamStore, config: Mapping, extra: Mapping | None = None) -> None:
    doc = {
        "config_hash": config_hash(config),
        "config": dict(config),
        "params": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()} for k, v in params.items()},
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path, params: ParamStore | None = None) -> dict:
    """Read a checkpoint; if ``params`` is given, load into it (shapes must match)."""
    doc = json.loads(Path(path).read_text())
    arrays = {k: np.asarray(v["data"], dtype=DTYPE).reshape(v["shape"]) for k, v in doc["params"].items()}
    if params is not None:
        params.load_arrays(arrays)
    doc["arrays"] = arrays
    return doc
