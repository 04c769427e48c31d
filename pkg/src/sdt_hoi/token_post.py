"""Token post-processing: intra-class diversification and spatial fusion."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import nn_core as nn
from .nn_core import MASK_FILL, Tensor

STORE_THRESHOLD = 0.5
CAPACITY = 64
SAMPLES = 8


@dataclass
class ClassMemory:
    """Per-class FIFO buffers of confident token features."""

    capacity: int = CAPACITY
    threshold: float = STORE_THRESHOLD
    buffers: dict[int, deque] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(b) for b in self.buffers.values())

    def buffer(self, class_id: int) -> deque:
        return self.buffers.get(int(class_id), deque())

    def to_json(self) -> dict:
        return {
            "capacity": self.capacity,
            "threshold": self.threshold,
            "buffers": {
                str(c): [{"feature": f.tolist(), "score": s} for f, s in buf] for c, buf in sorted(self.buffers.items())
            },
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "ClassMemory":
        mem = cls(capacity=int(doc["capacity"]), threshold=float(doc["threshold"]))
        for c, entries in doc["buffers"].items():
            buf = deque(maxlen=mem.capacity)
            for e in entries:
                buf.append((np.asarray(e["feature"], dtype=np.float64), float(e["score"])))
            mem.buffers[int(c)] = buf
        return mem


def memory_update(mem: ClassMemory, token) -> ClassMemory:
    """Store ``token.feature`` in its class buffer if its score clears the threshold."""
    if token.score < mem.threshold:
        return mem
    buf = mem.buffers.get(int(token.class_id))
    if buf is None:
        buf = mem.buffers[int(token.class_id)] = deque(maxlen=mem.capacity)
    buf.append((np.array(token.feature, dtype=np.float64), float(token.score)))
    return mem


def sample_memory(mem: ClassMemory, class_ids, d: int, l: int = SAMPLES, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Draw up to ``l`` stored features per token without replacement.

    Returns ``(keys, valid)`` with shapes ``(n, l, d)`` and ``(n, l)``; slots
    past the buffer size are zero and marked invalid.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(class_ids)
    keys = np.zeros((n, l, d))
    valid = np.zeros((n, l), dtype=bool)
    for i, c in enumerate(class_ids):
        buf = mem.buffer(c)
        if not buf:
            continue
        k = min(l, len(buf))
        pick = rng.choice(len(buf), size=k, replace=False)
        for s, p in enumerate(pick):
            keys[i, s] = buf[p][0]
        valid[i, :k] = True
    return keys, valid


def icd_attention(T, keys: np.ndarray, valid: np.ndarray, params: Mapping[str, Tensor], prefix: str = "icd") -> Tensor:
    """Cross-attention from tokens to sampled same-class memory, with residual.

    ``T`` is ``(..., n, d)``; ``keys`` ``(..., n, l, d)`` are constants. Tokens
    whose ``valid`` row is empty are returned unchanged.
    """
    T = nn.as_tensor(T)
    d = T.shape[-1]
    q = nn.matmul(T, params[f"{prefix}.wq"])  # (..., n, d)
    k = nn.matmul(Tensor(keys), params[f"{prefix}.wk"])  # (..., n, l, d)
    v = nn.matmul(Tensor(keys), params[f"{prefix}.wv"])
    qe = nn.reshape(q, (*q.shape[:-1], 1, d))
    scores = nn.reshape(nn.matmul(qe, nn.transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))), valid.shape)
    scores = scores * (1.0 / np.sqrt(d))
    any_valid = valid.any(axis=-1, keepdims=True)
    bias = np.where(valid | ~any_valid, 0.0, MASK_FILL)
    w = nn.softmax(scores, bias=bias, axis=-1) * any_valid.astype(np.float64)
    we = nn.reshape(w, (*w.shape[:-1], 1, w.shape[-1]))
    agg = nn.reshape(nn.matmul(we, v), T.shape)
    return T + agg


def icd_diversify(token, mem: ClassMemory, params: Mapping[str, Tensor], l: int = SAMPLES, rng=None) -> np.ndarray:
    """Diversify a single token's feature against its class memory."""
    feat = np.asarray(token.feature, dtype=np.float64)
    keys, valid = sample_memory(mem, [token.class_id], feat.shape[-1], l, rng)
    if not valid.any():
        return feat.copy()
    return icd_attention(feat[None, :], keys, valid, params).data[0]


def init_icd(params: nn.ParamStore, d: int, rng, prefix: str = "icd") -> None:
    s = 1.0 / np.sqrt(d)
    for name in ("wq", "wk", "wv"):
        params.add(f"{prefix}.{name}", rng.normal(0.0, s, (d, d)))


def spatial_fuse(t, p, params: Mapping[str, Tensor], prefix: str = "sf") -> Tensor:
    """``FFN([t; p])`` mapping back to the token width."""
    t, p = nn.as_tensor(t), nn.as_tensor(p)
    expected = params[f"{prefix}.ffn.w1"].shape[0]
    if t.shape[-1] + p.shape[-1] != expected:
        raise ValueError(f"spatial_fuse: got {t.shape[-1]}+{p.shape[-1]} features, expected {expected}")
    return nn.ffn(nn.concat([t, p], axis=-1), params, f"{prefix}.ffn")


def init_spatial_fuse(params: nn.ParamStore, d: int, dp: int, hidden: int, rng, prefix: str = "sf") -> None:
    params.add(f"{prefix}.ffn.w1", rng.normal(0.0, 1.0 / np.sqrt(d + dp), (d + dp, hidden)))
    params.add(f"{prefix}.ffn.b1", np.zeros(hidden))
    params.add(f"{prefix}.ffn.w2", rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, d)))
    params.add(f"{prefix}.ffn.b2", np.zeros(d))
