"""Bounding-box arithmetic on normalized ``(x1, y1, x2, y2)`` boxes.

All functions take plain sequences or numpy arrays; boxes are never mutated.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

SELF_DIM = 12
PAIR_BASE_DIM = 16
PAIR_SWAP_DIM = 8
SPATIAL_DIM = SELF_DIM + PAIR_BASE_DIM + PAIR_SWAP_DIM  # 36

LOG_CLAMP = 1e-6


def validate_box(box) -> np.ndarray:
    """Return ``box`` as a float64 array, raising ``ValueError`` if invalid."""
    b = np.asarray(box, dtype=np.float64)
    if b.shape != (4,):
        raise ValueError(f"box must have 4 coordinates, got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise ValueError(f"box has non-finite coordinates: {b.tolist()}")
    if np.any(b < 0.0) or np.any(b > 1.0):
        raise ValueError(f"box coordinates outside [0, 1]: {b.tolist()}")
    if not (b[0] < b[2] and b[1] < b[3]):
        raise ValueError(f"box has non-positive extent: {b.tolist()}")
    return b


def center(box) -> tuple[float, float]:
    b = np.asarray(box, dtype=np.float64)
    return (float((b[0] + b[2]) / 2.0), float((b[1] + b[3]) / 2.0))


def centers(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([(b[:, 0] + b[:, 2]) / 2.0, (b[:, 1] + b[:, 3]) / 2.0], axis=1)


def pairwise_distances(boxes: Sequence) -> np.ndarray:
    """L2 distances between box centers, shape ``(n, n)``."""
    b = np.asarray(boxes, dtype=np.float64)
    if b.size == 0:
        raise ValueError("pairwise_distances needs at least one box")
    c = centers(b)
    diff = c[:, None, :] - c[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(dist, 0.0)
    return dist


def area(box) -> float:
    b = np.asarray(box, dtype=np.float64)
    return float(max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0))


def intersection(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return float(w * h)


def iou(a, b) -> float:
    inter = intersection(a, b)
    if inter == 0.0:
        return 0.0
    union = area(a) + area(b) - inter
    return float(min(max(inter / union, 0.0), 1.0))


def _log(x: float) -> float:
    return float(np.log(max(x, LOG_CLAMP)))


def _pair_block(bi: np.ndarray, bj: np.ndarray) -> np.ndarray:
    """16 relative features of ``bj`` as seen from ``bi``."""
    cxi, cyi = (bi[0] + bi[2]) / 2.0, (bi[1] + bi[3]) / 2.0
    cxj, cyj = (bj[0] + bj[2]) / 2.0, (bj[1] + bj[3]) / 2.0
    wi, hi = bi[2] - bi[0], bi[3] - bi[1]
    wj, hj = bj[2] - bj[0], bj[3] - bj[1]
    ai, aj = wi * hi, wj * hj
    dx, dy = cxj - cxi, cyj - cyi
    dist = float(np.hypot(dx, dy))
    inter = intersection(bi, bj)
    union = ai + aj - inter
    if dist > 1e-12:
        sin_a, cos_a = dy / dist, dx / dist
    else:
        sin_a, cos_a = 0.0, 0.0
    uw = max(bi[2], bj[2]) - min(bi[0], bj[0])
    uh = max(bi[3], bj[3]) - min(bi[1], bj[1])
    return np.array(
        [
            dx,
            dy,
            dist,
            inter / union if union > 0 else 0.0,
            inter / max(ai, LOG_CLAMP),
            inter / max(aj, LOG_CLAMP),
            _log(wi) - _log(wj),
            _log(hi) - _log(hj),
            _log(ai) - _log(aj),
            sin_a,
            cos_a,
            uw,
            uh,
            uw * uh,
            dx / max(wi, LOG_CLAMP),
            dy / max(hi, LOG_CLAMP),
        ]
    )


def _self_block(b: np.ndarray) -> np.ndarray:
    w, h = b[2] - b[0], b[3] - b[1]
    return np.array(
        [
            (b[0] + b[2]) / 2.0,
            (b[1] + b[3]) / 2.0,
            w,
            h,
            w * h,
            _log(w),
            _log(h),
            b[0],
            b[1],
            b[2],
            b[3],
            float(np.hypot(w, h)),
        ]
    )


def spatial_relation(i: int, boxes: Sequence) -> np.ndarray:
    """Spatial descriptor of box ``i`` relative to the rest of the scene.

    Returns a 36-vector: 12 self features (center, width, height, area,
    log width, log height, corners, diagonal) followed by the mean over all
    ``j != i`` of a 24-wide block made of the 16 relative features of ``j``
    seen from ``i`` and the first 8 features of ``i`` seen from ``j``.
    With a single box the pooled block is zero.
    """
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(b)
    if not 0 <= i < n:
        raise IndexError(f"box index {i} out of range for {n} boxes")
    pooled = np.zeros(PAIR_BASE_DIM + PAIR_SWAP_DIM)
    if n > 1:
        for j in range(n):
            if j == i:
                continue
            fwd = _pair_block(b[i], b[j])
            rev = _pair_block(b[j], b[i])[:PAIR_SWAP_DIM]
            pooled += np.concatenate([fwd, rev])
        pooled /= n - 1
    return np.concatenate([_self_block(b[i]), pooled])


def spatial_relations(boxes: Sequence) -> np.ndarray:
    """Stack :func:`spatial_relation` for every box, shape ``(n, 36)``."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([spatial_relation(i, b) for i in range(len(b))]) if len(b) else np.zeros((0, SPATIAL_DIM))
