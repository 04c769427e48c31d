"""Far-near distance attention.

Each token splits the others into a far half and a near half by the median of
its row of center distances. A token encoder layer runs one attention block
restricted to far tokens and then one restricted to near tokens; a token can
always attend to itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from . import nn_core as nn
from .nn_core import MASK_FILL, Tensor

ADDITIVE = "additive"
MULTIPLICATIVE = "multiplicative-literal"
MASK_MODES = (ADDITIVE, MULTIPLICATIVE)
OUT_INIT = 0.1


@dataclass(frozen=True)
class MaskPair:
    far: np.ndarray
    near: np.ndarray


@dataclass(frozen=True)
class TokenEncoderConfig:
    layers: int = 3
    heads: int = 8
    hidden: int = 1024
    mask_mode: str = ADDITIVE
    dropout: float = 0.0

    def check(self, d: int) -> None:
        if d % self.heads:
            raise ValueError(f"token dimension {d} not divisible by {self.heads} heads")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")


def build_masks(D) -> MaskPair:
    """Far/near masks from a distance matrix.

    ``far[i, j] = 1`` iff ``D[i, j]`` exceeds the median of row ``i`` (taken
    over the full row, zero diagonal included) or ``i == j``. Ties with the
    median go to the near side.
    """
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    med = np.median(D, axis=1, keepdims=True)
    eye = np.eye(n, dtype=bool)
    far = (D > med) | eye
    near = ~far | eye
    return MaskPair(far=far.astype(np.int8), near=near.astype(np.int8))


def full_masks(n: int) -> MaskPair:
    """All-ones masks: both blocks reduce to plain self-attention."""
    ones = np.ones((n, n), dtype=np.int8)
    return MaskPair(far=ones, near=ones.copy())


def attention_bias(mask, key_valid=None, mode: str = ADDITIVE):
    """Split a binary mask into ``(multiplier, additive_bias)`` for the scores."""
    mask = np.asarray(mask)
    bias = np.zeros(mask.shape, dtype=np.float64)
    mult = None
    if mode == ADDITIVE:
        bias = np.where(mask > 0, 0.0, MASK_FILL)
    elif mode == MULTIPLICATIVE:
        mult = mask.astype(np.float64)
    else:
        raise ValueError(f"unknown mask_mode {mode!r}")
    if key_valid is not None:
        kv = np.asarray(key_valid, dtype=bool)
        bias = bias + np.where(kv[..., None, :], 0.0, MASK_FILL)
    return mult, bias


def _check_diagonal(mask, key_valid=None) -> None:
    diag = np.diagonal(np.asarray(mask), axis1=-2, axis2=-1)
    if key_valid is not None:
        diag = np.where(np.asarray(key_valid, dtype=bool), diag, 1)
    if np.any(diag == 0):
        raise ValueError("attention mask must keep every token's diagonal entry")


def multi_head_attention(
    X: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    heads: int,
    mult=None,
    bias=None,
    dropout_p: float = 0.0,
    rng=None,
) -> tuple[Tensor, np.ndarray]:
    """Residual multi-head self-attention over the second-to-last axis.

    ``X`` has shape ``(..., n, d)``. ``mult`` (optional) multiplies the raw
    scores; ``bias`` is added before the softmax. Returns the updated tokens
    and the attention weights with shape ``(..., heads, n, n)``.
    """
    X = nn.as_tensor(X)
    *lead, n, d = X.shape
    dh = d // heads
    q = nn.matmul(X, params[f"{prefix}.wq"])
    k = nn.matmul(X, params[f"{prefix}.wk"])
    v = nn.matmul(X, params[f"{prefix}.wv"])
    nl = len(lead)
    split = (*lead, n, heads, dh)
    perm = (*range(nl), nl + 1, nl, nl + 2)
    q = nn.transpose(nn.reshape(q, split), perm)
    k = nn.transpose(nn.reshape(k, split), perm)
    v = nn.transpose(nn.reshape(v, split), perm)
    kt = nn.transpose(k, (*range(nl + 1), nl + 2, nl + 1))
    scores = nn.matmul(q, kt) * (1.0 / np.sqrt(dh))
    if mult is not None:
        scores = scores * np.expand_dims(mult, -3)
    b = None if bias is None else np.expand_dims(bias, -3)
    weights = nn.softmax(scores, bias=b, axis=-1)
    attn = nn.dropout(weights, dropout_p, rng)
    ctx = nn.matmul(attn, v)
    ctx = nn.reshape(nn.transpose(ctx, perm), (*lead, n, d))
    out = nn.linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    out = nn.dropout(out, dropout_p, rng)
    return X + out, weights.data


def masked_mhsa(
    X,
    mask,
    params: Mapping[str, Tensor],
    prefix: str = "blk",
    heads: int = 8,
    mask_mode: str = ADDITIVE,
    key_valid=None,
    dropout_p: float = 0.0,
    rng=None,
) -> tuple[Tensor, np.ndarray]:
    """Distance-guided multi-head self-attention with residual.

    The same binary ``mask`` is shared by every head. In additive mode masked
    pairs get ``-1e9`` before the softmax; in ``multiplicative-literal`` mode
    the scores are multiplied by the mask, so masked pairs keep logit 0.
    ``key_valid`` marks padding tokens, which are always excluded.
    """
    _check_diagonal(mask, key_valid)
    mult, bias = attention_bias(mask, key_valid, mask_mode)
    return multi_head_attention(X, params, prefix, heads, mult, bias, dropout_p, rng)


def encoder_block(
    X,
    mask,
    params: Mapping[str, Tensor],
    prefix: str,
    heads: int,
    mask_mode: str = ADDITIVE,
    key_valid=None,
    dropout_p: float = 0.0,
    rng=None,
) -> tuple[Tensor, np.ndarray]:
    """Post-norm block: ``LN(x + attn(x))`` then ``LN(x + FFN(x))``."""
    h, w = masked_mhsa(X, mask, params, prefix, heads, mask_mode, key_valid, dropout_p, rng)
    h = nn.layer_norm(h, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    f = nn.dropout(nn.ffn(h, params, f"{prefix}.ffn", dropout_p, rng), dropout_p, rng)
    h = nn.layer_norm(h + f, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return h, w


def init_block(params: nn.ParamStore, prefix: str, d: int, hidden: int, rng: np.random.Generator) -> None:
    """Register the weights of one attention + FFN block under ``prefix``."""
    s = 1.0 / np.sqrt(d)
    for name in ("wq", "wk", "wv"):
        params.add(f"{prefix}.{name}", rng.normal(0.0, s, (d, d)))
    # output projections start small so a fresh block is close to the identity
    params.add(f"{prefix}.wo", rng.normal(0.0, OUT_INIT * s, (d, d)))
    params.add(f"{prefix}.bo", np.zeros(d))
    params.add(f"{prefix}.ffn.w1", rng.normal(0.0, s, (d, hidden)))
    params.add(f"{prefix}.ffn.b1", np.zeros(hidden))
    params.add(f"{prefix}.ffn.w2", rng.normal(0.0, OUT_INIT / np.sqrt(hidden), (hidden, d)))
    params.add(f"{prefix}.ffn.b2", np.zeros(d))
    for ln in ("ln1", "ln2"):
        params.add(f"{prefix}.{ln}.g", np.ones(d))
        params.add(f"{prefix}.{ln}.b", np.zeros(d))


def init_token_encoder(params: nn.ParamStore, d: int, config: TokenEncoderConfig, rng, prefix: str = "tenc") -> None:
    config.check(d)
    for layer in range(config.layers):
        for kind in ("far", "near"):
            init_block(params, f"{prefix}.{layer}.{kind}", d, config.hidden, rng)


def token_encoder_forward(
    X,
    masks: MaskPair,
    params: Mapping[str, Tensor],
    config: TokenEncoderConfig,
    key_valid=None,
    rng=None,
    prefix: str = "tenc",
    record: list | None = None,
) -> Tensor:
    """Apply ``config.layers`` layers, each a far block followed by a near block.

    When ``record`` is a list, ``(layer, kind, weights)`` tuples are appended
    to it, one per block.
    """
    X = nn.as_tensor(X)
    for layer in range(config.layers):
        for kind, mask in (("far", masks.far), ("near", masks.near)):
            X, w = encoder_block(
                X,
                mask,
                params,
                f"{prefix}.{layer}.{kind}",
                config.heads,
                config.mask_mode,
                key_valid,
                config.dropout,
                rng,
            )
            if record is not None:
                record.append((layer, kind, w))
    return X


class AttentionRecord(NamedTuple):
    i: int
    j: int
    distance: float
    weight: float


BLOCK_KINDS = ("far", "near", "combined", "visible")


def record_attention(
    X,
    masks: MaskPair,
    params: Mapping[str, Tensor],
    config: TokenEncoderConfig,
    D,
    block_kind: str = "combined",
    prefix: str = "tenc",
) -> list[AttentionRecord]:
    """Head-averaged attention weight for every ordered token pair.

    ``block_kind`` selects which blocks are averaged: ``"far"``, ``"near"``,
    ``"combined"`` (all blocks of all layers, masked entries count as zero)
    or ``"visible"`` (per pair, only the blocks whose mask admits it).
    Dropout is never applied here.
    """
    if block_kind not in BLOCK_KINDS:
        raise ValueError(f"unknown block_kind {block_kind!r}")
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    trace: list = []
    quiet = TokenEncoderConfig(config.layers, config.heads, config.hidden, config.mask_mode, 0.0)
    token_encoder_forward(X, masks, params, quiet, prefix=prefix, record=trace)
    if not trace:
        mean = np.eye(n)
    elif block_kind == "visible":
        admit = {"far": np.asarray(masks.far, dtype=np.float64), "near": np.asarray(masks.near, dtype=np.float64)}
        total = sum(w.mean(axis=-3) * admit[kind] for _, kind, w in trace)
        count = sum(admit[kind] for _, kind, _ in trace)
        mean = total / np.maximum(count, 1.0)
    else:
        picked = [w.mean(axis=-3) for _, kind, w in trace if block_kind in ("combined", kind)]
        mean = np.mean(picked, axis=0)
    return [AttentionRecord(i, j, float(D[i, j]), float(mean[i, j])) for i in range(n) for j in range(n)]
