"""Human-object pairing, global-context fusion, interaction encoder and verb head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import nn_core as nn
from .fnda import encoder_block, init_block
from .nn_core import Tensor


@dataclass
class InteractionPair:
    """One scored candidate: ``verb_scores`` may be a graph node (training) or an array."""

    human_index: int
    object_index: int
    representation: Tensor | np.ndarray
    verb_scores: Tensor | np.ndarray
    pair_distance: float


def make_pairs(is_human: Sequence[bool]) -> list[tuple[int, int]]:
    """All ordered ``(i, j)`` with token ``i`` human and ``j != i``."""
    flags = [bool(h) for h in is_human]
    return [(i, j) for i, hi in enumerate(flags) if hi for j in range(len(flags)) if j != i]


def fuse_pair(ti, tj, g, params: Mapping[str, Tensor], prefix: str = "gctx") -> Tensor:
    """``[t_i; t_j] + FFN(g)``; ``g`` broadcasts over any leading pair axes."""
    ctx = nn.ffn(nn.as_tensor(g), params, f"{prefix}.ffn")
    return nn.concat([ti, tj], axis=-1) + ctx


def init_fuse_pair(params: nn.ParamStore, d: int, hidden: int, rng, prefix: str = "gctx") -> None:
    params.add(f"{prefix}.ffn.w1", rng.normal(0.0, 1.0 / np.sqrt(d), (d, hidden)))
    params.add(f"{prefix}.ffn.b1", np.zeros(hidden))
    params.add(f"{prefix}.ffn.w2", rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 2 * d)))
    params.add(f"{prefix}.ffn.b2", np.zeros(2 * d))


def interaction_encoder(
    H,
    params: Mapping[str, Tensor],
    layers: int,
    heads: int,
    valid=None,
    dropout_p: float = 0.0,
    rng=None,
    prefix: str = "ienc",
) -> Tensor:
    """Unmasked self-attention + FFN layers over the pair axis of ``H``."""
    H = nn.as_tensor(H)
    m = H.shape[-2]
    full = np.ones(H.shape[:-1] + (m,), dtype=np.int8)
    for layer in range(layers):
        H, _ = encoder_block(H, full, params, f"{prefix}.{layer}", heads, key_valid=valid, dropout_p=dropout_p, rng=rng)
    return H


def init_interaction_encoder(params: nn.ParamStore, width: int, hidden: int, layers: int, rng, prefix: str = "ienc") -> None:
    for layer in range(layers):
        init_block(params, f"{prefix}.{layer}", width, hidden, rng)


def verb_logits(h, params: Mapping[str, Tensor], prefix: str = "head") -> Tensor:
    return nn.ffn(h, params, prefix)


def predict_verbs(h, params: Mapping[str, Tensor], prefix: str = "head") -> Tensor:
    """Independent per-verb probabilities ``sigmoid(MLP(h))``."""
    return nn.sigmoid(verb_logits(h, params, prefix))


def init_verb_head(params: nn.ParamStore, width: int, hidden: int, num_verbs: int, rng, prefix: str = "head") -> None:
    params.add(f"{prefix}.w1", rng.normal(0.0, 1.0 / np.sqrt(width), (width, hidden)))
    params.add(f"{prefix}.b1", np.zeros(hidden))
    params.add(f"{prefix}.w2", rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, num_verbs)))
    # starts near the positive rate rather than 0.5
    params.add(f"{prefix}.b2", np.full(num_verbs, -2.0))
