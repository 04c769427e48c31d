"""The interaction-recognition network assembled from its parts.

Scenes are preprocessed once into :class:`PreparedScene` (filtered tokens,
distances, masks, spatial descriptors, pairs and targets) and then padded
into batches so a whole batch runs through one graph.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn_core as nn
from .config import RunConfig
from .fnda import MaskPair, TokenEncoderConfig, build_masks, init_token_encoder, token_encoder_forward
from .geometry import SPATIAL_DIM, pairwise_distances, spatial_relations
from .inference_eval import filter_tokens, match_pairs_to_gt
from .interaction import (
    InteractionPair,
    fuse_pair,
    init_fuse_pair,
    init_interaction_encoder,
    init_verb_head,
    interaction_encoder,
    make_pairs,
    verb_logits,
)
from .objective import LossConfig, focal_terms_from_logits, weighted_loss
from .scene_io import Scene
from .token_post import ClassMemory, icd_attention, init_icd, init_spatial_fuse, memory_update, sample_memory, spatial_fuse


@dataclass
class PreparedScene:
    scene: Scene
    keep: list[int]
    tokens: list
    features: np.ndarray
    spatial: np.ndarray
    D: np.ndarray
    far: np.ndarray
    near: np.ndarray
    pairs: list[tuple[int, int]]
    pair_distance: np.ndarray
    targets: np.ndarray

    @property
    def n(self) -> int:
        return len(self.tokens)


def prepare_scene(scene: Scene, config: RunConfig) -> PreparedScene:
    keep = filter_tokens(scene.tokens, config.min_score, config.min_keep, config.max_keep)
    tokens = [scene.tokens[i] for i in keep]
    boxes = np.array([t.box for t in tokens], dtype=np.float64).reshape(-1, 4)
    feats = np.array([t.feature for t in tokens], dtype=np.float64).reshape(len(tokens), -1)
    if len(tokens):
        D = pairwise_distances(boxes)
        masks = build_masks(D)
        far, near = masks.far, masks.near
    else:
        D = np.zeros((0, 0))
        far = near = np.zeros((0, 0), dtype=np.int8)
    pairs = make_pairs([t.is_human for t in tokens])
    pd = np.array([D[i, j] for i, j in pairs], dtype=np.float64)
    targets = match_pairs_to_gt(pairs, boxes, scene.ground_truth, config.num_verbs)
    return PreparedScene(scene, keep, tokens, feats, spatial_relations(boxes), D, far, near, pairs, pd, targets)


@dataclass
class Batch:
    scenes: list[PreparedScene]
    X: np.ndarray
    spatial: np.ndarray
    valid: np.ndarray
    far: np.ndarray
    near: np.ndarray
    G: np.ndarray
    hidx: np.ndarray
    oidx: np.ndarray
    pair_valid: np.ndarray
    pair_distance: np.ndarray
    targets: np.ndarray


def collate(prepared: Sequence[PreparedScene], d: int, num_verbs: int) -> Batch:
    B = len(prepared)
    N = max(1, max(p.n for p in prepared))
    P = max(1, max(len(p.pairs) for p in prepared))
    X = np.zeros((B, N, d))
    S = np.zeros((B, N, SPATIAL_DIM))
    valid = np.zeros((B, N), dtype=bool)
    eye = np.eye(N, dtype=np.int8)
    far = np.broadcast_to(eye, (B, N, N)).copy()
    near = far.copy()
    G = np.zeros((B, d))
    hidx = np.zeros((B, P), dtype=np.intp)
    oidx = np.zeros((B, P), dtype=np.intp)
    pvalid = np.zeros((B, P), dtype=bool)
    pdist = np.zeros((B, P))
    Y = np.zeros((B, P, num_verbs))
    for b, p in enumerate(prepared):
        n, m = p.n, len(p.pairs)
        X[b, :n] = p.features
        S[b, :n] = p.spatial
        valid[b, :n] = True
        far[b, :n, :n] = p.far
        near[b, :n, :n] = p.near
        G[b] = p.scene.global_feature
        if m:
            hidx[b, :m] = [i for i, _ in p.pairs]
            oidx[b, :m] = [j for _, j in p.pairs]
            pvalid[b, :m] = True
            pdist[b, :m] = p.pair_distance
            Y[b, :m] = p.targets
    return Batch(list(prepared), X, S, valid, far, near, G, hidx, oidx, pvalid, pdist, Y)


def scene_rng(scene_id: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode())])


class InteractionModel:
    """Parameters, class memory and the forward pass of the full network."""

    def __init__(self, config: RunConfig, seed: int | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed if seed is None else seed)
        tg = config.toggles
        d, hid = config.d, config.hidden
        self.params = nn.ParamStore()
        self.enc_config = TokenEncoderConfig(config.L_T, config.heads, hid, config.mask_mode, config.dropout)
        if tg.icd:
            init_icd(self.params, d, rng)
        if tg.spatial_fusion:
            init_spatial_fuse(self.params, d, SPATIAL_DIM, hid, rng)
        if tg.t_encoder:
            init_token_encoder(self.params, d, self.enc_config, rng)
        init_fuse_pair(self.params, d, hid, rng)
        if tg.i_encoder:
            init_interaction_encoder(self.params, 2 * d, hid, config.L_I, rng)
        init_verb_head(self.params, 2 * d, hid, config.num_verbs, rng)
        # distance-aware weight starts at sigmoid(D)
        self.params.add("da.alpha", 1.0)
        self.params.add("da.beta", 0.0)
        self.memory = ClassMemory(config.memory_capacity, config.memory_threshold)
        self.loss_config = LossConfig(config.focal_gamma, config.focal_balance, "positives", tg.da_loss)

    # ------------------------------------------------------------------
    def prepare(self, scenes: Sequence[Scene]) -> list[PreparedScene]:
        return [prepare_scene(s, self.config) for s in scenes]

    def _icd_inputs(self, batch: Batch, rng_for) -> tuple[np.ndarray, np.ndarray]:
        B, N, d = batch.X.shape
        l = self.config.icd_samples
        keys = np.zeros((B, N, l, d))
        kvalid = np.zeros((B, N, l), dtype=bool)
        for b, p in enumerate(batch.scenes):
            if p.n == 0:
                continue
            k, v = sample_memory(self.memory, [t.class_id for t in p.tokens], d, l, rng_for(p))
            keys[b, : p.n] = k
            kvalid[b, : p.n] = v
        return keys, kvalid

    def post_process(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None) -> nn.Tensor:
        """Token features after ICD and spatial fusion (the token-encoder input)."""
        cfg, tg, prm = self.config, self.config.toggles, self.params
        T = nn.Tensor(batch.X)
        if tg.icd:
            if train:
                keys, kvalid = self._icd_inputs(batch, lambda p: rng)
            else:
                keys, kvalid = self._icd_inputs(batch, lambda p: scene_rng(p.scene.id, cfg.seed))
            T = icd_attention(T, keys, kvalid, prm)
        if tg.spatial_fusion:
            T = spatial_fuse(T, batch.spatial, prm)
        return T

    def pair_states(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None, record: list | None = None):
        """Pair representations ``(B, P, 2d)`` after the interaction encoder.

        In training mode ICD sampling and dropout draw from ``rng``; otherwise
        dropout is off and ICD sampling is seeded by scene id.
        """
        cfg, tg, prm = self.config, self.config.toggles, self.params
        drop = cfg.dropout if train else 0.0
        drng = rng if train else None
        T = self.post_process(batch, train, rng)
        if tg.t_encoder:
            if tg.fnda:
                masks = MaskPair(batch.far, batch.near)
            else:
                ones = np.ones_like(batch.far)
                masks = MaskPair(ones, ones)
            enc = TokenEncoderConfig(cfg.L_T, cfg.heads, cfg.hidden, cfg.mask_mode, drop)
            T = token_encoder_forward(T, masks, prm, enc, key_valid=batch.valid, rng=drng, record=record)
        bidx = np.arange(len(batch.scenes))[:, None]
        Th = T[bidx, batch.hidx]
        To = T[bidx, batch.oidx]
        G = batch.G[:, None, :]
        H = fuse_pair(Th, To, G, prm)
        if tg.i_encoder:
            H = interaction_encoder(H, prm, cfg.L_I, cfg.heads, valid=batch.pair_valid, dropout_p=drop, rng=drng)
        return H

    def forward(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None, record: list | None = None):
        """Verb logits ``(B, P, C)`` for every padded pair slot."""
        return verb_logits(self.pair_states(batch, train, rng, record), self.params)

    def interaction_pairs(self, batch: Batch, train: bool = False, rng=None) -> list[list[InteractionPair]]:
        """Per-scene candidate pairs with differentiable verb probabilities."""
        H = self.pair_states(batch, train, rng)
        delta = nn.sigmoid(verb_logits(H, self.params))
        out = []
        for b, p in enumerate(batch.scenes):
            out.append(
                [
                    InteractionPair(i, j, H[b, k], delta[b, k], float(p.pair_distance[k]))
                    for k, (i, j) in enumerate(p.pairs)
                ]
            )
        return out

    def loss(self, batch: Batch, train: bool = False, rng=None) -> nn.Tensor:
        logits = self.forward(batch, train, rng)
        terms = focal_terms_from_logits(logits, batch.targets, self.loss_config)
        return weighted_loss(
            terms,
            batch.pair_distance,
            batch.pair_valid,
            batch.targets,
            self.params["da.alpha"],
            self.params["da.beta"],
            self.loss_config,
        )

    def update_memory(self, batch: Batch) -> None:
        for p in batch.scenes:
            for t in p.tokens:
                memory_update(self.memory, t)

    def predict(self, batch: Batch) -> list[np.ndarray]:
        """Per-scene ``(num_pairs, C)`` verb probabilities (inference mode)."""
        delta = nn.sigmoid_np(self.forward(batch, train=False).data)
        return [delta[b, : len(p.pairs)] for b, p in enumerate(batch.scenes)]

