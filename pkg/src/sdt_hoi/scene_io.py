"""Scene data model, JSONL persistence and the synthetic scene generator."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .geometry import validate_box


class SceneFormatError(ValueError):
    """A scene record could not be parsed."""


def r9(x: float) -> float:
    """Round to 9 significant digits (the on-disk precision)."""
    return float(f"{float(x):.9g}")


def _r9_array(a) -> np.ndarray:
    return np.array([r9(v) for v in np.asarray(a, dtype=np.float64).reshape(-1)]).reshape(np.shape(a))


@dataclass(eq=False)
class Token:
    feature: np.ndarray
    box: tuple[float, float, float, float]
    score: float
    class_id: int
    is_human: bool

    def __eq__(self, other) -> bool:
        if not isinstance(other, Token):
            return NotImplemented
        return (
            np.array_equal(self.feature, other.feature)
            and tuple(self.box) == tuple(other.box)
            and self.score == other.score
            and self.class_id == other.class_id
            and self.is_human == other.is_human
        )


@dataclass(frozen=True)
class GtTriplet:
    human_box: tuple[float, float, float, float]
    object_box: tuple[float, float, float, float]
    object_class: int
    verb_ids: frozenset[int]

    @property
    def distance(self) -> float:
        hx, hy = (self.human_box[0] + self.human_box[2]) / 2, (self.human_box[1] + self.human_box[3]) / 2
        ox, oy = (self.object_box[0] + self.object_box[2]) / 2, (self.object_box[1] + self.object_box[3]) / 2
        return math.hypot(ox - hx, oy - hy)


@dataclass(eq=False)
class Scene:
    id: str
    tokens: list[Token]
    global_feature: np.ndarray
    ground_truth: list[GtTriplet] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.global_feature, other.global_feature)
            and self.tokens == other.tokens
            and self.ground_truth == other.ground_truth
        )

    @property
    def boxes(self) -> np.ndarray:
        return np.array([t.box for t in self.tokens], dtype=np.float64).reshape(-1, 4)


# ---------------------------------------------------------------------------
# feasibility


class FeasibilityTable(dict):
    """``object class -> frozenset of feasible verb ids``."""

    def __init__(self, mapping: Mapping[int, Iterable[int]] = (), num_verbs: int | None = None):
        super().__init__({int(k): frozenset(int(v) for v in vs) for k, vs in dict(mapping).items()})
        if num_verbs is not None:
            for c, vs in self.items():
                bad = [v for v in vs if not 0 <= v < num_verbs]
                if bad:
                    raise ValueError(f"class {c}: verb ids {bad} outside [0, {num_verbs})")

    def to_json(self) -> dict:
        return {str(k): sorted(v) for k, v in sorted(self.items())}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "FeasibilityTable":
        return cls(json.loads(Path(path).read_text()))


def feasible_verbs(table: Mapping[int, frozenset], object_class: int) -> frozenset:
    try:
        return table[int(object_class)]
    except KeyError:
        raise KeyError(f"object class {object_class} not in feasibility table") from None


# ---------------------------------------------------------------------------
# JSONL


def scene_to_record(scene: Scene) -> dict:
    return {
        "id": scene.id,
        "global_feature": _r9_array(scene.global_feature).tolist(),
        "tokens": [
            {
                "feature": _r9_array(t.feature).tolist(),
                "box": [r9(v) for v in t.box],
                "score": r9(t.score),
                "class_id": int(t.class_id),
                "is_human": bool(t.is_human),
            }
            for t in scene.tokens
        ],
        "gt": [
            {
                "hbox": [r9(v) for v in g.human_box],
                "obox": [r9(v) for v in g.object_box],
                "object_class": int(g.object_class),
                "verbs": sorted(g.verb_ids),
            }
            for g in scene.ground_truth
        ],
    }


def _box(raw, what: str) -> tuple[float, float, float, float]:
    try:
        b = validate_box(raw)
    except (ValueError, TypeError) as exc:
        raise SceneFormatError(f"bad {what}: {exc}") from None
    return tuple(float(v) for v in b)


def scene_from_record(rec: Mapping) -> Scene:
    try:
        tokens = []
        for k, t in enumerate(rec["tokens"]):
            if "box" not in t:
                raise SceneFormatError(f"token {k} is missing 'box'")
            tokens.append(
                Token(
                    feature=np.asarray(t["feature"], dtype=np.float64),
                    box=_box(t["box"], f"token {k} box"),
                    score=float(t["score"]),
                    class_id=int(t["class_id"]),
                    is_human=bool(t["is_human"]),
                )
            )
        gts = [
            GtTriplet(
                human_box=_box(g["hbox"], "gt hbox"),
                object_box=_box(g["obox"], "gt obox"),
                object_class=int(g["object_class"]),
                verb_ids=frozenset(int(v) for v in g["verbs"]),
            )
            for g in rec.get("gt", [])
        ]
        for g in gts:
            if not g.verb_ids:
                raise SceneFormatError("gt triplet with no verbs")
        return Scene(
            id=str(rec["id"]),
            tokens=tokens,
            global_feature=np.asarray(rec["global_feature"], dtype=np.float64),
            ground_truth=gts,
        )
    except KeyError as exc:
        raise SceneFormatError(f"missing field {exc.args[0]!r}") from None


def save_scenes(scenes: Iterable[Scene], path) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_record(s), separators=(",", ":")))
            fh.write("\n")


def load_scenes(path) -> list[Scene]:
    scenes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                scenes.append(scene_from_record(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            except SceneFormatError as exc:
                raise SceneFormatError(f"{path}: line {lineno}: {exc}") from None
    return scenes


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SynthConfig:
    """Knobs of the synthetic scene generator.

    Randomness comes from ``numpy.random.Generator`` (PCG64). ``seed`` fixes
    the shared "world" (class embeddings, verb codes, feasibility table,
    positional basis); ``split`` selects an independent scene stream so train
    and test sets share one world.
    """

    num_scenes: int = 2000
    tokens_min: int = 4
    tokens_max: int = 10
    d: int = 256
    num_verbs: int = 10
    num_object_classes: int = 6
    person_class: int = 0
    person_as_object: bool = True
    distance_exponent: float = 3.0
    distance_scale: float = 0.1
    max_distance: float = 1.0
    distant_verbs: tuple[int, ...] | None = None  # default: the last 3 verbs
    distant_threshold: float = 0.5
    max_interacting_humans: int = 2
    clutter_human_prob: float = 0.3
    clutter_near_prob: float = 0.0
    clutter_decoy_prob: float = 0.0
    near_link_share: float = 0.0
    clutter_near_radius: float = 0.15
    second_verb_prob: float = 0.25
    verbs_per_class: int = 4
    distant_verbs_per_class: int = 2
    verb_zipf: float = 1.0
    class_scale: float = 1.0
    position_scale: float = 1.5
    position_length: float = 0.2
    link_scale: float = 1.5
    verb_scale: float = 1.0
    noise: float = 0.5
    box_jitter: float = 0.04
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.distant_verbs is None:
            self.distant_verbs = tuple(range(max(0, self.num_verbs - 3), self.num_verbs))
        self.distant_verbs = tuple(int(v) for v in self.distant_verbs)
        self.check()

    def check(self) -> None:
        if self.num_scenes < 0:
            raise ValueError("num_scenes must be >= 0")
        if not 2 <= self.tokens_min <= self.tokens_max:
            raise ValueError("need 2 <= tokens_min <= tokens_max")
        if self.distance_exponent <= 0:
            raise ValueError("distance_exponent must be > 0")
        if self.num_object_classes < 2:
            raise ValueError("need the person class plus at least one object class")
        if not 0 <= self.person_class < self.num_object_classes:
            raise ValueError("person_class out of range")
        if any(not 0 <= v < self.num_verbs for v in self.distant_verbs):
            raise ValueError("distant verb id out of range")
        if len(self.distant_verbs) >= self.num_verbs:
            raise ValueError("at least one verb must be non-distant")
        if not self.distant_threshold < self.max_distance <= 1.2:
            raise ValueError("need distant_threshold < max_distance <= 1.2")
        if not 0.0 <= self.clutter_near_prob <= 1.0 or not 0.0 <= self.clutter_decoy_prob <= 1.0 or not 0.0 <= self.clutter_human_prob <= 1.0:
            raise ValueError("clutter probabilities must lie in [0, 1]")
        if self.split not in ("train", "test", "val"):
            raise ValueError(f"unknown split {self.split!r}")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["distant_verbs"] = list(self.distant_verbs)
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown synth config fields: {sorted(unknown)}")
        return cls(**doc)


_SPLIT_STREAM = {"train": 1, "test": 2, "val": 3}
BIN = 0.05


@dataclass
class SynthWorld:
    config: SynthConfig
    class_emb: np.ndarray
    verb_emb: np.ndarray
    pos_freq: np.ndarray
    pos_phase: np.ndarray
    feasibility: FeasibilityTable
    verb_prob: np.ndarray

    def positional(self, c: np.ndarray) -> np.ndarray:
        """Random Fourier features: ``pos(a) . pos(b)`` ~ Gaussian kernel of the center distance."""
        return np.sqrt(2.0 / len(self.pos_phase)) * np.cos(self.pos_freq @ c + self.pos_phase)


def _unit_rows(rng, n: int, d: int) -> np.ndarray:
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def build_world(config: SynthConfig) -> SynthWorld:
    rng = np.random.default_rng([config.seed, 0])
    d, C, K = config.d, config.num_verbs, config.num_object_classes
    class_emb = _unit_rows(rng, K, d)
    verb_emb = _unit_rows(rng, C, d)
    pos_freq = rng.normal(0.0, 1.0 / config.position_length, (d, 2))
    pos_phase = rng.uniform(0.0, 2 * np.pi, d)

    distant = sorted(config.distant_verbs)
    close = [v for v in range(C) if v not in config.distant_verbs]
    objects = [c for c in range(K) if c != config.person_class or config.person_as_object]
    table: dict[int, set[int]] = {c: set() for c in range(K)}
    for c in objects:
        table[c] |= set(rng.choice(close, size=min(config.verbs_per_class, len(close)), replace=False).tolist())
        if distant:
            k = min(config.distant_verbs_per_class, len(distant))
            table[c] |= set(rng.choice(distant, size=k, replace=False).tolist())
    # every verb must be feasible for at least one object class
    for v in range(C):
        if not any(v in vs for vs in table.values()):
            table[objects[int(rng.integers(len(objects)))]].add(v)
    ranks = np.arange(1, C + 1, dtype=np.float64)
    verb_prob = ranks ** (-config.verb_zipf)
    verb_prob = verb_prob[rng.permutation(C)]
    return SynthWorld(config, class_emb, verb_emb, pos_freq, pos_phase, FeasibilityTable(table, C), verb_prob)


def _truncated_lomax_cdf(x, a: float, s: float, top: float) -> np.ndarray:
    x = np.minimum(np.asarray(x, dtype=np.float64), top)
    return (1.0 - (1.0 + x / s) ** (-a)) / (1.0 - (1.0 + top / s) ** (-a))


def _truncated_lomax_ppf(u, a: float, s: float, top: float) -> np.ndarray:
    z = 1.0 - (1.0 + top / s) ** (-a)
    return s * ((1.0 - np.asarray(u) * z) ** (-1.0 / a) - 1.0)


def sample_distances(n: int, config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` human-object center distances from a truncated power-law tail.

    Counts per 0.05 bin are fixed by floor allocation of the target mass
    (leftovers go to the nearest bins), so the histogram is exactly
    non-increasing for any ``n``; positions inside a bin use the inverse CDF.
    The result is shuffled.
    """
    a, s, top = config.distance_exponent, config.distance_scale, config.max_distance
    edges = np.arange(0.0, top + BIN, BIN)
    edges[-1] = top
    edges = edges[np.concatenate([[True], np.diff(edges) > 1e-12])]
    cdf = _truncated_lomax_cdf(edges, a, s, top)
    mass = np.diff(cdf)
    counts = np.floor(mass * n).astype(int)
    counts[: n - counts.sum()] += 1
    out = []
    for b, k in enumerate(counts):
        if k == 0:
            continue
        u = rng.uniform(cdf[b], cdf[b + 1], size=k)
        out.append(_truncated_lomax_ppf(u, a, s, top))
    dist = np.concatenate(out) if out else np.zeros(0)
    return rng.permutation(np.clip(dist, 0.0, top))


def _place_pair(D: float, hsize, osize, rng) -> tuple[np.ndarray, np.ndarray] | None:
    """Centers for a human and an object ``D`` apart, both boxes inside the image."""
    hw, hh = hsize
    ow, oh = osize
    for _ in range(400):
        theta = rng.uniform(0.0, 2 * np.pi)
        dx, dy = D * np.cos(theta), D * np.sin(theta)
        lo_x = max(hw / 2, ow / 2 - dx)
        hi_x = min(1 - hw / 2, 1 - ow / 2 - dx)
        lo_y = max(hh / 2, oh / 2 - dy)
        hi_y = min(1 - hh / 2, 1 - oh / 2 - dy)
        if lo_x <= hi_x and lo_y <= hi_y:
            hc = np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)])
            return hc, hc + np.array([dx, dy])
    return None


def _box_at(c, w, h) -> tuple[float, float, float, float]:
    x1 = min(max(c[0] - w / 2, 0.0), 1.0)
    y1 = min(max(c[1] - h / 2, 0.0), 1.0)
    x2 = min(max(c[0] + w / 2, 0.0), 1.0)
    y2 = min(max(c[1] + h / 2, 0.0), 1.0)
    return (r9(x1), r9(y1), r9(x2), r9(y2))


def _human_size(rng):
    return rng.uniform(0.06, 0.16), rng.uniform(0.10, 0.24)


def _object_size(rng):
    return rng.uniform(0.04, 0.14), rng.uniform(0.04, 0.14)


def _jitter(box, amount: float, rng) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    j = rng.uniform(-amount, amount, 4) * np.array([w, h, w, h])
    nb = np.clip(np.array(box) + j, 0.0, 1.0)
    if nb[2] - nb[0] < 1e-3 or nb[3] - nb[1] < 1e-3:
        return box
    return tuple(r9(v) for v in nb)


def generate_scenes(config: SynthConfig, world: SynthWorld | None = None) -> list[Scene]:
    """Deterministic synthetic scenes for ``config``.

    Every scene holds at least one interacting human. Token features are a
    class embedding, a positional code of the box center (so features of
    nearby tokens are correlated), Gaussian noise and, for each interacting
    pair, a shared random link code plus the verb codes on the human token.
    Verbs listed in ``distant_verbs`` are only assigned to pairs farther apart
    than ``distant_threshold``; the rest only to closer pairs.
    """
    cfg = config
    world = world or build_world(cfg)
    rng = np.random.default_rng([cfg.seed, _SPLIT_STREAM[cfg.split]])
    d, C = cfg.d, cfg.num_verbs
    table = world.feasibility

    n_pairs = rng.integers(1, cfg.max_interacting_humans + 1, size=cfg.num_scenes)
    distances = sample_distances(int(n_pairs.sum()), cfg, rng)
    distant = set(cfg.distant_verbs)
    close_verbs = np.array([v for v in range(C) if v not in distant])
    far_verbs = np.array(sorted(distant))
    classes_for = {v: [c for c, vs in sorted(table.items()) if v in vs] for v in range(C)}

    def pick_verb(pool: np.ndarray) -> int:
        p = world.verb_prob[pool]
        return int(rng.choice(pool, p=p / p.sum()))

    scenes = []
    cursor = 0
    for s in range(cfg.num_scenes):
        k = int(n_pairs[s])
        n_tokens = int(rng.integers(max(cfg.tokens_min, 2 * k), max(cfg.tokens_max, 2 * k) + 1))
        protos: list[dict] = []
        gts: list[GtTriplet] = []
        links: list[np.ndarray] = []
        for _ in range(k):
            D = float(distances[cursor])
            cursor += 1
            is_far = D > cfg.distant_threshold and len(far_verbs) > 0
            verb = pick_verb(far_verbs if is_far else close_verbs)
            obj_class = int(rng.choice(classes_for[verb]))
            verbs = {verb}
            if rng.random() < cfg.second_verb_prob:
                pool = np.array(sorted(v for v in table[obj_class] if (v in distant) == is_far and v != verb))
                if len(pool):
                    verbs.add(pick_verb(pool))
            hsize = _human_size(rng)
            osize = _object_size(rng) if obj_class != cfg.person_class else _human_size(rng)
            placed = _place_pair(D, hsize, osize, rng)
            while placed is None:
                hsize, osize = (hsize[0] * 0.8, hsize[1] * 0.8), (osize[0] * 0.8, osize[1] * 0.8)
                placed = _place_pair(D, hsize, osize, rng)
            hc, oc = placed
            hbox, obox = _box_at(hc, *hsize), _box_at(oc, *osize)
            gts.append(GtTriplet(hbox, obox, obj_class, frozenset(verbs)))
            link = rng.normal(0.0, 1.0 / np.sqrt(d), d) * cfg.link_scale
            links.append(link)
            code = cfg.verb_scale * world.verb_emb[sorted(verbs)].sum(axis=0)
            protos.append(dict(box=hbox, cls=cfg.person_class, human=True, extra=link + code, gt=True))
            protos.append(dict(box=obox, cls=obj_class, human=obj_class == cfg.person_class, extra=link, gt=True))
        while len(protos) < n_tokens:
            human = rng.random() < cfg.clutter_human_prob
            decoys = [g.object_class for g in gts if g.object_class != cfg.person_class]
            if not human and decoys and rng.random() < cfg.clutter_decoy_prob:
                # same class as a real partner: only the link code tells them apart
                cls = int(decoys[int(rng.integers(len(decoys)))])
            elif human:
                cls = cfg.person_class
            else:
                cls = int(rng.choice([c for c in range(cfg.num_object_classes) if c != cfg.person_class]))
            w, h = _human_size(rng) if human else _object_size(rng)
            lo, hi = np.array([w / 2, h / 2]), np.array([1 - w / 2, 1 - h / 2])
            extra = np.zeros(d)
            if rng.random() < cfg.clutter_near_prob:
                # distractor next to a member of an interacting pair, partly sharing its link code
                a = int(rng.integers(len(gts)))
                anchor = gts[a].human_box if rng.random() < 0.5 else gts[a].object_box
                ac = np.array([(anchor[0] + anchor[2]) / 2, (anchor[1] + anchor[3]) / 2])
                c = np.clip(ac + rng.uniform(-cfg.clutter_near_radius, cfg.clutter_near_radius, 2), lo, hi)
                extra = cfg.near_link_share * links[a]
            else:
                c = rng.uniform(lo, hi)
            protos.append(dict(box=_box_at(c, w, h), cls=cls, human=human, extra=extra, gt=False))

        tokens = []
        for p in protos:
            box = _jitter(p["box"], cfg.box_jitter, rng) if p["gt"] else p["box"]
            ctr = np.array([(box[0] + box[2]) / 2, (box[1] + box[3]) / 2])
            feat = (
                cfg.class_scale * world.class_emb[p["cls"]]
                + cfg.position_scale * world.positional(ctr)
                + p["extra"]
                + rng.normal(0.0, cfg.noise / np.sqrt(d), d)
            )
            score = rng.uniform(0.6, 1.0) if p["gt"] else rng.uniform(0.3, 0.9)
            tokens.append(Token(_r9_array(feat), box, r9(score), int(p["cls"]), bool(p["human"])))
        order = rng.permutation(len(tokens))
        tokens = [tokens[i] for i in order]
        g = rng.normal(0.0, 1.0 / np.sqrt(d), d) + sum(world.class_emb[t.class_id] for t in tokens) / len(tokens)
        scenes.append(Scene(f"{cfg.split}-{cfg.seed}-{s:06d}", tokens, _r9_array(g), gts))
    return scenes
