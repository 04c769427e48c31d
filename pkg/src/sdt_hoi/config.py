"""Run configuration: one JSON document, every field overridable."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .fnda import MASK_MODES
from .scene_io import SynthConfig


@dataclass
class Toggles:
    t_encoder: bool = True
    i_encoder: bool = True
    da_loss: bool = True
    icd: bool = True
    spatial_fusion: bool = True
    fnda: bool = True  # False swaps the far/near masks for plain self-attention


@dataclass
class RunConfig:
    d: int = 256
    num_verbs: int = 10
    L_T: int = 3
    L_I: int = 3
    heads: int = 8
    hidden: int = 1024
    dropout: float = 0.1
    lr: float = 2e-4
    weight_decay: float = 1e-4
    epochs: int = 20
    lr_drop_epoch: int = 10
    batch_size: int = 16
    lambda_train: float = 1.0
    lambda_infer: float = 2.8
    mask_mode: str = "additive"
    focal_gamma: float = 2.0
    focal_balance: float = 0.25
    icd_samples: int = 8
    memory_capacity: int = 64
    memory_threshold: float = 0.5
    min_score: float = 0.2
    min_keep: int = 3
    max_keep: int = 15
    distant_threshold: float = 0.5
    seed: int = 0
    train_scenes: str | None = None
    test_scenes: str | None = None
    feasibility: str | None = None
    run_dir: str = "runs/default"
    synth_test_scenes: int = 500
    toggles: Toggles = field(default_factory=Toggles)
    synth: SynthConfig | None = None  # None: generator defaults with this d and num_verbs

    def __post_init__(self):
        if isinstance(self.toggles, Mapping):
            self.toggles = Toggles(**self.toggles)
        if self.synth is None:
            self.synth = SynthConfig(d=self.d, num_verbs=self.num_verbs)
        elif isinstance(self.synth, Mapping):
            self.synth = SynthConfig.from_json({"d": self.d, "num_verbs": self.num_verbs, **self.synth})
        self.check()

    def check(self) -> None:
        if self.d % self.heads or (2 * self.d) % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        for name in ("L_T", "L_I", "epochs", "batch_size", "hidden", "num_verbs"):
            if getattr(self, name) < (1 if name in ("batch_size", "hidden", "num_verbs") else 0):
                raise ValueError(f"{name} out of range: {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.synth.d != self.d or self.synth.num_verbs != self.num_verbs:
            raise ValueError("synth.d and synth.num_verbs must equal d and num_verbs")
        if self.lambda_infer < 1.0 or self.lambda_train < 1.0:
            raise ValueError("lambda must be >= 1")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["synth"] = self.synth.to_json()
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, doc: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_json(doc)

    def model_dict(self) -> dict:
        """Fields that determine parameter shapes (hashed into checkpoints)."""
        return {
            "d": self.d,
            "num_verbs": self.num_verbs,
            "L_T": self.L_T,
            "L_I": self.L_I,
            "heads": self.heads,
            "hidden": self.hidden,
            "toggles": asdict(self.toggles),
        }


def _coerce(value: str, current: Any):
    if isinstance(current, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, (tuple, list)):
        return tuple(int(v) for v in value.split(",") if v)
    if current is None:
        return None if value.lower() in ("none", "null", "") else value
    return value


def apply_override(config: RunConfig, key: str, value: str) -> RunConfig:
    """Set a dotted ``key`` (e.g. ``toggles.fnda`` or ``synth.num_scenes``) from a string."""
    target: Any = config
    parts = key.replace("-", "_").split(".")
    for p in parts[:-1]:
        if not hasattr(target, p):
            raise KeyError(f"unknown config section {p!r}")
        target = getattr(target, p)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in fields(target)}:
        raise KeyError(f"unknown config field {key!r}")
    setattr(target, leaf, _coerce(value, getattr(target, leaf)))
    if target is config and leaf in ("d", "num_verbs"):
        # the generator follows the model's token width and verb count
        setattr(config.synth, leaf, getattr(config, leaf))
    if isinstance(target, SynthConfig):
        target.__post_init__()
    config.check()
    return config
