"""Run configuration: model, matching/loss weights, augmentation, optimizer, data."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentationConfig
from .losses import LossWeights
from .matcher import MatchWeights
from .model import ModelConfig

SECTIONS = {"model": ModelConfig, "match": MatchWeights, "loss": LossWeights, "augment": AugmentationConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    match: MatchWeights = field(default_factory=MatchWeights)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    eos_weight: float = 0.1
    iou_loss: str = "giou"  # giou | diou | ciou | none
    lr: float = 1e-4
    lr_backbone: float = 1e-5
    lr_drop_step: int | None = None  # multiply both rates by lr_drop_factor from this step on; None: constant
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4
    clip_max_norm: float = 0.1
    batch_size: int = 8
    epochs: int = 300
    max_steps: int | None = None
    patience: int = 10  # evaluations without improvement before stopping
    eval_every: int = 1  # epochs
    train_annotations: str | None = None
    val_annotations: str | None = None
    image_root: str | None = None  # defaults to each annotation file's directory
    out_dir: str = "runs/mgtr"
    seed: int | None = None
    dtype: str = "float32"
    eval_iou: float = 0.5
    score_threshold: float = 0.0
    score_mode: str = "product"
    ap_method: str = "all_point"
    cache_images: bool = True

    def __post_init__(self):
        # zero is allowed: a frozen run is a useful sanity check
        if not (self.lr >= 0 and self.lr_backbone >= 0):
            raise ValueError("learning rates must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iou_loss not in ("giou", "diou", "ciou", "none"):
            raise ValueError(f"unknown iou_loss {self.iou_loss!r}")

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in SECTIONS:
                v = {k: list(x) if isinstance(x, tuple) else x for k, x in dataclasses.asdict(v).items()}
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for k, v in d.items():
            if k not in names:
                raise KeyError(f"unknown config key {k!r}")
            kwargs[k] = SECTIONS[k](**v) if k in SECTIONS else v
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def with_overrides(self, overrides: dict[str, object]) -> RunConfig:
        """Apply flat ``key -> value`` overrides.

        A key is either a top-level field, ``section.field``, or a bare field
        name that exists in exactly one section (``d_model``, ``gamma1``...).
        String values are parsed as JSON when possible.
        """
        d = self.to_dict()
        for key, raw in overrides.items():
            value = _parse_value(raw)
            key = key.replace("-", "_")
            if "." in key:
                section, name = key.split(".", 1)
                if section not in SECTIONS or name not in d[section]:
                    raise KeyError(f"unknown config key {key!r}")
                d[section][name] = value
            elif key in d and key not in SECTIONS:
                d[key] = value
            else:
                owners = [s for s in SECTIONS if key in d[s]]
                if len(owners) != 1:
                    raise KeyError(f"config key {key!r} is unknown or ambiguous ({owners})")
                d[owners[0]][key] = value
        return RunConfig.from_dict(d)


def _parse_value(raw):
    if not isinstance(raw, str):
        return raw
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def toy_config(**overrides) -> RunConfig:
    """Small CPU-trainable setting used by the tests and demos."""
    cfg = RunConfig(
        model=ModelConfig(
            d_model=64, num_queries=16, enc_layers=2, dec_layers=2, num_heads=4,
            ffn_dim=128, dropout=0.0, backbone="tiny", pos_temperature=100.0,
        ),
        augment=AugmentationConfig(
            hflip_prob=0.0, photometric_prob=0.0, crop_prob=0.0, resize_scales=(1.0,), base_short_side=None
        ),
        lr=1e-3,
        lr_backbone=1e-3,
        batch_size=8,
        seed=0,
    )
    return cfg.with_overrides(overrides) if overrides else cfg
