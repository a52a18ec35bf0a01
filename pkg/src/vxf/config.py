"""Run configuration shared by every CLI verb."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from vxf.decoder import DecoderConfig
from vxf.encoder import EncoderConfig
from vxf.model import CONFIGURATIONS, ModelConfig
from vxf.unet import UNetConfig

TASKS = ("vessel_tumor", "multi_organ")


@dataclass
class RunConfig:
    configuration: str = "decoder_only"
    # encoder (ViT)
    encoder_layers: int = 1
    d_enc: int = 768
    encoder_heads: int = 4
    patch_size: int = 4
    vit_source: str = "cnn_features"
    # decoder
    num_queries: int = 20
    c2f_stages: int = 3
    c2f_enabled: bool = True
    multiscale_enabled: bool = True
    d_dec: int = 192
    decoder_heads: int = 4
    decoder_extras: bool = True
    # CNN
    base_channels: int = 16
    depth: int = 3
    # objective
    num_classes: int = 4
    lambda0: float = 0.7
    lambda1: float = 0.3
    # optimisation
    optimizer: str = "adamw"
    lr: float = 3e-4
    weight_decay: float | None = None
    momentum: float = 0.99
    warmup_steps: int = 0
    grad_clip: float = 0.0
    steps: int = 2000
    batch_size: int = 2
    crop: list[int] = field(default_factory=lambda: [32, 32, 32])
    flip_augment: bool = False
    seed: int = 0
    precision: str = "float32"
    # data
    task: str = "vessel_tumor"
    train_dir: str | None = None
    val_dir: str | None = None
    n_train: int = 64
    n_val: int = 16
    data_seed: int = 1000
    # inference
    overlap: float = 0.5
    mask_mode: str = "soft"
    background: str = "no_object"
    # output
    out_dir: str = "runs/default"
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        self.crop = [int(c) for c in self.crop]
        self.validate()

    def validate(self) -> None:
        if self.configuration not in CONFIGURATIONS:
            raise ValueError(f"configuration must be one of {CONFIGURATIONS}")
        if self.num_queries < self.num_classes:
            raise ValueError(f"num_queries ({self.num_queries}) must be >= num_classes ({self.num_classes})")
        if self.c2f_stages < 1:
            raise ValueError("c2f_stages must be >= 1")
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ValueError("lambda0 and lambda1 must be >= 0")
        if self.encoder_layers < 1:
            raise ValueError("encoder_layers must be >= 1")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError("optimizer must be 'adamw' or 'sgd'")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if len(self.crop) != 3 or min(self.crop) < 1:
            raise ValueError("crop must be three positive extents")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            configuration=self.configuration,
            crop=tuple(self.crop),
            num_classes=self.num_classes,
            unet=UNetConfig(in_channels=1, base_channels=self.base_channels, depth=self.depth),
            encoder=EncoderConfig(num_layers=self.encoder_layers, d_enc=self.d_enc,
                                  num_heads=self.encoder_heads, patch_size=self.patch_size,
                                  source=self.vit_source),
            decoder=DecoderConfig(num_queries=self.num_queries, num_classes=self.num_classes,
                                  d_dec=self.d_dec, num_layers=self.c2f_stages,
                                  num_heads=self.decoder_heads, c2f=self.c2f_enabled,
                                  multiscale=self.multiscale_enabled, query_extras=self.decoder_extras),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config fields: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
