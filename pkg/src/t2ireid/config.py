"""Run configuration: JSON file + command-line overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ValidationError


@dataclass
class RunConfig:
    seed: int = 0
    # inputs / outputs
    ontology: str | None = None
    templates: str | None = None
    images: str | None = None
    attributes: str | None = None  # image_id -> {category: surface}, scripted backend
    labels: str | None = None  # image_id -> {identity, split}
    manifest: str | None = None
    manifest_b: str | None = None
    init: str | None = None
    ckpt: str | None = None
    out: str | None = None
    # generation
    backend: str = "mock"
    backend_dim: int | None = None
    plugin_cmd: str | None = None
    threshold: float = 0.9
    scale: float = 100.0
    synonym_rate: float = 0.5
    max_templates: int | None = None
    workers: int = 1
    # pre-training
    beta: int = 1
    tau: float = 1.0
    learnable_tau: bool = False
    mask_rate: float = 0.15
    pretrain_epochs: int = 15
    pretrain_batch_size: int = 512
    pretrain_lr: float = 1e-5
    weight_decay: float = 0.01
    warmup_frac: float = 0.1
    max_len: int = 100
    encoder: dict = field(default_factory=dict)
    # fine-tuning
    gamma: int = 1
    alpha: float = 0.2
    finetune_epochs: int = 60
    finetune_batch_size: int = 64
    lr_text: float = 1e-5
    lr_visual: float = 1e-4
    lr_head: float = 1e-4
    num_prototypes: int = 6
    # reporting
    figures: bool = True

    def validate(self, required_paths=()) -> "RunConfig":
        if self.beta not in (0, 1):
            raise ValidationError("beta must be 0 or 1")
        if self.gamma not in (0, 1):
            raise ValidationError("gamma must be 0 or 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("threshold must lie in (0, 1)")
        if not self.scale > 0:
            raise ValidationError("scale must be positive")
        if not self.alpha > 0:
            raise ValidationError("alpha must be positive")
        if not self.tau > 0:
            raise ValidationError("tau must be positive")
        if not 0.0 <= self.synonym_rate <= 1.0:
            raise ValidationError("synonym_rate must lie in [0, 1]")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValidationError("mask_rate must lie in [0, 1]")
        if self.backend not in ("mock", "scripted", "plugin"):
            raise ValidationError("backend must be one of mock, scripted, plugin")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        for name in required_paths:
            value = getattr(self, name)
            if value is None:
                raise ValidationError(f"{name}: a path is required")
            if not Path(value).exists():
                raise ValidationError(f"{name}: {value} does not exist")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


FIELD_NAMES = {f.name for f in fields(RunConfig)}


def config_from_dict(doc: dict) -> RunConfig:
    unknown = sorted(set(doc) - FIELD_NAMES)
    if unknown:
        raise ValidationError("unknown config key(s): " + ", ".join(unknown))
    return RunConfig(**doc)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"config: {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config: {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ValidationError("config: top level must be an object")
    doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(doc)


# hyper-parameters used by the desk-scale toy benchmark
TOY_PRESET = {
    "backend": "scripted",
    "tau": 10.0,
    "pretrain_epochs": 10,
    "pretrain_batch_size": 64,
    "pretrain_lr": 1e-3,
    "finetune_epochs": 20,
    "finetune_batch_size": 64,
    "max_len": 48,
    "encoder": {
        "embed_dim": 64,
        "visual_width": 64,
        "text_width": 64,
        "visual_layers": 1,
        "text_layers": 1,
    },
}
