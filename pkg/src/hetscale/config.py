"""Run configuration: one YAML file describing a whole experiment.

Schema (every key optional; unknown keys anywhere are rejected)::

    seed: 0
    epochs: 60
    batch_size: 64
    grad_clip: null            # global L2 norm, or null for no clipping
    output_dir: runs/default
    eval_batch_size: 256
    model:       {embed_dim, depth, num_heads, mlp_ratio, fc_reduce, attn_reduce,
                  patch_size, image_size, num_classes, in_chans}
    schedule:    {initial_warmup, scaling_interval, parameter_budget, layer_threshold,
                  target_params, target_tolerance, scaling_factor, selection,
                  spectrum_batches, spectrum_samples, curvature_mode, eigensolver,
                  eligible_roles}
    optimizer:   {kind: adamw, lr, weight_decay, betas, eps}
    lr_schedule: {kind: cosine, warmup_epochs, min_lr}
    dataset:     {name: synthetic|idx|cifar, path, num_classes, image_size, channels,
                  num_train, num_eval, noise, seed, hflip}
    growth_enabled: true
    export_spectra: true

``schedule.target_params`` also accepts a string ``"<k>x"`` meaning k
times the base model's parameter count.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from hetscale.data import DatasetConfig
from hetscale.model import ModelConfig
from hetscale.optim import LRScheduleConfig, OptimizerConfig
from hetscale.scheduler import ScheduleConfig

_SECTIONS = {
    "model": ModelConfig,
    "optimizer": OptimizerConfig,
    "lr_schedule": LRScheduleConfig,
    "dataset": DatasetConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(layer_threshold=8))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lr_schedule: LRScheduleConfig = field(default_factory=LRScheduleConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    epochs: int = 60
    batch_size: int = 64
    eval_batch_size: int = 256
    grad_clip: float | None = None
    seed: int = 0
    output_dir: str = "runs/default"
    growth_enabled: bool = True
    export_spectra: bool = True
    target_multiple: float | None = None

    def __post_init__(self):
        for key in ("epochs", "batch_size", "eval_batch_size"):
            if not isinstance(getattr(self, key), int) or getattr(self, key) <= 0:
                raise ValueError(f"{key} must be a positive integer")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")
        if self.target_multiple is not None and not self.target_multiple > 1:
            raise ValueError("target multiple must exceed 1")
        m, d = self.model, self.dataset
        if (m.num_classes, m.image_size, m.in_chans) != (d.num_classes, d.image_size, d.channels):
            raise ValueError("model and dataset disagree on classes, image size or channels")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else v
        if self.target_multiple is not None:
            out["schedule"]["target_params"] = f"{self.target_multiple:g}x"
        out.pop("target_multiple")
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValueError("run config must be a mapping")
        known = {f.name for f in fields(cls)} - {"target_multiple"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown run config keys: {sorted(extra)}")
        kw = {}
        for key, value in d.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ValueError(f"section {key!r} must be a mapping")
                kw[key] = _SECTIONS[key].from_dict(value)
            elif key == "schedule":
                if not isinstance(value, dict):
                    raise ValueError("section 'schedule' must be a mapping")
                value = dict(value)
                target = value.get("target_params")
                if isinstance(target, str):
                    if not target.endswith("x"):
                        raise ValueError(f"target_params string must look like '2x', got {target!r}")
                    kw["target_multiple"] = float(target[:-1])
                    value["target_params"] = None
                value.setdefault("layer_threshold", 8)
                kw[key] = ScheduleConfig.from_dict(value)
            else:
                kw[key] = value
        return cls(**kw)

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None) -> "RunConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        if output_dir is not None:
            d["output_dir"] = str(output_dir)
        return RunConfig.from_dict(d)


def load_config(path: str | os.PathLike) -> RunConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    return RunConfig.from_dict(data or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_config(cfg))


def cifar_overrides(cfg: RunConfig) -> RunConfig:
    """Small-dataset preset: gradient clipping at 1.0 and weight decay 1e-4."""
    d = cfg.to_dict()
    d["grad_clip"] = 1.0
    d["optimizer"]["weight_decay"] = 1e-4
    return RunConfig.from_dict(d)


def desk_config(**overrides) -> RunConfig:
    """The desk-scale grow-while-training experiment.

    Embed 64, depth 4 on 14x14 synthetic 10-class images (patch 7), 60
    epochs, first event at epoch 20 then every 10, grown to twice the
    base parameter count.
    """
    d = {
        "epochs": 60, "batch_size": 64, "seed": 0,
        "model": {"embed_dim": 64, "depth": 4, "num_heads": 4, "patch_size": 7,
                  "image_size": 14, "num_classes": 10, "in_chans": 1},
        "dataset": {"name": "synthetic", "image_size": 14, "channels": 1,
                    "num_classes": 10, "num_train": 1024, "num_eval": 512},
        "optimizer": {"lr": 1e-3},
        "schedule": {"initial_warmup": 20, "scaling_interval": 10, "layer_threshold": 8,
                     "target_params": "2x", "target_tolerance": 0},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(d.get(key), dict):
            d[key] = {**d[key], **value}
        else:
            d[key] = value
    return RunConfig.from_dict(d)
