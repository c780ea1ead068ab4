"""Run configuration: one YAML file covering backbone, schedule, training,
and guidance, with CLI-flag overrides. The fully resolved config is echoed
verbatim into every output directory for provenance."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict

import yaml

from .backbone import BackboneConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    kind: str = "linear"


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    guidance_w: float = 3.0
    guidance_mode: str = "masked_cfg"
    guidance_convention: str = "eq9"
    sample_steps: int = 50
    dataset_n: int = 10_000
    dataset_seed: int = 0
    word_dim: int = 64
    seed: int = 0
    arch: str = "ps_unet"  # ps_unet | uvit_multi

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["adam_betas"] = list(self.train.adam_betas)
        return d


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """YAML config + flat overrides (nested keys as 'train.lr' etc.)."""
    raw: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value

    backbone = BackboneConfig.from_dict(raw.get("backbone", {})) if raw.get("backbone") \
        else BackboneConfig()
    train = TrainConfig.from_dict(raw.get("train", {})) if raw.get("train") else TrainConfig()
    schedule = ScheduleConfig(**raw.get("schedule", {}))
    top = {k: v for k, v in raw.items() if k not in ("backbone", "train", "schedule")}
    return RunConfig(backbone=backbone, train=train, schedule=schedule, **top)


def echo_config(cfg: RunConfig, out_dir) -> str:
    """Write the resolved config as YAML into out_dir; returns the path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config_resolved.yaml")
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
    return path
