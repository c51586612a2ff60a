"""Training configuration, read from and written to YAML.

Defaults are the desk-scale setup; :meth:`TrainConfig.paper_scale` returns the
full-size network shapes and schedule, :meth:`TrainConfig.toy` the small
overfit setup.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..geometry import CAMERA_RADIUS, EVAL_DISC_RADIUS, FAR, FOV_DEG, NEAR, TRAIN_DISC_RADIUS
from ..losses import DEFAULT_LOSS_WEIGHTS


@dataclass
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    enc_dim: int = 128
    enc_depth: int = 4
    enc_heads: int = 4
    latent_dim: int = 128
    codebook_size: int = 8192
    codebook_dim: int = 8
    commitment: float = 0.25
    dec_dim: int = 256
    dec_depth: int = 6
    dec_heads: int = 8
    plane_res: int = 64
    plane_channels: int = 16
    mlp_hidden: int = 32
    density_bias: float = -5.0
    rotation_seed: int = 0
    disc_channels: int = 32
    disc_max_channels: int = 128


@dataclass
class RenderConfig:
    n_proposal: int = 32
    n_nerf: int = 32
    near: float = NEAR
    far: float = FAR
    camera_radius: float = CAMERA_RADIUS
    fov_deg: float = FOV_DEG
    train_disc_radius: float = TRAIN_DISC_RADIUS
    eval_disc_radius: float = EVAL_DISC_RADIUS
    # training renders every ray_stride-th pixel (random phase); GAN inputs use that grid
    ray_stride: int = 2
    stratified_train: bool = True
    stratified_eval: bool = False
    logit_laplace_eps: float = 0.1


@dataclass
class OptimConfig:
    lr: float = 1e-4
    warmup_steps: int = 50_000
    total_steps: int = 180_000
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    disc_lr_scale: float = 0.5
    # both adversarial terms and the critic updates are off before this step
    adversarial_start: int = 0
    # multipliers on lr for the decoder's patch projection and for both field MLPs
    head_lr_scale: float = 1.0
    field_lr_scale: float = 1.0
    batch_size: int = 8
    grad_accum: int = 1


@dataclass
class Stage2Config:
    dim: int = 256
    depth: int = 4
    heads: int = 4
    n_classes: int = 0
    lr: float = 3e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 16
    top_k: int = 1000
    top_p: float = 1.0
    temperature: float = 1.0


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    loss_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LOSS_WEIGHTS))
    seed: int = 0
    perceptual_seed: int = 1
    fid_seed: int = 2

    @classmethod
    def paper_scale(cls) -> "TrainConfig":
        return cls(
            model=ModelConfig(
                image_size=256, patch=8, enc_dim=384, enc_depth=12, enc_heads=6, latent_dim=384,
                dec_dim=1024, dec_depth=24, dec_heads=16,
                plane_res=512, plane_channels=32, disc_channels=64, disc_max_channels=512,
            ),
            optim=OptimConfig(batch_size=128),
            stage2=Stage2Config(dim=768, depth=12, heads=12, n_classes=1000, batch_size=512, total_steps=140_000),
        )

    @classmethod
    def toy(cls, steps: int = 1200) -> "TrainConfig":
        """Small shapes for overfitting the 16-scene synthetic fixture on one CPU core.

        The critics join for the last third of the run; switched on from the
        start they hold reconstruction near the mean image at this budget.
        """
        return cls(
            model=ModelConfig(
                enc_dim=64, enc_depth=2, enc_heads=4, latent_dim=64, codebook_size=512,
                dec_dim=256, dec_depth=2, dec_heads=4, disc_channels=16, disc_max_channels=64,
            ),
            render=RenderConfig(n_proposal=16, n_nerf=16, ray_stride=4),
            optim=OptimConfig(
                lr=3e-4, warmup_steps=50, total_steps=steps, batch_size=16,
                head_lr_scale=10.0, field_lr_scale=10.0, adversarial_start=2 * steps // 3,
            ),
            stage2=Stage2Config(dim=128, depth=2, heads=4, lr=3e-3, warmup_steps=20, total_steps=400, batch_size=8, top_k=50),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data or {})
        weights = dict(DEFAULT_LOSS_WEIGHTS)
        unknown = set(data.get("loss_weights", {})) - set(weights)
        if unknown:
            raise ValueError(f"unknown loss weight keys: {sorted(unknown)}")
        weights.update(data.get("loss_weights", {}))
        sections = {"model": ModelConfig, "render": RenderConfig, "optim": OptimConfig, "stage2": Stage2Config}
        kwargs = {}
        for name, klass in sections.items():
            section = data.get(name, {}) or {}
            valid = {f.name for f in dataclasses.fields(klass)}
            bad = set(section) - valid
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = klass(**section)
        top = {k: data[k] for k in ("seed", "perceptual_seed", "fid_seed") if k in data}
        bad = set(data) - set(sections) - {"loss_weights", "seed", "perceptual_seed", "fid_seed"}
        if bad:
            raise ValueError(f"unknown config keys: {sorted(bad)}")
        return cls(loss_weights=weights, **kwargs, **top)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: Path | str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return TrainConfig.from_dict(yaml.safe_load(Path(path).read_text()))


def save_config(cfg: TrainConfig, path: Path | str) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
