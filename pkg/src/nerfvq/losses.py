"""Stage 1 objective terms and their weighted total."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .diffcore import ContractViolation

# one weight per Stage 1 loss term
DEFAULT_LOSS_WEIGHTS = {
    "l2": 1.0,
    "perceptual": 1e-1,
    "logit_laplace": 1e-1,
    "discriminator": 1e-1,
    "novel_discriminator": 1e-1,
    "quantizer": 1.0,
    "weighted_pointwise_depth": 1e1,
    "negative_depth_scale_penalty": 1.0,
    "large_depth_scale_penalty": 1e-3,
    "interlevel": 1.0,
    "distortion": 2.5e-1,
}

# report term -> weight key; "scale" carries its two penalty weights internally
TERM_WEIGHT_KEYS = {
    "l2": "l2",
    "perceptual": "perceptual",
    "logit_laplace": "logit_laplace",
    "gan_main": "discriminator",
    "gan_novel": "novel_discriminator",
    "vq": "quantizer",
    "depth": "weighted_pointwise_depth",
    "scale": None,
    "interlevel": "interlevel",
    "distortion": "distortion",
}


@dataclass
class DepthAlignment:
    s_star: Tensor
    t_star: Tensor
    degenerate: bool = False


def align_depth(D: Tensor, W: Tensor, d: Tensor, rel_eps: float = 1e-12) -> DepthAlignment:
    """Weighted least-squares fit of ``s * D[i, k] + t`` to ``d[i]`` with weights ``W[i, k]``.

    Solves the 2x2 normal equations in closed form, so gradients flow through
    ``s*`` and ``t*`` to both ``D`` and ``W``.  A singular system (e.g. all
    ``D`` equal under the weights) gives ``s* = 0`` and ``t*`` = weighted mean
    of ``d``, flagged as degenerate.
    """
    if (W < 0).any():
        raise ContractViolation("alignment weights must be non-negative")
    dd = d.unsqueeze(-1).expand_as(D)
    a = W.sum()
    if float(a.detach()) <= 0:
        raise ContractViolation("alignment weights are all zero")
    b = (W * D).sum()
    c = (W * D * D).sum()
    e = (W * dd).sum()
    f = (W * D * dd).sum()
    det = a * c - b * b
    # det = a^2 * weighted variance of D
    det_v, ac_v = float(det.detach()), float((a * c).detach())
    if det_v <= rel_eps * ac_v or det_v == 0.0:
        return DepthAlignment(torch.zeros((), dtype=D.dtype), e / a, True)
    s = (a * f - b * e) / det
    t = (c * e - b * f) / det
    return DepthAlignment(s, t, False)


def depth_loss(D: Tensor, W: Tensor, d: Tensor, alignment: DepthAlignment | None = None) -> Tensor:
    """Weighted scale/shift-invariant pointwise disparity loss for one image.

    ``D`` and ``W`` are ``[N, L]`` (N rays, L samples), ``d`` is ``[N]``.
    """
    al = alignment if alignment is not None else align_depth(D, W, d)
    resid = al.s_star * D + al.t_star - d.unsqueeze(-1)
    return (W * resid**2).sum() / D.shape[0]


def scale_loss(s_star: Tensor, negative_weight: float = 1.0, large_weight: float = 1e-3) -> Tensor:
    return negative_weight * torch.clamp(-s_star, min=0) + large_weight * torch.clamp(s_star - 1, min=0)


@dataclass
class GanTerms:
    generator: Tensor
    discriminator: Tensor


def gan_losses(logits_real: Tensor, logits_fake: Tensor) -> GanTerms:
    """Non-saturating GAN objective in softplus form, averaged over the batch."""
    return GanTerms(
        generator=F.softplus(-logits_fake).mean(),
        discriminator=F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean(),
    )


class RandomFeatureExtractor(nn.Module):
    """Fixed, seeded random conv stack used as a stand-in perceptual / FID feature network.

    Produces features at two scales (input and 2x average-pooled).  Parameters
    are buffers, so they are never trained.
    """

    def __init__(self, seed: int = 0, channels: tuple[int, ...] = (16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        c_in = 3
        for i, c in enumerate(channels):
            w = torch.randn(c, c_in, 3, 3, generator=gen) / math.sqrt(9 * c_in)
            self.register_buffer(f"w{i}", w)
            c_in = c
        self.n_layers = len(channels)

    def _stack(self, x: Tensor) -> list[Tensor]:
        feats = []
        for i in range(self.n_layers):
            w = getattr(self, f"w{i}").to(x.dtype)
            x = F.leaky_relu(F.conv2d(x, w, padding=1, stride=1 if i == 0 else 2), 0.2)
            feats.append(x)
        return feats

    def forward(self, img: Tensor) -> list[Tensor]:
        """``img`` is ``[B, H, W, 3]`` in [0, 1]; returns a list of NCHW feature maps."""
        x = img.permute(0, 3, 1, 2) * 2.0 - 1.0
        return self._stack(x) + self._stack(F.avg_pool2d(x, 2))

    def embed(self, img: Tensor) -> Tensor:
        """Global-average-pooled features ``[B, F]`` (for Frechet statistics)."""
        return torch.cat([f.mean(dim=(2, 3)) for f in self(img)], dim=-1)


def perceptual_loss(extractor: RandomFeatureExtractor, pred: Tensor, target: Tensor) -> Tensor:
    fp = extractor(pred)
    ft = extractor(target)
    return sum(F.mse_loss(a, b) for a, b in zip(fp, ft)) / len(fp)


def logit_laplace_loss(pred: Tensor, target: Tensor, log_scale: Tensor | float = 0.0, eps: float = 0.1) -> Tensor:
    """Mean per-channel Laplace NLL in logit space.

    Both prediction and target are remapped ``x -> (1 - 2 eps) x + eps`` before
    the logit, so the location is ``logit(pred~)`` and the observation
    ``logit(target~)``.  NLL is ``log(2b) + |y - mu| / b`` with ``b = exp(log_scale)``.
    """
    mu = torch.logit((1 - 2 * eps) * pred + eps)
    y = torch.logit((1 - 2 * eps) * target + eps)
    log_scale = torch.as_tensor(log_scale, dtype=pred.dtype)
    return (math.log(2.0) + log_scale + (y - mu).abs() * torch.exp(-log_scale)).mean()


@dataclass
class ReconstructionTerms:
    l2: Tensor
    perceptual: Tensor
    logit_laplace: Tensor


def reconstruction_loss(
    pred_rgb: Tensor,
    pred_loglap_params: Tensor | float,
    target: Tensor,
    extractor: RandomFeatureExtractor | None = None,
) -> ReconstructionTerms:
    """``pred_rgb`` / ``target`` are images ``[B, H, W, 3]``; perceptual needs an extractor."""
    l2 = F.mse_loss(pred_rgb, target)
    perc = perceptual_loss(extractor, pred_rgb, target) if extractor is not None else torch.zeros((), dtype=pred_rgb.dtype)
    return ReconstructionTerms(l2, perc, logit_laplace_loss(pred_rgb, target, pred_loglap_params))


@dataclass
class LossReport:
    terms: dict[str, Tensor]
    weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LOSS_WEIGHTS))
    total: Tensor | None = None
    diagnostics: dict[str, float] = field(default_factory=dict)

    def weighted(self) -> dict[str, Tensor]:
        out = {}
        for name, value in self.terms.items():
            key = TERM_WEIGHT_KEYS.get(name)
            out[name] = value if key is None else self.weights[key] * value
        return out

    def scalars(self) -> dict[str, float]:
        return {k: v.item() for k, v in self.terms.items()}


def total_loss(report: LossReport) -> Tensor:
    for name, value in report.terms.items():
        if name not in TERM_WEIGHT_KEYS:
            raise ContractViolation(f"unknown loss term {name!r}")
        if not torch.isfinite(value).all():
            raise FloatingPointError(f"loss term {name!r} is not finite: {float(value)}")
    return sum(report.weighted().values())
