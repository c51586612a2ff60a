"""Contracted triplane scene representation and the field MLPs.

Plane-to-axis convention (in the pre-rotated, contracted frame ``c``):

    plane 0 is sampled at (c_x, c_y)
    plane 1 is sampled at (c_x, c_z)
    plane 2 is sampled at (c_y, c_z)

with the first coordinate on the plane's width axis.  Contracted coordinates
live in the radius-2 ball, so they are halved to reach [-1, 1] plane space.
Features from the three planes are summed.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .diffcore import ContractViolation, bilinear_sample_stack

PLANE_AXES = ((0, 1), (0, 2), (1, 2))


def contract(x: Tensor) -> Tensor:
    """Radial contraction of R^3 into the open ball of radius 2.

    Identity for ``|x| <= 1``, otherwise ``(2 - 1/|x|) x/|x|``.
    """
    norm = x.norm(dim=-1, keepdim=True)
    safe = norm.clamp(min=1.0)
    return torch.where(norm <= 1.0, x, (2.0 - 1.0 / safe) * x / safe)


def random_rotation(seed: int, dtype=torch.float64) -> Tensor:
    """Seeded random 3x3 rotation (Haar-distributed, det = +1)."""
    gen = torch.Generator().manual_seed(seed)
    a = torch.randn(3, 3, generator=gen, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r))
    if torch.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q.to(dtype)


@dataclass
class TriplaneSet:
    planes: Tensor  # [3, P, P, C]
    rotation: Tensor  # [3, 3] orthonormal, applied as rotation @ x

    def __post_init__(self):
        if self.planes.dim() != 4 or self.planes.shape[0] != 3:
            raise ContractViolation(f"triplanes must be [3, P, P, C], got {tuple(self.planes.shape)}")
        eye = torch.eye(3, dtype=self.rotation.dtype)
        if not torch.allclose(self.rotation.T @ self.rotation, eye, atol=1e-6):
            raise ContractViolation("pre-rotation is not orthonormal")

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[-1]

    def features(self, points: Tensor) -> Tensor:
        """Summed triplane features ``[N, C]`` at world-space ``points[N, 3]``."""
        rot = self.rotation.to(points.dtype)
        c = contract(points @ rot.T)
        uv = torch.stack([c[:, list(ax)] for ax in PLANE_AXES]) * 0.5
        return bilinear_sample_stack(self.planes, uv).sum(dim=0)


class FieldMLP(nn.Module):
    """Two hidden layers of 32 units mapping triplane features to density (+ RGB)."""

    def __init__(self, in_features: int, hidden: int = 32, with_rgb: bool = True, density_bias: float = -5.0):
        super().__init__()
        self.with_rgb = with_rgb
        self.density_bias = density_bias
        self.net = nn.Sequential(
            nn.Linear(in_features, hidden),
            nn.Softplus(),
            nn.Linear(hidden, hidden),
            nn.Softplus(),
        )
        self.head = nn.Linear(hidden, 4 if with_rgb else 1)

    def forward(self, feat: Tensor) -> tuple[Tensor, Tensor | None]:
        out = self.head(self.net(feat))
        density = F.softplus(out[:, 0] + self.density_bias)
        rgb = torch.sigmoid(out[:, 1:4]) if self.with_rgb else None
        return density, rgb


def query_field(tri: TriplaneSet, mlp: FieldMLP, points: Tensor) -> tuple[Tensor, Tensor | None]:
    """Density ``[N]`` and (NeRF MLP only) RGB ``[N, 3]`` at world points.

    There is no view-direction input: the field is view independent.
    """
    return mlp(tri.features(points))
