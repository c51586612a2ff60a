"""Pinhole cameras, ray generation and the canonical / novel pose scheme."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
from torch import Tensor

from .diffcore import ContractViolation

CAMERA_RADIUS = 2.732
FOV_DEG = 49.13
NEAR = 0.7
FAR = 1e6
TRAIN_DISC_RADIUS = 0.4
EVAL_DISC_RADIUS = 0.2


@dataclass(frozen=True)
class PoseSpec:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    fov_deg: float = FOV_DEG
    near: float = NEAR
    far: float = FAR

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ContractViolation(f"need 0 < near < far, got {self.near}, {self.far}")
        fwd = torch.tensor(self.look_at, dtype=torch.float64) - torch.tensor(self.position, dtype=torch.float64)
        cross = torch.linalg.cross(fwd, torch.tensor(self.up, dtype=torch.float64))
        if float(cross.norm()) < 1e-12 * max(float(fwd.norm()), 1e-300):
            raise ContractViolation("up vector is parallel to the view direction")

    def to_list(self) -> list[float]:
        """9 floats (position, look_at, up) followed by fov, near, far."""
        return [*self.position, *self.look_at, *self.up, self.fov_deg, self.near, self.far]

    @classmethod
    def from_list(cls, values) -> "PoseSpec":
        v = [float(x) for x in values]
        if len(v) != 12:
            raise ContractViolation(f"pose needs 12 floats, got {len(v)}")
        return cls(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]), v[9], v[10], v[11])

    def camera_axes(self, dtype=torch.float64) -> tuple[Tensor, Tensor, Tensor]:
        """Unit (forward, right, up) vectors of the camera frame."""
        pos = torch.tensor(self.position, dtype=dtype)
        fwd = torch.tensor(self.look_at, dtype=dtype) - pos
        fwd = fwd / fwd.norm()
        right = torch.linalg.cross(fwd, torch.tensor(self.up, dtype=dtype))
        right = right / right.norm()
        up = torch.linalg.cross(right, fwd)
        return fwd, right, up


@dataclass
class RayBundle:
    origins: Tensor  # [N, 3]
    directions: Tensor  # [N, 3], unit norm
    pixel_coords: Tensor  # [N, 2] (row, col) of the pixel centre


def canonical_pose(
    radius: float = CAMERA_RADIUS, fov_deg: float = FOV_DEG, near: float = NEAR, far: float = FAR
) -> PoseSpec:
    """Camera on the -x axis looking at the origin with +z up."""
    return PoseSpec(position=(-radius, 0.0, 0.0), fov_deg=fov_deg, near=near, far=far)


def _disc_pose(base: PoseSpec, y: float, z: float) -> PoseSpec:
    return replace(base, position=(base.position[0], base.position[1] + y, base.position[2] + z))


def sample_novel_pose(
    rng: torch.Generator, disc_radius: float = TRAIN_DISC_RADIUS, base: PoseSpec | None = None
) -> PoseSpec:
    """Camera position uniform in a YZ disc centred on the canonical position.

    Uses ``r = R sqrt(u)``, ``theta = 2 pi u'``; look-at, up and intrinsics are
    those of ``base``.
    """
    if disc_radius < 0:
        raise ContractViolation("disc_radius must be non-negative")
    base = base or canonical_pose()
    if disc_radius == 0:
        return base
    u = torch.rand(2, generator=rng, dtype=torch.float64)
    r = disc_radius * math.sqrt(float(u[0]))
    theta = 2 * math.pi * float(u[1])
    return _disc_pose(base, r * math.cos(theta), r * math.sin(theta))


def disc_boundary_poses(n: int, disc_radius: float = TRAIN_DISC_RADIUS, base: PoseSpec | None = None) -> list[PoseSpec]:
    """``n`` poses evenly spaced on the boundary circle of the pose disc."""
    base = base or canonical_pose()
    return [
        _disc_pose(base, disc_radius * math.cos(2 * math.pi * k / n), disc_radius * math.sin(2 * math.pi * k / n))
        for k in range(n)
    ]


def generate_rays(
    pose: PoseSpec,
    height: int,
    width: int,
    dtype: torch.dtype | None = None,
    stride: int = 1,
    offset: tuple[int, int] = (0, 0),
) -> RayBundle:
    """One ray per pixel centre, row-major, rows going from top (+up) to bottom.

    The field of view spans the full image width.  ``stride``/``offset``
    select the sub-grid of pixels ``(offset[0] + stride*i, offset[1] + stride*j)``
    of the full ``height x width`` frame, so a strided render is an exact pixel
    subsample of the full-resolution one.
    """
    if height < 1 or width < 1:
        raise ContractViolation("image extent must be at least 1x1")
    dtype = dtype or torch.get_default_dtype()
    fwd, right, up = pose.camera_axes(torch.float64)
    focal = 0.5 * width / math.tan(math.radians(pose.fov_deg) / 2)
    rows = torch.arange(offset[0], height, stride, dtype=torch.float64) + 0.5
    cols = torch.arange(offset[1], width, stride, dtype=torch.float64) + 0.5
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    x_cam = (cc - width / 2) / focal
    y_cam = (height / 2 - rr) / focal
    dirs = fwd + x_cam[..., None] * right + y_cam[..., None] * up
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    dirs = dirs.reshape(-1, 3)
    origins = torch.tensor(pose.position, dtype=torch.float64).expand_as(dirs)
    pix = torch.stack([rr - 0.5, cc - 0.5], dim=-1).reshape(-1, 2)
    return RayBundle(origins.to(dtype).contiguous(), dirs.to(dtype), pix.to(dtype))
