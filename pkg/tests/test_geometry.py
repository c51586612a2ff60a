import math

import numpy as np
import pytest
import torch

from nerfvq.diffcore import ContractViolation, make_generator
from nerfvq.geometry import (
    PoseSpec,
    canonical_pose,
    disc_boundary_poses,
    generate_rays,
    sample_novel_pose,
)
from nerfvq.scenefield import random_rotation


def test_canonical_pose_values():
    pose = canonical_pose()
    assert pose.position == (-2.732, 0.0, 0.0)
    fwd, _, _ = pose.camera_axes()
    assert torch.allclose(fwd, torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))
    assert (pose.near, pose.far) == (0.7, 1e6)
    assert pose.fov_deg == 49.13


def test_zero_radius_is_canonical():
    assert sample_novel_pose(make_generator(0), 0.0) == canonical_pose()


def test_novel_positions_on_disc():
    gen = make_generator(1)
    for _ in range(500):
        p = sample_novel_pose(gen, 0.4)
        assert abs(p.position[0] + 2.732) < 1e-9
        assert p.position[1] ** 2 + p.position[2] ** 2 <= 0.4**2 + 1e-12


def test_novel_pose_moments():
    gen = make_generator(2)
    R, n = 0.4, 100_000
    yz = np.array([sample_novel_pose(gen, R).position[1:] for _ in range(n)])
    # uniform disc: Var(y) = R^2/4
    sigma = math.sqrt(R**2 / 4 / n)
    assert abs(yz[:, 0].mean()) < 3 * sigma
    assert abs(yz[:, 1].mean()) < 3 * sigma
    r2 = (yz**2).sum(1)
    # r^2 is uniform on [0, R^2]
    assert abs(r2.mean() - R**2 / 2) < 3 * math.sqrt(R**4 / 12 / n)


def test_negative_radius_rejected():
    with pytest.raises(ContractViolation):
        sample_novel_pose(make_generator(0), -0.1)


def test_pose_validation():
    with pytest.raises(ContractViolation):
        PoseSpec((0.0, 0.0, -1.0), up=(0.0, 0.0, 1.0))
    with pytest.raises(ContractViolation):
        PoseSpec((-1.0, 0.0, 0.0), near=2.0, far=1.0)


def test_pose_list_round_trip():
    p = sample_novel_pose(make_generator(5), 0.3)
    assert PoseSpec.from_list(p.to_list()) == p


def test_central_ray_odd_resolution():
    rays = generate_rays(canonical_pose(), 9, 9, dtype=torch.float64)
    centre = rays.directions[4 * 9 + 4]
    assert torch.allclose(centre, torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64), atol=1e-6)


def test_horizontal_fov():
    # half-integer pixel centres: the edge-to-edge angle of the outermost ray
    # centres is 2 * atan((W - 1)/W * tan(fov/2))
    W = 64
    rays = generate_rays(canonical_pose(), W, W, dtype=torch.float64)
    d = rays.directions.reshape(W, W, 3)
    # average the two middle rows to land on the horizontal midline
    left = d[W // 2 - 1 : W // 2 + 1, 0].mean(0)
    right = d[W // 2 - 1 : W // 2 + 1, -1].mean(0)
    left, right = left / left.norm(), right / right.norm()
    left[2] = right[2] = 0
    angle = math.degrees(math.acos(float(left @ right / (left.norm() * right.norm()))))
    expected = 2 * math.degrees(math.atan((W - 1) / W * math.tan(math.radians(49.13) / 2)))
    assert angle == pytest.approx(expected, abs=1e-9)
    assert abs(angle - 49.13) < 1.0


def test_origins_equal_position_and_unit_directions():
    pose = sample_novel_pose(make_generator(3), 0.4)
    rays = generate_rays(pose, 5, 7, dtype=torch.float64)
    assert torch.equal(rays.origins, torch.tensor(pose.position, dtype=torch.float64).expand(35, 3))
    assert torch.allclose(rays.directions.norm(dim=-1), torch.ones(35, dtype=torch.float64))


def test_top_row_points_up():
    rays = generate_rays(canonical_pose(), 4, 4, dtype=torch.float64)
    d = rays.directions.reshape(4, 4, 3)
    assert (d[0, :, 2] > 0).all() and (d[-1, :, 2] < 0).all()
    assert (d[:, 0, 1] > 0).all() or (d[:, 0, 1] < 0).all()


def test_strided_rays_are_a_subsample():
    pose = canonical_pose()
    full = generate_rays(pose, 8, 8, dtype=torch.float64).directions.reshape(8, 8, 3)
    sub = generate_rays(pose, 8, 8, dtype=torch.float64, stride=2, offset=(1, 0)).directions.reshape(4, 4, 3)
    assert torch.equal(sub, full[1::2, 0::2])


def test_rotation_equivariance():
    base = canonical_pose()
    rays = generate_rays(base, 6, 6, dtype=torch.float64)
    for seed in range(5):
        R = random_rotation(seed)
        rot = lambda v: tuple((R @ torch.tensor(v, dtype=torch.float64)).tolist())
        pose = PoseSpec(rot(base.position), rot(base.look_at), rot(base.up))
        rr = generate_rays(pose, 6, 6, dtype=torch.float64)
        assert torch.allclose(rr.directions, rays.directions @ R.T, atol=1e-12)


def test_disc_boundary_poses():
    poses = disc_boundary_poses(8, 0.4)
    assert len(poses) == 8
    for p in poses:
        assert math.hypot(p.position[1], p.position[2]) == pytest.approx(0.4, abs=1e-12)
