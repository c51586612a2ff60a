import math
import warnings

import numpy as np
import pytest
import torch

from nerfvq.losses import RandomFeatureExtractor
from nerfvq.pipeline.metrics import depth_accuracy, disparity_flatness, fid, frechet_distance, psnr


def test_psnr():
    a = torch.zeros(2, 4, 4, 3)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_depth_accuracy_identities():
    rng = np.random.default_rng(0)
    x = rng.random((16, 16))
    assert depth_accuracy(x, x) == pytest.approx(0.0, abs=1e-24)
    assert depth_accuracy(x, 3 * x + 7) == pytest.approx(0.0, abs=1e-20)


def test_depth_accuracy_independent_noise():
    rng = np.random.default_rng(1)
    vals = [depth_accuracy(rng.standard_normal((64, 64)), rng.standard_normal((64, 64))) for _ in range(200)]
    # each value averages 4096 terms of variance ~8; the mean of 200 has sd ~ 0.003
    assert np.mean(vals) == pytest.approx(2.0, abs=0.015)


def test_depth_accuracy_constant_map():
    with pytest.warns(RuntimeWarning):
        assert depth_accuracy(np.ones((4, 4)), np.random.rand(4, 4)) == 2.0


def test_frechet_cases():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((5, 5))
    S = A @ A.T + np.eye(5)
    mu = rng.standard_normal(5)
    assert frechet_distance(mu, S, mu, S) == pytest.approx(0.0, abs=1e-8)
    delta = rng.standard_normal(5)
    assert frechet_distance(mu, S, mu + delta, S) == pytest.approx(float(delta @ delta), abs=1e-8)
    assert frechet_distance([0.0], [[1.0]], [0.0], [[4.0]]) == pytest.approx(1.0, abs=1e-8)


def test_frechet_non_psd_warns():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.warns(RuntimeWarning):
        val = frechet_distance(np.zeros(2), bad, np.zeros(2), np.eye(2))
    assert np.isfinite(val)


def test_frechet_matches_scipy_sqrtm():
    from scipy import linalg

    rng = np.random.default_rng(3)
    A, B = rng.standard_normal((2, 6, 6))
    S1, S2 = A @ A.T, B @ B.T
    ref = np.trace(S1 + S2 - 2 * np.real(linalg.sqrtm(S1 @ S2)))
    assert frechet_distance(np.zeros(6), S1, np.zeros(6), S2) == pytest.approx(ref, rel=1e-8)


def test_fid_same_set_is_zero():
    ext = RandomFeatureExtractor(2)
    imgs = torch.rand(64, 16, 16, 3, generator=torch.Generator().manual_seed(0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert fid(ext, imgs, imgs) == pytest.approx(0.0, abs=1e-6)
        assert fid(ext, imgs, imgs * 0.5) > 1e-4


def test_disparity_flatness():
    ref = torch.rand(3, 8, 8)
    assert disparity_flatness(ref, ref) == pytest.approx(1.0)
    assert disparity_flatness(0.1 * ref + 5, ref) == pytest.approx(0.1)


def _one_hot_fixture(seed):
    gen = torch.Generator().manual_seed(seed)
    D = torch.rand(10, 6, generator=gen, dtype=torch.float64)
    W = torch.zeros(10, 6, dtype=torch.float64)
    hit = torch.randint(0, 6, (10,), generator=gen)
    W[torch.arange(10), hit] = 1
    return D, W, D[torch.arange(10), hit].clone()


def test_report_disparity_scale():
    from nerfvq.losses import align_depth
    from nerfvq.pipeline.metrics import report_disparity_scale

    fixtures = [_one_hot_fixture(s) for s in range(4)]
    assert report_disparity_scale([align_depth(D, W, d) for D, W, d in fixtures]) == pytest.approx(1.0)
    halved = [align_depth(D / 2, W, d) for D, W, d in fixtures]
    assert report_disparity_scale(halved) == pytest.approx(2.0)
    rng = torch.Generator().manual_seed(9)
    random = [align_depth(torch.rand(5, 4, generator=rng), torch.rand(5, 4, generator=rng), torch.rand(5, generator=rng)) for _ in range(5)]
    assert report_disparity_scale(random) == pytest.approx(float(np.mean([float(a.s_star) for a in random])))
