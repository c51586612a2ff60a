import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))
torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


TINY = {
    "model": dict(
        image_size=16, patch=8, enc_dim=16, enc_depth=1, enc_heads=2, latent_dim=16,
        codebook_size=32, codebook_dim=4, dec_dim=16, dec_depth=1, dec_heads=2,
        plane_res=8, plane_channels=4, mlp_hidden=8,
        disc_channels=8, disc_max_channels=16,
    ),
    "render": dict(n_proposal=4, n_nerf=4),
    "optim": dict(lr=1e-3, warmup_steps=2, total_steps=20, batch_size=2),
    "stage2": dict(dim=16, depth=1, heads=2, batch_size=4, warmup_steps=1, total_steps=10, top_k=8),
}


@pytest.fixture
def tiny_cfg():
    from nerfvq.pipeline import TrainConfig

    return TrainConfig.from_dict(TINY)


@pytest.fixture
def tiny_data():
    from nerfvq.pipeline import synthetic_scenes

    return synthetic_scenes(4, 16, seed=0).to(torch.float32)


# -- acceptance summary: one line per numbered criterion ----------------------

_CRITERIA: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "slow: long training runs")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for key in report.keywords:
        if key.startswith("criterion_"):
            _CRITERIA.setdefault(int(key.split("_")[1]), []).append(report.outcome)


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            item.keywords[f"criterion_{marker.args[0]}"] = True


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcomes = _CRITERIA[n]
        status = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status} ({outcomes.count('passed')}/{len(outcomes)} checks)")
