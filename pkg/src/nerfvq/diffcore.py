"""Differentiable numerics substrate.

Everything continuous in the package is a ``torch.Tensor``; torch's autograd
tape provides reverse-mode gradients.  This module adds the few contracts the
rest of the package relies on: a scalar-only ``backward`` that returns a
gradient map, ``stop_grad``, a border-clamped ``bilinear_sample`` for
triplane lookups, seeded generators, and a central-difference gradient
checker that is independent of autograd.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor


class ContractViolation(ValueError):
    """Raised when an operation is called outside its documented domain."""


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


@contextlib.contextmanager
def precision(dtype: torch.dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype (float32 or float64)."""
    if dtype not in (torch.float32, torch.float64):
        raise ContractViolation(f"unsupported precision {dtype}")
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def backward(root: Tensor, leaves: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar ``root`` with respect to each of ``leaves``.

    Leaves that do not influence ``root`` get a zero gradient rather than
    ``None``.
    """
    if root.numel() != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    grads = torch.autograd.grad(root.reshape(()), list(leaves), allow_unused=True)
    return [torch.zeros_like(x) if g is None else g for x, g in zip(leaves, grads)]


def stop_grad(t: Tensor) -> Tensor:
    return t.detach()


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def bilinear_sample(plane: Tensor, uv: Tensor) -> Tensor:
    """Bilinearly interpolate ``plane[H, W, C]`` at ``uv[N, 2]``.

    ``uv[:, 0]`` indexes the width axis and ``uv[:, 1]`` the height axis.
    Coordinates -1 and +1 land on the centres of the first and last texels
    (align-corners convention); anything outside is clamped to the border.
    """
    return bilinear_sample_stack(plane.unsqueeze(0), uv.unsqueeze(0))[0]


def bilinear_sample_stack(planes: Tensor, uv: Tensor) -> Tensor:
    """Batched ``bilinear_sample``: ``planes[B, H, W, C]``, ``uv[B, N, 2]`` -> ``[B, N, C]``."""
    grid = uv.clamp(-1.0, 1.0).unsqueeze(1)
    out = F.grid_sample(planes.permute(0, 3, 1, 2), grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out[:, :, 0].transpose(1, 2)


def finite_difference_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-4) -> Tensor:
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``param`` (perturbed in place)."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = float(fn())
            flat[i] = orig - h
            f_minus = float(fn())
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2 * h)
    return grad


def gradient_check(
    fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4, floor: float = 1e-6
) -> float:
    """Max relative error between autograd and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)`` per entry, so entries
    whose true gradient is ~0 are compared absolutely against ``floor``.
    """
    analytic = backward(fn(), params)
    worst = 0.0
    for p, a in zip(params, analytic):
        n = finite_difference_grad(fn, p, h=h)
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst
