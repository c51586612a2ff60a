"""Factorized, l2-normalised vector quantisation with straight-through gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .diffcore import ContractViolation


@dataclass
class QuantizeResult:
    indices: Tensor  # [n]
    z_q: Tensor  # [n, d_out]
    vq_loss: Tensor  # scalar
    z_proj: Tensor  # [n, d], normalised projection before lookup
    codes: Tensor  # [n, d], selected normalised codebook entries


class FactorizedCodebook(nn.Module):
    """Codebook of ``K`` unit vectors of dimension ``d`` between two linear projections.

    Lookup happens in the low-dimensional normalised space; the selected code
    is mapped back out to ``d_out`` channels.  ``beta`` weights the commitment
    term of the VQ loss.
    """

    def __init__(self, d_in: int, d_out: int | None = None, K: int = 8192, d: int = 8, beta: float = 0.25):
        super().__init__()
        self.K = K
        self.d = d
        self.beta = beta
        self.project_in = nn.Linear(d_in, d)
        self.project_out = nn.Linear(d, d_out if d_out is not None else d_in)
        self.entries = nn.Parameter(torch.randn(K, d))

    def normalized_entries(self) -> Tensor:
        return F.normalize(self.entries, dim=-1)

    def nearest(self, z_proj: Tensor) -> Tensor:
        """Index of the nearest normalised entry for each normalised row of ``z_proj``."""
        codes = self.normalized_entries().detach()
        # unit vectors: argmin ||a - b||^2 == argmax <a, b>
        return torch.argmax(z_proj.detach() @ codes.T, dim=-1)

    def lookup(self, indices: Tensor) -> Tensor:
        """Decoder-side vectors for token indices (used when decoding Stage 2 samples)."""
        return self.project_out(self.normalized_entries()[indices])

    def forward(self, z: Tensor) -> QuantizeResult:
        z_proj = F.normalize(self.project_in(z), dim=-1)
        indices = self.nearest(z_proj)
        codes = self.normalized_entries()[indices]
        codebook_term = F.mse_loss(codes, z_proj.detach())
        commitment = F.mse_loss(z_proj, codes.detach())
        vq_loss = codebook_term + self.beta * commitment
        z_st = z_proj + (codes - z_proj).detach()
        return QuantizeResult(indices, self.project_out(z_st), vq_loss, z_proj, codes)

    def usage(self, indices: Tensor) -> tuple[np.ndarray, float]:
        """Usage histogram over the codebook and the fraction of never-used entries."""
        hist = np.bincount(indices.reshape(-1).cpu().numpy(), minlength=self.K)
        return hist, float((hist == 0).mean())


def quantize(codebook: FactorizedCodebook, z: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    res = codebook(z)
    return res.indices, res.z_q, res.vq_loss


def tokens_to_sequence(grid: Tensor) -> Tensor:
    """Row-major flattening of an ``[h, w]`` token grid (leading batch dims kept)."""
    return grid.reshape(*grid.shape[:-2], grid.shape[-2] * grid.shape[-1])


def sequence_to_tokens(seq: Tensor, h: int, w: int) -> Tensor:
    if seq.shape[-1] != h * w:
        raise ContractViolation(f"sequence length {seq.shape[-1]} does not match grid {h}x{w}")
    return seq.reshape(*seq.shape[:-1], h, w)
