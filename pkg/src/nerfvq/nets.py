"""Patch-transformer encoder, transformer triplane generator, and convolutional critics."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .diffcore import ContractViolation
from .scenefield import TriplaneSet


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        if dim % heads:
            raise ContractViolation(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: Tensor, causal: bool = False) -> Tensor:
        B, T, D = x.shape
        q, k, v = self.qkv(self.norm1(x)).reshape(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        att = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        x = x + self.proj(att.transpose(1, 2).reshape(B, T, D))
        return x + self.mlp(self.norm2(x))


class PatchTransformer(nn.Module):
    """Bidirectional transformer over a fixed grid of tokens with learned positions."""

    def __init__(self, n_tokens: int, dim: int, depth: int, heads: int):
        super().__init__()
        self.pos = nn.Parameter(torch.randn(1, n_tokens, dim) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, tokens: Tensor) -> Tensor:
        x = tokens + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class Encoder(nn.Module):
    """Images ``[B, H, W, 3]`` in [0, 1] to a latent grid ``[B, h, w, d_enc]``."""

    def __init__(self, image_size: int = 64, patch: int = 8, dim: int = 128, depth: int = 4, heads: int = 4, d_enc: int = 128):
        super().__init__()
        if image_size % patch:
            raise ContractViolation(f"image size {image_size} not divisible by patch {patch}")
        self.image_size = image_size
        self.patch = patch
        self.grid = image_size // patch
        self.embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.body = PatchTransformer(self.grid**2, dim, depth, heads)
        self.out = nn.Linear(dim, d_enc)

    def forward(self, img: Tensor) -> Tensor:
        if img.dim() == 3:
            img = img.unsqueeze(0)
        B, H, W, _ = img.shape
        if H % self.patch or W % self.patch or H != self.image_size or W != self.image_size:
            raise ContractViolation(f"expected {self.image_size}x{self.image_size} images, got {H}x{W}")
        x = self.embed(img.permute(0, 3, 1, 2) * 2.0 - 1.0)
        x = x.flatten(2).transpose(1, 2)
        x = self.out(self.body(x))
        return x.reshape(B, self.grid, self.grid, -1)


def encode_image(encoder: Encoder, img: Tensor) -> Tensor:
    return encoder(img)


class TriplaneDecoder(nn.Module):
    """Quantised latent grid to three ``[P, P, C]`` feature planes plus a background colour.

    Tokens go through a transformer.  Each output token is projected to the
    full ``(P/grid)^2`` patch of plane texels it covers and the patches are
    laid out with a pixel-shuffle (depth-to-space) rearrangement.  A residual
    3x3 convolution, zero at init, then lets neighbouring patches agree on
    their shared borders.
    """

    def __init__(
        self,
        grid: int = 8,
        d_in: int = 128,
        dim: int = 256,
        depth: int = 6,
        heads: int = 8,
        plane_res: int = 64,
        plane_channels: int = 16,
        rotation: Tensor | None = None,
    ):
        super().__init__()
        if plane_res % grid or plane_res < grid:
            raise ContractViolation(f"plane resolution {plane_res} must be a multiple of the token grid {grid}")
        self.grid = grid
        self.plane_res = plane_res
        self.plane_channels = plane_channels
        self.inp = nn.Linear(d_in, dim)
        self.body = PatchTransformer(grid * grid, dim, depth, heads)
        scale = plane_res // grid
        c = 3 * plane_channels
        self.to_patches = nn.Linear(dim, c * scale * scale)
        nn.init.zeros_(self.to_patches.bias)
        self.shuffle = nn.PixelShuffle(scale)
        self.refine = nn.Conv2d(c, c, 3, padding=1)
        nn.init.zeros_(self.refine.weight)
        nn.init.zeros_(self.refine.bias)
        self.background = nn.Linear(dim, 3)
        self.register_buffer("rotation", rotation if rotation is not None else torch.eye(3))

    def forward(self, z_q: Tensor) -> tuple[Tensor, Tensor]:
        """Returns planes ``[B, 3, P, P, C]`` and background colours ``[B, 3]``."""
        B = z_q.shape[0]
        g = self.grid
        x = self.body(self.inp(z_q.reshape(B, g * g, -1)))
        patches = self.to_patches(x).transpose(1, 2).reshape(B, -1, g, g)
        fmap = self.shuffle(patches)
        fmap = fmap + self.refine(fmap)
        planes = fmap.reshape(B, 3, self.plane_channels, self.plane_res, self.plane_res).permute(0, 1, 3, 4, 2)
        background = torch.sigmoid(self.background(x.mean(dim=1)))
        return planes, background

    def triplanes(self, planes: Tensor) -> list[TriplaneSet]:
        return [TriplaneSet(p, self.rotation.to(p.dtype)) for p in planes]


def decode_to_triplanes(decoder: TriplaneDecoder, z_q: Tensor) -> list[TriplaneSet]:
    planes, _ = decoder(z_q)
    return decoder.triplanes(planes)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv0 = nn.Conv2d(c_in, c_in, 3, padding=1)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, stride=2)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=2, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        y = F.leaky_relu(self.conv0(x), 0.2)
        y = F.leaky_relu(self.conv1(y), 0.2)
        return (y + self.skip(x)) / math.sqrt(2)


class Discriminator(nn.Module):
    """Residual strided-convolution critic producing one logit per image.

    ``kind="main"`` takes RGB, ``kind="novel"`` takes RGB plus a disparity channel.
    Inputs are channels-last ``[B, H, W, C]``.
    """

    def __init__(self, kind: str = "main", resolution: int = 32, channels: int = 32, max_channels: int = 128):
        super().__init__()
        if kind not in ("main", "novel"):
            raise ContractViolation(f"unknown discriminator kind {kind!r}")
        self.kind = kind
        self.in_channels = 3 if kind == "main" else 4
        self.resolution = resolution
        self.stem = nn.Conv2d(self.in_channels, channels, 1)
        blocks = []
        res, c = resolution, channels
        while res > 4:
            c_next = min(c * 2, max_channels)
            blocks.append(_ResBlock(c, c_next))
            res //= 2
            c = c_next
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(c * res * res, c), nn.LeakyReLU(0.2), nn.Linear(c, 1))

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[-1] != self.in_channels:
            raise ContractViolation(
                f"{self.kind} discriminator expects [B, H, W, {self.in_channels}], got {tuple(x.shape)}"
            )
        if x.shape[1] != self.resolution or x.shape[2] != self.resolution:
            raise ContractViolation(f"discriminator built for {self.resolution}px inputs, got {tuple(x.shape[1:3])}")
        y = F.leaky_relu(self.stem(x.permute(0, 3, 1, 2) * 2.0 - 1.0), 0.2)
        return self.head(self.blocks(y)).squeeze(-1)


def discriminate(d: Discriminator, batch: Tensor) -> Tensor:
    return d(batch)
