"""Stage 1 autoencoder: image -> tokens -> triplanes -> rendered views."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

from ..geometry import PoseSpec, RayBundle, canonical_pose, generate_rays
from ..nets import Encoder, TriplaneDecoder
from ..quantizer import FactorizedCodebook, QuantizeResult
from ..renderer import RaySampleSet, RenderOutput, RenderSettings, render_rays
from ..scenefield import FieldMLP, TriplaneSet, random_rotation
from .config import TrainConfig


@dataclass
class Encoded:
    quant: QuantizeResult
    z_q: Tensor  # [B, h, w, latent_dim]
    tokens: Tensor  # [B, h, w]


@dataclass
class View:
    rgb: Tensor  # [B, h, w, 3]
    disparity: Tensor  # [B, h, w] accumulated disparity
    outputs: list[RenderOutput]
    proposals: list[RaySampleSet]
    nerfs: list[RaySampleSet]


class Stage1Model(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        m = cfg.model
        self.cfg = cfg
        self.encoder = Encoder(m.image_size, m.patch, m.enc_dim, m.enc_depth, m.enc_heads, m.latent_dim)
        self.codebook = FactorizedCodebook(m.latent_dim, m.latent_dim, m.codebook_size, m.codebook_dim, m.commitment)
        self.decoder = TriplaneDecoder(
            self.encoder.grid, m.latent_dim, m.dec_dim, m.dec_depth, m.dec_heads,
            m.plane_res, m.plane_channels,
            rotation=random_rotation(m.rotation_seed, torch.get_default_dtype()),
        )
        self.proposal_mlp = FieldMLP(m.plane_channels, m.mlp_hidden, with_rgb=False, density_bias=m.density_bias)
        self.nerf_mlp = FieldMLP(m.plane_channels, m.mlp_hidden, with_rgb=True, density_bias=m.density_bias)

    def param_groups(self) -> dict[str, list[torch.nn.Parameter]]:
        """Parameters split into ``body``, ``head`` (decoder patch projection) and ``field`` (MLPs)."""
        d = self.decoder
        head = [*d.to_patches.parameters(), *d.refine.parameters()]
        field = [*self.proposal_mlp.parameters(), *self.nerf_mlp.parameters()]
        taken = {id(p) for p in head + field}
        body = [p for p in self.parameters() if id(p) not in taken]
        return {"body": body, "head": head, "field": field}

    @property
    def grid(self) -> int:
        return self.encoder.grid

    def canonical(self) -> PoseSpec:
        r = self.cfg.render
        return canonical_pose(r.camera_radius, r.fov_deg, r.near, r.far)

    def render_settings(self, train: bool) -> RenderSettings:
        r = self.cfg.render
        return RenderSettings(r.n_proposal, r.n_nerf, r.near, r.far, r.stratified_train if train else r.stratified_eval)

    def encode(self, images: Tensor) -> Encoded:
        lat = self.encoder(images)
        B, h, w, d = lat.shape
        q = self.codebook(lat.reshape(-1, d))
        return Encoded(q, q.z_q.reshape(B, h, w, -1), q.indices.reshape(B, h, w))

    def embed_tokens(self, tokens: Tensor) -> Tensor:
        """Decoder input for integer token grids ``[B, h, w]``."""
        return self.codebook.lookup(tokens)

    def decode(self, z_q: Tensor) -> tuple[list[TriplaneSet], Tensor]:
        planes, background = self.decoder(z_q)
        return self.decoder.triplanes(planes), background

    def render(
        self,
        scenes: list[TriplaneSet],
        background: Tensor,
        poses: list[PoseSpec],
        stride: int = 1,
        offsets: list[tuple[int, int]] | None = None,
        train: bool = False,
        rng: torch.Generator | None = None,
        chunk: int | None = None,
    ) -> View:
        """Render each scene from its pose on the (strided) full-resolution pixel grid."""
        res = self.cfg.model.image_size
        settings = self.render_settings(train)
        dtype = scenes[0].planes.dtype
        rgbs, disps, outs, props, nerfs = [], [], [], [], []
        for b, (tri, pose) in enumerate(zip(scenes, poses)):
            off = offsets[b] if offsets is not None else (0, 0)
            rays = generate_rays(pose, res, res, dtype=dtype, stride=stride, offset=off)
            n = rays.origins.shape[0]
            side = int(round(n**0.5))
            if chunk is None or n <= chunk:
                out, prop, nerf = render_rays(tri, self.proposal_mlp, self.nerf_mlp, rays, background[b], settings, rng)
            else:
                parts = [
                    render_rays(tri, self.proposal_mlp, self.nerf_mlp, _slice(rays, i, i + chunk), background[b], settings, rng)
                    for i in range(0, n, chunk)
                ]
                out = _cat_outputs([p[0] for p in parts])
                prop = _cat_samples([p[1] for p in parts])
                nerf = _cat_samples([p[2] for p in parts])
            rgbs.append(out.rgb.reshape(side, side, 3))
            disps.append(out.accumulated_disparity.reshape(side, side))
            outs.append(out)
            props.append(prop)
            nerfs.append(nerf)
        return View(torch.stack(rgbs), torch.stack(disps), outs, props, nerfs)

    @torch.no_grad()
    def reconstruct(self, images: Tensor, poses: list[PoseSpec] | None = None, chunk: int = 4096) -> View:
        enc = self.encode(images)
        scenes, bg = self.decode(enc.z_q)
        poses = poses or [self.canonical()] * len(scenes)
        return self.render(scenes, bg, poses, chunk=chunk)


def _slice(rays: RayBundle, i: int, j: int) -> RayBundle:
    return RayBundle(rays.origins[i:j], rays.directions[i:j], rays.pixel_coords[i:j])


def _cat_outputs(outs: list[RenderOutput]) -> RenderOutput:
    return RenderOutput(*[torch.cat([getattr(o, f) for o in outs]) for f in RenderOutput.__dataclass_fields__])


def _cat_samples(sets: list[RaySampleSet]) -> RaySampleSet:
    return RaySampleSet(*[torch.cat([getattr(s, f) for s in sets]) for f in RaySampleSet.__dataclass_fields__])
