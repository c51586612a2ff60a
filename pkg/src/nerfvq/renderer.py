"""Two-stage (proposal, then NeRF) volume rendering over linear-in-disparity bins.

Rays are parameterised by a normalised disparity coordinate ``s`` in [0, 1]:
``s = 0`` is the near plane, ``s = 1`` the far plane, and disparity is linear
in ``s``.  Both regularisers (distortion, interlevel) are computed in s-space.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .diffcore import ContractViolation
from .geometry import FAR, NEAR, RayBundle
from .scenefield import FieldMLP, TriplaneSet, query_field


@dataclass
class RaySampleSet:
    s_bins: Tensor  # [N, L+1]
    t_bins: Tensor  # [N, L+1]
    weights: Tensor  # [N, L]
    densities: Tensor  # [N, L]


@dataclass
class RenderOutput:
    rgb: Tensor  # [N, 3]
    weights: Tensor  # [N, L]
    pointwise_disparity: Tensor  # [N, L]
    accumulated_disparity: Tensor  # [N]
    background_blend: Tensor  # [N], residual transmittance
    opacity: Tensor  # [N], sum of weights


def s_to_t(s: Tensor, near: float = NEAR, far: float = FAR) -> Tensor:
    return 1.0 / ((1.0 / near) * (1.0 - s) + (1.0 / far) * s)


def sample_linear_in_disparity(
    near: float,
    far: float,
    L: int,
    n_rays: int = 1,
    rng: torch.Generator | None = None,
    stratified: bool = False,
    dtype: torch.dtype | None = None,
) -> tuple[Tensor, Tensor]:
    """``L`` intervals per ray covering [near, far], uniform in disparity.

    Deterministic bins are ``L`` equal s-intervals.  Stratified bins jitter
    each interior edge within half an interval of its deterministic position.
    """
    if not 0 < near < far:
        raise ContractViolation(f"need 0 < near < far, got {near}, {far}")
    if L < 1:
        raise ContractViolation("need at least one interval")
    dtype = dtype or torch.get_default_dtype()
    s = torch.linspace(0.0, 1.0, L + 1, dtype=dtype).expand(n_rays, L + 1).clone()
    if stratified and L > 1:
        jitter = torch.rand(n_rays, L - 1, generator=rng, dtype=dtype) - 0.5
        s[:, 1:-1] = (torch.arange(1, L, dtype=dtype) + jitter) / L
    return s, s_to_t(s, near, far)


def integrate(densities: Tensor, t_bins: Tensor, rgb_samples: Tensor | None = None, background: Tensor | None = None) -> RenderOutput:
    """Alpha-composite per-interval densities (and colours) along each ray."""
    if (densities < 0).any():
        raise ContractViolation("densities must be non-negative")
    delta = t_bins[:, 1:] - t_bins[:, :-1]
    if not (delta > 0).all():
        raise ContractViolation("t_bins must be strictly increasing along every ray")
    tau = densities * delta
    alpha = 1.0 - torch.exp(-tau)
    excl = torch.cumsum(tau, dim=-1) - tau
    trans = torch.exp(-excl)
    weights = trans * alpha
    opacity = weights.sum(dim=-1)
    residual = torch.exp(-tau.sum(dim=-1))

    inv_t = 1.0 / t_bins
    disparity = 0.5 * (inv_t[:, 1:] + inv_t[:, :-1])
    acc_disp = (weights * disparity).sum(dim=-1) + residual * inv_t[:, -1]

    if rgb_samples is None:
        rgb = torch.zeros(densities.shape[0], 3, dtype=densities.dtype)
    else:
        rgb = (weights.unsqueeze(-1) * rgb_samples).sum(dim=-2)
    if background is not None:
        rgb = rgb + residual.unsqueeze(-1) * background
    return RenderOutput(rgb, weights, disparity, acc_disp, residual, opacity)


def depth_samples(out: RenderOutput, far: float = FAR) -> tuple[Tensor, Tensor]:
    """Per-sample disparities and weights with the background as a last sample at ``1/far``.

    Every ray then carries unit weight, so a depth objective cannot be
    lowered by turning the field transparent.
    """
    D = torch.cat([out.pointwise_disparity, torch.full_like(out.background_blend, 1.0 / far).unsqueeze(-1)], dim=-1)
    W = torch.cat([out.weights, out.background_blend.unsqueeze(-1)], dim=-1)
    return D, W


def invert_cdf(s_bins: Tensor, weights: Tensor, u: Tensor) -> Tensor:
    """Map quantiles ``u[N, M]`` in (0, 1) through the piecewise-constant pdf given by the histogram."""
    total = weights.sum(dim=-1, keepdim=True)
    uniform = torch.full_like(weights, 1.0 / weights.shape[-1])
    pdf = torch.where(total > 0, weights / total.clamp(min=1e-30), uniform)
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[:, :1]), cdf[:, :-1], torch.ones_like(cdf[:, :1])], dim=-1)
    L = weights.shape[-1]
    idx = torch.searchsorted(cdf[:, 1:].contiguous(), u.contiguous(), right=False).clamp(0, L - 1)
    c0 = torch.gather(cdf, 1, idx)
    c1 = torch.gather(cdf, 1, idx + 1)
    s0 = torch.gather(s_bins, 1, idx)
    s1 = torch.gather(s_bins, 1, idx + 1)
    denom = c1 - c0
    frac = torch.where(denom > 0, (u - c0) / denom.clamp(min=1e-30), torch.zeros_like(u))
    return s0 + frac.clamp(0.0, 1.0) * (s1 - s0)


def importance_resample(
    proposal: RaySampleSet, L2: int, rng: torch.Generator | None = None, stratified: bool = False
) -> Tensor:
    """``L2`` new s-intervals drawn from the proposal weight histogram.

    Edge ``k`` is the inverse-CDF image of a quantile in the k-th of ``L2+1``
    equal strata (its midpoint when not stratified).  The proposal weights are
    detached: nothing downstream of resampling reaches the proposal MLP.
    Rays with zero proposal mass fall back to a uniform histogram.
    """
    s_bins = proposal.s_bins.detach()
    w = proposal.weights.detach()
    n = w.shape[0]
    k = torch.arange(L2 + 1, dtype=s_bins.dtype)
    if stratified:
        u = (k + torch.rand(n, L2 + 1, generator=rng, dtype=s_bins.dtype)) / (L2 + 1)
    else:
        u = ((k + 0.5) / (L2 + 1)).expand(n, L2 + 1)
    s_new = invert_cdf(s_bins, w, u)
    # keep intervals non-degenerate so metric deltas stay positive
    eps = torch.finfo(s_new.dtype).eps * 16
    s_new = torch.cummax(s_new, dim=-1).values
    steps = torch.arange(L2 + 1, dtype=s_new.dtype) * eps
    return s_new * (1.0 - L2 * eps) + steps


def distortion_loss(weights: Tensor, s_bins: Tensor) -> Tensor:
    """Mean over rays of ``sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 ds_i`` in s-space."""
    mid = 0.5 * (s_bins[:, 1:] + s_bins[:, :-1])
    width = s_bins[:, 1:] - s_bins[:, :-1]
    pair = (weights.unsqueeze(-1) * weights.unsqueeze(-2) * (mid.unsqueeze(-1) - mid.unsqueeze(-2)).abs()).sum(dim=(-1, -2))
    self_term = (weights**2 * width).sum(dim=-1) / 3.0
    return (pair + self_term).mean()


def outer_mass(s_query: Tensor, s_env: Tensor, w_env: Tensor) -> Tensor:
    """For every query interval, the envelope mass of all envelope intervals overlapping it."""
    cw = torch.cat([torch.zeros_like(w_env[:, :1]), torch.cumsum(w_env, dim=-1)], dim=-1)
    n_edges = s_env.shape[-1]
    # last envelope edge <= query start, first envelope edge > query end
    lo = (torch.searchsorted(s_env.contiguous(), s_query[:, :-1].contiguous(), right=True) - 1).clamp(0, n_edges - 1)
    hi = torch.searchsorted(s_env.contiguous(), s_query[:, 1:].contiguous(), right=True).clamp(0, n_edges - 1)
    return torch.gather(cw, 1, hi) - torch.gather(cw, 1, lo)


def interlevel_loss(proposal: RaySampleSet, nerf: RaySampleSet, eps: float = 1e-7) -> Tensor:
    """Penalty for NeRF interval weights exceeding the overlapping proposal mass.

    Only the proposal side receives gradients.
    """
    w = nerf.weights.detach()
    bound = outer_mass(nerf.s_bins.detach(), proposal.s_bins.detach(), proposal.weights)
    return (torch.clamp(w - bound, min=0.0) ** 2 / (w + eps)).sum(dim=-1).mean()


@dataclass
class RenderSettings:
    n_proposal: int = 32
    n_nerf: int = 32
    near: float = NEAR
    far: float = FAR
    stratified: bool = False


def render_rays(
    tri: TriplaneSet,
    proposal_mlp: FieldMLP,
    nerf_mlp: FieldMLP,
    rays: RayBundle,
    background: Tensor,
    settings: RenderSettings,
    rng: torch.Generator | None = None,
) -> tuple[RenderOutput, RaySampleSet, RaySampleSet]:
    """Proposal pass, importance resampling, then the NeRF pass."""
    n = rays.origins.shape[0]
    dtype = tri.planes.dtype

    def points_at(s_bins):
        t_mid = s_to_t(0.5 * (s_bins[:, 1:] + s_bins[:, :-1]), settings.near, settings.far)
        return (rays.origins.unsqueeze(1) + t_mid.unsqueeze(-1) * rays.directions.unsqueeze(1)).reshape(-1, 3)

    s_prop, t_prop = sample_linear_in_disparity(
        settings.near, settings.far, settings.n_proposal, n, rng, settings.stratified, dtype
    )
    dens_prop, _ = query_field(tri, proposal_mlp, points_at(s_prop))
    dens_prop = dens_prop.reshape(n, settings.n_proposal)
    out_prop = integrate(dens_prop, t_prop)
    proposal = RaySampleSet(s_prop, t_prop, out_prop.weights, dens_prop)

    s_nerf = importance_resample(proposal, settings.n_nerf, rng, settings.stratified)
    t_nerf = s_to_t(s_nerf, settings.near, settings.far)
    dens, rgb = query_field(tri, nerf_mlp, points_at(s_nerf))
    dens = dens.reshape(n, settings.n_nerf)
    rgb = rgb.reshape(n, settings.n_nerf, 3)
    out = integrate(dens, t_nerf, rgb, background)
    nerf = RaySampleSet(s_nerf, t_nerf, out.weights, dens)
    return out, proposal, nerf
