"""Scale/shift-invariant depth supervision on a handful of rays.

Builds rendering weights for rays that hit a surface, fits (s, t) in closed
form and shows that the loss ignores any affine change of the rendered
disparity while the fitted scale follows it.

    python demos/depth_alignment.py
"""
import torch

from nerfvq.diffcore import make_generator
from nerfvq.losses import align_depth, depth_loss
from nerfvq.renderer import depth_samples, integrate, sample_linear_in_disparity

torch.set_default_dtype(torch.float64)
gen = make_generator(0)

# eight rays, 32 disparity-linear bins each, one opaque slab per ray
s_bins, t_bins = sample_linear_in_disparity(0.7, 1e6, 32, n_rays=8)
hit = torch.randint(4, 28, (8,), generator=gen)
sigma = torch.zeros(8, 32)
sigma[torch.arange(8), hit] = 1e6
out = integrate(sigma, t_bins)
D, W = depth_samples(out)

true_disp = D[torch.arange(8), hit]
pseudo_gt = 3.0 * true_disp - 0.2  # an estimator that is off by scale and shift
al = align_depth(D, W, pseudo_gt)
print(f"fitted s* = {al.s_star.item():.4f}, t* = {al.t_star.item():.4f}")
print(f"loss at the true surface: {depth_loss(D, W, pseudo_gt).item():.3e}")

for a, b in [(2.0, 0.0), (-0.5, 1.0), (10.0, -3.0)]:
    moved = align_depth(a * D + b, W, pseudo_gt)
    print(
        f"D -> {a:+.1f} D {b:+.1f}: loss {depth_loss(a * D + b, W, pseudo_gt).item():.3e}, "
        f"s* {moved.s_star.item():+.4f}"
    )

# spreading weight over two depths costs something; a sharp surface costs nothing
blurred = W.clone()
blurred[:, :-1] = 0.5 * W[:, :-1] + 0.5 * W[:, :-1].roll(3, dims=-1)
print(f"loss after smearing weights: {depth_loss(D, blurred, pseudo_gt).item():.3e}")
