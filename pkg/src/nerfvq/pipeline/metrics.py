"""Evaluation metrics: PSNR, depth accuracy, Frechet distance, disparity scale."""
from __future__ import annotations

import warnings

import numpy as np
import torch
from scipy import linalg
from torch import Tensor

DEGENERATE_DEPTH_ACCURACY = 2.0


def psnr(pred: Tensor, target: Tensor) -> float:
    mse = float(((pred - target) ** 2).mean())
    return float("inf") if mse == 0 else float(-10.0 * np.log10(mse))


def depth_accuracy(pred_disp: Tensor | np.ndarray, ref_disp: Tensor | np.ndarray) -> float:
    """MSE between the two maps after standardising each to zero mean, unit variance.

    No pixels are masked.  A constant map cannot be standardised; it yields
    the value expected for unrelated maps (2.0) and a warning.
    """
    a = np.asarray(pred_disp, dtype=np.float64).ravel()
    b = np.asarray(ref_disp, dtype=np.float64).ravel()
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        warnings.warn("constant disparity map in depth_accuracy", RuntimeWarning, stacklevel=2)
        return DEGENERATE_DEPTH_ACCURACY
    return float(np.mean(((a - a.mean()) / sa - (b - b.mean()) / sb) ** 2))


def _psd(cov: np.ndarray, name: str) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    sym = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(sym)
    if not np.allclose(cov, cov.T) or vals.min() < -1e-10 * max(1.0, abs(vals).max()):
        warnings.warn(f"{name} is not symmetric PSD; symmetrising and clamping eigenvalues", RuntimeWarning, stacklevel=3)
    return (vecs * np.clip(vals, 0, None)) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`` between two Gaussians.

    The trace of the matrix square root is taken as the sum of square roots
    of the eigenvalues of ``S1^(1/2) S2 S1^(1/2)``, which is symmetric PSD.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    s1 = _psd(sigma1, "sigma1")
    s2 = _psd(sigma2, "sigma2")
    root1 = linalg.sqrtm(s1) if s1.shape[0] > 1 else np.sqrt(s1)
    root1 = np.real(root1)
    inner = root1 @ s2 @ root1
    eig = np.clip(np.linalg.eigvalsh(0.5 * (inner + inner.T)), 0, None)
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.sqrt(eig).sum())


def feature_statistics(features: Tensor | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    return f.mean(axis=0), np.cov(f, rowvar=False)


@torch.no_grad()
def fid(extractor, real: Tensor, fake: Tensor) -> float:
    """Frechet distance between extractor embeddings of two image sets ``[B, H, W, 3]``."""
    mu_r, s_r = feature_statistics(extractor.embed(real).double())
    mu_f, s_f = feature_statistics(extractor.embed(fake).double())
    return frechet_distance(mu_r, s_r, mu_f, s_f)


def disparity_flatness(rendered: Tensor, reference: Tensor) -> float:
    """Mean over images of std(rendered disparity) / std(reference disparity)."""
    r = rendered.reshape(rendered.shape[0], -1).double()
    g = reference.reshape(reference.shape[0], -1).double()
    return float((r.std(dim=1) / g.std(dim=1)).mean())


def report_disparity_scale(alignments) -> float:
    """Mean alignment scale ``s*`` over an evaluation set.

    Accepts ``DepthAlignment`` results or bare scale values.
    """
    values = [float(getattr(a, "s_star", a)) for a in alignments]
    if not values:
        raise ValueError("no alignments to report")
    return float(np.mean(values))
