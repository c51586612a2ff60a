"""Image + pseudo-disparity corpora and the procedural synthetic fixture.

On-disk corpus layout::

    corpus/
      images/<name>.png              RGB, 8-bit
      disparity/<name>.png           single-channel 16-bit relative disparity
      disparity/<name>.json          {"estimator": ..., "scale": ..., "offset": ...}
      classes.txt                    optional; one integer per line, basename order

The 16-bit disparity code ``q`` decodes to ``q / 65535 * scale + offset``.
Disparity is treated as relative (free up to scale and shift).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from ..geometry import canonical_pose, generate_rays


@dataclass
class DatasetEntry:
    image: Tensor  # [H, W, 3] in [0, 1]
    disparity: Tensor  # [H, W]
    class_id: int | None = None
    name: str = ""


@dataclass
class Batch:
    images: Tensor  # [B, H, W, 3]
    disparity: Tensor  # [B, H, W]
    class_ids: Tensor | None
    index: Tensor  # [B] dataset indices


class ImageDataset:
    def __init__(self, entries: list[DatasetEntry]):
        if not entries:
            raise ValueError("empty dataset")
        shape = entries[0].image.shape
        for e in entries:
            if e.image.shape != shape or e.disparity.shape != shape[:2]:
                raise ValueError(f"entry {e.name!r} has mismatched shapes")
            if not torch.isfinite(e.disparity).all():
                raise ValueError(f"entry {e.name!r} has non-finite disparity")
        self.entries = entries
        self.images = torch.stack([e.image for e in entries])
        self.disparity = torch.stack([e.disparity for e in entries])
        ids = [e.class_id for e in entries]
        self.class_ids = None if any(c is None for c in ids) else torch.tensor(ids)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def resolution(self) -> int:
        return self.images.shape[1]

    def batch(self, index: Tensor) -> Batch:
        return Batch(
            self.images[index],
            self.disparity[index],
            None if self.class_ids is None else self.class_ids[index],
            index,
        )

    def to(self, dtype: torch.dtype) -> "ImageDataset":
        self.images = self.images.to(dtype)
        self.disparity = self.disparity.to(dtype)
        return self


def _png_to_array(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_rgb_png(path: Path | str, img: Tensor | np.ndarray) -> None:
    arr = np.asarray(img.detach().cpu() if isinstance(img, Tensor) else img, dtype=np.float64)
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


def save_disparity_png(path: Path | str, disp: Tensor | np.ndarray, estimator: str = "unknown") -> None:
    """Write a 16-bit PNG plus its JSON sidecar (decoding range and producer)."""
    path = Path(path)
    arr = np.asarray(disp.detach().cpu() if isinstance(disp, Tensor) else disp, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    scale = hi - lo if hi > lo else 1.0
    q = np.round((arr - lo) / scale * 65535).astype(np.uint16)
    Image.fromarray(q).save(path)
    path.with_suffix(".json").write_text(json.dumps({"estimator": estimator, "scale": scale, "offset": lo}))


def load_disparity_png(path: Path | str) -> np.ndarray:
    path = Path(path)
    with Image.open(path) as im:
        q = np.asarray(im, dtype=np.float64)
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"scale": 1.0, "offset": 0.0}
    return q / 65535.0 * meta.get("scale", 1.0) + meta.get("offset", 0.0)


def load_corpus(root: Path | str, require_disparity: bool = True) -> ImageDataset:
    """Pair every image with its disparity sidecar by basename."""
    root = Path(root)
    image_paths = sorted((root / "images").glob("*.png"))
    if not image_paths:
        raise FileNotFoundError(f"no images under {root / 'images'}")
    classes = None
    if (root / "classes.txt").exists():
        classes = [int(line) for line in (root / "classes.txt").read_text().split()]
        if len(classes) != len(image_paths):
            raise ValueError("classes.txt length does not match the number of images")
    entries = []
    for i, p in enumerate(image_paths):
        img = torch.from_numpy(_png_to_array(p))
        dp = root / "disparity" / p.name
        if dp.exists():
            disp = torch.from_numpy(load_disparity_png(dp))
        elif require_disparity:
            raise FileNotFoundError(f"missing disparity sidecar for {p.name}")
        else:
            disp = torch.zeros(img.shape[:2], dtype=img.dtype)
        entries.append(DatasetEntry(img, disp, None if classes is None else classes[i], p.stem))
    return ImageDataset(entries)


def write_corpus(root: Path | str, dataset: ImageDataset, estimator: str = "analytic") -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "disparity").mkdir(parents=True, exist_ok=True)
    for i, e in enumerate(dataset.entries):
        name = e.name or f"{i:05d}"
        save_rgb_png(root / "images" / f"{name}.png", e.image)
        save_disparity_png(root / "disparity" / f"{name}.png", e.disparity, estimator)
    if dataset.class_ids is not None:
        (root / "classes.txt").write_text("\n".join(str(int(c)) for c in dataset.class_ids) + "\n")


# -- synthetic fixture -------------------------------------------------------


@dataclass
class Quad:
    """Fronto-parallel rectangle at ``x = depth`` spanning ``y0..y1``, ``z0..z1``.

    Colour varies linearly from ``c0`` (at y0) to ``c1`` (at y1).
    """

    depth: float
    y0: float
    y1: float
    z0: float
    z1: float
    c0: np.ndarray
    c1: np.ndarray


def _render_scene(
    quads: list[Quad], background: np.ndarray, resolution: int, supersample: int
) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast the quads; misses see ``background`` at infinity (disparity 0)."""
    n = resolution * supersample
    rays = generate_rays(canonical_pose(), n, n, dtype=torch.float64)
    o = rays.origins.numpy()
    d = rays.directions.numpy()
    best_t = np.full(len(d), np.inf)
    color = np.broadcast_to(np.asarray(background, dtype=np.float64), (len(d), 3))
    for q in quads:
        t = (q.depth - o[:, 0]) / d[:, 0]
        y = o[:, 1] + t * d[:, 1]
        z = o[:, 2] + t * d[:, 2]
        hit = (t > 0) & (y >= q.y0) & (y <= q.y1) & (z >= q.z0) & (z <= q.z1) & (t < best_t)
        a = np.clip((y - q.y0) / (q.y1 - q.y0), 0, 1)[:, None]
        best_t = np.where(hit, t, best_t)
        color = np.where(hit[:, None], (1 - a) * q.c0 + a * q.c1, color)
    img = color.reshape(resolution, supersample, resolution, supersample, 3).mean(axis=(1, 3))
    disp = (1.0 / best_t).reshape(resolution, supersample, resolution, supersample).mean(axis=(1, 3))
    return img, disp


def synthetic_scenes(n: int = 16, resolution: int = 64, seed: int = 0, supersample: int = 3) -> ImageDataset:
    """Procedural scenes with exact disparity: one to three gradient quads on a plain background.

    Quads face the canonical camera at depths inside the unit ball; the
    background sits at infinity, so its disparity is 0.
    """
    rng = np.random.default_rng(seed)
    half = math.tan(math.radians(49.13) / 2)
    entries = []
    for i in range(n):
        background = rng.uniform(0.05, 0.95, 3)
        quads = []
        for _ in range(rng.integers(1, 4)):
            depth = rng.uniform(-0.8, 0.8)
            reach = (depth + 2.732) * half
            cy, cz = rng.uniform(-0.5, 0.5, 2) * reach
            hy, hz = rng.uniform(0.3, 0.6, 2) * reach
            quads.append(Quad(depth, cy - hy, cy + hy, cz - hz, cz + hz, rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)))
        img, disp = _render_scene(quads, background, resolution, supersample)
        entries.append(DatasetEntry(torch.from_numpy(img), torch.from_numpy(disp), i % 4, f"scene{i:03d}"))
    return ImageDataset(entries)
