"""Stage 1 and Stage 2 training loops, evaluation, and checkpoints."""
from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from ..diffcore import make_generator, stop_grad
from ..geometry import sample_novel_pose
from ..losses import (
    LossReport,
    RandomFeatureExtractor,
    align_depth,
    depth_loss,
    gan_losses,
    reconstruction_loss,
    scale_loss,
    total_loss,
)
from ..nets import Discriminator
from ..renderer import depth_samples, distortion_loss, interlevel_loss
from ..stage2 import TokenTransformer, nll
from .config import TrainConfig
from .data import Batch, ImageDataset
from .metrics import depth_accuracy, disparity_flatness, psnr, report_disparity_scale
from .model import Stage1Model

log = logging.getLogger(__name__)


def warmup_cosine(step: int, max_lr: float, warmup: int, total: int) -> float:
    """Linear warmup from 0 to ``max_lr`` then cosine decay to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return max_lr * step / warmup
    if total <= warmup:
        return max_lr
    progress = min(1.0, (step - warmup) / (total - warmup))
    return 0.5 * max_lr * (1.0 + math.cos(math.pi * progress))


def standardize(x: Tensor, eps: float = 1e-3) -> Tensor:
    """Per-image zero-mean / unit-variance over the trailing spatial dims."""
    flat = x.reshape(x.shape[0], -1)
    mean = flat.mean(dim=1).reshape(-1, *[1] * (x.dim() - 1))
    std = flat.std(dim=1).reshape(-1, *[1] * (x.dim() - 1))
    return (x - mean) / (std + eps)


def _build(seed: int, fn):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return fn()


class Stage1Trainer:
    """Owns the autoencoder, both critics and their optimisers.

    Every stochastic choice (batches, ray phases, novel poses, stratified
    jitter) comes from ``self.rng``, so a run is a pure function of the
    config seed and the dataset.
    """

    def __init__(self, cfg: TrainConfig, dataset: ImageDataset | None = None):
        self.cfg = cfg
        self.dataset = dataset
        res = cfg.model.image_size // cfg.render.ray_stride
        m = cfg.model
        self.model = _build(cfg.seed, lambda: Stage1Model(cfg))
        self.disc_main = _build(cfg.seed + 1, lambda: Discriminator("main", res, m.disc_channels, m.disc_max_channels))
        self.disc_novel = _build(cfg.seed + 2, lambda: Discriminator("novel", res, m.disc_channels, m.disc_max_channels))
        self.extractor = RandomFeatureExtractor(cfg.perceptual_seed)
        o = cfg.optim
        betas = (o.beta1, o.beta2)
        scales = {"body": 1.0, "head": o.head_lr_scale, "field": o.field_lr_scale}
        groups = [{"params": ps, "lr_scale": scales[name]} for name, ps in self.model.param_groups().items()]
        self.opt_g = torch.optim.Adam(groups, lr=0.0, betas=betas, weight_decay=o.weight_decay)
        self.opt_dm = torch.optim.Adam(self.disc_main.parameters(), lr=0.0, betas=betas, weight_decay=o.weight_decay)
        self.opt_dn = torch.optim.Adam(self.disc_novel.parameters(), lr=0.0, betas=betas, weight_decay=o.weight_decay)
        self.rng = make_generator(cfg.seed + 3)
        self.step = 0

    # -- schedule -----------------------------------------------------------

    def lr(self, step: int | None = None) -> float:
        o = self.cfg.optim
        return warmup_cosine(self.step if step is None else step, o.lr, o.warmup_steps, o.total_steps)

    def _set_lr(self) -> None:
        lr = self.lr()
        for g in self.opt_g.param_groups:
            g["lr"] = lr * g["lr_scale"]
        for opt in (self.opt_dm, self.opt_dn):
            for g in opt.param_groups:
                g["lr"] = lr * self.cfg.optim.disc_lr_scale

    @property
    def adversarial(self) -> bool:
        return self.step >= self.cfg.optim.adversarial_start

    def sample_batch(self) -> Batch:
        n = len(self.dataset)
        idx = torch.randperm(n, generator=self.rng)[: min(self.cfg.optim.batch_size, n)]
        return self.dataset.batch(idx)

    # -- one alternating update -------------------------------------------------

    def _generator_pass(self, batch: Batch):
        cfg = self.cfg
        stride = cfg.render.ray_stride
        B = batch.images.shape[0]
        model = self.model

        enc = model.encode(batch.images)
        scenes, background = model.decode(enc.z_q)
        offsets = [tuple(int(v) for v in torch.randint(0, stride, (2,), generator=self.rng)) for _ in range(B)]
        canon = model.render(scenes, background, [model.canonical()] * B, stride, offsets, train=True, rng=self.rng)
        poses = [sample_novel_pose(self.rng, cfg.render.train_disc_radius, model.canonical()) for _ in range(B)]
        novel = model.render(scenes, background, poses, stride, offsets, train=True, rng=self.rng)

        targets = torch.stack([batch.images[b, oy::stride, ox::stride] for b, (oy, ox) in enumerate(offsets)])
        ref_disp = torch.stack([batch.disparity[b, oy::stride, ox::stride] for b, (oy, ox) in enumerate(offsets)])

        rec = reconstruction_loss(canon.rgb, 0.0, targets, self.extractor)

        depth_terms, scale_terms, s_values = [], [], []
        w = cfg.loss_weights
        for b in range(B):
            D, W = depth_samples(canon.outputs[b], cfg.render.far)
            al = align_depth(D, W, ref_disp[b].reshape(-1))
            depth_terms.append(depth_loss(D, W, ref_disp[b].reshape(-1), al))
            scale_terms.append(scale_loss(al.s_star, w["negative_depth_scale_penalty"], w["large_depth_scale_penalty"]))
            s_values.append(float(al.s_star.detach()))

        views = [(canon, b) for b in range(B)] + [(novel, b) for b in range(B)]
        inter = torch.stack([interlevel_loss(v.proposals[b], v.nerfs[b]) for v, b in views]).mean()
        dist = torch.stack([distortion_loss(v.nerfs[b].weights, v.nerfs[b].s_bins) for v, b in views]).mean()

        novel_rgbd = torch.cat([novel.rgb, standardize(novel.disparity).unsqueeze(-1)], dim=-1)
        canon_rgbd = torch.cat([canon.rgb, standardize(canon.disparity).unsqueeze(-1)], dim=-1)
        if self.adversarial:
            for p in (*self.disc_main.parameters(), *self.disc_novel.parameters()):
                p.requires_grad_(False)
            gan_main = F.softplus(-self.disc_main(canon.rgb)).mean()
            gan_novel = F.softplus(-self.disc_novel(novel_rgbd)).mean()
            for p in (*self.disc_main.parameters(), *self.disc_novel.parameters()):
                p.requires_grad_(True)
        else:
            gan_main = gan_novel = torch.zeros(())

        terms = {
            "l2": rec.l2,
            "perceptual": rec.perceptual,
            "logit_laplace": rec.logit_laplace,
            "gan_main": gan_main,
            "gan_novel": gan_novel,
            "vq": enc.quant.vq_loss,
            "depth": torch.stack(depth_terms).mean(),
            "scale": torch.stack(scale_terms).mean(),
            "interlevel": inter,
            "distortion": dist,
        }
        weights = dict(w)
        if not self.adversarial:
            weights["discriminator"] = weights["novel_discriminator"] = 0.0
        report = LossReport(terms, weights)
        report.total = total_loss(report)
        report.diagnostics = {
            "s_star": float(np.mean(s_values)),
            "psnr": psnr(canon.rgb.detach(), targets),
            "opacity": float(torch.stack([o.opacity.detach().mean() for o in canon.outputs]).mean()),
        }
        fakes = (stop_grad(canon.rgb), stop_grad(canon_rgbd), stop_grad(novel_rgbd), targets)
        return report, fakes

    def stage1_step(self, batch: Batch | None = None) -> LossReport:
        """Generator update on the full objective, then one update of each critic."""
        batch = batch if batch is not None else self.sample_batch()
        self._set_lr()
        accum = max(1, self.cfg.optim.grad_accum)
        chunks = [batch] if accum == 1 else _split(batch, accum)
        self.opt_g.zero_grad(set_to_none=True)
        reports, fakes = [], []
        for chunk in chunks:
            report, fk = self._generator_pass(chunk)
            if not torch.isfinite(report.total):
                bad = [k for k, v in report.terms.items() if not torch.isfinite(v)]
                raise FloatingPointError(f"non-finite loss at step {self.step} (terms: {', '.join(bad) or 'total'})")
            (report.total / len(chunks)).backward()
            reports.append(report)
            fakes.append(fk)
        self.opt_g.step()

        canon_rgb, canon_rgbd, novel_rgbd, real = (torch.cat(x) for x in zip(*fakes))
        if self.adversarial:
            self.opt_dm.zero_grad(set_to_none=True)
            d_main = gan_losses(self.disc_main(real), self.disc_main(canon_rgb)).discriminator
            d_main.backward()
            self.opt_dm.step()
            self.opt_dn.zero_grad(set_to_none=True)
            d_novel = gan_losses(self.disc_novel(canon_rgbd), self.disc_novel(novel_rgbd)).discriminator
            d_novel.backward()
            self.opt_dn.step()
        else:
            d_main = d_novel = torch.zeros(())

        self.step += 1
        report = reports[0] if len(reports) == 1 else _merge(reports)
        report.diagnostics.update(d_main=d_main.item(), d_novel=d_novel.item(), lr=self.lr(self.step - 1))
        return report

    def train(self, steps: int, log_every: int = 50, callback=None) -> list[dict[str, float]]:
        history = []
        for _ in range(steps):
            rep = self.stage1_step()
            row = {**rep.scalars(), "total": rep.total.item(), **rep.diagnostics, "step": self.step}
            history.append(row)
            if log_every and self.step % log_every == 0:
                log.info("step %d total %.4f psnr %.2f s* %.3f", self.step, row["total"], row["psnr"], row["s_star"])
            if callback is not None:
                callback(self, row)
        return history

    # -- evaluation -----------------------------------------------------------

    @torch.no_grad()
    def evaluate(self, dataset: ImageDataset | None = None, batch: int = 4) -> dict[str, float]:
        """Full-frame canonical renders vs. the dataset: PSNR, depth accuracy, disparity scale, flatness."""
        ds = dataset or self.dataset
        model = self.model
        rgbs, disps, alignments = [], [], []
        for i in range(0, len(ds), batch):
            images = ds.images[i : i + batch]
            view = model.reconstruct(images)
            rgbs.append(view.rgb)
            disps.append(view.disparity)
            for b, out in enumerate(view.outputs):
                D, W = depth_samples(out, self.cfg.render.far)
                alignments.append(align_depth(D, W, ds.disparity[i + b].reshape(-1)))
        rgb = torch.cat(rgbs)
        disp = torch.cat(disps)
        return {
            "psnr": psnr(rgb, ds.images),
            "depth_accuracy": float(np.mean([depth_accuracy(disp[k], ds.disparity[k]) for k in range(len(ds))])),
            "disparity_scale": report_disparity_scale(alignments),
            "flatness": disparity_flatness(disp, ds.disparity),
        }

    # -- persistence ------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "model": self.model.state_dict(),
            "disc_main": self.disc_main.state_dict(),
            "disc_novel": self.disc_novel.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_dm": self.opt_dm.state_dict(),
            "opt_dn": self.opt_dn.state_dict(),
            "rng": self.rng.get_state(),
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.digest(),
        }

    def load_state_dict(self, state: dict) -> None:
        if state["config_hash"] != self.cfg.digest():
            raise ValueError("checkpoint was written with a different configuration")
        self.step = state["step"]
        self.model.load_state_dict(state["model"])
        self.disc_main.load_state_dict(state["disc_main"])
        self.disc_novel.load_state_dict(state["disc_novel"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_dm.load_state_dict(state["opt_dm"])
        self.opt_dn.load_state_dict(state["opt_dn"])
        self.rng.set_state(state["rng"])

    def save(self, path: Path | str) -> None:
        torch.save({"kind": "stage1", **self.state_dict()}, path)

    @classmethod
    def load(cls, path: Path | str, dataset: ImageDataset | None = None) -> "Stage1Trainer":
        state = torch.load(path, weights_only=False)
        if state.get("kind") != "stage1":
            raise ValueError(f"{path} is not a Stage 1 checkpoint")
        trainer = cls(TrainConfig.from_dict(state["config"]), dataset)
        trainer.load_state_dict(state)
        return trainer


def _split(batch: Batch, parts: int) -> list[Batch]:
    idx = torch.arange(batch.images.shape[0]).chunk(parts)
    return [
        Batch(batch.images[i], batch.disparity[i], None if batch.class_ids is None else batch.class_ids[i], batch.index[i])
        for i in idx
        if len(i)
    ]


def _merge(reports: list[LossReport]) -> LossReport:
    terms = {k: torch.stack([r.terms[k] for r in reports]).mean() for k in reports[0].terms}
    out = LossReport(terms, reports[0].weights, torch.stack([r.total for r in reports]).mean())
    out.diagnostics = {k: float(np.mean([r.diagnostics[k] for r in reports])) for k in reports[0].diagnostics}
    return out


@torch.no_grad()
def encode_corpus(model: Stage1Model, dataset: ImageDataset, batch: int = 16) -> Tensor:
    """Token grids ``[n, h, w]`` for every image."""
    grids = [model.encode(dataset.images[i : i + batch]).tokens for i in range(0, len(dataset), batch)]
    return torch.cat(grids)


class Stage2Trainer:
    """Fits the token transformer to a corpus of flattened token sequences."""

    def __init__(self, cfg: TrainConfig, vocab: int, seq_len: int, n_classes: int | None = None):
        self.cfg = cfg
        s = cfg.stage2
        n_classes = s.n_classes if n_classes is None else n_classes
        self.model = _build(cfg.seed + 10, lambda: TokenTransformer(vocab, seq_len, n_classes, s.dim, s.depth, s.heads))
        self.opt = torch.optim.Adam(
            self.model.parameters(), lr=0.0, betas=(cfg.optim.beta1, cfg.optim.beta2), weight_decay=0.0
        )
        self.rng = make_generator(cfg.seed + 11)
        self.step = 0

    def train_step(self, tokens: Tensor, class_ids: Tensor | None = None) -> float:
        s = self.cfg.stage2
        for g in self.opt.param_groups:
            g["lr"] = warmup_cosine(self.step, s.lr, s.warmup_steps, s.total_steps)
        n = tokens.shape[0]
        idx = torch.randperm(n, generator=self.rng)[: min(s.batch_size, n)]
        loss = nll(self.model, tokens[idx], None if class_ids is None else class_ids[idx])
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.step += 1
        return loss.item()

    def fit(self, tokens: Tensor, class_ids: Tensor | None = None, steps: int | None = None) -> list[float]:
        steps = self.cfg.stage2.total_steps if steps is None else steps
        return [self.train_step(tokens, class_ids) for _ in range(steps)]

    def state_dict(self) -> dict:
        m = self.model
        return {
            "kind": "stage2",
            "step": self.step,
            "model": m.state_dict(),
            "opt": self.opt.state_dict(),
            "rng": self.rng.get_state(),
            "vocab": m.vocab,
            "seq_len": m.seq_len,
            "n_classes": m.n_classes,
            "config": self.cfg.to_dict(),
        }

    def save(self, path: Path | str) -> None:
        torch.save(self.state_dict(), path)

    @classmethod
    def load(cls, path: Path | str) -> "Stage2Trainer":
        state = torch.load(path, weights_only=False)
        if state.get("kind") != "stage2":
            raise ValueError(f"{path} is not a Stage 2 checkpoint")
        trainer = cls(TrainConfig.from_dict(state["config"]), state["vocab"], state["seq_len"], state["n_classes"])
        trainer.model.load_state_dict(state["model"])
        trainer.opt.load_state_dict(state["opt"])
        trainer.rng.set_state(state["rng"])
        trainer.step = state["step"]
        return trainer
