"""Command line entry point: ``nerfvq <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch

from ..diffcore import make_generator
from ..geometry import disc_boundary_poses, sample_novel_pose
from ..losses import RandomFeatureExtractor
from ..quantizer import sequence_to_tokens
from ..stage2 import SamplerConfig, generate
from .config import RenderConfig, TrainConfig, load_config
from .data import ImageDataset, load_corpus, save_disparity_png, save_rgb_png, synthetic_scenes, _png_to_array
from .metrics import fid
from .tokens import TokenCorpus, load_tokens, save_tokens
from .train import Stage1Trainer, Stage2Trainer, encode_corpus

log = logging.getLogger("nerfvq")


class CliError(Exception):
    pass


def _atomic_save(obj_save, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    obj_save(tmp)
    os.replace(tmp, path)


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise CliError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _dataset(args, cfg: TrainConfig, require_disparity: bool = True) -> ImageDataset:
    if getattr(args, "data", None):
        ds = load_corpus(_require(args.data, "--data"), require_disparity=require_disparity)
    else:
        ds = synthetic_scenes(args.synthetic, cfg.model.image_size, seed=args.data_seed)
    return ds.to(torch.float32)


def _load_stage1(args) -> Stage1Trainer:
    trainer = Stage1Trainer.load(_require(args.checkpoint, "--checkpoint"))
    if args.config:
        # only the rendering section may be changed after training
        render = load_config(args.config).render
        trainer.model.cfg.render = RenderConfig(**vars(render))
    trainer.model.eval()
    return trainer


def _load_image(path: str, size: int) -> torch.Tensor:
    arr = _png_to_array(_require(path, "--image"))
    if arr.shape[:2] != (size, size):
        raise CliError(f"{path}: expected {size}x{size}, got {arr.shape[1]}x{arr.shape[0]}")
    return torch.from_numpy(arr).float().unsqueeze(0)


# -- subcommands ----------------------------------------------------------------


def cmd_train_stage1(args) -> None:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path("stage1.pt")
    if args.resume:
        trainer = Stage1Trainer.load(_require(str(ckpt), "--checkpoint"))
        trainer.dataset = _dataset(args, trainer.cfg)
    else:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        trainer = Stage1Trainer(cfg, _dataset(args, cfg))
    target = args.steps if args.steps is not None else trainer.cfg.optim.total_steps
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    while trainer.step < target:
        n = min(args.save_every, target - trainer.step)
        try:
            trainer.train(n, log_every=args.log_every)
        except FloatingPointError as err:
            raise CliError(f"aborting at step {trainer.step}: {err}; last checkpoint kept at {ckpt}") from err
        _atomic_save(trainer.save, ckpt)
    metrics = trainer.evaluate()
    print(json.dumps({"step": trainer.step, **metrics}))


def cmd_train_stage2(args) -> None:
    corpus = load_tokens(_require(args.tokens, "--tokens"))
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    n_classes = cfg.stage2.n_classes if corpus.class_ids is not None else 0
    trainer = Stage2Trainer(cfg, corpus.K, corpus.grids[0].numel(), n_classes)
    classes = corpus.class_ids if n_classes else None
    losses = trainer.fit(corpus.sequences(), classes, args.steps)
    out = Path(args.checkpoint) if args.checkpoint else Path("stage2.pt")
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_save(trainer.save, out)
    print(json.dumps({"step": trainer.step, "final_nll": losses[-1] if losses else None}))


def cmd_encode_corpus(args) -> None:
    trainer = _load_stage1(args)
    ds = _dataset(args, trainer.cfg, require_disparity=False)
    grids = encode_corpus(trainer.model, ds)
    save_tokens(args.out, TokenCorpus(trainer.cfg.model.codebook_size, grids, ds.class_ids))
    print(json.dumps({"count": grids.shape[0], "grid": list(grids.shape[1:]), "out": str(args.out)}))


def _write_view(out_dir: Path, stem: str, rgb: torch.Tensor, disparity: torch.Tensor) -> None:
    save_rgb_png(out_dir / f"{stem}.png", rgb)
    save_disparity_png(out_dir / f"{stem.replace('rgb', 'disparity')}.png", disparity, estimator="render")


def cmd_reconstruct(args) -> None:
    trainer = _load_stage1(args)
    img = _load_image(args.image, trainer.cfg.model.image_size)
    view = trainer.model.reconstruct(img)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_rgb_png(out / "rgb.png", view.rgb[0])
    save_disparity_png(out / "disparity.png", view.disparity[0], estimator="render")
    print(json.dumps({"rgb": str(out / "rgb.png"), "disparity": str(out / "disparity.png")}))


def cmd_orbit(args) -> None:
    trainer = _load_stage1(args)
    model = trainer.model
    img = _load_image(args.image, trainer.cfg.model.image_size)
    radius = args.radius if args.radius is not None else trainer.cfg.render.eval_disc_radius
    poses = disc_boundary_poses(args.frames, radius, model.canonical())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        enc = model.encode(img)
        scenes, bg = model.decode(enc.z_q)
        for k, pose in enumerate(poses):
            view = model.render(scenes, bg, [pose], chunk=4096)
            save_rgb_png(out / f"frame_{k:04d}.png", view.rgb[0])
            save_disparity_png(out / f"disparity_{k:04d}.png", view.disparity[0], estimator="render")
    (out / "poses.json").write_text(json.dumps([p.to_list() for p in poses], indent=1))
    if args.video:
        ffmpeg = shutil.which("ffmpeg")
        if ffmpeg is None:
            log.warning("ffmpeg not found; frames written without video")
        else:
            subprocess.run(
                [ffmpeg, "-y", "-loglevel", "error", "-framerate", "12", "-i", str(out / "frame_%04d.png"),
                 "-pix_fmt", "yuv420p", str(out / "orbit.mp4")],
                check=True,
            )
    print(json.dumps({"frames": len(poses), "out": str(out)}))


def _sample_grids(args, trainer: Stage1Trainer, stage2: Stage2Trainer, n: int, seed: int) -> torch.Tensor:
    model = stage2.model.eval()
    s = stage2.cfg.stage2
    # unset flags fall back to the Stage 2 config; the default k is capped at the vocabulary
    top_k = args.top_k if args.top_k is not None else min(s.top_k, model.vocab)
    top_p = args.top_p if args.top_p is not None else s.top_p
    temperature = args.temperature if args.temperature is not None else s.temperature
    cfg = SamplerConfig(top_k, top_p, temperature)
    gen = make_generator(seed)
    grid = trainer.model.grid
    if model.n_classes and args.class_id is None:
        raise CliError("this Stage 2 model is class conditional; pass --class-id")
    class_id = args.class_id if model.n_classes else None
    seqs = [generate(model, class_id, cfg, gen).tokens for _ in range(n)]
    return sequence_to_tokens(torch.stack(seqs), grid, grid)


def _render_tokens(trainer: Stage1Trainer, grids: torch.Tensor, poses=None):
    model = trainer.model
    with torch.no_grad():
        z_q = model.embed_tokens(grids)
        scenes, bg = model.decode(z_q)
        return model.render(scenes, bg, poses or [model.canonical()] * len(scenes), chunk=4096)


def cmd_sample(args) -> None:
    trainer = _load_stage1(args)
    stage2 = Stage2Trainer.load(_require(args.stage2, "--stage2"))
    seed = args.seed if args.seed is not None else 0
    grids = _sample_grids(args, trainer, stage2, args.n, seed)
    view = _render_tokens(trainer, grids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(grids.shape[0]):
        save_rgb_png(out / f"sample_{k:04d}.png", view.rgb[k])
        save_disparity_png(out / f"sample_{k:04d}_disparity.png", view.disparity[k], estimator="render")
    np.save(out / "tokens.npy", grids.numpy())
    print(json.dumps({"samples": grids.shape[0], "out": str(out)}))


def cmd_eval(args) -> None:
    trainer = _load_stage1(args)
    cfg = trainer.cfg
    ds = _dataset(args, cfg)
    metrics = trainer.evaluate(ds)
    extractor = RandomFeatureExtractor(cfg.fid_seed)
    recon = torch.cat([trainer.model.reconstruct(ds.images[i : i + 8]).rgb for i in range(0, len(ds), 8)])
    metrics["fid_reconstruction"] = fid(extractor, ds.images, recon)
    if args.stage2:
        stage2 = Stage2Trainer.load(_require(args.stage2, "--stage2"))
        seed = args.seed if args.seed is not None else cfg.seed
        grids = _sample_grids(args, trainer, stage2, args.n or len(ds), seed)
        gen = make_generator(seed + 1)
        poses = [sample_novel_pose(gen, cfg.render.eval_disc_radius, trainer.model.canonical()) for _ in range(len(grids))]
        metrics["fid_samples"] = fid(extractor, ds.images, _render_tokens(trainer, grids, poses).rgb)
    text = json.dumps(metrics, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nerfvq", description="Tokenizing NeRF autoencoder and token transformer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--seed", type=int, help="random seed override")
        p.add_argument("--checkpoint", help="Stage 1 checkpoint path (Stage 2 for train-stage2)")
        if data:
            p.add_argument("--data", help="corpus directory (images/, disparity/, classes.txt)")
            p.add_argument("--synthetic", type=int, default=16, help="use N synthetic scenes when --data is absent")
            p.add_argument("--data-seed", type=int, default=0)
        return p

    def sampler(p):
        p.add_argument("--top-k", type=int, help="keep the k most likely tokens (default: from the Stage 2 config)")
        p.add_argument("--top-p", type=float, help="nucleus mass (default: from the Stage 2 config)")
        p.add_argument("--temperature", type=float)
        p.add_argument("--class-id", type=int)
        p.add_argument("--stage2", help="Stage 2 checkpoint path")
        p.add_argument("-n", type=int, default=None, help="number of samples")

    p = common(sub.add_parser("train-stage1", help="train the autoencoder"), data=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--save-every", type=int, default=100)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    p.set_defaults(func=cmd_train_stage1)

    p = common(sub.add_parser("train-stage2", help="train the token transformer"))
    p.add_argument("--tokens", required=True, help="token corpus from encode-corpus")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train_stage2)

    p = common(sub.add_parser("encode-corpus", help="write token grids for a corpus"), data=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode_corpus)

    p = common(sub.add_parser("reconstruct", help="canonical render and disparity of one image"))
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = common(sub.add_parser("orbit", help="novel views around the pose disc boundary"))
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--radius", type=float)
    p.add_argument("--video", action="store_true", help="also encode orbit.mp4 with ffmpeg")
    p.set_defaults(func=cmd_orbit)

    p = common(sub.add_parser("sample", help="sample token grids and render them"))
    sampler(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample, n=None)

    p = common(sub.add_parser("eval", help="reconstruction, depth and Frechet metrics"), data=True)
    sampler(p)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "n", 0) is None and args.command == "sample":
        args.n = 1
    try:
        args.func(args)
    except (CliError, FileNotFoundError, ValueError) as err:
        print(f"nerfvq: error: {err}", file=sys.stderr)
        return 1
    return 0
