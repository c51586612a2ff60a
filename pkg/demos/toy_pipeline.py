"""Both stages end to end on the procedural quad scenes.

Trains Stage 1 for a few hundred steps, prints reconstruction and depth
metrics, encodes the scenes into token grids, fits Stage 2 to them and
renders a greedy sample from two viewpoints.  Outputs land in ``demo_out/``.

    python demos/toy_pipeline.py [stage1_steps] [stage2_steps]

The full toy budget of 1200 Stage 1 steps (TrainConfig.toy) takes about half
an hour on one CPU core.  The default here is half of that; the learning-rate
schedule and the critic start are scaled to whatever step count is given.
"""
import json
import sys
from pathlib import Path

import torch

from nerfvq.diffcore import make_generator
from nerfvq.geometry import disc_boundary_poses
from nerfvq.pipeline import Stage1Trainer, Stage2Trainer, TrainConfig, synthetic_scenes
from nerfvq.pipeline.data import save_disparity_png, save_rgb_png
from nerfvq.pipeline.train import encode_corpus
from nerfvq.quantizer import sequence_to_tokens
from nerfvq.stage2 import SamplerConfig, generate

steps1 = int(sys.argv[1]) if len(sys.argv) > 1 else 600
steps2 = int(sys.argv[2]) if len(sys.argv) > 2 else 300
out = Path("demo_out")
out.mkdir(exist_ok=True)

cfg = TrainConfig.toy(steps1)
data = synthetic_scenes(16, cfg.model.image_size).to(torch.float32)

trainer = Stage1Trainer(cfg, data)


def report(tr, row):
    if tr.step % 50 == 0:
        print(f"stage 1 step {tr.step:4d}  total {row['total']:.3f}  train psnr {row['psnr']:.2f}")


trainer.train(steps1, log_every=0, callback=report)
print("stage 1 eval:", json.dumps({k: round(v, 3) for k, v in trainer.evaluate().items()}))

with torch.no_grad():
    view = trainer.model.reconstruct(data.images[:4])
for k in range(4):
    save_rgb_png(out / f"recon_{k}.png", view.rgb[k])
    save_rgb_png(out / f"target_{k}.png", data.images[k])
    save_disparity_png(out / f"recon_{k}_disparity.png", view.disparity[k], estimator="render")

grids = encode_corpus(trainer.model, data)
used = grids.unique().numel()
print(f"token grids {tuple(grids.shape)}, {used} distinct codes of {cfg.model.codebook_size}")

stage2 = Stage2Trainer(cfg, cfg.model.codebook_size, grids[0].numel(), 0)
losses = stage2.fit(grids.reshape(len(grids), -1), steps=steps2)
print(f"stage 2 nll: first {losses[0]:.3f}, last {losses[-1]:.3f}")

stage2.model.eval()
seq = generate(stage2.model, None, SamplerConfig(1), make_generator(0)).tokens
grid = sequence_to_tokens(seq.unsqueeze(0), trainer.model.grid, trainer.model.grid)
model = trainer.model
with torch.no_grad():
    scenes, bg = model.decode(model.embed_tokens(grid))
    poses = [model.canonical(), disc_boundary_poses(4, cfg.render.eval_disc_radius, model.canonical())[1]]
    for name, pose in zip(("canonical", "novel"), poses):
        v = model.render(scenes, bg, [pose], chunk=4096)
        save_rgb_png(out / f"sample_{name}.png", v.rgb[0])
print(f"wrote renders to {out}/")
