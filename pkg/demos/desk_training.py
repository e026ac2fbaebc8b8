"""
A short training run on synthetic polarization data
===================================================

Generates paired Mueller/stain patches, trains the bridge model for a few
hundred steps, samples the held-out patches and writes a side-by-side PNG
strip (Mueller channel m01, prediction, target) for a handful of them.

Usage: python3 demos/desk_training.py [steps] [out_dir]
The full 2000-step desk run takes about eight minutes on one core.
"""

import sys
import time

import numpy as np

from rbdm.cli import evaluate, save_png
from rbdm.config import TrainConfig
from rbdm.data import ArrayDataset, synthetic_dataset
from rbdm.train import model_from_config, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out_dir = sys.argv[2] if len(sys.argv) > 2 else "desk_demo"

data = synthetic_dataset(300, 64, seed=0)
train_set = ArrayDataset(data.mm[:240], data.targets[:240])
test_set = ArrayDataset(data.mm[240:], data.targets[240:])
cfg = TrainConfig.desk(max_steps=steps)

_, before, _ = evaluate(model_from_config(cfg), test_set, cfg.sample_steps, seed=1)


def progress(step, lb):
    if step % 50 == 0:
        print(f"step {step:5d}  l1 {lb.l1:.4f}  l2 {lb.l2:.4f}  l3 {lb.l3:.4f}")


t0 = time.time()
model, hist = train(cfg, train_set, out_dir=out_dir, callback=progress)
print(f"trained {len(hist)} steps in {time.time() - t0:.0f} s")

###############################################################################
# Held-out comparison: the untrained model, the trained sampler and the
# encoder output alone.

rows, after, preds = evaluate(model, test_set, cfg.sample_steps, seed=1)
_, encoder_only, _ = evaluate(model, test_set, cfg.sample_steps, seed=1, predictor="encoder")
for name, rep in (("untrained", before), ("trained", after), ("encoder only", encoder_only)):
    f = rep.formatted()
    print(f"{name:13s} psnr {f['psnr']}  ssim {f['ssim']}  ms-ssim {f['ms_ssim']}")

strip = []
for i in range(6):
    m01 = np.repeat(test_set.mm[i][1:2], 3, axis=0)
    strip.append(np.concatenate([m01, preds[i], test_set.targets[i]], axis=1))
save_png(f"{out_dir}/held_out_strip.png", np.concatenate(strip, axis=2))
print(f"wrote {out_dir}/held_out_strip.png")
