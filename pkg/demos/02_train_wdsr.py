"""
Training a small WDSR-B
=======================

Trains a 2-block WDSR-B on synthetic slices in unknown mode and compares it
with bicubic upscaling on held-out slices. A few hundred iterations already
clear the bicubic baseline; pass an iteration count to train longer::

    python3 demos/02_train_wdsr.py 1000
"""
import sys
import time
from pathlib import Path

import numpy as np

from rocksr.checkpoint import load_checkpoint
from rocksr.imaging import BicubicUpsampler, make_lr
from rocksr.io import write_image
from rocksr.models import ModelSpec, build_model, count_parameters
from rocksr.seeding import substream
from rocksr.synthetic import grain_stack
from rocksr.trainer import TrainConfig, fit, validate

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 500
out = Path(__file__).parent / "out" / "train"

rng = substream(0, "prepare")
pairs = [make_lr(im, 4, "unknown", rng) for im in grain_stack(12, 256, seed=1)]
train, held = pairs[:10], pairs[10:]

model = build_model(ModelSpec("wdsr-b", 2), rng=substream(0, "init"), dtype=np.float32)
print("parameters", count_parameters(model))
print("bicubic held-out PSNR", round(validate(BicubicUpsampler(4), held), 3))

# one epoch is one validation event; lr halves every `step` epochs
epochs = max(1, iterations // 250)
cfg = TrainConfig(batch=8, lr_crop=48, iterations_per_epoch=250, epochs=epochs, subset="unknown")
t0 = time.perf_counter()
best, log = fit(model, train, held, cfg, out)
print(f"trained {len(log.losses)} iterations in {time.perf_counter() - t0:.0f} s")
for row in log.epochs:
    print(f"epoch {row['epoch']}: val PSNR {row['val_psnr']:.3f} dB  lr {row['lr']:.2e}")

# reload the best checkpoint and super-resolve a held-out slice
ck = load_checkpoint(best)
sr = ck.model.upscale(held[0].lr, clamp=True)
write_image(sr, out / "held0_sr.png", bit_depth=16)
write_image(BicubicUpsampler(4)(held[0].lr), out / "held0_bicubic.png", bit_depth=16)
write_image(held[0].hr, out / "held0_hr.png", bit_depth=16)
print("best checkpoint", best.name, "PSNR", round(log.best_psnr, 3))
