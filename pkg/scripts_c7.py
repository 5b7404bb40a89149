"""Recalibration with color-diverse textures: criteria 6, 7, 8."""
import os
import sys
import tempfile
import time

import numpy as np
import torch

sys.path.insert(0, "src")
from mdcodec.data import ImageFolderDataset, write_texture_dataset, to_tensor
from mdcodec.training import TrainConfig, train_loop, estimate_bpp, validate_model
from mdcodec import metrics

tmp = tempfile.mkdtemp()
train_dir = os.path.join(tmp, "train")
val_dir = os.path.join(tmp, "val")
write_texture_dataset(train_dir, 100, size=64, seed=0)
write_texture_dataset(val_dir, 20, size=64, seed=777)


def run(steps, seed, alpha=0.1, gamma=0.1, tag=""):
    cfg = TrainConfig.toy(steps=steps, seed=seed, alpha=alpha, gamma=gamma,
                          data_dir=train_dir,
                          checkpoint_dir=os.path.join(tmp, f"{tag}_a{alpha}_g{gamma}_{seed}"),
                          log_every=0, checkpoint_every=0)
    t0 = time.time()
    res = train_loop(cfg)
    tail = res.history[-50:]
    train_bpp = float(np.mean([(b.rate_a + b.rate_b) / 4096 for b in tail]))
    val_ds = ImageFolderDataset(val_dir)
    val = validate_model(res.model, val_ds, 64)
    val_bpp = estimate_bpp(res.model, val_ds, 64)
    dist = 0.0
    with torch.no_grad():
        for i in range(len(val_ds)):
            x = to_tensor(val_ds.load(i))
            out = res.model(x, mode="hard")
            dist += float(metrics.mr_ssim(out.y_a, out.y_b, metrics.fitted_scales(x)))
    dist /= len(val_ds)
    totals = [b.total for b in res.history]
    ma = lambda s: sum(totals[max(0, s-100):s]) / min(100, s)
    print(f"[{tag}] seed={seed} steps={steps} a={alpha} g={gamma} "
          f"ma100={ma(100):.2f}->{ma(steps):.2f} "
          f"side_ms={val['side_ms_ssim']:.4f} cen_ms={val['central_ms_ssim']:.4f} "
          f"margin={val['central_ms_ssim']-val['side_ms_ssim']:+.4f} "
          f"train_bpp={train_bpp:.4f} val_bpp={val_bpp:.4f} dist={dist:.4f} "
          f"[{time.time()-t0:.0f}s]", flush=True)


print("== c7 gammas (300 steps, seed 0, new textures) ==", flush=True)
for gamma in (0.01, 0.1, 1.0):
    run(300, 0, gamma=gamma, tag="c7")

print("== c6 seeds (500 steps) ==", flush=True)
for seed in (0, 1, 2):
    run(500, seed, tag="c6")

print("== c8 alphas (300 steps, seed 0) ==", flush=True)
for alpha in (0.0, 10.0):
    run(300, 0, alpha=alpha, tag="c8")
