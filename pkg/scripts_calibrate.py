"""Calibration sweep for the toy acceptance runs (dev tool, not shipped)."""
import os
import sys
import tempfile
import time

import numpy as np
import torch

sys.path.insert(0, "src")
from mdcodec.data import ImageFolderDataset, write_texture_dataset
from mdcodec.training import TrainConfig, train_loop, validate_model, estimate_bpp
from mdcodec import metrics
from mdcodec.data import to_tensor


def run(seed, steps, alpha=0.1, gamma=0.1, tag=""):
    tmp = tempfile.mkdtemp()
    train_dir = os.path.join(tmp, "train")
    val_dir = os.path.join(tmp, "val")
    write_texture_dataset(train_dir, 100, size=64, seed=0)
    write_texture_dataset(val_dir, 20, size=64, seed=777)
    cfg = TrainConfig.toy(steps=steps, seed=seed, alpha=alpha, gamma=gamma,
                          data_dir=train_dir, checkpoint_dir=os.path.join(tmp, "run"),
                          log_every=0, checkpoint_every=0)
    t0 = time.time()
    res = train_loop(cfg)
    val_ds = ImageFolderDataset(val_dir)
    val = validate_model(res.model, val_ds, 64)
    bpp = estimate_bpp(res.model, val_ds, 64)
    # mean distance between side decodes on held-out
    dist = 0.0
    with torch.no_grad():
        for i in range(len(val_ds)):
            x = to_tensor(val_ds.load(i))
            out = res.model(x, mode="hard")
            dist += float(metrics.mr_ssim(out.y_a, out.y_b, metrics.fitted_scales(x)))
    dist /= len(val_ds)
    print(f"[{tag}] seed={seed} steps={steps} a={alpha} g={gamma} "
          f"side_ms={val['side_ms_ssim']:.4f} central_ms={val['central_ms_ssim']:.4f} "
          f"margin={val['central_ms_ssim']-val['side_ms_ssim']:+.4f} "
          f"bpp={bpp:.4f} dist={dist:.4f} [{time.time()-t0:.0f}s]", flush=True)
    return val, bpp, dist


print("== criterion 6 seeds (500 steps) ==", flush=True)
for seed in (0, 1, 2):
    run(seed, 500, tag="c6")

print("== criterion 7 gammas (250 steps, seed 0) ==", flush=True)
for gamma in (0.01, 0.1, 1.0):
    run(0, 250, gamma=gamma, tag="c7")

print("== criterion 8 alphas (250 steps, seed 0) ==", flush=True)
for alpha in (0.0, 10.0):
    run(0, 250, alpha=alpha, tag="c8")
