"""Configuration, optimization loop, logging, and checkpoint management.

The training log is a CSV with the fixed column order::

    step,d_l1,d_mr,d_distance,d_reg,rate_a,rate_b,total,bpp

where ``bpp`` is the estimated ``(rate_a + rate_b) / (H * W)`` of the crop.
Validation results go to a second CSV (``step``, then mean side/central
MS-SSIM and area-weighted multi-scale SSIM over the held-out directory).

Checkpoints extend the model container (see ``networks``) with optimizer
state, the step counter, the training configuration, and all RNG states, so
a resumed run is step-for-step identical to an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import metrics
from .data import ImageFolderDataset, sample_batch, to_tensor
from .metrics import LossBreakdown, total_loss
from .networks import MDCodec, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "d_l1", "d_mr", "d_distance", "d_reg",
               "rate_a", "rate_b", "total", "bpp")
VAL_COLUMNS = ("step", "side_ms_ssim", "central_ms_ssim",
               "side_mr_ssim", "central_mr_ssim")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; message carries the last term breakdown."""


@dataclass
class TrainConfig:
    """Hyper-parameters, model-size knobs, and run paths."""

    crop_size: int = 160
    batch_size: int = 8
    lr: float = 4e-3
    alpha: float = 0.1
    beta: float = 2e-4
    gamma: float = 0.1
    steps: int = 500
    seed: int = 0
    sigma: float = 1.0
    feature_channels: int = 8
    num_centers: int = 8
    loss_variant: str = "mr"
    base_channels: int = 64
    resconv_per_block: int = 16
    entropy_channels: int = 32
    sigma_final: float = 0.0       # > 0 enables a linear sigma ramp
    lr_decay_steps: int = 0        # > 0 halves (by lr_decay_factor) every N steps
    lr_decay_factor: float = 0.5
    data_dir: str = ""
    val_dir: str = ""
    checkpoint_dir: str = "runs"
    log_every: int = 10
    checkpoint_every: int = 250
    val_every: int = 0             # > 0 enables periodic validation

    def __post_init__(self):
        positive = ("crop_size", "batch_size", "lr", "steps", "sigma",
                    "feature_channels", "num_centers", "base_channels",
                    "resconv_per_block", "entropy_channels", "lr_decay_factor")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.crop_size % 8:
            raise ValueError(f"crop_size must be divisible by 8, got {self.crop_size}")
        if self.loss_variant not in ("mr", "ms"):
            raise ValueError(f"loss_variant must be 'mr' or 'ms', got {self.loss_variant!r}")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Laptop-scale defaults: 64 px crops, reduced widths."""
        base = dict(crop_size=64, base_channels=16, resconv_per_block=2,
                    entropy_channels=16, checkpoint_every=250)
        base.update(overrides)
        return cls(**base)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            base_channels=self.base_channels,
            feature_channels=self.feature_channels,
            num_centers=self.num_centers,
            sigma=self.sigma,
            resconv_per_block=self.resconv_per_block,
            entropy_channels=self.entropy_channels,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in mapping.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(value, fields[key].type)
        return cls(**kwargs)


def _coerce(value, type_name):
    if not isinstance(value, str):
        return value
    if type_name == "int":
        return int(value)
    if type_name == "float":
        return float(value)
    return value


def parse_config_file(path: str) -> dict:
    """Read a ``key = value`` config file ('#' starts a comment)."""
    mapping: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key or not value:
                raise ValueError(f"{path}:{lineno}: empty key or value")
            mapping[key] = value
    return mapping


def load_train_config(path: str | None = None, overrides: dict | None = None) -> TrainConfig:
    mapping = parse_config_file(path) if path else {}
    if overrides:
        mapping.update(overrides)
    return TrainConfig.from_mapping(mapping)


def seed_everything(seed: int) -> np.random.Generator:
    """Seed torch, return the numpy generator used for data sampling."""
    torch.manual_seed(seed)
    return np.random.default_rng(seed + 1)


def train_step(model: MDCodec, optimizer: torch.optim.Optimizer,
               batch: torch.Tensor, cfg: TrainConfig) -> LossBreakdown:
    """One forward/backward/update pass; returns the loss breakdown."""
    outputs = model(batch, mode="ste")
    loss, breakdown = total_loss(
        batch, outputs.y_a, outputs.y_b, outputs.y_central,
        outputs.bits_a.mean(), outputs.bits_b.mean(), model.regularization(),
        alpha=cfg.alpha, beta=cfg.beta, gamma=cfg.gamma, variant=cfg.loss_variant,
    )
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss; last breakdown: {breakdown}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return breakdown


@torch.no_grad()
def validate_model(model: MDCodec, dataset: ImageFolderDataset,
                   crop_size: int, max_images: int = 0) -> dict[str, float]:
    """Mean side/central quality over a held-out directory.

    Images are center-cropped (after min-side rescale) to ``crop_size`` so
    every sample is comparable; side values average decodes A and B.
    """
    was_training = model.training
    model.eval()
    rng = np.random.default_rng(0)
    sums = {name: 0.0 for name in VAL_COLUMNS[1:]}
    count = 0
    indices = range(len(dataset)) if max_images <= 0 else range(min(max_images, len(dataset)))
    for i in indices:
        image = dataset.load(i)
        if image is None:
            continue
        crop = _center_crop(image, crop_size, rng)
        x = to_tensor(crop)
        out = model(x, mode="hard")
        scales = metrics.fitted_scales(x)
        for key, value in (
            ("side_ms_ssim", (metrics.ms_ssim(x, out.y_a, scales)
                              + metrics.ms_ssim(x, out.y_b, scales)) / 2),
            ("central_ms_ssim", metrics.ms_ssim(x, out.y_central, scales)),
            ("side_mr_ssim", (metrics.mr_ssim(x, out.y_a, scales)
                              + metrics.mr_ssim(x, out.y_b, scales)) / 2),
            ("central_mr_ssim", metrics.mr_ssim(x, out.y_central, scales)),
        ):
            sums[key] += float(value)
        count += 1
    if was_training:
        model.train()
    if count == 0:
        raise ValueError("no readable validation images")
    return {key: value / count for key, value in sums.items()}


@torch.no_grad()
def estimate_bpp(model: MDCodec, dataset: ImageFolderDataset, crop_size: int,
                 max_images: int = 0) -> float:
    """Mean entropy-model bpp estimate over held-out center crops."""
    was_training = model.training
    model.eval()
    rng = np.random.default_rng(0)
    total = 0.0
    count = 0
    indices = range(len(dataset)) if max_images <= 0 else range(min(max_images, len(dataset)))
    for i in indices:
        image = dataset.load(i)
        if image is None:
            continue
        x = to_tensor(_center_crop(image, crop_size, rng))
        out = model(x, mode="hard")
        total += float(out.bits_a.sum() + out.bits_b.sum()) / (x.size(-1) * x.size(-2))
        count += 1
    if was_training:
        model.train()
    if count == 0:
        raise ValueError("no readable images for the bpp estimate")
    return total / count


def _center_crop(image, size, rng):
    from .data import _resize_min_side
    image = _resize_min_side(image, size)
    h, w = image.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return image[top:top + size, left:left + size]


@dataclass
class TrainResult:
    model: MDCodec
    final_step: int
    checkpoint_path: str
    log_path: str
    history: list[LossBreakdown]


def moving_average(values, window: int) -> float:
    tail = list(values)[-window:]
    return float(sum(tail) / len(tail))


def _rng_state(data_rng: np.random.Generator) -> dict:
    return {"torch": torch.get_rng_state(), "data": data_rng.bit_generator.state}


def _restore_rng(state: dict, data_rng: np.random.Generator) -> None:
    torch.set_rng_state(state["torch"])
    data_rng.bit_generator.state = state["data"]


def train_loop(cfg: TrainConfig, data_dir: str | None = None,
               checkpoint_dir: str | None = None,
               resume_from: str | None = None) -> TrainResult:
    """Run (or resume) a training run to ``cfg.steps`` steps."""
    data_dir = data_dir or cfg.data_dir
    if not data_dir:
        raise ValueError("no data directory configured")
    out_dir = checkpoint_dir or cfg.checkpoint_dir
    os.makedirs(out_dir, exist_ok=True)
    dataset = ImageFolderDataset(data_dir)
    val_dataset = ImageFolderDataset(cfg.val_dir) if (cfg.val_dir and cfg.val_every > 0) else None

    data_rng = seed_everything(cfg.seed)
    model = MDCodec(cfg.model_config())
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    start_step = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        start_step = payload["step"]
        _restore_rng(payload["rng"], data_rng)
        log.info("resumed from %s at step %d", resume_from, start_step)

    log_path = os.path.join(out_dir, "train_log.csv")
    val_path = os.path.join(out_dir, "val_log.csv")
    log_mode = "a" if (resume_from and os.path.exists(log_path)) else "w"
    log_file = open(log_path, log_mode)
    if log_mode == "w":
        log_file.write(",".join(LOG_COLUMNS) + "\n")
    val_file = None
    if val_dataset is not None:
        val_file = open(val_path, log_mode)
        if log_mode == "w":
            val_file.write(",".join(VAL_COLUMNS) + "\n")

    pixels = cfg.crop_size * cfg.crop_size
    history: list[LossBreakdown] = []
    started = time.time()
    final_path = os.path.join(out_dir, "model.pt")
    try:
        model.train()
        for step in range(start_step + 1, cfg.steps + 1):
            if cfg.lr_decay_steps > 0:
                lr = cfg.lr * cfg.lr_decay_factor ** ((step - 1) // cfg.lr_decay_steps)
                for group in optimizer.param_groups:
                    group["lr"] = lr
            if cfg.sigma_final > 0 and cfg.steps > 1:
                frac = (step - 1) / (cfg.steps - 1)
                model.set_sigma(cfg.sigma + (cfg.sigma_final - cfg.sigma) * frac)
            batch = sample_batch(dataset, cfg.crop_size, cfg.batch_size, data_rng)
            breakdown = train_step(model, optimizer, batch, cfg)
            history.append(breakdown)
            bpp = (breakdown.rate_a + breakdown.rate_b) / pixels
            log_file.write(
                f"{step},{breakdown.d_l1:.6f},{breakdown.d_mr:.6f},"
                f"{breakdown.d_distance:.6f},{breakdown.d_reg:.6f},"
                f"{breakdown.rate_a:.3f},{breakdown.rate_b:.3f},"
                f"{breakdown.total:.6f},{bpp:.6f}\n"
            )
            log_file.flush()
            if cfg.log_every > 0 and step % cfg.log_every == 0:
                avg = moving_average([b.total for b in history], cfg.log_every)
                log.info("step %d/%d total %.4f (avg %.4f) bpp %.3f [%.1fs]",
                         step, cfg.steps, breakdown.total, avg, bpp,
                         time.time() - started)
            if val_file is not None and step % cfg.val_every == 0:
                stats = validate_model(model, val_dataset, cfg.crop_size)
                val_file.write(",".join([str(step)] + [f"{stats[c]:.6f}" for c in VAL_COLUMNS[1:]]) + "\n")
                val_file.flush()
            if cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0 and step < cfg.steps:
                path = os.path.join(out_dir, f"ckpt_{step:07d}.pt")
                save_checkpoint(path, model, step=step, optimizer=optimizer,
                                train_config=cfg.to_dict(), rng=_rng_state(data_rng))
        save_checkpoint(final_path, model, step=cfg.steps, optimizer=optimizer,
                        train_config=cfg.to_dict(), rng=_rng_state(data_rng))
    finally:
        log_file.close()
        if val_file is not None:
            val_file.close()
    return TrainResult(model, cfg.steps, final_path, log_path, history)
