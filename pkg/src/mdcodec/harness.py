"""End-to-end pipeline: encode/decode, erasure simulation, RD evaluation.

Inputs are reflect-padded to multiples of 8 before encoding; the header
records the original size and decodes are cropped back to it.  Reported bpp
divides total container bits (headers included) by the original pixel count.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import metrics
from .bitstream import (
    MODE_ARITHMETIC,
    MODE_RAW,
    EncodedDescription,
    HeaderError,
    ModelMismatchError,
    ac_decode,
    ac_encode,
    deserialize_raw,
    serialize_raw,
)
from .data import from_tensor, load_image, to_tensor
from .networks import MDCodec, model_tag

log = logging.getLogger(__name__)

MIN_IMAGE_SIDE = 32
MODES = ("central", "side_a", "side_b", "none")


def pad_to_block(image: np.ndarray, block: int = 8) -> np.ndarray:
    """Reflect-pad an (H, W, 3) image so both dims are multiples of ``block``."""
    h, w = image.shape[:2]
    pad_h = (-h) % block
    pad_w = (-w) % block
    if pad_h == 0 and pad_w == 0:
        return image
    return np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")


@torch.no_grad()
def encode_image(image: np.ndarray, model: MDCodec,
                 coding: str = "arithmetic") -> tuple[EncodedDescription, EncodedDescription]:
    """Compress one image into its two descriptions."""
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    orig_h, orig_w = image.shape[:2]
    if min(orig_h, orig_w) < MIN_IMAGE_SIDE:
        raise ValueError(f"images must be at least {MIN_IMAGE_SIDE} px per side, "
                         f"got {orig_h}x{orig_w}")
    if coding not in ("arithmetic", "raw"):
        raise ValueError(f"coding must be 'arithmetic' or 'raw', got {coding!r}")
    model.eval()
    x = to_tensor(pad_to_block(image))
    idx_a, idx_b = model.encode_indices(x)
    descs = []
    tag = model_tag(model) if coding == "arithmetic" else None
    for desc_id, idx in ((0, idx_a), (1, idx_b)):
        if coding == "raw":
            descs.append(serialize_raw(idx[0], desc_id, orig_h, orig_w,
                                       model.config.num_centers))
        else:
            _, probs = model.entropy_model(desc_id).rate_of_indices(idx[0])
            descs.append(ac_encode(idx[0], probs, desc_id, orig_h, orig_w, tag))
    return descs[0], descs[1]


def _decode_indices(desc: EncodedDescription, model: MDCodec) -> torch.Tensor:
    if desc.header.coding_mode == MODE_RAW:
        return deserialize_raw(desc)
    return ac_decode(desc, model.entropy_model(desc.header.desc_id),
                     expected_tag=model_tag(model))


def _check_same_image(a: EncodedDescription, b: EncodedDescription) -> None:
    ha, hb = a.header, b.header
    if ha.desc_id == hb.desc_id:
        raise HeaderError(f"received two copies of description {ha.desc_id}")
    fields = ("orig_h", "orig_w", "m", "n", "k", "l", "model_tag")
    for name in fields:
        if getattr(ha, name) != getattr(hb, name):
            raise HeaderError(f"descriptions disagree on {name}: "
                              f"{getattr(ha, name)!r} vs {getattr(hb, name)!r}")


@torch.no_grad()
def decode_any(descs: list[EncodedDescription], model: MDCodec,
               fallback_shape: tuple[int, int] | None = None) -> tuple[np.ndarray, str]:
    """Decode whatever descriptions arrived.

    Both -> central decoder; one -> the matching side decoder; none -> a
    mid-gray image of ``fallback_shape``.  Returns ``(image, mode)`` with
    mode one of "central", "side_a", "side_b", "none".
    """
    model.eval()
    if len(descs) > 2:
        raise ValueError(f"expected at most two descriptions, got {len(descs)}")
    if not descs:
        if fallback_shape is None:
            raise ValueError("no descriptions received and no fallback shape given")
        h, w = fallback_shape
        return np.full((h, w, 3), 0.5, dtype=np.float32), "none"
    if len(descs) == 2:
        _check_same_image(descs[0], descs[1])
        by_id = {d.header.desc_id: d for d in descs}
        idx_a = _decode_indices(by_id[0], model).unsqueeze(0)
        idx_b = _decode_indices(by_id[1], model).unsqueeze(0)
        image = model.decode_central(idx_a, idx_b)
        mode = "central"
        header = descs[0].header
    else:
        desc = descs[0]
        idx = _decode_indices(desc, model).unsqueeze(0)
        image = model.decode_side(idx, desc.header.desc_id)
        mode = "side_a" if desc.header.desc_id == 0 else "side_b"
        header = desc.header
    arr = from_tensor(image)[:header.orig_h, :header.orig_w]
    return arr, mode


def expected_distortion(d_central: float, d_side_a: float, d_side_b: float,
                        d_none: float, p_a: float, p_b: float) -> float:
    """Closed-form mean distortion over the four erasure outcomes."""
    for name, p in (("p_a", p_a), ("p_b", p_b)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {p}")
    return ((1 - p_a) * (1 - p_b) * d_central
            + (1 - p_a) * p_b * d_side_a
            + p_a * (1 - p_b) * d_side_b
            + p_a * p_b * d_none)


@dataclass(frozen=True)
class ChannelConfig:
    p_loss_a: float
    p_loss_b: float
    trials: int = 10000
    seed: int = 0

    def __post_init__(self):
        for name in ("p_loss_a", "p_loss_b"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")


@dataclass
class ChannelStats:
    """Empirical erasure-channel statistics for one image and model."""

    trials: int
    counts: dict[str, int]            # per decode mode
    mode_mr: dict[str, float]         # per-mode area-weighted multi-scale SSIM
    mode_ms: dict[str, float]         # per-mode MS-SSIM
    mean_mr: float
    mean_ms: float
    stderr_mr: float
    stderr_ms: float

    @property
    def frequencies(self) -> dict[str, float]:
        return {mode: count / self.trials for mode, count in self.counts.items()}


def _quality(x: torch.Tensor, y: torch.Tensor) -> tuple[float, float]:
    scales = metrics.fitted_scales(x)
    return float(metrics.mr_ssim(x, y, scales)), float(metrics.ms_ssim(x, y, scales))


@torch.no_grad()
def simulate_channel(image: np.ndarray, model: MDCodec,
                     channel: ChannelConfig) -> ChannelStats:
    """Monte-Carlo erasure simulation.

    Each description is dropped independently with its loss probability;
    decoding is deterministic, so the four possible outcomes are decoded once
    and per-trial metrics are read from that table.
    """
    desc_a, desc_b = encode_image(image, model)
    reference = to_tensor(image)
    outcomes = {
        "central": decode_any([desc_a, desc_b], model)[0],
        "side_a": decode_any([desc_a], model)[0],
        "side_b": decode_any([desc_b], model)[0],
        "none": decode_any([], model, fallback_shape=image.shape[:2])[0],
    }
    mode_mr, mode_ms = {}, {}
    for mode, decoded in outcomes.items():
        mode_mr[mode], mode_ms[mode] = _quality(reference, to_tensor(decoded))

    rng = np.random.default_rng(channel.seed)
    lost_a = rng.random(channel.trials) < channel.p_loss_a
    lost_b = rng.random(channel.trials) < channel.p_loss_b
    mode_index = np.where(~lost_a & ~lost_b, 0,
                          np.where(~lost_a & lost_b, 1,
                                   np.where(lost_a & ~lost_b, 2, 3)))
    counts = {mode: int((mode_index == i).sum()) for i, mode in enumerate(MODES)}
    mr_table = np.array([mode_mr[m] for m in MODES])
    ms_table = np.array([mode_ms[m] for m in MODES])
    mr_samples = mr_table[mode_index]
    ms_samples = ms_table[mode_index]
    return ChannelStats(
        trials=channel.trials,
        counts=counts,
        mode_mr=mode_mr,
        mode_ms=mode_ms,
        mean_mr=float(mr_samples.mean()),
        mean_ms=float(ms_samples.mean()),
        stderr_mr=float(mr_samples.std(ddof=1) / math.sqrt(channel.trials)),
        stderr_ms=float(ms_samples.std(ddof=1) / math.sqrt(channel.trials)),
    )


@dataclass(frozen=True)
class RDPoint:
    name: str
    bpp: float
    side_ms_ssim: float
    side_mr_ssim: float
    central_ms_ssim: float
    central_mr_ssim: float


CSV_COLUMNS = ("image", "bpp", "side_ms_ssim", "side_mr_ssim",
               "central_ms_ssim", "central_mr_ssim")


@torch.no_grad()
def evaluate_dataset(directory: str, model: MDCodec, csv_path: str | None = None,
                     coding: str = "arithmetic") -> list[RDPoint]:
    """Rate-distortion evaluation of every image in a directory.

    Returns per-image points plus a final "mean" point; bpp counts the full
    container bytes of both descriptions against original pixels.  The same
    rows go to ``csv_path`` when given.
    """
    names = sorted(n for n in os.listdir(directory)
                   if n.lower().endswith((".png", ".jpg", ".jpeg", ".bmp")))
    if not names:
        raise ValueError(f"no images found in {directory!r}")
    points: list[RDPoint] = []
    for name in names:
        path = os.path.join(directory, name)
        try:
            image = load_image(path)
            desc_a, desc_b = encode_image(image, model, coding=coding)
        except Exception as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        h, w = image.shape[:2]
        bpp = (desc_a.total_bits + desc_b.total_bits) / (h * w)
        x = to_tensor(pad_to_block(image))
        idx_a, idx_b = model.encode_indices(x)
        y_a = _cropped(model.decode_side(idx_a, 0), h, w)
        y_b = _cropped(model.decode_side(idx_b, 1), h, w)
        y_c = _cropped(model.decode_central(idx_a, idx_b), h, w)
        ref = to_tensor(image)
        mr_a, ms_a = _quality(ref, y_a)
        mr_b, ms_b = _quality(ref, y_b)
        mr_c, ms_c = _quality(ref, y_c)
        points.append(RDPoint(name, bpp, (ms_a + ms_b) / 2, (mr_a + mr_b) / 2,
                              ms_c, mr_c))
    if not points:
        raise ValueError(f"no readable images in {directory!r}")
    mean = RDPoint(
        "mean",
        sum(p.bpp for p in points) / len(points),
        sum(p.side_ms_ssim for p in points) / len(points),
        sum(p.side_mr_ssim for p in points) / len(points),
        sum(p.central_ms_ssim for p in points) / len(points),
        sum(p.central_mr_ssim for p in points) / len(points),
    )
    points.append(mean)
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for p in points:
                writer.writerow([p.name, f"{p.bpp:.6f}", f"{p.side_ms_ssim:.6f}",
                                 f"{p.side_mr_ssim:.6f}", f"{p.central_ms_ssim:.6f}",
                                 f"{p.central_mr_ssim:.6f}"])
    return points


def _cropped(decoded: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return decoded[..., :h, :w]


def plot_rd(csv_path: str, out_dir: str) -> list[str]:
    """Render bpp-vs-quality scatter plots (side and central series) as PNGs."""
    from matplotlib.figure import Figure

    rows = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            if row["image"] != "mean":
                rows.append(row)
    if not rows:
        raise ValueError(f"no data rows in {csv_path}")
    os.makedirs(out_dir, exist_ok=True)
    bpp = [float(r["bpp"]) for r in rows]
    paths = []
    for metric_name, label in (("ms_ssim", "MS-SSIM"), ("mr_ssim", "multi-scale SSIM (area weights)")):
        fig = Figure(figsize=(6, 4.5))
        ax = fig.add_subplot(111)
        side = [float(r[f"side_{metric_name}"]) for r in rows]
        central = [float(r[f"central_{metric_name}"]) for r in rows]
        ax.scatter(bpp, side, marker="o", label="side (mean of A/B)", alpha=0.7)
        ax.scatter(bpp, central, marker="s", label="central", alpha=0.7)
        ax.set_xlabel("bpp")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, f"rd_{metric_name}.png")
        fig.savefig(path, dpi=120)
        paths.append(path)
    return paths
