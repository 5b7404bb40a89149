"""Learnable scalar quantization.

A quantizer is a vector of L learnable center values plus a sharpness
parameter ``sigma``.  The soft assignment of a value to the centers is a
softmax over negative squared distances; the hard assignment is the nearest
center.  Training uses the hard values in the forward pass and the soft
path's derivative in the backward pass (straight-through combination).

All functions are pure and shape-polymorphic: scalar values live in the
leading dimensions, the center axis (when present) is always last.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class InvalidIndexError(ValueError):
    """An index tensor refers to a center that does not exist."""


def _check_centers(centers: torch.Tensor, sigma: float) -> None:
    if centers.dim() != 1 or centers.numel() < 2:
        raise ValueError(f"need a 1-D vector of >= 2 centers, got shape {tuple(centers.shape)}")
    if not torch.isfinite(centers).all():
        raise ValueError("centers must be finite")
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")


def expand_importance(imp_map: torch.Tensor, num_channels: int) -> torch.Tensor:
    """Expand a per-location importance map into a per-channel gating mask.

    Channel ``k`` of the mask is ``clamp(K * map - k, 0, 1)``: a map value of
    1 passes all K channels, a value of 0 blocks them all, and intermediate
    values pass a proportional channel prefix with one soft transition
    channel.

    Args:
        imp_map: ``(..., 1, M, N)`` map with entries in [0, 1].
        num_channels: number of feature channels K to gate.

    Returns:
        ``(..., K, M, N)`` mask, entries in [0, 1], non-increasing along k.
    """
    if num_channels < 1:
        raise ValueError(f"num_channels must be >= 1, got {num_channels}")
    if imp_map.dim() < 3 or imp_map.size(-3) != 1:
        raise ValueError(f"expected a (..., 1, M, N) map, got shape {tuple(imp_map.shape)}")
    if imp_map.numel() > 0:
        flat = imp_map.detach()
        if float(flat.min()) < 0 or float(flat.max()) > 1:
            raise ValueError("importance map entries must lie in [0, 1]")
    k = torch.arange(num_channels, dtype=imp_map.dtype, device=imp_map.device)
    k = k.view((1,) * (imp_map.dim() - 3) + (num_channels, 1, 1))
    return torch.clamp(num_channels * imp_map - k, 0.0, 1.0)


def apply_importance(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Gate a feature tensor elementwise with an expanded importance mask."""
    if features.shape != mask.shape:
        raise ValueError(f"shape mismatch: features {tuple(features.shape)} vs mask {tuple(mask.shape)}")
    return features * mask


def soft_assign(values: torch.Tensor, centers: torch.Tensor, sigma: float) -> torch.Tensor:
    """Softmax assignment weights of each value to each center.

    Returns a tensor with one extra trailing axis of size L; along that axis
    the weights are positive and sum to 1.  ``torch.softmax`` subtracts the
    running maximum, so large ``sigma`` values stay finite.
    """
    _check_centers(centers, sigma)
    sq_dist = (values.unsqueeze(-1) - centers) ** 2
    return torch.softmax(-sigma * sq_dist, dim=-1)


def hard_quantize(values: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Index of the nearest center for every value (ties: smallest index)."""
    _check_centers(centers, 1.0)
    sq_dist = (values.detach().unsqueeze(-1) - centers.detach()) ** 2
    return torch.argmin(sq_dist, dim=-1)


def soft_quantize(values: torch.Tensor, centers: torch.Tensor, sigma: float) -> torch.Tensor:
    """Softmax-weighted mixture of centers; the differentiable surrogate."""
    return soft_assign(values, centers, sigma) @ centers


def dequantize(indices: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Look every index up in the center vector."""
    _check_centers(centers, 1.0)
    if indices.numel() > 0:
        lo, hi = int(indices.min()), int(indices.max())
        if lo < 0 or hi >= centers.numel():
            raise InvalidIndexError(
                f"index range [{lo}, {hi}] outside [0, {centers.numel()}) — corrupt description?"
            )
    return centers[indices]


def ste_combine(hard_values: torch.Tensor, soft_values: torch.Tensor) -> torch.Tensor:
    """Combine so the forward value is hard and the derivative is soft."""
    if hard_values.shape != soft_values.shape:
        raise ValueError(
            f"shape mismatch: hard {tuple(hard_values.shape)} vs soft {tuple(soft_values.shape)}"
        )
    return soft_values + (hard_values - soft_values).detach()


def quantize_ste(values: torch.Tensor, centers: torch.Tensor, sigma: float):
    """Full training-path quantization.

    Returns ``(quantized, indices)`` where ``quantized`` equals the nearest
    center elementwise but back-propagates through the soft mixture.
    """
    indices = hard_quantize(values, centers)
    hard = dequantize(indices, centers)
    soft = soft_quantize(values, centers, sigma)
    return ste_combine(hard, soft), indices


def one_hot_ste(values: torch.Tensor, centers: torch.Tensor, sigma: float) -> torch.Tensor:
    """Assignment simplex with a hard one-hot forward and soft backward."""
    soft = soft_assign(values, centers, sigma)
    hard = F.one_hot(hard_quantize(values, centers), centers.numel()).to(soft.dtype)
    return ste_combine(hard, soft)


def to_one_hot(indices: torch.Tensor, num_centers: int) -> torch.Tensor:
    """Convert an index tensor to one-hot form along a new trailing axis."""
    if num_centers < 2:
        raise ValueError(f"num_centers must be >= 2, got {num_centers}")
    if indices.numel() > 0:
        lo, hi = int(indices.min()), int(indices.max())
        if lo < 0 or hi >= num_centers:
            raise InvalidIndexError(f"index range [{lo}, {hi}] outside [0, {num_centers})")
    return F.one_hot(indices.long(), num_centers)


def from_one_hot(one_hot: torch.Tensor) -> torch.Tensor:
    """Invert :func:`to_one_hot`; rejects rows that are not exactly one-hot."""
    if one_hot.dim() < 1 or one_hot.size(-1) < 2:
        raise ValueError(f"expected trailing center axis of size >= 2, got {tuple(one_hot.shape)}")
    binary = (one_hot == 0) | (one_hot == 1)
    if not bool(binary.all()):
        raise ValueError("one-hot tensor has entries outside {0, 1}")
    sums = one_hot.sum(dim=-1)
    if not bool((sums == 1).all()):
        raise ValueError("one-hot rows must sum to exactly 1 along the center axis")
    return one_hot.argmax(dim=-1)


class ScalarQuantizer(nn.Module):
    """L learnable scalar quantization centers with fixed sharpness sigma.

    Modes for :meth:`forward`:
      * ``"ste"``  — hard values/one-hots forward, soft derivative backward
        (the training default);
      * ``"soft"`` — fully soft mixture, smooth everywhere (gradient checks);
      * ``"hard"`` — hard values, no gradient to the inputs (inference).
    """

    MODES = ("ste", "soft", "hard")

    def __init__(self, num_centers: int = 8, sigma: float = 1.0,
                 init_range: tuple[float, float] = (-1.0, 1.0)):
        super().__init__()
        if num_centers < 2:
            raise ValueError(f"num_centers must be >= 2, got {num_centers}")
        if not sigma > 0:
            raise ValueError(f"sigma must be > 0, got {sigma}")
        lo, hi = init_range
        self.centers = nn.Parameter(torch.linspace(float(lo), float(hi), num_centers))
        self.register_buffer("sigma", torch.tensor(float(sigma)))

    @property
    def num_centers(self) -> int:
        return self.centers.numel()

    def set_sigma(self, value: float) -> None:
        if not value > 0:
            raise ValueError(f"sigma must be > 0, got {value}")
        self.sigma.fill_(float(value))

    def forward(self, values: torch.Tensor, mode: str = "ste"):
        """Quantize ``values``; returns ``(quantized, indices, one_hot)``."""
        if mode not in self.MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {self.MODES}")
        sigma = float(self.sigma)
        indices = hard_quantize(values, self.centers)
        if mode == "soft":
            quantized = soft_quantize(values, self.centers, sigma)
            one_hot = soft_assign(values, self.centers, sigma)
        elif mode == "hard":
            quantized = dequantize(indices, self.centers)
            one_hot = to_one_hot(indices, self.num_centers).to(values.dtype)
        else:
            quantized = ste_combine(dequantize(indices, self.centers),
                                    soft_quantize(values, self.centers, sigma))
            one_hot = one_hot_ste(values, self.centers, sigma)
        return quantized, indices, one_hot

    def extra_repr(self) -> str:
        return f"num_centers={self.num_centers}, sigma={float(self.sigma):g}"
