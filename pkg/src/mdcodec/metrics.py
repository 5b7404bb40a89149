"""Image quality metrics and the codec's objective terms.

Single-scale SSIM uses the reference constants: 11x11 Gaussian window with
sigma 1.5, K1=0.01, K2=0.03, dynamic range 1.0, statistics over valid window
positions only.  The multi-scale form combines contrast-structure terms from
every scale and luminance from the coarsest scale as a weighted product.

Two weight vectors are shipped:

* ``MR_SSIM_WEIGHTS`` — proportional to each scale's pixel count
  (``4**-s``, normalized), emphasizing the full-resolution scale;
* ``MS_SSIM_WEIGHTS`` — the perceptually calibrated multi-scale weights,
  normalized to sum to 1 exactly.

Images are ``(B, C, H, W)`` tensors with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

WIN_SIZE = 11
WIN_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
NUM_SCALES = 5

# Floor applied to contrast-structure terms before exponentiation; keeps the
# weighted product differentiable when a term would otherwise hit zero.
_CS_FLOOR = 1e-6


def area_weights(num_scales: int = NUM_SCALES) -> tuple[float, ...]:
    """Scale weights proportional to pixel count: ``4**-s``, normalized."""
    raw = [4.0 ** -s for s in range(num_scales)]
    total = sum(raw)
    return tuple(w / total for w in raw)


def _normalized(raw: list[float]) -> tuple[float, ...]:
    total = sum(raw)
    return tuple(w / total for w in raw)


MR_SSIM_WEIGHTS = area_weights()
# The literature multi-scale weight list sums to 1.0001; normalize so all
# weight vectors used here sum to 1 (shifts values by < 1e-4).
MS_SSIM_WEIGHTS = _normalized([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])


def _check_weights(weights) -> torch.Tensor:
    w = torch.as_tensor(weights, dtype=torch.float64)
    if w.dim() != 1 or w.numel() < 1:
        raise ValueError(f"weights must be a non-empty 1-D sequence, got {weights!r}")
    if (w < 0).any():
        raise ValueError("scale weights must be non-negative")
    if abs(float(w.sum()) - 1.0) > 1e-6:
        raise ValueError(f"scale weights must sum to 1, got {float(w.sum()):.8f}")
    return w


def truncated_weights(weights, num_scales: int) -> tuple[float, ...]:
    """First ``num_scales`` entries of ``weights``, renormalized to sum to 1."""
    if not 1 <= num_scales <= len(weights):
        raise ValueError(f"num_scales must be in [1, {len(weights)}], got {num_scales}")
    return _normalized(list(weights[:num_scales]))


def usable_scales(height: int, width: int, win_size: int = WIN_SIZE,
                  max_scales: int = NUM_SCALES) -> int:
    """Largest scale count whose coarsest scale still fits the window."""
    scales = 0
    side = min(height, width)
    while scales < max_scales and side >= win_size:
        scales += 1
        side //= 2
    return scales


def _gaussian_window(win_size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(win_size, dtype=dtype, device=device) - (win_size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()

def _filter_valid(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    # Separable Gaussian, valid positions only, one filter per channel.
    c = x.size(1)
    k = window.numel()
    row = window.view(1, 1, 1, k).expand(c, 1, 1, k)
    col = window.view(1, 1, k, 1).expand(c, 1, k, 1)
    x = F.conv2d(x, row, groups=c)
    return F.conv2d(x, col, groups=c)


def _check_pair(x: torch.Tensor, y: torch.Tensor, win_size: int) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) images, got shape {tuple(x.shape)}")
    if x.size(-1) < win_size or x.size(-2) < win_size:
        raise ValueError(
            f"images of size {x.size(-2)}x{x.size(-1)} are smaller than the "
            f"{win_size}x{win_size} window"
        )


def _ssim_and_cs(x: torch.Tensor, y: torch.Tensor, data_range: float,
                 win_size: int, win_sigma: float):
    """Per-(image, channel) mean SSIM and contrast-structure terms."""
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    window = _gaussian_window(win_size, win_sigma, x.dtype, x.device)

    mu_x = _filter_valid(x, window)
    mu_y = _filter_valid(y, window)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sigma_xx = _filter_valid(x * x, window) - mu_xx
    sigma_yy = _filter_valid(y * y, window) - mu_yy
    sigma_xy = _filter_valid(x * y, window) - mu_xy

    cs_map = (2 * sigma_xy + c2) / (sigma_xx + sigma_yy + c2)
    lum_map = (2 * mu_xy + c1) / (mu_xx + mu_yy + c1)
    return (lum_map * cs_map).mean(dim=(2, 3)), cs_map.mean(dim=(2, 3))


def ssim(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0,
         win_size: int = WIN_SIZE, win_sigma: float = WIN_SIGMA) -> torch.Tensor:
    """Mean single-scale SSIM over batch and channels (scalar tensor)."""
    _check_pair(x, y, win_size)
    ssim_pc, _ = _ssim_and_cs(x, y, data_range, win_size, win_sigma)
    return ssim_pc.mean()


def _downsample2(x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        x = F.pad(x, (0, w % 2, 0, h % 2), mode="replicate")
    return F.avg_pool2d(x, kernel_size=2)


def multiscale_ssim(x: torch.Tensor, y: torch.Tensor, weights,
                    data_range: float = 1.0, win_size: int = WIN_SIZE,
                    win_sigma: float = WIN_SIGMA) -> torch.Tensor:
    """Weighted-product multi-scale SSIM with caller-supplied scale weights.

    Contrast-structure terms enter from every scale; luminance enters only at
    the coarsest scale.  The number of scales equals ``len(weights)`` and the
    input must survive that many dyadic downsamplings with the window intact.
    """
    w = _check_weights(weights)
    num_scales = w.numel()
    if usable_scales(x.size(-2), x.size(-1), win_size, num_scales) < num_scales:
        raise ValueError(
            f"images of size {x.size(-2)}x{x.size(-1)} are too small for "
            f"{num_scales} scales with a {win_size}x{win_size} window"
        )
    _check_pair(x, y, win_size)

    w = w.to(dtype=x.dtype, device=x.device)
    terms = []
    for s in range(num_scales):
        ssim_pc, cs_pc = _ssim_and_cs(x, y, data_range, win_size, win_sigma)
        terms.append(ssim_pc if s == num_scales - 1 else cs_pc)
        if s < num_scales - 1:
            x = _downsample2(x)
            y = _downsample2(y)
    stacked = torch.stack(terms, dim=0).clamp(min=_CS_FLOOR)
    return torch.prod(stacked ** w.view(-1, 1, 1), dim=0).mean()


def mr_ssim(x: torch.Tensor, y: torch.Tensor, scales: int = NUM_SCALES) -> torch.Tensor:
    """Multi-scale SSIM with area-proportional weights."""
    return multiscale_ssim(x, y, truncated_weights(MR_SSIM_WEIGHTS, scales))


def ms_ssim(x: torch.Tensor, y: torch.Tensor, scales: int = NUM_SCALES) -> torch.Tensor:
    """Multi-scale SSIM with the perceptually calibrated weights."""
    return multiscale_ssim(x, y, truncated_weights(MS_SSIM_WEIGHTS, scales))


def structural_weights(variant: str = "mr") -> tuple[float, ...]:
    if variant == "mr":
        return MR_SSIM_WEIGHTS
    if variant == "ms":
        return MS_SSIM_WEIGHTS
    raise ValueError(f"unknown loss variant {variant!r}, expected 'mr' or 'ms'")


def fitted_scales(x: torch.Tensor, win_size: int = WIN_SIZE) -> int:
    """Scale count the loss terms use for this image size (at least 1)."""
    scales = usable_scales(x.size(-2), x.size(-1), win_size)
    if scales < 1:
        raise ValueError(
            f"images of size {x.size(-2)}x{x.size(-1)} are smaller than the "
            f"{win_size}x{win_size} window"
        )
    return scales


def mae_recon_loss(x: torch.Tensor, y_a: torch.Tensor, y_b: torch.Tensor,
                   y_c: torch.Tensor) -> torch.Tensor:
    """Mean absolute reconstruction error summed over the three decodes.

    Each term sums per-pixel L1 differences (over color channels) and divides
    by the pixel count, so the value is invariant to image area; batch inputs
    are averaged over the batch.
    """
    for name, img in (("y_a", y_a), ("y_b", y_b), ("y_c", y_c)):
        if img.shape != x.shape:
            raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs {name} {tuple(img.shape)}")
    h, w = x.shape[-2:]
    if h % 8 or w % 8:
        raise ValueError(f"image dims must be divisible by 8, got {h}x{w}")
    pixels = h * w
    total = x.new_zeros(())
    for y in (y_a, y_b, y_c):
        total = total + (x - y).abs().sum(dim=(1, 2, 3)).mean() / pixels
    return total


def structural_loss(x: torch.Tensor, y_a: torch.Tensor, y_b: torch.Tensor,
                    y_c: torch.Tensor, variant: str = "mr",
                    scales: int | None = None) -> torch.Tensor:
    """Negated sum of multi-scale similarities of the three decodes to x.

    Equals -3 exactly when all three reconstructions match x.  ``scales``
    defaults to the largest count the image size supports (weights truncated
    and renormalized accordingly).
    """
    if scales is None:
        scales = fitted_scales(x)
    w = truncated_weights(structural_weights(variant), scales)
    total = x.new_zeros(())
    for y in (y_a, y_b, y_c):
        total = total - multiscale_ssim(x, y, w)
    return total


def distance_loss(y_a: torch.Tensor, y_b: torch.Tensor, variant: str = "mr",
                  scales: int | None = None) -> torch.Tensor:
    """Structural similarity between the two side decodes.

    Used as a penalty: minimizing it pushes the side reconstructions apart.
    """
    if scales is None:
        scales = fitted_scales(y_a)
    w = truncated_weights(structural_weights(variant), scales)
    return multiscale_ssim(y_a, y_b, w)


@dataclass(frozen=True)
class LossBreakdown:
    """All objective terms of one evaluation, as float64 scalars."""

    d_l1: float
    d_mr: float
    d_distance: float
    d_reg: float
    rate_a: float
    rate_b: float
    alpha: float
    beta: float
    gamma: float
    total: float

    @classmethod
    def from_parts(cls, d_l1, d_mr, d_distance, d_reg, rate_a, rate_b,
                   alpha, beta, gamma) -> "LossBreakdown":
        parts = [float(v) for v in (d_l1, d_mr, d_distance, d_reg, rate_a, rate_b)]
        total = compose_total(*parts, alpha=alpha, beta=beta, gamma=gamma)
        return cls(*parts, alpha=float(alpha), beta=float(beta), gamma=float(gamma),
                   total=total)

    def recomposed(self) -> float:
        return compose_total(self.d_l1, self.d_mr, self.d_distance, self.d_reg,
                             self.rate_a, self.rate_b,
                             alpha=self.alpha, beta=self.beta, gamma=self.gamma)


def compose_total(d_l1, d_mr, d_distance, d_reg, rate_a, rate_b, *,
                  alpha, beta, gamma) -> float:
    return ((float(d_l1) + float(d_mr)) + float(alpha) * float(d_distance)
            + float(beta) * float(d_reg) + float(gamma) * (float(rate_a) + float(rate_b)))


def total_loss(x: torch.Tensor, y_a: torch.Tensor, y_b: torch.Tensor,
               y_c: torch.Tensor, rate_a: torch.Tensor, rate_b: torch.Tensor,
               d_reg: torch.Tensor, alpha: float = 0.1, beta: float = 2e-4,
               gamma: float = 0.1, variant: str = "mr",
               scales: int | None = None):
    """Assemble the full objective.

    Returns ``(loss, breakdown)``: a differentiable scalar tensor plus a
    :class:`LossBreakdown` of detached float64 parts whose ``total`` field
    recomposes from them exactly.
    """
    if alpha < 0 or beta < 0 or gamma < 0:
        raise ValueError(f"hyper-parameters must be >= 0, got {(alpha, beta, gamma)}")
    if scales is None:
        scales = fitted_scales(x)
    d_l1 = mae_recon_loss(x, y_a, y_b, y_c)
    d_mr = structural_loss(x, y_a, y_b, y_c, variant=variant, scales=scales)
    d_dist = distance_loss(y_a, y_b, variant=variant, scales=scales)
    loss = (d_l1 + d_mr) + alpha * d_dist + beta * d_reg + gamma * (rate_a + rate_b)
    breakdown = LossBreakdown.from_parts(
        d_l1.detach(), d_mr.detach(), d_dist.detach(), d_reg.detach(),
        rate_a.detach(), rate_b.detach(), alpha=alpha, beta=beta, gamma=gamma)
    return loss, breakdown
