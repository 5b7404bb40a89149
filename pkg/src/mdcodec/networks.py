"""Network components of the two-description codec.

* ``Encoder`` — multi-scale dilated feature extractor producing a feature
  tensor (1/8 resolution, K channels) and two importance maps.
* ``Decoder`` — upsampling reconstruction network; one instance per side
  description plus a central instance fed both de-quantized tensors.
* ``EntropyModel`` — causal 3D-convolution context model predicting a
  distribution over the L quantization indices at every symbol position,
  conditioned only on raster-order predecessors.
* ``MDCodec`` — the complete model, including both scalar quantizers.

Layout conventions: images are ``(B, 3, H, W)``, features ``(B, K, M, N)``
with ``M = H/8``, ``N = W/8``; index and one-hot tensors use raster layout
``(B, M, N, K)`` / ``(B, M, N, K, L)`` (row, column, channel; channel
fastest), matching the serialized symbol order.

Checkpoint container (``save_checkpoint``/``load_checkpoint``): a single
``torch.save`` file holding a dict with keys ``format_version`` (int, =1),
``model_config`` (ModelConfig fields), ``state_dict`` (parameter/buffer
tensors), ``param_count`` (int), ``checksum`` (hex sha256 over sorted
state-dict entries), plus optional ``step``, ``optimizer``, ``train_config``
and ``rng`` entries written by the training loop.  The checksum is verified
on load.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import nn

from .quant import ScalarQuantizer, apply_importance, dequantize, expand_importance

DOWNSAMPLE_FACTOR = 8
CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.2


class CheckpointError(ValueError):
    """A checkpoint file is unreadable, mismatched, or corrupt."""


@dataclass(frozen=True)
class ModelConfig:
    """All width/size knobs of the codec; structure itself is fixed."""

    base_channels: int = 64
    feature_channels: int = 8
    num_centers: int = 8
    sigma: float = 1.0
    dilation_rates: tuple[int, int, int] = (1, 2, 3)
    resconv_per_block: int = 16
    entropy_channels: int = 32

    def __post_init__(self):
        if self.base_channels < 1 or self.feature_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.num_centers < 2:
            raise ValueError(f"num_centers must be >= 2, got {self.num_centers}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if len(self.dilation_rates) != 3 or any(d < 1 for d in self.dilation_rates):
            raise ValueError(f"need three positive dilation rates, got {self.dilation_rates}")
        if self.resconv_per_block < 1 or self.entropy_channels < 1:
            raise ValueError("resconv_per_block and entropy_channels must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_rates"] = list(self.dilation_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "dilation_rates" in d:
            d["dilation_rates"] = tuple(d["dilation_rates"])
        return cls(**d)


def _lrelu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


class HDCBlock(nn.Module):
    """Three cascaded 3x3 convolutions with increasing dilation rates."""

    def __init__(self, channels: int, rates: tuple[int, int, int]):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=r, dilation=r) for r in rates
        )

    def forward(self, x):
        for conv in self.convs:
            x = _lrelu(conv(x))
        return x


class Encoder(nn.Module):
    """Multi-scale dilated encoder: image -> features + two importance maps.

    Main path: stem conv, then three HDC blocks each followed by a 5x5
    stride-2 downsampling conv (1/8 resolution after the third).  The outputs
    of the first and second downsampling stages are tapped through stride-4
    and stride-2 convs so all three branches meet at 1/8 resolution, get
    concatenated, and are aggregated by three 3x3 convs feeding the heads.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.base_channels
        self.stem = nn.Conv2d(3, c, 3, padding=1)
        self.hdc1 = HDCBlock(c, cfg.dilation_rates)
        self.down1 = nn.Conv2d(c, c, 5, stride=2, padding=2)
        self.hdc2 = HDCBlock(c, cfg.dilation_rates)
        self.down2 = nn.Conv2d(c, c, 5, stride=2, padding=2)
        self.hdc3 = HDCBlock(c, cfg.dilation_rates)
        self.down3 = nn.Conv2d(c, c, 5, stride=2, padding=2)
        self.skip1 = nn.Conv2d(c, c, 5, stride=4, padding=2)
        self.skip2 = nn.Conv2d(c, c, 5, stride=2, padding=2)
        self.agg = nn.ModuleList([
            nn.Conv2d(3 * c, c, 3, padding=1),
            nn.Conv2d(c, c, 3, padding=1),
            nn.Conv2d(c, c, 3, padding=1),
        ])
        self.head_features = nn.Conv2d(c, cfg.feature_channels, 3, padding=1)
        self.head_map_a = nn.Conv2d(c, 1, 3, padding=1)
        self.head_map_b = nn.Conv2d(c, 1, 3, padding=1)

    def forward(self, x: torch.Tensor):
        h, w = x.shape[-2:]
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ValueError(f"input dims must be divisible by {DOWNSAMPLE_FACTOR}, got {h}x{w}")
        t = _lrelu(self.stem(x))
        t = _lrelu(self.down1(self.hdc1(t)))
        tap1 = _lrelu(self.skip1(t))
        t = _lrelu(self.down2(self.hdc2(t)))
        tap2 = _lrelu(self.skip2(t))
        t = _lrelu(self.down3(self.hdc3(t)))
        t = torch.cat([t, tap1, tap2], dim=1)
        for conv in self.agg:
            t = _lrelu(conv(t))
        features = self.head_features(t)
        map_a = torch.sigmoid(self.head_map_a(t))
        map_b = torch.sigmoid(self.head_map_b(t))
        if not torch.isfinite(features).all():
            raise FloatingPointError("encoder produced non-finite activations")
        return features, map_a, map_b


class ResConv(nn.Module):
    """Single 3x3 convolution with a skip connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + _lrelu(self.conv(x))


class Decoder(nn.Module):
    """Three stride-2 deconvolutions with residual blocks after the first two."""

    def __init__(self, in_channels: int, cfg: ModelConfig):
        super().__init__()
        c = cfg.base_channels
        n = cfg.resconv_per_block
        self.up1 = nn.ConvTranspose2d(in_channels, c, 5, stride=2, padding=2, output_padding=1)
        self.block1 = nn.Sequential(*[ResConv(c) for _ in range(n)])
        self.up2 = nn.ConvTranspose2d(c, c, 5, stride=2, padding=2, output_padding=1)
        self.block2 = nn.Sequential(*[ResConv(c) for _ in range(n)])
        self.up3 = nn.ConvTranspose2d(c, c, 5, stride=2, padding=2, output_padding=1)
        self.head = nn.Conv2d(c, 3, 3, padding=1)

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        t = self.block1(_lrelu(self.up1(q)))
        t = self.block2(_lrelu(self.up2(t)))
        t = _lrelu(self.up3(t))
        return torch.sigmoid(self.head(t))


class MaskedConv3d(nn.Conv3d):
    """3D convolution whose kernel is causal in raster order over (D, H, W).

    Mask type "A" admits only strict raster predecessors of the center tap
    (first layer, so a symbol never sees itself); type "B" also admits the
    center (subsequent layers).  Masked weight entries are zeroed at
    construction and stay zero: they receive no gradient.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, mask_type="B"):
        super().__init__(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        if mask_type not in ("A", "B"):
            raise ValueError(f"mask_type must be 'A' or 'B', got {mask_type!r}")
        kd, kh, kw = self.kernel_size
        cd, ch, cw = kd // 2, kh // 2, kw // 2
        mask = torch.zeros(kd, kh, kw)
        mask[:cd] = 1
        mask[cd, :ch] = 1
        mask[cd, ch, :cw] = 1
        if mask_type == "B":
            mask[cd, ch, cw] = 1
        self.register_buffer("mask", mask.expand_as(self.weight).clone())
        with torch.no_grad():
            self.weight.mul_(self.mask)

    def forward(self, x):
        return self._conv_forward(x, self.weight * self.mask, self.bias)


class EntropyModel(nn.Module):
    """Causal context model over quantization symbols.

    Six masked 3D convolutions; the middle four form two residual pairs.
    Input and output use the ``(B, M, N, K, L)`` one-hot layout; the output
    holds log-probabilities over the L indices at every position, each
    conditioned only on strictly-prior positions in (m, n, k) raster order.
    """

    def __init__(self, num_centers: int, hidden_channels: int = 32, kernel_size: int = 3):
        super().__init__()
        h = hidden_channels
        self.conv_in = MaskedConv3d(num_centers, h, kernel_size, mask_type="A")
        self.res1 = nn.ModuleList([MaskedConv3d(h, h, kernel_size) for _ in range(2)])
        self.res2 = nn.ModuleList([MaskedConv3d(h, h, kernel_size) for _ in range(2)])
        self.conv_out = MaskedConv3d(h, num_centers, kernel_size)
        self.num_centers = num_centers
        # Raster rows of context any output position can depend on.
        self.context_rows = 6 * (kernel_size // 2)

    def forward(self, one_hot: torch.Tensor) -> torch.Tensor:
        if one_hot.dim() != 5 or one_hot.size(-1) != self.num_centers:
            raise ValueError(
                f"expected (B, M, N, K, {self.num_centers}) one-hot input, "
                f"got shape {tuple(one_hot.shape)}"
            )
        t = one_hot.permute(0, 4, 1, 2, 3)  # (B, L, M, N, K)
        t = _lrelu(self.conv_in(t))
        for pair in (self.res1, self.res2):
            r = _lrelu(pair[0](t))
            r = pair[1](r)
            t = _lrelu(t + r)
        logits = self.conv_out(t)
        return F.log_softmax(logits, dim=1).permute(0, 2, 3, 4, 1)

    def bit_cost(self, one_hot: torch.Tensor) -> torch.Tensor:
        """Estimated bits per batch element for the symbols in ``one_hot``."""
        log_probs = self.forward(one_hot)
        nats = -(one_hot * log_probs).sum(dim=(1, 2, 3, 4))
        return nats / math.log(2.0)

    @torch.no_grad()
    def rate_of_indices(self, indices: torch.Tensor):
        """Bits and per-position distributions for an index tensor.

        Accepts ``(M, N, K)`` or ``(B, M, N, K)``; returns ``(bits, probs)``
        where ``bits`` is a float (summed over the batch if batched) and
        ``probs`` has an extra trailing axis of size L.
        """
        squeeze = indices.dim() == 3
        if squeeze:
            indices = indices.unsqueeze(0)
        if indices.dim() != 4:
            raise ValueError(f"expected (M, N, K) indices, got shape {tuple(indices.shape)}")
        if int(indices.min()) < 0 or int(indices.max()) >= self.num_centers:
            raise ValueError("indices out of range for this entropy model")
        dtype = next(self.parameters()).dtype
        one_hot = F.one_hot(indices.long(), self.num_centers).to(dtype)
        log_probs = self.forward(one_hot)
        bits = float(-(one_hot * log_probs).sum()) / math.log(2.0)
        probs = log_probs.exp()
        if squeeze:
            probs = probs.squeeze(0)
        return bits, probs


@dataclass
class CodecOutputs:
    """Everything one forward pass of the codec produces."""

    features: torch.Tensor
    map_a: torch.Tensor
    map_b: torch.Tensor
    quantized_a: torch.Tensor
    quantized_b: torch.Tensor
    indices_a: torch.Tensor
    indices_b: torch.Tensor
    one_hot_a: torch.Tensor
    one_hot_b: torch.Tensor
    y_a: torch.Tensor
    y_b: torch.Tensor
    y_central: torch.Tensor
    bits_a: torch.Tensor
    bits_b: torch.Tensor


class MDCodec(nn.Module):
    """Encoder, two quantizers, three decoders, and two entropy models."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        k = cfg.feature_channels
        self.encoder = Encoder(cfg)
        self.quantizer_a = ScalarQuantizer(cfg.num_centers, cfg.sigma)
        self.quantizer_b = ScalarQuantizer(cfg.num_centers, cfg.sigma)
        self.decoder_a = Decoder(k, cfg)
        self.decoder_b = Decoder(k, cfg)
        self.decoder_central = Decoder(2 * k, cfg)
        self.entropy_a = EntropyModel(cfg.num_centers, cfg.entropy_channels)
        self.entropy_b = EntropyModel(cfg.num_centers, cfg.entropy_channels)

    def quantizer(self, desc_id: int) -> ScalarQuantizer:
        return self.quantizer_a if desc_id == 0 else self.quantizer_b

    def entropy_model(self, desc_id: int) -> EntropyModel:
        return self.entropy_a if desc_id == 0 else self.entropy_b

    def side_decoder(self, desc_id: int) -> Decoder:
        return self.decoder_a if desc_id == 0 else self.decoder_b

    def set_sigma(self, value: float) -> None:
        self.quantizer_a.set_sigma(value)
        self.quantizer_b.set_sigma(value)

    def forward(self, x: torch.Tensor, mode: str = "ste") -> CodecOutputs:
        features, map_a, map_b = self.encoder(x)
        k = self.config.feature_channels
        gated_a = apply_importance(features, expand_importance(map_a, k))
        gated_b = apply_importance(features, expand_importance(map_b, k))
        # raster layout (B, M, N, K) for quantization and entropy coding
        q_a, idx_a, oh_a = self.quantizer_a(gated_a.permute(0, 2, 3, 1), mode)
        q_b, idx_b, oh_b = self.quantizer_b(gated_b.permute(0, 2, 3, 1), mode)
        values_a = q_a.permute(0, 3, 1, 2)
        values_b = q_b.permute(0, 3, 1, 2)
        y_a = self.decoder_a(values_a)
        y_b = self.decoder_b(values_b)
        y_central = self.decoder_central(torch.cat([values_a, values_b], dim=1))
        bits_a = self.entropy_a.bit_cost(oh_a)
        bits_b = self.entropy_b.bit_cost(oh_b)
        return CodecOutputs(features, map_a, map_b, values_a, values_b,
                            idx_a, idx_b, oh_a, oh_b, y_a, y_b, y_central,
                            bits_a, bits_b)

    @torch.no_grad()
    def encode_indices(self, x: torch.Tensor):
        """Hard-quantized index tensors ``(B, M, N, K)`` for both descriptions."""
        features, map_a, map_b = self.encoder(x)
        k = self.config.feature_channels
        gated_a = apply_importance(features, expand_importance(map_a, k))
        gated_b = apply_importance(features, expand_importance(map_b, k))
        _, idx_a, _ = self.quantizer_a(gated_a.permute(0, 2, 3, 1), "hard")
        _, idx_b, _ = self.quantizer_b(gated_b.permute(0, 2, 3, 1), "hard")
        return idx_a, idx_b

    @torch.no_grad()
    def decode_side(self, indices: torch.Tensor, desc_id: int) -> torch.Tensor:
        values = dequantize(indices, self.quantizer(desc_id).centers)
        return self.side_decoder(desc_id)(values.permute(0, 3, 1, 2))

    @torch.no_grad()
    def decode_central(self, indices_a: torch.Tensor, indices_b: torch.Tensor) -> torch.Tensor:
        values_a = dequantize(indices_a, self.quantizer_a.centers).permute(0, 3, 1, 2)
        values_b = dequantize(indices_b, self.quantizer_b.centers).permute(0, 3, 1, 2)
        return self.decoder_central(torch.cat([values_a, values_b], dim=1))

    def conv_weight_parameters(self):
        """Weights of every 2D/3D convolution (no biases, no centers)."""
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Conv3d)):
                yield module.weight

    def regularization(self) -> torch.Tensor:
        """Sum of squared convolution weights (the weight-decay operand)."""
        total = None
        for w in self.conv_weight_parameters():
            term = (w * w).sum()
            total = term if total is None else total + term
        return total


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def state_checksum(state_dict: dict) -> str:
    """sha256 over sorted state-dict entries (names, dtypes, shapes, bytes)."""
    digest = hashlib.sha256()
    for name in sorted(state_dict):
        tensor = state_dict[name]
        digest.update(name.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def model_tag(model: nn.Module) -> bytes:
    """First 8 checksum bytes; embedded in coded descriptions."""
    return bytes.fromhex(state_checksum(model.state_dict()))[:8]


def save_checkpoint(path: str, model: MDCodec, step: int = 0,
                    optimizer=None, train_config: dict | None = None,
                    rng: dict | None = None) -> None:
    """Write a checkpoint atomically (see module docstring for the schema)."""
    state = model.state_dict()
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": state,
        "param_count": parameter_count(model),
        "checksum": state_checksum(state),
        "step": int(step),
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if train_config is not None:
        payload["train_config"] = train_config
    if rng is not None:
        payload["rng"] = rng
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    """Read and validate a checkpoint dict."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a codec checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload['format_version']} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    if state_checksum(payload["state_dict"]) != payload["checksum"]:
        raise CheckpointError(f"checksum mismatch in {path}: corrupt checkpoint")
    return payload


def load_model(path: str) -> tuple[MDCodec, dict]:
    """Instantiate an ``MDCodec`` from a checkpoint file."""
    payload = load_checkpoint(path)
    model = MDCodec(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
