"""Lossless serialization of description index tensors.

Container layout (``.mdcd`` files), all multi-byte fields big-endian:

    offset  size  field
    0       4     magic ``b"MDC1"``
    4       1     version (=1)
    5       1     desc_id (0 = A, 1 = B)
    6       2     orig_h — pre-padding image height, pixels
    8       2     orig_w — pre-padding image width, pixels
    10      2     m — feature rows (= ceil(orig_h / 8))
    12      2     n — feature cols (= ceil(orig_w / 8))
    14      2     k — feature channels
    16      2     l — number of quantization centers (>= 2)
    18      1     coding_mode (0 = raw, 1 = arithmetic)
    19      8     model tag (arithmetic mode only: first 8 bytes of the
                  producing model's state checksum)
    ...           payload

Raw mode packs each symbol into ``ceil(log2 l)`` bits, MSB first, in raster
order (m, then n, then k; k fastest); payload length is exactly
``ceil(m*n*k*ceil(log2 l) / 8)`` bytes.  Arithmetic mode runs a 32-bit
renormalizing arithmetic coder over per-symbol distributions supplied by a
causal context model; the decoder reproduces the identical distributions by
re-running the model symbol by symbol, which the model's causality makes
possible.  Distributions are quantized to integer frequencies
``max(1, round(p * 65536))`` identically on both sides.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

MAGIC = b"MDC1"
FORMAT_VERSION = 1
MODE_RAW = 0
MODE_ARITHMETIC = 1
MODEL_TAG_BYTES = 8
PROB_SCALE = 1 << 16

_HEADER = struct.Struct(">4sBBHHHHHHB")


class BitstreamError(ValueError):
    """Malformed or inconsistent serialized description."""


class HeaderError(BitstreamError):
    """Header fields are missing, inconsistent, or unsupported."""


class CorruptDescriptionError(BitstreamError):
    """Payload decodes to impossible symbols or has the wrong size."""


class ModelMismatchError(BitstreamError):
    """Description was produced by a different model than the decoder's."""


@dataclass(frozen=True)
class DescriptionHeader:
    desc_id: int
    orig_h: int
    orig_w: int
    m: int
    n: int
    k: int
    l: int
    coding_mode: int
    model_tag: bytes = b""

    def __post_init__(self):
        if self.desc_id not in (0, 1):
            raise HeaderError(f"desc_id must be 0 or 1, got {self.desc_id}")
        if self.coding_mode not in (MODE_RAW, MODE_ARITHMETIC):
            raise HeaderError(f"unknown coding mode {self.coding_mode}")
        if self.l < 2:
            raise HeaderError(f"center count must be >= 2, got {self.l}")
        for name in ("orig_h", "orig_w", "m", "n", "k"):
            v = getattr(self, name)
            if not 1 <= v <= 0xFFFF:
                raise HeaderError(f"{name}={v} outside [1, 65535]")
        if self.l > 0xFFFF:
            raise HeaderError(f"l={self.l} outside [2, 65535]")
        if self.m != -(-self.orig_h // 8) or self.n != -(-self.orig_w // 8):
            raise HeaderError(
                f"feature dims {self.m}x{self.n} inconsistent with "
                f"original image {self.orig_h}x{self.orig_w}"
            )
        if self.coding_mode == MODE_ARITHMETIC and len(self.model_tag) != MODEL_TAG_BYTES:
            raise HeaderError("arithmetic mode requires an 8-byte model tag")
        if self.coding_mode == MODE_RAW and self.model_tag:
            raise HeaderError("raw mode carries no model tag")

    @property
    def num_symbols(self) -> int:
        return self.m * self.n * self.k

    def pack(self) -> bytes:
        base = _HEADER.pack(MAGIC, FORMAT_VERSION, self.desc_id, self.orig_h,
                            self.orig_w, self.m, self.n, self.k, self.l,
                            self.coding_mode)
        return base + self.model_tag

    @classmethod
    def unpack(cls, data: bytes) -> tuple["DescriptionHeader", int]:
        """Parse a header from ``data``; returns (header, bytes consumed)."""
        if len(data) < _HEADER.size:
            raise HeaderError(f"truncated header: {len(data)} < {_HEADER.size} bytes")
        magic, version, desc_id, oh, ow, m, n, k, l, mode = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise HeaderError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise HeaderError(f"unsupported version {version}, expected {FORMAT_VERSION}")
        offset = _HEADER.size
        tag = b""
        if mode == MODE_ARITHMETIC:
            if len(data) < offset + MODEL_TAG_BYTES:
                raise HeaderError("truncated header: missing model tag")
            tag = bytes(data[offset:offset + MODEL_TAG_BYTES])
            offset += MODEL_TAG_BYTES
        return cls(desc_id, oh, ow, m, n, k, l, mode, tag), offset


@dataclass(frozen=True)
class EncodedDescription:
    header: DescriptionHeader
    payload: bytes

    @property
    def payload_bits(self) -> int:
        return 8 * len(self.payload)

    @property
    def total_bits(self) -> int:
        return 8 * (len(self.header.pack()) + len(self.payload))

    def to_bytes(self) -> bytes:
        return self.header.pack() + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncodedDescription":
        header, offset = DescriptionHeader.unpack(data)
        return cls(header, bytes(data[offset:]))

    def write(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def read(cls, path: str) -> "EncodedDescription":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def bits_per_symbol(num_centers: int) -> int:
    if num_centers < 2:
        raise ValueError(f"num_centers must be >= 2, got {num_centers}")
    return (num_centers - 1).bit_length()


def raw_payload_size(m: int, n: int, k: int, num_centers: int) -> int:
    """Exact raw-mode payload length in bytes."""
    return (m * n * k * bits_per_symbol(num_centers) + 7) // 8


def _as_index_array(indices, num_centers: int) -> np.ndarray:
    arr = np.asarray(indices.detach().cpu() if isinstance(indices, torch.Tensor) else indices)
    if arr.ndim != 3:
        raise ValueError(f"expected an (M, N, K) index tensor, got shape {arr.shape}")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= num_centers):
        raise CorruptDescriptionError(
            f"indices outside [0, {num_centers}): range "
            f"[{arr.min()}, {arr.max()}]"
        )
    return arr


def serialize_raw(indices, desc_id: int, orig_h: int, orig_w: int,
                  num_centers: int) -> EncodedDescription:
    """Fixed-width packing of an (M, N, K) index tensor."""
    arr = _as_index_array(indices, num_centers)
    m, n, k = arr.shape
    header = DescriptionHeader(desc_id, orig_h, orig_w, m, n, k, num_centers, MODE_RAW)
    bps = bits_per_symbol(num_centers)
    flat = arr.reshape(-1)
    shifts = np.arange(bps - 1, -1, -1, dtype=np.int64)
    bits = ((flat[:, None] >> shifts) & 1).astype(np.uint8)
    payload = np.packbits(bits.reshape(-1)).tobytes()
    return EncodedDescription(header, payload)


def deserialize_raw(desc: EncodedDescription) -> torch.Tensor:
    """Invert :func:`serialize_raw`; returns an (M, N, K) long tensor."""
    h = desc.header
    if h.coding_mode != MODE_RAW:
        raise HeaderError("description is not raw-coded")
    bps = bits_per_symbol(h.l)
    expected = raw_payload_size(h.m, h.n, h.k, h.l)
    if len(desc.payload) != expected:
        raise CorruptDescriptionError(
            f"payload is {len(desc.payload)} bytes, expected {expected}"
        )
    total_bits = h.num_symbols * bps
    bits = np.unpackbits(np.frombuffer(desc.payload, dtype=np.uint8), count=total_bits)
    weights = (1 << np.arange(bps - 1, -1, -1)).astype(np.int64)
    values = bits.reshape(h.num_symbols, bps).astype(np.int64) @ weights
    if values.size and values.max() >= h.l:
        raise CorruptDescriptionError(
            f"decoded symbol {values.max()} >= center count {h.l}"
        )
    return torch.from_numpy(values.reshape(h.m, h.n, h.k))


class _BitWriter:
    def __init__(self):
        self._bytes = bytearray()
        self._current = 0
        self._filled = 0

    def write(self, bit: int) -> None:
        self._current = (self._current << 1) | bit
        self._filled += 1
        if self._filled == 8:
            self._bytes.append(self._current)
            self._current = 0
            self._filled = 0

    def getvalue(self) -> bytes:
        if self._filled:
            return bytes(self._bytes) + bytes([self._current << (8 - self._filled)])
        return bytes(self._bytes)


class _BitReader:
    """MSB-first bit reader; reads past the end yield zeros."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def read(self) -> int:
        byte_index = self._pos >> 3
        if byte_index >= len(self._data):
            return 0
        bit = (self._data[byte_index] >> (7 - (self._pos & 7))) & 1
        self._pos += 1
        return bit


class _RangeCoderBase:
    """Shared state of the 32-bit renormalizing arithmetic coder."""

    STATE_BITS = 32

    def __init__(self):
        self.full = 1 << self.STATE_BITS
        self.half = self.full >> 1
        self.quarter = self.full >> 2
        self.mask = self.full - 1
        self.max_total = self.quarter + 2
        self.low = 0
        self.high = self.mask

    def _narrow(self, cum, symbol: int) -> None:
        total = int(cum[-1])
        if total > self.max_total:
            raise ValueError(f"frequency total {total} exceeds {self.max_total}")
        span = self.high - self.low + 1
        self.high = self.low + int(cum[symbol + 1]) * span // total - 1
        self.low = self.low + int(cum[symbol]) * span // total
        while True:
            if ((self.low ^ self.high) & self.half) == 0:
                self._shift()
                self.low = (self.low << 1) & self.mask
                self.high = ((self.high << 1) & self.mask) | 1
            elif (self.low & ~self.high & self.quarter) != 0:
                self._underflow()
                self.low = (self.low << 1) & (self.mask >> 1)
                self.high = ((self.high << 1) & (self.mask >> 1)) | self.half | 1
            else:
                return


class RangeEncoder(_RangeCoderBase):
    def __init__(self):
        super().__init__()
        self._out = _BitWriter()
        self._pending = 0

    def encode_symbol(self, cum, symbol: int) -> None:
        self._narrow(cum, symbol)

    def _shift(self) -> None:
        bit = self.low >> (self.STATE_BITS - 1)
        self._out.write(bit)
        for _ in range(self._pending):
            self._out.write(bit ^ 1)
        self._pending = 0

    def _underflow(self) -> None:
        self._pending += 1

    def finish(self) -> bytes:
        self._out.write(1)
        return self._out.getvalue()


class RangeDecoder(_RangeCoderBase):
    def __init__(self, data: bytes):
        super().__init__()
        self._inp = _BitReader(data)
        self.code = 0
        for _ in range(self.STATE_BITS):
            self.code = (self.code << 1) | self._inp.read()

    def decode_symbol(self, cum, num_symbols: int) -> int:
        total = int(cum[-1])
        span = self.high - self.low + 1
        value = ((self.code - self.low + 1) * total - 1) // span
        lo, hi = 0, num_symbols
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if int(cum[mid]) > value:
                hi = mid
            else:
                lo = mid
        self._narrow(cum, lo)
        return lo

    def _shift(self) -> None:
        self.code = ((self.code << 1) & self.mask) | self._inp.read()

    def _underflow(self) -> None:
        self.code = ((self.code & self.half)
                     | ((self.code << 1) & (self.mask >> 1))
                     | self._inp.read())


def cumulative_freqs(probs) -> np.ndarray:
    """Quantize a probability vector to cumulative integer frequencies."""
    p = np.asarray(probs, dtype=np.float64)
    freqs = np.maximum(1, np.rint(p * PROB_SCALE)).astype(np.int64)
    cum = np.zeros(len(freqs) + 1, dtype=np.int64)
    np.cumsum(freqs, out=cum[1:])
    return cum


def ac_encode(indices, probs, desc_id: int, orig_h: int, orig_w: int,
              model_tag: bytes) -> EncodedDescription:
    """Arithmetic-code an (M, N, K) index tensor with per-symbol distributions.

    ``probs`` is the (M, N, K, L) tensor of model probabilities for every
    position (as produced alongside the rate estimate); the decoder
    regenerates the same distributions from the model identified by
    ``model_tag``.
    """
    p = np.asarray(probs.detach().cpu() if isinstance(probs, torch.Tensor) else probs,
                   dtype=np.float64)
    if p.ndim != 4:
        raise ValueError(f"expected (M, N, K, L) probabilities, got shape {p.shape}")
    num_centers = p.shape[-1]
    arr = _as_index_array(indices, num_centers)
    if arr.shape != p.shape[:3]:
        raise ValueError(f"indices shape {arr.shape} does not match probs {p.shape[:3]}")
    m, n, k = arr.shape
    header = DescriptionHeader(desc_id, orig_h, orig_w, m, n, k, num_centers,
                               MODE_ARITHMETIC, bytes(model_tag))
    encoder = RangeEncoder()
    flat_idx = arr.reshape(-1)
    flat_p = p.reshape(-1, num_centers)
    for pos in range(flat_idx.size):
        encoder.encode_symbol(cumulative_freqs(flat_p[pos]), int(flat_idx[pos]))
    return EncodedDescription(header, encoder.finish())


@torch.no_grad()
def ac_decode(desc: EncodedDescription, entropy_model,
              expected_tag: bytes | None = None) -> torch.Tensor:
    """Decode an arithmetic-coded description back to an (M, N, K) tensor.

    Runs the context model once per symbol over the partially filled one-hot
    volume; causality guarantees each position's distribution matches the
    encoder's bit for bit.
    """
    h = desc.header
    if h.coding_mode != MODE_ARITHMETIC:
        raise HeaderError("description is not arithmetic-coded")
    if expected_tag is not None and bytes(expected_tag) != h.model_tag:
        raise ModelMismatchError(
            f"description was coded with model {h.model_tag.hex()}, "
            f"decoder has {bytes(expected_tag).hex()}"
        )
    if h.l != entropy_model.num_centers:
        raise HeaderError(
            f"header says {h.l} centers, entropy model has {entropy_model.num_centers}"
        )
    dtype = next(entropy_model.parameters()).dtype
    one_hot = torch.zeros(1, h.m, h.n, h.k, h.l, dtype=dtype)
    out = torch.zeros(h.m, h.n, h.k, dtype=torch.long)
    decoder = RangeDecoder(desc.payload)
    for i in range(h.m):
        for j in range(h.n):
            for c in range(h.k):
                probs = entropy_model(one_hot)[0, i, j, c].exp()
                cum = cumulative_freqs(probs.numpy())
                symbol = decoder.decode_symbol(cum, h.l)
                out[i, j, c] = symbol
                one_hot[0, i, j, c, symbol] = 1
    return out


def estimated_bits(probs, indices) -> float:
    """Cross-entropy (bits) of an index tensor under given distributions."""
    p = np.asarray(probs.detach().cpu() if isinstance(probs, torch.Tensor) else probs,
                   dtype=np.float64)
    arr = _as_index_array(indices, p.shape[-1])
    picked = np.take_along_axis(p, arr[..., None], axis=-1)
    return float(-np.log2(picked).sum())
