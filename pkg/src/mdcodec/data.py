"""Image I/O, the training dataset, and a synthetic texture generator.

Images cross the library boundary as ``(H, W, 3)`` float32 numpy arrays with
values in [0, 1]; tensors used by the networks are ``(B, 3, H, W)``.
"""

from __future__ import annotations

import logging
import os

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(path: str, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) array in [0, 1] -> (1, 3, H, W) float tensor."""
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image)).float().permute(2, 0, 1).unsqueeze(0)


def from_tensor(tensor: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) tensor -> (H, W, 3) float32 array."""
    if tensor.dim() == 4:
        if tensor.size(0) != 1:
            raise ValueError("from_tensor expects a single image")
        tensor = tensor.squeeze(0)
    return tensor.detach().cpu().permute(1, 2, 0).numpy().astype(np.float32)


class ImageFolderDataset:
    """All readable images under one directory, decoded lazily and cached."""

    def __init__(self, root: str, cache: bool = True):
        if not os.path.isdir(root):
            raise FileNotFoundError(f"dataset directory {root!r} does not exist")
        self.root = root
        self.paths = sorted(
            os.path.join(root, name) for name in os.listdir(root)
            if name.lower().endswith(IMAGE_EXTENSIONS)
        )
        if not self.paths:
            raise ValueError(f"no images found in {root!r}")
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.paths)

    def load(self, index: int) -> np.ndarray | None:
        path = self.paths[index]
        if self._cache is not None and path in self._cache:
            return self._cache[path]
        try:
            arr = load_image(path)
        except Exception as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            return None
        if self._cache is not None:
            self._cache[path] = arr
        return arr


def _resize_min_side(image: np.ndarray, target: int) -> np.ndarray:
    h, w = image.shape[:2]
    if min(h, w) >= target:
        return image
    scale = target / min(h, w)
    new_h = max(target, int(round(h * scale)))
    new_w = max(target, int(round(w * scale)))
    pil = Image.fromarray((np.clip(image, 0, 1) * 255.0).round().astype(np.uint8))
    pil = pil.resize((new_w, new_h), Image.BILINEAR)
    return np.asarray(pil, dtype=np.float32) / 255.0


def random_crop(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Random size x size crop, upscaling first if the image is too small."""
    image = _resize_min_side(image, size)
    h, w = image.shape[:2]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top:top + size, left:left + size]


def sample_batch(dataset: ImageFolderDataset, crop_size: int, batch_size: int,
                 rng: np.random.Generator) -> torch.Tensor:
    """Draw a (B, 3, S, S) batch of random crops from the dataset."""
    crops = []
    failures = 0
    while len(crops) < batch_size:
        index = int(rng.integers(0, len(dataset)))
        image = dataset.load(index)
        if image is None:
            failures += 1
            if failures > 10 * batch_size + len(dataset):
                raise RuntimeError(f"could not read enough images from {dataset.root!r}")
            continue
        crops.append(random_crop(image, crop_size, rng))
    stacked = np.stack(crops).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(stacked)).float()


def random_texture(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """One synthetic texture: a random base color field plus oriented gratings.

    Base colors vary widely across samples so even a few transmitted bits are
    worth real distortion; gratings and checkerboards add multi-scale
    structure on top.
    """
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size),
                         indexing="ij")
    img = np.empty((size, size, 3))
    base = rng.uniform(0.15, 0.85, size=3)
    for c in range(3):
        gx, gy = rng.uniform(-0.4, 0.4, size=2)
        img[..., c] = base[c] + gx * (xx - 0.5) + gy * (yy - 0.5)
    for _ in range(int(rng.integers(2, 5))):
        theta = rng.uniform(0.0, np.pi)
        freq = rng.uniform(2.0, 10.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = np.sin(2.0 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += wave[..., None] * rng.uniform(0.04, 0.15, size=3)
    if rng.random() < 0.5:
        cells = max(2, int(rng.integers(4, 12)))
        board = ((xx * cells).astype(int) + (yy * cells).astype(int)) % 2
        img += (board[..., None] - 0.5) * rng.uniform(0.05, 0.25, size=3)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_texture_dataset(out_dir: str, count: int, size: int = 64,
                          seed: int = 0) -> list[str]:
    """Write ``count`` seeded synthetic textures as PNGs; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        path = os.path.join(out_dir, f"texture_{i:04d}.png")
        save_image(path, random_texture(rng, size))
        paths.append(path)
    return paths
