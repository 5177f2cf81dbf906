"""Image I/O, the PNG training corpus, deterministic patch sampling and a synthetic corpus."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .generator import DegradationParams, degrade

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def load_image(path) -> Tensor:
    """Read an image file as a float32 3×H×W tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(img: Tensor, path) -> None:
    arr = (img.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def list_images(directory, suffixes=IMAGE_SUFFIXES) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in suffixes)


def load_corpus(directory, min_size: int) -> list[Tensor]:
    """Load every PNG in ``directory``; images smaller than ``min_size`` are rejected."""
    paths = list_images(directory, (".png",))
    if not paths:
        raise FileNotFoundError(f"no PNG images in {directory}")
    images = []
    for p in paths:
        img = load_image(p)
        if min(img.shape[-2:]) < min_size:
            raise ValueError(f"{p} is {tuple(img.shape[-2:])}, smaller than patch size {min_size}")
        images.append(img)
    return images


def sample_hr_batch(images: list[Tensor], seed: int, step: int, batch_size: int, patch: int,
                    flips: bool = True) -> Tensor:
    """Random HR crops for ``step``; a pure function of (seed, step), so resumed runs see the same data."""
    rng = np.random.default_rng([seed, step])
    crops = []
    for _ in range(batch_size):
        img = images[int(rng.integers(len(images)))]
        h, w = img.shape[-2:]
        y, x = int(rng.integers(h - patch + 1)), int(rng.integers(w - patch + 1))
        crop = img[:, y:y + patch, x:x + patch]
        if flips:
            if rng.random() < 0.5:
                crop = crop.flip(-1)
            if rng.random() < 0.5:
                crop = crop.flip(-2)
        crops.append(crop)
    return torch.stack(crops)


def make_pair(hr: Tensor, params: DegradationParams) -> tuple[Tensor, Tensor]:
    return degrade(hr, params), hr


def power_law_noise(rng: np.random.Generator, size: int, beta: float) -> np.ndarray:
    """Unit-variance Gaussian noise with a 1/f^beta amplitude spectrum."""
    f2 = np.fft.fftfreq(size)[:, None] ** 2 + np.fft.fftfreq(size)[None, :] ** 2
    f2[0, 0] = 1.0
    spec = (rng.normal(size=(size, size)) + 1j * rng.normal(size=(size, size))) / f2 ** (beta / 2)
    spec[0, 0] = 0.0
    x = np.real(np.fft.ifft2(spec))
    return x / x.std()


def synthetic_image(rng: np.random.Generator, size: int = 96) -> np.ndarray:
    """Procedural H×W×3 image: 1/f textured background, textured hard-edged shapes, gratings, grain."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = rng.uniform(0.2, 0.8, 3) + 0.12 * np.stack([power_law_noise(rng, size, 1.2) for _ in range(3)], -1)
    for _ in range(int(rng.integers(4, 9))):
        color = rng.uniform(0, 1, 3)
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(size / 10, size / 4)
        kind = int(rng.integers(3))
        if kind == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        elif kind == 1:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.3, 1.0))
        else:
            freq = rng.uniform(0.15, 0.45)
            phi = rng.uniform(0, np.pi)
            wave = np.sin(2 * np.pi * freq * (np.cos(phi) * xx + np.sin(phi) * yy))
            mask = ((yy - cy) ** 2 + (xx - cx) ** 2 < (1.5 * r) ** 2) & (wave > 0)
        texture = 0.1 * power_law_noise(rng, size, 0.8)[..., None]
        img[mask] = (color + texture)[mask]
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1)


def make_synthetic_corpus(directory, n: int = 20, size: int = 96, seed: int = 0) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        arr = (synthetic_image(rng, size) * 255).round().astype(np.uint8)
        p = d / f"img_{i:03d}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths
