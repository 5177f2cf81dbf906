from __future__ import annotations

import contextlib

import torch
from torch import Tensor, nn

from .errors import DivergenceError, ShapeError


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing the global RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    module.frozen = True
    return module


@contextlib.contextmanager
def eval_mode(*modules: nn.Module):
    """Temporarily switch modules to eval mode (no spectral-norm power iterations)."""
    prev = [m.training for m in modules]
    for m in modules:
        m.eval()
    try:
        yield
    finally:
        for m, was in zip(modules, prev):
            m.train(was)


def as_batch(img: Tensor) -> tuple[Tensor, bool]:
    """Return a 4-d view of ``img`` and whether the input was unbatched."""
    if img.dim() == 3:
        return img.unsqueeze(0), True
    if img.dim() == 4:
        return img, False
    raise ShapeError(f"expected C×H×W or N×C×H×W image, got shape {tuple(img.shape)}")


def check_image(img: Tensor, min_size: int = 8) -> Tensor:
    """Validate an ImageTensor: 3 channels, values finite and within [0, 1], sides >= min_size."""
    batch, _ = as_batch(img)
    if batch.shape[1] != 3:
        raise ShapeError(f"expected 3 channels, got {batch.shape[1]}")
    if batch.shape[-2] < min_size or batch.shape[-1] < min_size:
        raise ShapeError(f"image {tuple(batch.shape[-2:])} smaller than {min_size}×{min_size}")
    if not torch.isfinite(batch).all():
        raise ValueError("image contains non-finite values")
    if batch.min() < 0 or batch.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return img


def check_finite(t: Tensor, what: str) -> Tensor:
    if not torch.isfinite(t).all():
        raise DivergenceError(f"non-finite values in {what}", term=what)
    return t
