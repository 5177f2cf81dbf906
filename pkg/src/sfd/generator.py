"""RRDB super-resolution network and the LR/HR pair synthesis used for training."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, ShapeError
from .utils import as_batch, check_finite, seeded


@dataclass(frozen=True)
class GeneratorConfig:
    num_blocks: int = 4
    num_features: int = 32
    scale: int = 4
    growth_channels: int = 16

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ConfigError(f"scale must be 2 or 4, got {self.scale}", "generator.scale")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1", "generator.num_blocks")
        if self.num_features < 1 or self.growth_channels < 1:
            raise ConfigError("num_features and growth_channels must be positive", "generator.num_features")


class ResidualDenseBlock(nn.Module):
    def __init__(self, nf: int, gc: int):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(nf + i * gc, gc, 3, 1, 1) for i in range(4))
        self.conv_out = nn.Conv2d(nf + 4 * gc, nf, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(0.2)

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(self.lrelu(conv(torch.cat(feats, 1))))
        return x + 0.2 * self.conv_out(torch.cat(feats, 1))


class RRDB(nn.Module):
    def __init__(self, nf: int, gc: int):
        super().__init__()
        self.blocks = nn.Sequential(*(ResidualDenseBlock(nf, gc) for _ in range(3)))

    def forward(self, x: Tensor) -> Tensor:
        return x + 0.2 * self.blocks(x)


class RRDBNet(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        nf, gc = cfg.num_features, cfg.growth_channels
        self.conv_first = nn.Conv2d(3, nf, 3, 1, 1)
        self.body = nn.Sequential(*(RRDB(nf, gc) for _ in range(cfg.num_blocks)))
        self.conv_body = nn.Conv2d(nf, nf, 3, 1, 1)
        self.ups = nn.ModuleList(nn.Conv2d(nf, nf, 3, 1, 1) for _ in range(int(math.log2(cfg.scale))))
        self.conv_hr = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv_last = nn.Conv2d(nf, 3, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(0.2)

    def forward(self, x: Tensor) -> Tensor:
        feat = self.conv_first(x)
        feat = feat + self.conv_body(self.body(feat))
        for conv in self.ups:
            feat = self.lrelu(conv(F.interpolate(feat, scale_factor=2, mode="nearest")))
        return self.conv_last(self.lrelu(self.conv_hr(feat)))


def init_generator(cfg: GeneratorConfig, seed: int = 0) -> RRDBNet:
    with seeded(seed):
        g = RRDBNet(cfg)
        # ESRGAN-style scaled init keeps the deep residual trunk near identity
        for m in g.body.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=0.2)
                m.weight.data.mul_(0.1)
                nn.init.zeros_(m.bias)
    return g


def super_resolve(lr: Tensor, g: RRDBNet) -> Tensor:
    """Upscale ``lr`` by ``g.cfg.scale``.

    In training mode the output is left unclamped so gradients survive at
    saturation; in eval mode it is clamped to [0, 1].
    """
    x, single = as_batch(lr)
    out = check_finite(g(x), "generator output")
    if not g.training:
        out = out.clamp(0.0, 1.0)
    return out[0] if single else out


# -- bicubic resampling ----------------------------------------------------

def cubic_kernel(x: Tensor, a: float = -0.5) -> Tensor:
    ax = x.abs()
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return torch.where(ax <= 1, near, torch.where(ax < 2, far, torch.zeros_like(ax)))


def mirror_index(i: int, n: int) -> int:
    """Half-sample symmetric reflection: -1 -> 0, n -> n-1 (edge pixel repeated)."""
    period = 2 * n
    i %= period
    return i if i < n else period - 1 - i


def resize_matrix(n_in: int, n_out: int, scale: float, a: float = -0.5) -> Tensor:
    """Dense (n_out, n_in) bicubic interpolation matrix.

    Downscaling widens the kernel by 1/scale (antialiasing, as MATLAB's
    imresize does); each row is normalized to sum to one.
    """
    antialias = scale < 1
    width = 4.0 / scale if antialias else 4.0
    out = torch.arange(n_out, dtype=torch.float64)
    centers = (out + 0.5) / scale - 0.5
    first = torch.floor(centers - width / 2).long() + 1
    taps = int(math.ceil(width)) + 1
    idx = first[:, None] + torch.arange(taps)[None, :]
    dist = centers[:, None] - idx.to(torch.float64)
    w = scale * cubic_kernel(scale * dist, a) if antialias else cubic_kernel(dist, a)
    w = w / w.sum(dim=1, keepdim=True)
    mat = torch.zeros(n_out, n_in, dtype=torch.float64)
    mirrored = torch.tensor([[mirror_index(int(i), n_in) for i in row] for row in idx])
    mat.scatter_add_(1, mirrored, w)
    return mat


def bicubic_resize(img: Tensor, factor) -> Tensor:
    """Resize by a rational ``factor`` with the a=-0.5 bicubic kernel.

    Output size is ``ceil(side * factor)``. Borders use half-sample symmetric
    reflection. Differentiable; computed in float64 and returned in the input dtype.
    """
    factor = Fraction(factor).limit_denominator(1000)
    x, single = as_batch(img)
    h, w = x.shape[-2:]
    oh, ow = math.ceil(h * factor), math.ceil(w * factor)
    if oh < 1 or ow < 1 or factor <= 0:
        raise ShapeError(f"resize of {h}×{w} by {factor} gives degenerate size {oh}×{ow}")
    mh = resize_matrix(h, oh, float(factor)).to(x.device)
    mw = resize_matrix(w, ow, float(factor)).to(x.device)
    out = torch.einsum("oh,nchw,pw->ncop", mh, x.to(torch.float64), mw).to(x.dtype)
    return out[0] if single else out


# -- degradation -----------------------------------------------------------

@dataclass(frozen=True)
class DegradationParams:
    mode: str = "bicubic_only"  # or "parametric"
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    scale: int = 4

    def __post_init__(self):
        if self.mode not in ("bicubic_only", "parametric"):
            raise ConfigError(f"unknown degradation mode {self.mode!r}", "degradation.mode")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ConfigError("blur_sigma and noise_sigma must be >= 0", "degradation.blur_sigma")
        if self.mode == "bicubic_only" and (self.blur_sigma or self.noise_sigma):
            raise ConfigError("bicubic_only mode requires blur_sigma = noise_sigma = 0", "degradation.mode")
        if self.scale < 1:
            raise ConfigError("scale must be positive", "degradation.scale")


def gaussian_blur(img: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian blur, kernel radius ceil(3σ), reflect padding."""
    if sigma <= 0:
        return img
    x, single = as_batch(img)
    radius = max(1, math.ceil(3 * sigma))
    t = torch.arange(-radius, radius + 1, dtype=x.dtype, device=x.device)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    k = k / k.sum()
    c = x.shape[1]
    pad_h, pad_w = min(radius, x.shape[-2] - 1), min(radius, x.shape[-1] - 1)
    if pad_h < radius or pad_w < radius:
        y = F.pad(x, (radius, radius, radius, radius), mode="replicate")
    else:
        y = F.pad(x, (radius, radius, radius, radius), mode="reflect")
    y = F.conv2d(y, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    y = F.conv2d(y, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return y[0] if single else y


def degrade(hr: Tensor, p: DegradationParams) -> Tensor:
    """Synthesize the LR counterpart of ``hr`` (pure function of ``hr`` and ``p``)."""
    x, single = as_batch(hr)
    h, w = x.shape[-2:]
    if h % p.scale or w % p.scale:
        raise ShapeError(f"HR size {h}×{w} not divisible by scale {p.scale}")
    if p.mode == "parametric":
        x = gaussian_blur(x, p.blur_sigma)
    lr = bicubic_resize(x, Fraction(1, p.scale))
    if p.mode == "parametric" and p.noise_sigma > 0:
        gen = torch.Generator().manual_seed(p.seed)
        noise = torch.randn(lr.shape, generator=gen, dtype=torch.float64).to(lr.dtype)
        lr = (lr + p.noise_sigma * noise).clamp(0.0, 1.0)
    return lr[0] if single else lr
