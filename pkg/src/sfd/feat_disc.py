"""Feature discriminator over the encoder's middle-feature pyramid."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.utils.parametrizations import spectral_norm

from .errors import ConfigError, ShapeError
from .utils import as_batch, seeded


@dataclass(frozen=True)
class FeatDConfig:
    fusion_channels: int = 32
    num_upsampling_stages: int = 3
    norm: str = "spectral"  # or "none"
    output_norm: str = "standardize"  # or "none"
    logit_gain: float = 2.0
    norm_momentum: float = 0.02

    def __post_init__(self):
        if self.output_norm not in ("standardize", "none"):
            raise ConfigError(f"unknown output_norm {self.output_norm!r}", "feat_d.output_norm")
        if self.logit_gain <= 0 or not 0 < self.norm_momentum <= 1:
            raise ConfigError("logit_gain must be > 0 and norm_momentum in (0, 1]", "feat_d.logit_gain")
        if self.num_upsampling_stages < 3:
            raise ConfigError("num_upsampling_stages must be >= 3", "feat_d.num_upsampling_stages")
        if self.norm not in ("spectral", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}", "feat_d.norm")
        if self.fusion_channels < 1:
            raise ConfigError("fusion_channels must be positive", "feat_d.fusion_channels")


class FeatureDiscriminator(nn.Module):
    """U-Net style decoder: pyramid levels -> per-location logit map at the finest level.

    The coarsest level is first pushed through ``num_upsampling_stages - 2``
    stride-2 convs, then decoded back up; the last three upsampling stages
    land on the resolutions of levels 3, 2 and 1 and fuse their lateral
    projections by addition. A plain 1×1 conv emits one raw logit per pixel.

    With ``output_norm="standardize"`` that logit is standardized (zero mean,
    unit variance, times ``logit_gain``) over the batch in training mode and
    with running statistics in eval mode. The adversarial losses are
    unbounded below along the direction that moves every logit together;
    standardizing removes that direction and fixes the logit scale, so
    training can only lower the loss by ranking HR above SR. The discriminator
    phase must therefore see HR and SR in one batch (``joint_logits``).
    """

    def __init__(self, cfg: FeatDConfig, in_channels: Sequence[int]):
        super().__init__()
        if len(in_channels) != 3:
            raise ConfigError("feature discriminator expects a three-level pyramid")
        self.cfg = cfg
        self.in_channels = tuple(in_channels)
        sn = spectral_norm if cfg.norm == "spectral" else (lambda m: m)
        fc = cfg.fusion_channels
        self.laterals = nn.ModuleList(sn(nn.Conv2d(c, fc, 1)) for c in in_channels)
        n_down = cfg.num_upsampling_stages - 2
        self.down = nn.ModuleList(sn(nn.Conv2d(fc, fc, 3, 2, 1)) for _ in range(n_down))
        self.up = nn.ModuleList(sn(nn.Conv2d(fc, fc, 3, 1, 1)) for _ in range(cfg.num_upsampling_stages))
        self.head_conv = sn(nn.Conv2d(fc, fc, 3, 1, 1))
        self.head = nn.Conv2d(fc, 1, 1)
        self.out_norm = (nn.BatchNorm2d(1, affine=False, momentum=cfg.norm_momentum)
                         if cfg.output_norm == "standardize" else None)
        self.lrelu = nn.LeakyReLU(0.2)

    @property
    def tap_names(self) -> list[str]:
        return [f"feat-d-upsample-{i + 1}" for i in range(len(self.up))] + ["feat-d-logits"]

    def forward(self, pyramid: Sequence[Tensor], return_taps: bool = False):
        lat = [self.lrelu(conv(f)) for conv, f in zip(self.laterals, pyramid)]
        x = lat[2]
        for conv in self.down:
            x = self.lrelu(conv(x))
        taps = {}
        n = len(self.up)
        for i, conv in enumerate(self.up):
            x = self.lrelu(conv(F.interpolate(x, scale_factor=2, mode="nearest")))
            skip = i - (n - 3)  # 0 -> level 3, 1 -> level 2, 2 -> level 1
            if skip >= 0:
                x = x + lat[2 - skip]
            taps[f"feat-d-upsample-{i + 1}"] = x
        logits = self.head(self.lrelu(self.head_conv(x)))
        if self.out_norm is not None:
            logits = self.cfg.logit_gain * self.out_norm(logits)
        logits = logits[:, 0]
        if return_taps:
            taps["feat-d-logits"] = logits[:, None]
            return logits, taps
        return logits


    def joint_logits(self, pyr_a: Sequence[Tensor], pyr_b: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
        """Score two batched pyramids in a single forward so they share normalization statistics."""
        n = pyr_a[0].shape[0]
        logits = self([torch.cat([a, b]) for a, b in zip(pyr_a, pyr_b)])
        return logits[:n], logits[n:]


def init_feat_d(cfg: FeatDConfig, in_channels: Sequence[int], seed: int = 0) -> FeatureDiscriminator:
    with seeded(seed):
        return FeatureDiscriminator(cfg, in_channels)


def _check_pyramid(pyr: Sequence[Tensor], d: FeatureDiscriminator) -> list[Tensor]:
    if len(pyr) != 3:
        raise ShapeError(f"expected 3 pyramid levels, got {len(pyr)}")
    levels = []
    for i, f in enumerate(pyr):
        f, _ = as_batch(f)
        if f.shape[1] != d.in_channels[i]:
            raise ShapeError(f"level {i + 1} has {f.shape[1]} channels, discriminator expects {d.in_channels[i]}")
        levels.append(f)
    (h1, w1), (h2, w2), (h3, w3) = (f.shape[-2:] for f in levels)
    k = 2 ** (d.cfg.num_upsampling_stages - 2)
    if (h2, w2) != (2 * h3, 2 * w3) or (h1, w1) != (2 * h2, 2 * w2) or h3 % k or w3 % k:
        raise ShapeError(
            f"pyramid spatial sizes {[tuple(f.shape[-2:]) for f in levels]} must halve per level "
            f"with the coarsest divisible by {k}")
    return levels


def feat_d_forward(pyr: Sequence[Tensor], d: FeatureDiscriminator) -> Tensor:
    """Raw logit map of shape H1×W1 (or N×H1×W1 for batched pyramids)."""
    single = pyr[0].dim() == 3
    logits = d(_check_pyramid(pyr, d))
    return logits[0] if single else logits


def _check_pair(sm_hr: Tensor, sm_sr: Tensor) -> None:
    if sm_hr.shape != sm_sr.shape:
        raise ShapeError(f"score matrices differ in shape: {tuple(sm_hr.shape)} vs {tuple(sm_sr.shape)}")
    if not (torch.isfinite(sm_hr).all() and torch.isfinite(sm_sr).all()):
        raise ValueError("score matrices must be finite")


def loss_feat_d(sm_hr: Tensor, sm_sr: Tensor) -> Tensor:
    """Discriminator loss E[log(1 - σ(hr))] + E[log σ(sr)], in log-sigmoid form."""
    _check_pair(sm_hr, sm_sr)
    return F.logsigmoid(-sm_hr).mean() + F.logsigmoid(sm_sr).mean()


def loss_feat_g(sm_hr: Tensor, sm_sr: Tensor) -> Tensor:
    """Generator loss E[log σ(hr)] + E[log(1 - σ(sr))]; the HR path is treated as constant."""
    _check_pair(sm_hr, sm_sr)
    return F.logsigmoid(sm_hr.detach()).mean() + F.logsigmoid(-sm_sr).mean()
