"""Frozen feature extractor for the perceptual term of the generator loss."""
from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor, nn

from .encoders import encode_image
from .errors import ConfigError
from .utils import freeze

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
# conv5_4 before activation, as in ESRGAN
DEFAULT_VGG_TAPS = (34,)


class PerceptualExtractor(nn.Module):
    """Returns the tapped feature maps of a frozen network.

    ``source="tiny_encoder"`` taps pyramid levels of the semantic encoder
    (``tap_layers`` index levels 0..2); the encoder object is shared, not
    copied. ``source="external_vgg"`` taps layer indices of VGG-19 ``features``.
    """

    def __init__(self, backbone: nn.Module, source: str, tap_layers: Sequence[int]):
        super().__init__()
        if not tap_layers:
            raise ConfigError("perceptual extractor needs at least one tap layer", "perceptual.tap_layers")
        self.source = source
        self.tap_layers = tuple(tap_layers)
        if source == "tiny_encoder":
            if any(t not in (0, 1, 2) for t in self.tap_layers):
                raise ConfigError(f"tiny_encoder taps must be pyramid levels 0..2, got {self.tap_layers}",
                                  "perceptual.tap_layers")
            self.__dict__["backbone"] = backbone  # shared with the trainer; not re-registered
        else:
            self.backbone = backbone
            self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
            self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)
        freeze(self)

    @property
    def shares_encoder(self) -> bool:
        return self.source == "tiny_encoder"

    def select(self, pyramid: Sequence[Tensor]) -> list[Tensor]:
        return [pyramid[t] for t in self.tap_layers]

    def forward(self, img: Tensor) -> list[Tensor]:
        if self.shares_encoder:
            pyramid, _ = encode_image(img, self.backbone)
            return self.select(pyramid)
        x = (img - self.mean.to(img.dtype)) / self.std.to(img.dtype)
        out, last = [], max(self.tap_layers)
        for i, layer in enumerate(self.backbone):
            x = layer(x)
            if i in self.tap_layers:
                out.append(x)
            if i == last:
                break
        return out


def vgg19_features(max_layer: int) -> nn.Sequential:
    from torchvision.models.vgg import cfgs, make_layers

    return make_layers(cfgs["E"], batch_norm=False)[: max_layer + 1]


def build_perceptual(source: str, tap_layers: Sequence[int] | None, encoder: nn.Module | None = None,
                     vgg_weights: str | None = None) -> PerceptualExtractor:
    if source == "tiny_encoder":
        return PerceptualExtractor(encoder, source, tap_layers or (0, 1, 2))
    if source != "external_vgg":
        raise ConfigError(f"unknown perceptual source {source!r}", "perceptual.source")
    taps = tuple(tap_layers or DEFAULT_VGG_TAPS)
    feats = vgg19_features(max(taps))
    if vgg_weights:
        state = torch.load(vgg_weights, map_location="cpu", weights_only=True)
        state = {k.removeprefix("features."): v for k, v in state.items() if not k.startswith("classifier.")}
        state = {k: v for k, v in state.items() if int(k.split(".")[0]) <= max(taps)}
        feats.load_state_dict(state)
    return PerceptualExtractor(feats, source, taps)
