"""Bundle of the networks a run trains or consumes, built from a RunConfig."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from torch import nn

from .config import RunConfig
from .encoders import TextEmbedder, init_text_embedder, init_tiny_encoder, pyramid_channels
from .feat_disc import FeatureDiscriminator, init_feat_d
from .generator import RRDBNet, init_generator
from .perceptual import PerceptualExtractor, build_perceptual
from .text_disc import PromptPair, init_prompt_pair

# offsets applied to run.seed so each component draws an independent stream
SEED_OFFSETS = {"encoder": 0, "generator": 1, "feat_d": 2, "lpp": 3, "text": 4}


@dataclass
class SFDModels:
    encoder: nn.Module
    generator: RRDBNet
    feat_d: FeatureDiscriminator
    lpp: PromptPair
    text_embedder: TextEmbedder | None
    perceptual: PerceptualExtractor

    def trainable_modules(self) -> dict[str, nn.Module]:
        return {"generator": self.generator, "feat_d": self.feat_d, "lpp": self.lpp}

    def frozen_modules(self) -> dict[str, nn.Module]:
        out = {"encoder": self.encoder}
        if self.text_embedder is not None:
            out["text_embedder"] = self.text_embedder
        if not self.perceptual.shares_encoder:
            out["perceptual"] = self.perceptual
        return out


def build_models(cfg: RunConfig, load_weight_files: bool = True) -> SFDModels:
    """Instantiate every network for ``cfg``.

    With ``load_weight_files=False`` external weight files are skipped (used
    when a checkpoint will supply all tensors anyway).
    """
    seed = cfg.run.seed
    enc_cfg = cfg.encoder
    if not load_weight_files and enc_cfg.weights_source == "file":
        enc_cfg = dataclasses.replace(enc_cfg, weights_source="random", weights_path=None)
    encoder = init_tiny_encoder(enc_cfg, seed + SEED_OFFSETS["encoder"])
    text = None
    if cfg.prompts.text_embedder:
        text = init_text_embedder(enc_cfg.embed_dim, seed + SEED_OFFSETS["text"],
                                  cfg.prompts.text_weights if load_weight_files else None)
    generator = init_generator(cfg.generator, seed + SEED_OFFSETS["generator"])
    feat_d = init_feat_d(cfg.feat_d, pyramid_channels(encoder), seed + SEED_OFFSETS["feat_d"])
    lpp = init_prompt_pair(enc_cfg.embed_dim, text_embedder=text,
                           prompts=(cfg.prompts.positive, cfg.prompts.negative),
                           seed=seed + SEED_OFFSETS["lpp"], parameterization=cfg.prompts.parameterization,
                           center_embeddings=cfg.prompts.center_embeddings)
    perceptual = build_perceptual(cfg.perceptual.source, cfg.perceptual.tap_layers, encoder,
                                  cfg.perceptual.vgg_weights if load_weight_files else None)
    return SFDModels(encoder, generator, feat_d, lpp, text, perceptual)
