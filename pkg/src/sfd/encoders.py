"""Frozen semantic encoders: middle-feature pyramid plus a global embedding.

``TinyEncoder`` is the deterministic desk-scale stand-in for a CLIP image
tower. ``TappedEncoder`` adapts any pretrained torch backbone to the same
``(pyramid, embedding)`` interface by hooking configured submodules.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor, nn

from .archive import load_archive, save_archive
from .errors import ConfigError, ShapeError, TextEmbedderUnavailable
from .utils import as_batch, freeze, seeded

Pyramid = tuple[Tensor, Tensor, Tensor]

# OpenAI CLIP preprocessing statistics
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class EncoderConfig:
    base_channels: int = 16
    embed_dim: int = 64
    pyramid_strides: tuple[int, int, int] = (4, 8, 16)
    weights_source: str = "random"  # "random" or "file"
    weights_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "pyramid_strides", tuple(int(s) for s in self.pyramid_strides))
        if self.embed_dim < 8:
            raise ConfigError(f"embed_dim must be >= 8, got {self.embed_dim}", "encoder.embed_dim")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive", "encoder.base_channels")
        s = self.pyramid_strides
        if len(s) != 3:
            raise ConfigError("pyramid_strides needs exactly three entries", "encoder.pyramid_strides")
        if any(x < 1 or x & (x - 1) for x in s) or not s[0] < s[1] < s[2]:
            raise ConfigError(f"pyramid_strides must be strictly increasing powers of two, got {s}",
                              "encoder.pyramid_strides")
        if self.weights_source not in ("random", "file"):
            raise ConfigError(f"unknown weights_source {self.weights_source!r}", "encoder.weights_source")
        if self.weights_source == "file" and not self.weights_path:
            raise ConfigError("weights_source='file' requires weights_path", "encoder.weights_path")

    @property
    def level_channels(self) -> tuple[int, int, int]:
        b = self.base_channels
        return (b, 2 * b, 4 * b)

    def pyramid_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        return [(c, height // s, width // s) for c, s in zip(self.level_channels, self.pyramid_strides)]


class TinyEncoder(nn.Module):
    """Three strided conv stages, global average pool, linear head."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        in_ch, stride = 3, 1
        for out_ch, target in zip(cfg.level_channels, cfg.pyramid_strides):
            layers: list[nn.Module] = []
            while stride < target:
                layers += [nn.Conv2d(in_ch, out_ch, 3, 2, 1), nn.GELU()]
                in_ch, stride = out_ch, stride * 2
            layers += [nn.Conv2d(in_ch, out_ch, 3, 1, 1), nn.GELU()]
            in_ch = out_ch
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(cfg.level_channels[-1], cfg.embed_dim)
        for m in self.stages.modules():
            if isinstance(m, nn.Conv2d):
                # He init keeps activations O(1) through the stack; the default init shrinks them
                # geometrically and washes out fine-detail differences at the coarse levels
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        self.input_multiple = cfg.pyramid_strides[-1]
        self.embed_dim = cfg.embed_dim

    def forward(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats, self.head(x.mean(dim=(2, 3)))


class TappedEncoder(nn.Module):
    """Adapter exposing a pretrained backbone through the pyramid/embedding interface.

    ``taps`` names three submodules (as in ``backbone.named_modules()``) whose
    outputs become the middle features, finest first. ``output_fn`` maps the
    normalized input to the global embedding; by default it is the backbone's
    own forward. Inputs are [0, 1] images; normalization happens here.
    """

    def __init__(self, backbone: nn.Module, taps: Sequence[str], *,
                 output_fn: Callable[[nn.Module, Tensor], Tensor] | None = None,
                 mean: Sequence[float] = CLIP_MEAN, std: Sequence[float] = CLIP_STD,
                 input_multiple: int = 32, embed_dim: int | None = None):
        super().__init__()
        if len(taps) != 3:
            raise ConfigError("TappedEncoder needs exactly three tap names")
        modules = dict(backbone.named_modules())
        missing = [t for t in taps if t not in modules]
        if missing:
            raise ConfigError(f"unknown tap(s) {missing}; available: {sorted(k for k in modules if k)}")
        self.backbone = backbone
        self.taps = tuple(taps)
        self.output_fn = output_fn or (lambda m, x: m(x))
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1), persistent=False)
        self.input_multiple = input_multiple
        self.embed_dim = embed_dim

    def forward(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        captured: dict[str, Tensor] = {}
        modules = dict(self.backbone.named_modules())
        handles = [
            modules[name].register_forward_hook(lambda _m, _i, out, name=name: captured.__setitem__(name, out))
            for name in self.taps
        ]
        try:
            out = self.output_fn(self.backbone, (x - self.mean) / self.std)
        finally:
            for h in handles:
                h.remove()
        if isinstance(out, (tuple, list)):
            out = out[0]
        return [captured[t] for t in self.taps], out.flatten(1)


def init_tiny_encoder(cfg: EncoderConfig, seed: int = 0) -> TinyEncoder:
    """Build a frozen TinyEncoder, either seeded-random or from an archive file."""
    with seeded(seed):
        enc = TinyEncoder(cfg)
    if cfg.weights_source == "file":
        tensors, meta = load_archive(cfg.weights_path)
        stored = meta.get("encoder_config")
        if stored is not None:
            ref = asdict(EncoderConfig(**{**stored, "weights_source": "random", "weights_path": None}))
            mine = asdict(EncoderConfig(**{**asdict(cfg), "weights_source": "random", "weights_path": None}))
            if ref != mine:
                raise ShapeError(f"encoder weights were saved for {stored}, not {asdict(cfg)}")
        load_state_strict(enc, tensors)
    return freeze(enc)


def save_encoder(enc: TinyEncoder, path) -> None:
    save_archive(path, enc.state_dict(), {"kind": "tiny_encoder", "encoder_config": asdict(enc.cfg)})


def load_state_strict(module: nn.Module, tensors: dict[str, Tensor]) -> None:
    """``load_state_dict`` that reports shape and key mismatches as ShapeError."""
    own = module.state_dict()
    missing = sorted(set(own) - set(tensors))
    extra = sorted(set(tensors) - set(own))
    if missing or extra:
        raise ShapeError(f"state mismatch for {type(module).__name__}: missing={missing[:5]} unexpected={extra[:5]}")
    bad = [(k, tuple(tensors[k].shape), tuple(v.shape)) for k, v in own.items() if tensors[k].shape != v.shape]
    if bad:
        k, got, want = bad[0]
        raise ShapeError(f"shape mismatch for {type(module).__name__}.{k}: stored {got}, model expects {want}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in tensors.items()})


def encode_image(img: Tensor, enc: nn.Module) -> tuple[Pyramid, Tensor]:
    """Return ``(pyramid, embedding)`` for a C×H×W or N×C×H×W image.

    Gradients flow to ``img`` (the generator needs them) but never into the
    encoder, whose parameters are frozen.
    """
    x, single = as_batch(img)
    m = getattr(enc, "input_multiple", 1)
    h, w = x.shape[-2:]
    if x.shape[1] != 3:
        raise ShapeError(f"expected 3 channels, got {x.shape[1]}")
    if h < m or w < m or h % m or w % m:
        raise ShapeError(f"image {h}×{w} is not a positive multiple of the coarsest stride {m}")
    feats, out = enc(x)
    if single:
        return tuple(f[0] for f in feats), out[0]
    return tuple(feats), out


def pyramid_channels(enc: nn.Module) -> tuple[int, ...]:
    if isinstance(enc, TinyEncoder):
        return enc.cfg.level_channels
    m = getattr(enc, "input_multiple", 32)
    with torch.no_grad():
        p = next(enc.parameters())
        feats, _ = enc(torch.zeros(1, 3, 2 * m, 2 * m, dtype=p.dtype))
    return tuple(f.shape[1] for f in feats)


class TextEmbedder(nn.Module):
    """Toy text tower: hashed word tokens, learned positions, mean pool, MLP to L.

    Exposes ``token_embeddings``/``encode_embeddings`` so prompt tokens can be
    learned through the frozen tower.
    """

    def __init__(self, embed_dim: int, vocab_size: int = 4096, token_dim: int = 32, max_tokens: int = 16):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.embed_dim = embed_dim
        self.token_embedding = nn.Embedding(vocab_size, token_dim)
        self.position = nn.Parameter(0.1 * torch.randn(max_tokens, token_dim))
        self.proj = nn.Sequential(nn.Linear(token_dim, token_dim), nn.Tanh(), nn.Linear(token_dim, embed_dim))

    def tokenize(self, prompt: str) -> Tensor:
        words = re.findall(r"\w+", prompt.lower())
        if not words:
            raise ValueError(f"prompt {prompt!r} has no tokens")
        if len(words) > self.max_tokens:
            raise ValueError(f"prompt longer than {self.max_tokens} tokens")
        ids = [int.from_bytes(hashlib.blake2b(w.encode(), digest_size=8).digest(), "little") % self.vocab_size
               for w in words]
        return torch.tensor(ids, dtype=torch.long)

    def token_embeddings(self, prompt: str) -> Tensor:
        ids = self.tokenize(prompt)
        return self.token_embedding(ids) + self.position[: len(ids)]

    def encode_embeddings(self, tokens: Tensor) -> Tensor:
        return self.proj(tokens.mean(dim=-2))

    def forward(self, prompt: str) -> Tensor:
        return self.encode_embeddings(self.token_embeddings(prompt))


def init_text_embedder(embed_dim: int, seed: int = 0, weights_path: str | None = None) -> TextEmbedder:
    with seeded(seed):
        txt = TextEmbedder(embed_dim)
    if weights_path:
        tensors, _ = load_archive(weights_path)
        load_state_strict(txt, tensors)
    return freeze(txt)


def embed_text_prompts(prompts: tuple[str, str], txt) -> tuple[Tensor, Tensor]:
    """Embed a (positive, negative) prompt pair; ``txt`` is any callable str -> L-vector."""
    if txt is None:
        raise TextEmbedderUnavailable("no text embedder configured")
    with torch.no_grad():
        return txt(prompts[0]).detach().clone(), txt(prompts[1]).detach().clone()
