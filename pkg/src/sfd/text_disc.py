"""Text-guided discrimination with a learnable positive/negative prompt pair."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .encoders import embed_text_prompts
from .errors import ConfigError, ShapeError
from .utils import seeded

EPS = 1e-7
DEFAULT_PROMPTS = ("Good photo", "Bad photo")


class PromptPair(nn.Module):
    """Learnable (positive, negative) embedding pair.

    ``parameterization="feature"`` learns the two L-vectors directly.
    ``"token"`` learns the prompts' token embeddings and passes them through
    the frozen text embedder on every call; the embedder is held by reference
    and is not part of this module's state.

    With ``center_embeddings`` image embeddings are compared after
    subtracting ``embedding_center``, the running mean of every embedding seen
    by ``update_center``. Uncentered embeddings share one dominant direction,
    and the prompt-pair loss then rewards aligning both prompts with it
    instead of separating HR from SR.
    """

    def __init__(self, positive: Tensor, negative: Tensor, *, parameterization: str = "feature",
                 text_embedder=None, init_mode: str = "random_unit", center_embeddings: bool = True):
        super().__init__()
        if parameterization not in ("feature", "token"):
            raise ConfigError(f"unknown prompt parameterization {parameterization!r}", "prompts.parameterization")
        if parameterization == "token" and text_embedder is None:
            raise ConfigError("token parameterization needs a text embedder", "prompts.parameterization")
        self.parameterization = parameterization
        self.init_mode = init_mode
        self.__dict__["text_embedder"] = text_embedder
        self.center_embeddings = center_embeddings
        self.positive = nn.Parameter(positive.detach().clone())
        self.negative = nn.Parameter(negative.detach().clone())
        dim = text_embedder.embed_dim if parameterization == "token" else positive.shape[-1]
        self.register_buffer("embedding_center", torch.zeros(dim))
        self.register_buffer("center_count", torch.zeros((), dtype=torch.long))

    @torch.no_grad()
    def update_center(self, embeddings: Tensor) -> None:
        """Fold a batch of image embeddings (N×L) into the cumulative mean."""
        if not self.center_embeddings:
            return
        e = embeddings.detach().reshape(-1, embeddings.shape[-1]).to(self.embedding_center.dtype)
        n, k = int(self.center_count), e.shape[0]
        self.embedding_center.mul_(n / (n + k)).add_(e.sum(0) / (n + k))
        self.center_count.add_(k)

    def centered(self, f_out: Tensor) -> Tensor:
        if not self.center_embeddings:
            return f_out
        return f_out - self.embedding_center.to(f_out.dtype)

    def features(self) -> tuple[Tensor, Tensor]:
        if self.parameterization == "token":
            enc = self.text_embedder.encode_embeddings
            return enc(self.positive), enc(self.negative)
        return self.positive, self.negative


def init_prompt_pair(embed_dim: int, *, text_embedder=None, prompts: tuple[str, str] = DEFAULT_PROMPTS,
                     seed: int = 0, parameterization: str = "feature", center_embeddings: bool = True) -> PromptPair:
    """Warm-start from the prompts' text embeddings when an embedder exists, else random unit vectors."""
    if parameterization == "token":
        if text_embedder is None:
            raise ConfigError("token parameterization needs a text embedder", "prompts.parameterization")
        with torch.no_grad():
            pos = text_embedder.token_embeddings(prompts[0])
            neg = text_embedder.token_embeddings(prompts[1])
        return PromptPair(pos, neg, parameterization="token", text_embedder=text_embedder,
                          init_mode="from_text", center_embeddings=center_embeddings)
    if text_embedder is not None:
        pos, neg = embed_text_prompts(prompts, text_embedder)
        if pos.shape[-1] != embed_dim:
            raise ShapeError(f"text embeddings have length {pos.shape[-1]}, image embedding {embed_dim}")
        return PromptPair(pos, neg, text_embedder=text_embedder, init_mode="from_text",
                          center_embeddings=center_embeddings)
    with seeded(seed):
        v = torch.randn(2, embed_dim)
    v = v / v.norm(dim=1, keepdim=True)
    return PromptPair(v[0], v[1], init_mode="random_unit", center_embeddings=center_embeddings)


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return (a * b).sum(-1) / (na * nb)


def cosine_pair(f_out: Tensor, lpp) -> tuple[Tensor, Tensor]:
    """Cosine similarities of ``f_out`` (L or N×L) with the positive and negative prompts.

    ``lpp`` is a PromptPair or a plain ``(positive, negative)`` tuple.
    """
    pos, neg = lpp.features() if isinstance(lpp, PromptPair) else lpp
    f_out, pos, neg = (torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t
                       for t in (f_out, pos, neg))
    if f_out.shape[-1] != pos.shape[-1] or pos.shape != neg.shape:
        raise ShapeError(f"embedding lengths differ: {f_out.shape[-1]} vs {pos.shape[-1]}/{neg.shape[-1]}")
    return _cosine(f_out, pos.to(f_out.dtype)), _cosine(f_out, neg.to(f_out.dtype))


def relative_score(s_plus, s_minus) -> Tensor:
    """Two-way softmax e^{s+}/(e^{s+}+e^{s-}), evaluated as sigmoid(s+ - s-)."""
    s_plus = torch.as_tensor(s_plus, dtype=torch.float64) if not torch.is_tensor(s_plus) else s_plus
    s_minus = torch.as_tensor(s_minus, dtype=s_plus.dtype) if not torch.is_tensor(s_minus) else s_minus
    return torch.sigmoid(s_plus - s_minus)


def _clamped(s) -> Tensor:
    s = torch.as_tensor(s, dtype=torch.float64) if not torch.is_tensor(s) else s
    return s.clamp(EPS, 1 - EPS)


def loss_tg_d(s_hr, s_sr) -> Tensor:
    """Prompt-pair loss E[log(1 - s_hr)] + E[log s_sr] with scores clamped to [ε, 1-ε]."""
    s_hr, s_sr = _clamped(s_hr), _clamped(s_sr)
    return torch.log1p(-s_hr).mean() + torch.log(s_sr).mean()


def loss_tg_g(s_hr, s_sr) -> Tensor:
    """Generator loss E[log s_hr] + E[log(1 - s_sr)]; ``s_hr`` carries no gradient."""
    s_hr, s_sr = _clamped(s_hr).detach(), _clamped(s_sr)
    return torch.log(s_hr).mean() + torch.log1p(-s_sr).mean()


def score_embeddings(f_out: Tensor, lpp) -> Tensor:
    """Relative score of image embeddings against a prompt pair (centered if the pair says so)."""
    if isinstance(lpp, PromptPair):
        f_out = lpp.centered(f_out)
    return relative_score(*cosine_pair(f_out, lpp))

