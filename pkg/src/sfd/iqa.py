"""Opinion-unaware quality scoring from a trained Feat-D and prompt pair, plus correlation metrics."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats
from torch import Tensor

from .encoders import embed_text_prompts, encode_image
from .errors import ConfigError, ShapeError, UndefinedCorrelationError
from .feat_disc import feat_d_forward
from .model import SFDModels
from .text_disc import DEFAULT_PROMPTS, cosine_pair, relative_score, score_embeddings
from .utils import as_batch, check_image, eval_mode

log = logging.getLogger(__name__)

NO_TEXT_WARNING = "no text embedder in the model; fixed-prompt score unavailable, using alpha=(0, 1)"


@dataclass(frozen=True)
class IQAConfig:
    alpha1: float = 0.5  # weight of the fixed-prompt score s_o
    alpha2: float = 0.5  # weight of the learned-prompt score s_lp
    fixed_prompts: tuple[str, str] = DEFAULT_PROMPTS
    checkpoint: str | None = None

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError("alpha1 and alpha2 must be non-negative", "iqa.alpha")
        if not self.alpha1 + self.alpha2 > 0:
            raise ConfigError("alpha1 + alpha2 must be positive", "iqa.alpha")
        if len(self.fixed_prompts) != 2:
            raise ConfigError("fixed_prompts must be a (positive, negative) pair", "iqa.fixed_prompts")


@dataclass(frozen=True)
class IQAResult:
    s_d: float
    s_o: float | None  # None when no text embedder exists
    s_lp: float
    s_aver: float
    mean_sigmoid_matrix: float
    alpha: tuple[float, float]  # weights actually applied
    warning: str | None = None


def load_iqa_model(checkpoint) -> SFDModels:
    """Models of a training checkpoint, all parameters frozen."""
    from .checkpoint import load_checkpoint

    models = load_checkpoint(checkpoint).models
    for module in (*models.trainable_modules().values(), *models.frozen_modules().values()):
        for p in module.parameters():
            p.requires_grad_(False)
        module.eval()
    return models


def _check_model(model) -> None:
    if model is None or not isinstance(model, SFDModels):
        raise ValueError("no model loaded; pass the SFDModels of a trained checkpoint")


def iqa_score_matrix(img: Tensor, model: SFDModels) -> Tensor:
    """Raw Feat-D logits for an image (H1×W1) or batch (N×H1×W1)."""
    _check_model(model)
    with torch.no_grad(), eval_mode(model.feat_d):
        pyr, _ = encode_image(img, model.encoder)
        return feat_d_forward(pyr, model.feat_d)


def weighted_average_score(s_o: float, s_lp: float, cfg: IQAConfig) -> float:
    return cfg.alpha1 * s_o + cfg.alpha2 * s_lp


def combine_scores(logits: Tensor, s_aver: float) -> tuple[float, float]:
    """``(s_d, mean_sigmoid)`` for a score matrix and an averaged prompt score."""
    logits = torch.as_tensor(logits, dtype=torch.float64)
    mean_sig = torch.sigmoid(logits).mean().item()
    return s_aver * mean_sig, mean_sig


def crop_to_multiple(img: Tensor, multiple: int) -> Tensor:
    """Centre-crop the spatial dims down to a multiple of ``multiple``."""
    h, w = img.shape[-2:]
    nh, nw = h - h % multiple, w - w % multiple
    if nh == 0 or nw == 0:
        raise ShapeError(f"image {h}×{w} is smaller than the minimum side {multiple}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[..., top:top + nh, left:left + nw]


def input_multiple(model: SFDModels) -> int:
    """Side length every scored image must be divisible by."""
    stride = getattr(model.encoder, "input_multiple", 1)
    return stride * 2 ** (model.feat_d.cfg.num_upsampling_stages - 2)


def sfd_iqa_score(img: Tensor, model: SFDModels, cfg: IQAConfig = IQAConfig()) -> IQAResult:
    """Quality of one C×H×W image; larger is better.

    Images whose sides are not a multiple of ``input_multiple(model)`` are
    centre-cropped. No model state is touched.
    """
    _check_model(model)
    check_image(img)
    x, single = as_batch(img)
    if not single:
        raise ShapeError("sfd_iqa_score takes one C×H×W image; use score_images for batches")
    x = crop_to_multiple(x, input_multiple(model))
    alpha, warning = (cfg.alpha1, cfg.alpha2), None
    with torch.no_grad(), eval_mode(model.feat_d, model.lpp):
        pyr, emb = encode_image(x, model.encoder)
        logits = feat_d_forward(pyr, model.feat_d)
        s_lp = score_embeddings(emb, model.lpp).item()
        s_o = None
        if model.text_embedder is not None:
            pos, neg = embed_text_prompts(cfg.fixed_prompts, model.text_embedder)
            s_o = relative_score(*cosine_pair(emb, (pos, neg))).item()
        elif cfg.alpha1 > 0:
            alpha, warning = (0.0, 1.0), NO_TEXT_WARNING
            warnings.warn(warning, RuntimeWarning, stacklevel=2)
            log.warning(warning)
    s_aver = alpha[0] * (s_o if s_o is not None else 0.0) + alpha[1] * s_lp
    s_d, mean_sig = combine_scores(logits, s_aver)
    return IQAResult(s_d=s_d, s_o=s_o, s_lp=s_lp, s_aver=s_aver, mean_sigmoid_matrix=mean_sig,
                     alpha=alpha, warning=warning)


def score_images(images, model: SFDModels, cfg: IQAConfig = IQAConfig()) -> list[IQAResult]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        results = [sfd_iqa_score(im, model, cfg) for im in images]
    if results and results[0].warning:
        log.warning(results[0].warning)
    return results


# -- correlation metrics ---------------------------------------------------

def _paired(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x, dtype=np.float64).ravel(), np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"x and y differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("correlation needs at least two pairs")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("correlation inputs must be finite")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("correlation is undefined for a zero-variance input")
    return x, y


def _clip(r: float) -> float:
    return float(min(1.0, max(-1.0, r)))


def plcc(x, y) -> float:
    """Pearson linear correlation."""
    x, y = _paired(x, y)
    return _clip(stats.pearsonr(x, y)[0])


def srcc(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x, y = _paired(x, y)
    return _clip(stats.spearmanr(x, y)[0])


def krcc(x, y) -> float:
    """Kendall tau-b."""
    x, y = _paired(x, y)
    return _clip(stats.kendalltau(x, y, variant="b")[0])


def correlations(x, y) -> dict[str, float]:
    return {"plcc": plcc(x, y), "srcc": srcc(x, y), "krcc": krcc(x, y)}
