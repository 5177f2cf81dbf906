"""Composite generator objective and the alternating adversarial training loop."""
from __future__ import annotations

import contextlib
import json
import logging
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import Tensor

from .archive import state_digest
from .config import LossWeights, RunConfig
from .data import load_corpus, sample_hr_batch
from .encoders import encode_image
from .errors import ConfigError, DivergenceError
from .feat_disc import loss_feat_d, loss_feat_g
from .generator import degrade, super_resolve
from .model import SFDModels, build_models
from .text_disc import loss_tg_d, loss_tg_g, score_embeddings
from .utils import eval_mode

log = logging.getLogger(__name__)

PRETRAIN_WEIGHTS = LossWeights(pixel=1.0, perceptual=0.0, feat_adv=0.0, text_adv=0.0)
TERMS = ("pixel", "perceptual", "feat_adv", "text_adv")


def total_generator_loss(hr: Tensor, sr: Tensor, feats: tuple[Sequence[Tensor], Sequence[Tensor]] | None,
                         logits: tuple[Tensor, Tensor] | None, scores: tuple[Tensor, Tensor] | None,
                         w: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of pixel L1, perceptual L1, Feat-D and prompt-pair adversarial terms.

    ``feats`` are the perceptual feature lists of (hr, sr); ``logits`` the
    Feat-D score maps of (hr, sr); ``scores`` the prompt-pair relative scores
    of (hr, sr). Any of them may be None when its weight is zero. Returns the
    total and a breakdown holding each weighted term (``pixel`` ...) and each
    raw term (``raw_pixel`` ...).
    """
    if hr.shape != sr.shape:
        raise ValueError(f"hr and sr differ in shape: {tuple(hr.shape)} vs {tuple(sr.shape)}")
    raw: dict[str, Tensor] = {"pixel": (hr - sr).abs().mean()}
    if feats is not None:
        raw["perceptual"] = sum((a - b).abs().mean() for a, b in zip(*feats))
    if logits is not None:
        raw["feat_adv"] = loss_feat_g(*logits)
    if scores is not None:
        raw["text_adv"] = loss_tg_g(*scores)
    weights = dict(zip(TERMS, w.as_tuple()))
    for name in TERMS:
        if weights[name] > 0 and name not in raw:
            raise ValueError(f"loss weight {name} > 0 but its inputs were not given")
    total = sr.new_zeros(())
    breakdown: dict[str, float] = {}
    for name in TERMS:
        if name not in raw:
            breakdown[name] = 0.0
            continue
        if not torch.isfinite(raw[name]):
            raise DivergenceError(f"loss term {name} is not finite", term=name)
        term = weights[name] * raw[name]
        total = total + term
        breakdown[name] = term.item()
        breakdown[f"raw_{name}"] = raw[name].item()
    return total, breakdown


@dataclass
class TrainState:
    config: RunConfig
    models: SFDModels
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    step: int = 0
    last_checkpoint: str | None = None


def discriminator_parameters(models: SFDModels) -> list[torch.nn.Parameter]:
    return list(models.feat_d.parameters()) + list(models.lpp.parameters())


def init_train_state(cfg: RunConfig, models: SFDModels | None = None) -> TrainState:
    models = models or build_models(cfg)
    o = cfg.optim
    opt_g = torch.optim.Adam(models.generator.parameters(), lr=o.lr, betas=o.betas)
    lr_d = o.lr_d or o.lr
    opt_d = torch.optim.Adam([
        {"params": list(models.feat_d.parameters()), "lr": lr_d},
        {"params": list(models.lpp.parameters()), "lr": o.lr_lpp or lr_d},
    ], betas=o.betas)
    return TrainState(cfg, models, opt_g, opt_d)


def _set_requires_grad(params, flag: bool) -> None:
    for p in params:
        p.requires_grad_(flag)


def discriminator_phase(st: TrainState, pyr_hr, out_hr, pyr_sr, out_sr) -> dict[str, float]:
    """One Adam step of Feat-D and the prompt pair on detached SR features."""
    m = st.models
    params = discriminator_parameters(m)
    _set_requires_grad(params, True)
    st.opt_d.zero_grad(set_to_none=True)
    pyr_sr = [p.detach() for p in pyr_sr]
    out_sr = out_sr.detach()
    logits_hr, logits_sr = m.feat_d.joint_logits(pyr_hr, pyr_sr)
    l_fd = loss_feat_d(logits_hr, logits_sr)
    m.lpp.update_center(torch.cat([out_hr, out_sr]))
    s_hr, s_sr = score_embeddings(out_hr, m.lpp), score_embeddings(out_sr, m.lpp)
    l_tgd = loss_tg_d(s_hr, s_sr)
    (l_fd + l_tgd).backward()
    st.opt_d.step()
    return {
        "loss_feat_d": l_fd.item(),
        "loss_tg_d": l_tgd.item(),
        "d_hr": torch.sigmoid(logits_hr).mean().item(),
        "d_sr": torch.sigmoid(logits_sr).mean().item(),
        "s_hr": s_hr.mean().item(),
        "s_sr": s_sr.mean().item(),
    }


def train_step(batch: tuple[Tensor, Tensor], st: TrainState, adversarial: bool = True) -> tuple[TrainState, dict]:
    """Discriminator phase (skipped when ``adversarial`` is False) then one generator update.

    With ``adversarial=False`` the generator is trained on pure L1 (fidelity pre-training).
    """
    try:
        return _train_step(batch, st, adversarial)
    except DivergenceError as e:
        if e.last_checkpoint is None:
            e.last_checkpoint = st.last_checkpoint
        raise


def _train_step(batch, st: TrainState, adversarial: bool):
    lr, hr = batch
    if lr.shape[0] == 0:
        raise ValueError("empty batch")
    m, cfg = st.models, st.config
    w = cfg.loss if adversarial else PRETRAIN_WEIGHTS
    m.generator.train()
    m.feat_d.train()
    sr = super_resolve(lr, m.generator)

    record: dict = {"step": st.step + 1, "phase": "adversarial" if adversarial else "pretrain"}
    need_sr_feats = adversarial or (w.perceptual > 0 and m.perceptual.shares_encoder)
    with torch.no_grad():
        pyr_hr, out_hr = encode_image(hr, m.encoder)
    pyr_sr = out_sr = None
    if need_sr_feats:
        pyr_sr, out_sr = encode_image(sr, m.encoder)
    if adversarial:
        record.update(discriminator_phase(st, pyr_hr, out_hr, pyr_sr, out_sr))

    d_params = discriminator_parameters(m)
    _set_requires_grad(d_params, False)
    feats = logits = scores = None
    if w.perceptual > 0:
        if m.perceptual.shares_encoder:
            feats = (m.perceptual.select(pyr_hr), m.perceptual.select(pyr_sr))
        else:
            with torch.no_grad():
                perc_hr = m.perceptual(hr)
            feats = (perc_hr, m.perceptual(sr))
    if w.feat_adv > 0:
        # running normalization statistics: the generator must not move them
        with eval_mode(m.feat_d):
            with torch.no_grad():
                logits_hr = m.feat_d(pyr_hr)
            logits = (logits_hr, m.feat_d(pyr_sr))
    if w.text_adv > 0:
        with torch.no_grad():
            s_hr = score_embeddings(out_hr, m.lpp)
        scores = (s_hr, score_embeddings(out_sr, m.lpp))
    total, parts = total_generator_loss(hr, sr, feats, logits, scores, w)
    st.opt_g.zero_grad(set_to_none=True)
    total.backward()
    st.opt_g.step()
    _set_requires_grad(d_params, True)

    for name, module in m.trainable_modules().items():
        for p in module.parameters():
            if not torch.isfinite(p).all():
                raise DivergenceError(f"non-finite parameters in {name} after step {st.step + 1}",
                                      term=name, last_checkpoint=st.last_checkpoint)
    st.step += 1
    record["loss_total"] = total.item()
    record.update(parts)
    return st, record


def batch_for_step(images, cfg: RunConfig, step: int) -> tuple[Tensor, Tensor]:
    d = cfg.data
    hr = sample_hr_batch(images, cfg.run.seed, step, d.batch_size, d.patch_size, d.flips)
    return degrade(hr, cfg.degradation_params(seed=cfg.run.seed * 1_000_003 + step)), hr


def frozen_digests(models: SFDModels) -> dict[str, str]:
    return {k: state_digest(v) for k, v in models.frozen_modules().items()}


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    if not enabled:
        yield
        return
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


def _compatible_for_resume(saved: RunConfig, cfg: RunConfig) -> None:
    a, b = saved.to_dict(), cfg.to_dict()
    for section in a:
        if section == "run":
            continue
        if a[section] != b[section]:
            raise ConfigError(f"config section {section!r} differs from the checkpoint being resumed", section)


def run_training(cfg: RunConfig, resume: str | Path | None = None) -> Path:
    """Train end to end; returns the path of the final checkpoint.

    Writes ``train_log.jsonl`` (one JSON record per step) and
    ``checkpoint_<step>.safetensors`` every ``checkpoint_interval`` steps to
    ``run.output_dir``, plus ``final.safetensors``.
    """
    from .checkpoint import load_checkpoint, save_checkpoint

    images = load_corpus(cfg.data.hr_dir, cfg.data.patch_size)
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"

    with deterministic_mode(cfg.run.deterministic):
        if resume is not None:
            st = load_checkpoint(resume)
            _compatible_for_resume(st.config, cfg)
            st.config = cfg
            st.last_checkpoint = str(resume)
            kept = []
            if log_path.exists():
                kept = [ln for ln in log_path.read_text().splitlines() if ln and json.loads(ln)["step"] <= st.step]
            log_path.write_text("".join(ln + "\n" for ln in kept))
        else:
            st = init_train_state(cfg)
            log_path.write_text("")
        before = frozen_digests(st.models)
        total_steps = cfg.run.pretrain_steps + cfg.run.steps
        ckpt = Path(st.last_checkpoint) if st.last_checkpoint else None
        with log_path.open("a") as fh:
            while st.step < total_steps:
                batch = batch_for_step(images, cfg, st.step)
                st, record = train_step(batch, st, adversarial=st.step >= cfg.run.pretrain_steps)
                if not cfg.run.deterministic:
                    record["time"] = time.time()
                fh.write(json.dumps(record) + "\n")
                if st.step % cfg.run.checkpoint_interval == 0 or st.step == total_steps:
                    fh.flush()
                    ckpt = save_checkpoint(out / f"checkpoint_{st.step:06d}.safetensors", st)
                    st.last_checkpoint = str(ckpt)
                    log.info("step %d: %s", st.step, {k: record[k] for k in ("loss_total",) if k in record})
        if ckpt is None:
            ckpt = save_checkpoint(out / f"checkpoint_{st.step:06d}.safetensors", st)
        final = out / "final.safetensors"
        shutil.copyfile(ckpt, final)
        if frozen_digests(st.models) != before:
            raise RuntimeError("frozen component parameters changed during training")
    return final


def read_log(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln]
