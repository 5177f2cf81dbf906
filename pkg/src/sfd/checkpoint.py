"""Training checkpoints on top of the named-tensor archive."""
from __future__ import annotations

from pathlib import Path

import torch

from . import __version__
from .archive import load_archive, save_archive
from .config import RunConfig
from .encoders import load_state_strict
from .errors import ArchiveError, VersionError
from .model import build_models
from .training import TrainState, init_train_state

CHECKPOINT_KIND = "sfd-checkpoint"
CHECKPOINT_VERSION = 1


def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            name = f"{prefix}.state.{idx}.{key}"
            if torch.is_tensor(value):
                tensors[name] = value
            else:
                scalars[name] = value
    return tensors, {"param_groups": sd["param_groups"], "scalars": scalars}


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict, meta: dict) -> None:
    state: dict[int, dict] = {}
    for name, value in tensors.items():
        if name.startswith(prefix + ".state."):
            idx, key = name[len(prefix) + 7:].split(".", 1)
            state.setdefault(int(idx), {})[key] = value
    for name, value in meta["scalars"].items():
        idx, key = name[len(prefix) + 7:].split(".", 1)
        state.setdefault(int(idx), {})[key] = value
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_checkpoint(path, st: TrainState) -> Path:
    tensors: dict[str, torch.Tensor] = {}
    modules = {**st.models.trainable_modules(), **st.models.frozen_modules()}
    for name, module in modules.items():
        for k, v in module.state_dict().items():
            tensors[f"{name}.{k}"] = v
    opt_meta = {}
    for prefix, opt in (("opt_g", st.opt_g), ("opt_d", st.opt_d)):
        t, m = _optimizer_tensors(prefix, opt)
        tensors.update(t)
        opt_meta[prefix] = m
    meta = {
        "kind": CHECKPOINT_KIND,
        "checkpoint_version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "torch_version": torch.__version__,
        "step": st.step,
        "config": st.config.to_dict(),
        "config_hash": st.config.config_hash(),
        "optimizers": opt_meta,
        "modules": sorted(modules),
    }
    return save_archive(path, tensors, meta)


def load_checkpoint(path, config: RunConfig | None = None) -> TrainState:
    """Rebuild a TrainState; ``config`` forces the architecture (mismatches raise ShapeError)."""
    tensors, meta = load_archive(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ArchiveError(f"{path} is not a training checkpoint")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {meta.get('checkpoint_version')}, "
                           f"expected {CHECKPOINT_VERSION}")
    cfg = config or RunConfig.from_dict(meta["config"])
    models = build_models(cfg, load_weight_files=False)
    modules = {**models.trainable_modules(), **models.frozen_modules()}
    for name, module in modules.items():
        prefix = name + "."
        load_state_strict(module, {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    st = init_train_state(cfg, models)
    _restore_optimizer("opt_g", st.opt_g, tensors, meta["optimizers"]["opt_g"])
    _restore_optimizer("opt_d", st.opt_d, tensors, meta["optimizers"]["opt_d"])
    st.step = int(meta["step"])
    return st


def checkpoint_meta(path) -> dict:
    return load_archive(path)[1]
