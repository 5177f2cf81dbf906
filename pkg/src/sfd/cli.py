"""Command-line entry points: training, SR evaluation, IQA scoring and feature export.

Exit codes: 0 success, 1 invalid input or config, 2 runtime failure
(including divergence), 3 file or archive errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DivergenceError

log = logging.getLogger("sfd")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
ENCODER_TAPS = ("encoder-m1", "encoder-m2", "encoder-m3", "encoder-out")
SR_COLUMNS = ("name", "psnr_db", "exact_match", "ssim", "d_mean")
IQA_COLUMNS = ("path", "s_d", "s_o", "s_lp", "mean_sigmoid")


@dataclass
class CommandResult:
    exit_code: int = EXIT_OK
    artifacts: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])
    return path


# -- train -------------------------------------------------------------------

def cmd_train(config, seed: int | None = None, resume: str | None = None,
              steps_override: int | None = None) -> CommandResult:
    from .config import load_run_config
    from .training import read_log, run_training

    cfg = load_run_config(config)
    run = {}
    if seed is not None:
        run["seed"] = seed
    if steps_override is not None:
        run["steps"] = steps_override
    if run:
        cfg = cfg.replace(run=run)
    if resume is not None and not Path(resume).is_file():
        raise FileNotFoundError(f"checkpoint to resume not found: {resume}")
    final = run_training(cfg, resume=resume)
    log_path = Path(cfg.run.output_dir) / "train_log.jsonl"
    records = read_log(log_path)
    last = records[-1] if records else {}
    return CommandResult(artifacts=[str(final), str(log_path)],
                         summary={"checkpoint": str(final), "steps": len(records), "final_losses": last})


# -- eval-sr -----------------------------------------------------------------

def _pair_files(lr_dir, hr_dir):
    from .data import list_images

    lr = {p.name: p for p in list_images(lr_dir)}
    hr = {p.name: p for p in list_images(hr_dir)}
    pairs = [(lr[k], hr[k]) for k in sorted(lr.keys() & hr.keys())]
    unpaired = sorted(lr.keys() ^ hr.keys())
    return pairs, unpaired


def cmd_eval_sr(checkpoint, lr_dir, hr_dir, out_csv, method: str = "generator",
                crop_border: int | None = None) -> CommandResult:
    from .data import load_image
    from .generator import bicubic_resize, super_resolve
    from .iqa import crop_to_multiple, input_multiple, iqa_score_matrix, load_iqa_model
    from .metrics import psnr_y, rgb_to_y, ssim_y

    if method not in ("generator", "bicubic"):
        raise ValueError(f"unknown method {method!r}; choose generator or bicubic")
    if checkpoint is None and method == "generator":
        raise ValueError("--checkpoint is required for method=generator")
    models = load_iqa_model(checkpoint) if checkpoint is not None else None
    scale = models.generator.cfg.scale if models is not None else 4
    border = scale if crop_border is None else crop_border
    pairs, unpaired = _pair_files(lr_dir, hr_dir)
    for name in unpaired:
        log.warning("unpaired file skipped: %s", name)
    warnings_ = len(unpaired)
    rows = []
    for lr_path, hr_path in pairs:
        lr, hr = load_image(lr_path), load_image(hr_path)
        with torch.no_grad():
            sr = super_resolve(lr, models.generator) if method == "generator" else bicubic_resize(lr, scale).clamp(0, 1)
        if sr.shape != hr.shape:
            log.warning("%s: SR shape %s does not match HR %s; skipped", lr_path.name, tuple(sr.shape), tuple(hr.shape))
            warnings_ += 1
            continue
        p = psnr_y(rgb_to_y(sr), rgb_to_y(hr), crop_border=border)
        row = {"name": lr_path.name, "psnr_db": p.db, "exact_match": p.exact_match,
               "ssim": ssim_y(rgb_to_y(sr), rgb_to_y(hr), crop_border=border)}
        if models is not None:
            try:
                sm = iqa_score_matrix(crop_to_multiple(sr, input_multiple(models)), models)
                row["d_mean"] = torch.sigmoid(sm.double()).mean().item()
            except ValueError as e:
                log.warning("%s: no discriminator score (%s)", lr_path.name, e)
        rows.append(row)
    if rows:
        mean = {"name": "mean", "psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
                "exact_match": all(r["exact_match"] for r in rows),
                "ssim": float(np.mean([r["ssim"] for r in rows]))}
        d = [r["d_mean"] for r in rows if "d_mean" in r]
        if d:
            mean["d_mean"] = float(np.mean(d))
        rows.append(mean)
    path = _write_csv(out_csv, SR_COLUMNS, rows)
    summary = {"pairs": len(rows) - 1 if rows else 0, "warnings": warnings_, "method": method}
    if rows:
        summary.update(mean_psnr_db=rows[-1]["psnr_db"], mean_ssim=rows[-1]["ssim"])
    return CommandResult(artifacts=[str(path)], summary=summary)


# -- score-iqa ---------------------------------------------------------------

def _image_inputs(source) -> list[Path]:
    from .data import list_images

    source = Path(source)
    if source.is_dir():
        return list_images(source)
    if not source.is_file():
        raise FileNotFoundError(f"no image directory or manifest at {source}")
    paths = []
    for line in source.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            paths.append(p if p.is_absolute() else source.parent / p)
    return paths


def read_opinions(path) -> dict[str, float]:
    """Opinion file: CSV with a header holding ``path`` (or ``name``) and ``opinion`` columns."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        key = "path" if "path" in (reader.fieldnames or []) else "name"
        if key not in (reader.fieldnames or []) or "opinion" not in reader.fieldnames:
            raise ValueError(f"{path}: expected columns 'path' or 'name', and 'opinion'")
        return {Path(row[key]).name: float(row["opinion"]) for row in reader}


def cmd_score_iqa(checkpoint, images, out_csv, alpha1: float = 0.5, alpha2: float = 0.5,
                  opinions=None) -> CommandResult:
    from .data import load_image
    from .iqa import IQAConfig, correlations, load_iqa_model, score_images

    cfg = IQAConfig(alpha1=alpha1, alpha2=alpha2, checkpoint=str(checkpoint))
    models = load_iqa_model(checkpoint)
    rows, skipped, warning = [], [], None
    for p in _image_inputs(images):
        try:
            img = load_image(p)
            res = score_images([img], models, cfg)[0]
        except (OSError, ValueError) as e:
            log.warning("skipped %s: %s", p, e)
            skipped.append(str(p))
            continue
        warning = warning or res.warning
        rows.append({"path": str(p), "s_d": res.s_d, "s_o": res.s_o, "s_lp": res.s_lp,
                     "mean_sigmoid": res.mean_sigmoid_matrix})
    path = _write_csv(out_csv, IQA_COLUMNS, rows)
    summary = {"scored": len(rows), "skipped": skipped, "alpha": [cfg.alpha1, cfg.alpha2]}
    if warning:
        summary["warning"] = warning
    artifacts = [str(path)]
    if opinions is not None:
        op = read_opinions(opinions)
        matched = [(r["s_d"], op[Path(r["path"]).name]) for r in rows if Path(r["path"]).name in op]
        if len(matched) < 2:
            raise ValueError("fewer than two scored images have an opinion score")
        s, o = zip(*matched)
        summary["correlation"] = {"n": len(matched), **correlations(s, o)}
        side = path.with_suffix(".summary.json")
        side.write_text(json.dumps(summary, indent=2) + "\n")
        artifacts.append(str(side))
    return CommandResult(artifacts=artifacts, summary=summary)


def cmd_correlate(table, score_col: str = "s_d", opinion_col: str = "opinion") -> CommandResult:
    from .iqa import correlations

    with Path(table).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or score_col not in rows[0] or opinion_col not in rows[0]:
        raise ValueError(f"{table}: needs columns {score_col!r} and {opinion_col!r}")
    s = [float(r[score_col]) for r in rows]
    o = [float(r[opinion_col]) for r in rows]
    return CommandResult(summary={"n": len(rows), **correlations(s, o)})


# -- dump-features -----------------------------------------------------------

def available_taps(models) -> list[str]:
    return [*ENCODER_TAPS, *models.feat_d.tap_names]


def extract_tap(img, models, tap: str) -> torch.Tensor:
    """Spatially pooled feature vector of one image at ``tap``."""
    from .encoders import encode_image
    from .iqa import crop_to_multiple, input_multiple
    from .utils import eval_mode

    taps = available_taps(models)
    if tap not in taps:
        raise ValueError(f"unknown tap {tap!r}; available: {', '.join(taps)}")
    x = crop_to_multiple(img, input_multiple(models))
    with torch.no_grad(), eval_mode(models.feat_d):
        pyr, emb = encode_image(x[None], models.encoder)
        if tap == "encoder-out":
            return emb[0]
        if tap.startswith("encoder-m"):
            return pyr[int(tap[-1]) - 1][0].mean((-2, -1))
        _, feats = models.feat_d(list(pyr), return_taps=True)
        return feats[tap][0].mean((-2, -1))


def cmd_dump_features(checkpoint, images, layer: str, out) -> CommandResult:
    from .archive import save_archive
    from .data import load_image
    from .iqa import load_iqa_model

    models = load_iqa_model(checkpoint)
    if layer not in available_taps(models):
        raise ValueError(f"unknown tap {layer!r}; available: {', '.join(available_taps(models))}")
    paths = []
    for src in images:
        paths.extend(_image_inputs(src) if Path(src).is_dir() else [Path(src)])
    if not paths:
        raise ValueError("no images given")
    tensors, names = {}, []
    for i, p in enumerate(paths):
        key = f"{i:04d}:{p.name}"
        tensors[key] = extract_tap(load_image(p), models, layer).float().contiguous()
        names.append(str(p))
    path = save_archive(out, tensors, {"kind": "sfd-features", "tap": layer, "checkpoint": str(checkpoint),
                                       "images": names})
    return CommandResult(artifacts=[str(path)], summary={"tap": layer, "vectors": len(tensors),
                                                         "dim": int(next(iter(tensors.values())).numel())})


# -- small helpers -----------------------------------------------------------

def cmd_make_corpus(directory, n: int = 20, size: int = 96, seed: int = 0) -> CommandResult:
    from .data import make_synthetic_corpus

    paths = make_synthetic_corpus(directory, n=n, size=size, seed=seed)
    return CommandResult(artifacts=[str(p) for p in paths], summary={"images": len(paths)})


def cmd_init_config(path) -> CommandResult:
    from .config import default_config_toml

    path = Path(path)
    if path.exists():
        raise FileExistsError(f"{path} already exists")
    path.write_text(default_config_toml())
    return CommandResult(artifacts=[str(path)])


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sfd", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train generator, Feat-D and prompt pair")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume")
    p.add_argument("--steps-override", type=int, help="adversarial steps (replaces run.steps)")

    p = sub.add_parser("eval-sr", help="PSNR/SSIM on the Y channel plus Feat-D scatter data")
    p.add_argument("--checkpoint")
    p.add_argument("lr_dir")
    p.add_argument("hr_dir")
    p.add_argument("out_csv")
    p.add_argument("--method", choices=("generator", "bicubic"), default="generator")
    p.add_argument("--crop-border", type=int, help="pixels cropped per side (default: scale)")

    p = sub.add_parser("score-iqa", help="no-reference quality scores for a directory or manifest")
    p.add_argument("checkpoint")
    p.add_argument("images", help="image directory or manifest file (one path per line)")
    p.add_argument("out_csv")
    p.add_argument("--alpha1", type=float, default=0.5)
    p.add_argument("--alpha2", type=float, default=0.5)
    p.add_argument("--opinions", help="CSV with path/name and opinion columns")

    p = sub.add_parser("correlate", help="PLCC/SRCC/KRCC between two columns of a CSV")
    p.add_argument("table")
    p.add_argument("--score-col", default="s_d")
    p.add_argument("--opinion-col", default="opinion")

    p = sub.add_parser("dump-features", help="export pooled features at a tap point")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+", help="image files or directories")
    p.add_argument("--layer", default="feat-d-upsample-3")
    p.add_argument("--out", required=True)

    p = sub.add_parser("make-corpus", help="write a synthetic PNG corpus")
    p.add_argument("directory")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("init-config", help="write the default run config")
    p.add_argument("path")
    return ap


def dispatch(args) -> CommandResult:
    c = args.command
    if c == "train":
        return cmd_train(args.config, args.seed, args.resume, args.steps_override)
    if c == "eval-sr":
        return cmd_eval_sr(args.checkpoint, args.lr_dir, args.hr_dir, args.out_csv, args.method, args.crop_border)
    if c == "score-iqa":
        return cmd_score_iqa(args.checkpoint, args.images, args.out_csv, args.alpha1, args.alpha2, args.opinions)
    if c == "correlate":
        return cmd_correlate(args.table, args.score_col, args.opinion_col)
    if c == "dump-features":
        return cmd_dump_features(args.checkpoint, args.images, args.layer, args.out)
    if c == "make-corpus":
        return cmd_make_corpus(args.directory, args.n, args.size, args.seed)
    return cmd_init_config(args.path)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, DivergenceError):
        return EXIT_RUNTIME
    if isinstance(exc, ValueError):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = dispatch(args)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        key = getattr(exc, "key", None)
        msg = f"error: {exc}" + (f" [key: {key}]" if key and key not in str(exc) else "")
        print(msg, file=sys.stderr)
        if args.verbose:
            raise
        return exit_code_for(exc)
    print(json.dumps({"exit_code": result.exit_code, "artifacts": result.artifacts, "summary": result.summary},
                     indent=2, default=str))
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
