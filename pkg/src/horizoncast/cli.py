"""Command-line interface: synth, train, rollout, eval, ablate.

Output layout is rooted at --out (or HORIZONCAST_OUT, or the config's
out_dir).  Every subcommand writes machine-readable JSON/CSV next to the
rendered PNG figures so runs can be inspected either way.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import os
import zlib

import click
import numpy as np

from . import engine, figures, training, world
from .codec import encode_clip_arrays
from .config import (
    RunConfig,
    arch_fingerprint,
    config_from_dict,
    config_hash,
    load_config,
    validate_config,
)
from .errors import (
    ConfigurationError,
    DataError,
    FormatError,
    HorizoncastError,
    NumericError,
)
from .evaluate import eval_rollout
from .model import load_checkpoint

OUT_ENV_VAR = "HORIZONCAST_OUT"

_EXIT_CODES = (
    (ConfigurationError, 2),
    (FormatError, 2),
    (DataError, 3),
    (NumericError, 4),
)


def _exit_code(exc: HorizoncastError) -> int:
    for cls, code in _EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def _guarded(fn):
    """Map domain errors to stderr messages and stable exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except HorizoncastError as exc:
            click.echo(f"error: {exc}", err=True)
            raise SystemExit(_exit_code(exc))

    return wrapper


def _write_json(path: str, payload: dict) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=False), default=None,
              help="JSON config file; defaults apply for missing sections.")
@click.option("--seed", type=int, default=None, help="Override the run seed.")
@click.option("--out", "out_dir", default=None,
              help=f"Output root (overrides ${OUT_ENV_VAR} and the config).")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, seed: int | None,
         out_dir: str | None) -> None:
    """Desk-scale long-horizon video prediction on a synthetic 2D world."""
    try:
        if config_path is not None:
            cfg = load_config(config_path)
        else:
            cfg = config_from_dict({})
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        resolved_out = out_dir or os.environ.get(OUT_ENV_VAR) or cfg.out_dir
        cfg = dataclasses.replace(cfg, out_dir=resolved_out)
        validate_config(cfg)
    except HorizoncastError as exc:
        click.echo(f"error: {exc}", err=True)
        raise SystemExit(_exit_code(exc))
    ctx.obj = cfg


@main.command()
@click.option("--force", is_flag=True, help="Allow writing into a non-empty dataset dir.")
@click.pass_obj
@_guarded
def synth(cfg: RunConfig, force: bool) -> None:
    """Generate a dataset of synthetic clips with exact ground truth."""
    dataset_dir = os.path.join(cfg.out_dir, "dataset")
    if os.path.isdir(dataset_dir) and os.listdir(dataset_dir) and not force:
        raise ConfigurationError(
            f"dataset directory {dataset_dir} is not empty; pass --force to overwrite"
        )
    clip_dirs = world.generate_dataset(cfg, dataset_dir)
    manifest = {
        "format_version": cfg.format_version,
        "config_hash": config_hash(cfg),
        "clips": [os.path.basename(d) for d in clip_dirs],
        "seeds": [cfg.seed + i for i in range(len(clip_dirs))],
    }
    _write_json(os.path.join(dataset_dir, "manifest.json"), manifest)
    click.echo(f"wrote {len(clip_dirs)} clips to {dataset_dir}")


def _train_overrides(cfg: RunConfig, modalities: str | None, noise_mode: str | None,
                     steps: int | None) -> RunConfig:
    if modalities is not None:
        mods = tuple(m.strip() for m in modalities.split(",") if m.strip())
        cfg = dataclasses.replace(
            cfg, codec=dataclasses.replace(cfg.codec, modalities=mods))
    if noise_mode is not None:
        cfg = dataclasses.replace(
            cfg, trainer=dataclasses.replace(cfg.trainer, noise_mode=noise_mode))
    if steps is not None:
        cfg = dataclasses.replace(
            cfg, trainer=dataclasses.replace(cfg.trainer, steps=steps))
    validate_config(cfg)
    return cfg


@main.command("train")
@click.option("--dataset", "dataset_dir", default=None,
              help="Dataset directory (default: <out>/dataset).")
@click.option("--modalities", default=None,
              help="Comma-separated modality subset, e.g. rgb,depth,flow.")
@click.option("--noise-mode", default=None,
              type=click.Choice(["grouped", "per-frame-random", "linear-ramp"]))
@click.option("--steps", type=int, default=None, help="Override trainer steps.")
@click.option("--resume", "resume_from", default=None,
              help="Checkpoint directory to resume from.")
@click.pass_obj
@_guarded
def train_cmd(cfg: RunConfig, dataset_dir: str | None, modalities: str | None,
              noise_mode: str | None, steps: int | None,
              resume_from: str | None) -> None:
    """Train the joint denoiser on encoded clips."""
    cfg = _train_overrides(cfg, modalities, noise_mode, steps)
    dataset_dir = dataset_dir or os.path.join(cfg.out_dir, "dataset")
    if not os.path.isdir(dataset_dir):
        raise DataError(
            f"dataset directory {dataset_dir} does not exist; run `synth` first")
    train_dir = os.path.join(cfg.out_dir, "train")
    result = training.train(cfg, dataset_dir, train_dir, resume_from=resume_from)
    figures.save_loss_curve(result.losses, os.path.join(train_dir, "loss.png"))
    final = result.losses[-1] if result.losses else float("nan")
    click.echo(f"checkpoint: {result.checkpoint_dir}")
    click.echo(f"steps: {len(result.losses)}  final loss: {final:.6f}")


def _rollout_rng(cfg: RunConfig, tag: str) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([cfg.seed, zlib.crc32(tag.encode())])))


def _load_context(cfg: RunConfig, context_clip: str):
    arrays, clip_meta = world.load_clip(context_clip)
    latent = encode_clip_arrays(arrays, cfg.codec)
    context_len = cfg.scheduler.short_term + cfg.scheduler.long_term
    if latent.data.shape[0] < context_len:
        raise DataError(
            f"context clip {context_clip} has {latent.data.shape[0]} frames; "
            f"need at least {context_len}")
    descriptor = np.asarray(clip_meta["descriptor"], dtype=np.float32)
    return latent.data[:context_len], descriptor, context_len, clip_meta


def _checkpoint_model(cfg: RunConfig, checkpoint_dir: str):
    model, meta = load_checkpoint(checkpoint_dir)
    expected = arch_fingerprint(cfg)
    found = meta.get("arch_fingerprint")
    if found != expected:
        raise ConfigurationError(
            f"checkpoint {checkpoint_dir} was trained with an incompatible "
            f"architecture (fingerprint {found}, config wants {expected})")
    return model, meta


def _run_rollout(cfg: RunConfig, model, context_clip: str, n_frames: int,
                 rollout_dir: str, rng_tag: str) -> dict:
    context, descriptor, context_len, clip_meta = _load_context(cfg, context_clip)
    rng = _rollout_rng(cfg, rng_tag)
    result = engine.rollout(model, context, descriptor, n_frames, cfg, rng)
    arrays = dict(result.arrays)
    if result.flow_valid is not None:
        arrays["flow_valid"] = result.flow_valid.astype(np.uint8)
    world.write_arrays(rollout_dir, arrays, {
        "width": cfg.world.width,
        "height": cfg.world.height,
        "clip_len": int(arrays["rgb"].shape[0]),
        "n_objects": clip_meta.get("n_objects"),
        "descriptor": clip_meta.get("descriptor"),
    })
    # Record the context clip relative to the output root when it lives
    # inside it, so identical runs in different roots write identical meta.
    context_ref = os.path.abspath(context_clip)
    rel = os.path.relpath(context_ref, os.path.abspath(cfg.out_dir))
    if not rel.startswith(".."):
        context_ref = rel
    meta = {
        "format_version": cfg.format_version,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "arch_fingerprint": arch_fingerprint(cfg),
        "context_clip": context_ref,
        "context_len": context_len,
        "n_frames": int(arrays["rgb"].shape[0]),
        "t_m_infer": cfg.scheduler.t_m_infer,
        "n_steps": len(result.trace),
        "trace": result.trace,
    }
    _write_json(os.path.join(rollout_dir, "rollout_meta.json"), meta)
    figures.save_contact_sheet(result.arrays,
                               os.path.join(rollout_dir, "contact_sheet.png"))
    figures.save_gif(result.arrays["rgb"], os.path.join(rollout_dir, "rollout.gif"))
    return meta


@main.command("rollout")
@click.option("--checkpoint", "checkpoint_dir", default=None,
              help="Checkpoint directory (default: <out>/train/checkpoint).")
@click.option("--context", "context_clip", default=None,
              help="Clip directory supplying the conditioning frames "
                   "(default: <out>/dataset/clip_0000).")
@click.option("--n-frames", type=int, default=None,
              help="Frames to emit (default: rollout.n_frames from the config).")
@click.option("--t-m", "t_m_infer", type=float, default=None,
              help="Override the long-term memory noise level at inference.")
@click.option("--name", default="rollout", help="Output subdirectory name.")
@click.pass_obj
@_guarded
def rollout_cmd(cfg: RunConfig, checkpoint_dir: str | None, context_clip: str | None,
                n_frames: int | None, t_m_infer: float | None, name: str) -> None:
    """Stream frames from a checkpoint with the staircase schedule."""
    if t_m_infer is not None:
        cfg = dataclasses.replace(
            cfg, scheduler=dataclasses.replace(cfg.scheduler, t_m_infer=t_m_infer))
        validate_config(cfg)
    checkpoint_dir = checkpoint_dir or os.path.join(cfg.out_dir, "train", "checkpoint")
    context_clip = context_clip or os.path.join(cfg.out_dir, "dataset", "clip_0000")
    n_frames = n_frames if n_frames is not None else cfg.rollout.n_frames
    model, _ = _checkpoint_model(cfg, checkpoint_dir)
    rollout_dir = os.path.join(cfg.out_dir, name)
    meta = _run_rollout(cfg, model, context_clip, n_frames, rollout_dir, name)
    click.echo(f"emitted {meta['n_frames']} frames in {meta['n_steps']} steps "
               f"to {rollout_dir}")


def _aligned_ground_truth(gt_clip: str, offset: int, n_frames: int) -> dict:
    gt_arrays, _ = world.load_clip(gt_clip)
    total = gt_arrays["rgb"].shape[0]
    if total < offset + n_frames:
        raise DataError(
            f"ground-truth clip {gt_clip} has {total} frames; need "
            f"{offset + n_frames} to align with the rollout")
    aligned = {}
    for key, arr in gt_arrays.items():
        aligned[key] = arr[offset:offset + n_frames]
    return aligned


@main.command("eval")
@click.option("--rollout-dir", default=None,
              help="Rollout (or clip) directory to score (default: <out>/rollout).")
@click.option("--dataset-clip", "gt_clip", default=None,
              help="Ground-truth clip directory for referenced metrics.")
@click.option("--allow-mismatch", is_flag=True,
              help="Score a rollout produced under a different config hash.")
@click.pass_obj
@_guarded
def eval_cmd(cfg: RunConfig, rollout_dir: str | None, gt_clip: str | None,
             allow_mismatch: bool) -> None:
    """Score a rollout; writes report.json, series.csv, and report.png."""
    rollout_dir = rollout_dir or os.path.join(cfg.out_dir, "rollout")
    if not os.path.isdir(rollout_dir):
        raise DataError(f"rollout directory {rollout_dir} does not exist")
    arrays, _ = world.load_clip(rollout_dir)
    flow_valid = arrays.pop("flow_valid", None)
    if flow_valid is not None:
        flow_valid = flow_valid.astype(bool)

    meta_path = os.path.join(rollout_dir, "rollout_meta.json")
    rollout_meta = {}
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            rollout_meta = json.load(fh)
    produced_by = rollout_meta.get("config_hash")
    if produced_by is not None and produced_by != config_hash(cfg) and not allow_mismatch:
        raise ConfigurationError(
            f"rollout {rollout_dir} was produced under config hash {produced_by} "
            f"but the current config hashes to {config_hash(cfg)}; "
            f"pass --allow-mismatch to score anyway")

    gt_arrays = None
    if gt_clip is not None:
        offset = int(rollout_meta.get("context_len", 0))
        gt_arrays = _aligned_ground_truth(gt_clip, offset, arrays["rgb"].shape[0])

    report = eval_rollout(arrays, gt_arrays, cfg, flow_valid=flow_valid,
                          produced_by=produced_by or config_hash(cfg))
    eval_dir = os.path.join(cfg.out_dir, "eval")
    _write_json(os.path.join(eval_dir, "report.json"), report)

    series = report["series"]
    with open(os.path.join(eval_dir, "series.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "sharpness", "referenced_quality"])
        referenced = series["referenced_quality"]
        for i, sharp in enumerate(series["sharpness"]):
            ref = "" if referenced is None else f"{referenced[i]:.8f}"
            writer.writerow([i, f"{sharp:.8f}", ref])
    figures.save_quality_figure(report, os.path.join(eval_dir, "report.png"))

    metrics = report["metrics"]
    for key in sorted(metrics):
        value = metrics[key]
        shown = "null" if value is None else f"{value:.6f}"
        click.echo(f"{key}: {shown}")


_MODALITY_CELLS = (
    ("none", ("rgb",)),
    ("depth", ("rgb", "depth")),
    ("seg", ("rgb", "seg")),
    ("flow", ("rgb", "flow")),
    ("depth+seg", ("rgb", "depth", "seg")),
    ("depth+flow", ("rgb", "depth", "flow")),
)
_T_M_CELLS = (0.9, 0.7, 0.3)
_NOISE_MODE_CELLS = ("grouped", "per-frame-random", "linear-ramp")

_SWEEP_METRICS = ("drift_no_reference", "drift_referenced", "temporal_consistency",
                  "mean_frame_quality", "mean_sharpness", "flow_epe", "depth_mae")


def _ensure_dataset(cfg: RunConfig) -> str:
    dataset_dir = os.path.join(cfg.out_dir, "dataset")
    if not (os.path.isdir(dataset_dir) and os.listdir(dataset_dir)):
        clip_dirs = world.generate_dataset(cfg, dataset_dir)
        _write_json(os.path.join(dataset_dir, "manifest.json"), {
            "format_version": cfg.format_version,
            "config_hash": config_hash(cfg),
            "clips": [os.path.basename(d) for d in clip_dirs],
            "seeds": [cfg.seed + i for i in range(len(clip_dirs))],
        })
    return dataset_dir


def _eval_cell(cfg: RunConfig, model, dataset_dir: str, cell_dir: str,
               cell_name: str) -> dict:
    context_clip = world.list_clips(dataset_dir)[0]
    rollout_dir = os.path.join(cell_dir, "rollout")
    meta = _run_rollout(cfg, model, context_clip, cfg.rollout.n_frames,
                        rollout_dir, f"ablate/{cell_name}")
    arrays, _ = world.load_clip(rollout_dir)
    flow_valid = arrays.pop("flow_valid", None)
    if flow_valid is not None:
        flow_valid = flow_valid.astype(bool)
    gt_arrays = _aligned_ground_truth(context_clip, meta["context_len"],
                                      arrays["rgb"].shape[0])
    report = eval_rollout(arrays, gt_arrays, cfg, flow_valid=flow_valid,
                          produced_by=meta["config_hash"])
    _write_json(os.path.join(cell_dir, "report.json"), report)
    return report["metrics"]


@main.command("ablate")
@click.option("--axis", type=click.Choice(["modalities", "t_m", "noise-mode"]),
              required=True)
@click.option("--steps", type=int, default=None,
              help="Override trainer steps for every cell.")
@click.pass_obj
@_guarded
def ablate_cmd(cfg: RunConfig, axis: str, steps: int | None) -> None:
    """Sweep one axis, training/rolling out per cell; failed cells are recorded."""
    if steps is not None:
        cfg = dataclasses.replace(
            cfg, trainer=dataclasses.replace(cfg.trainer, steps=steps))
        validate_config(cfg)
    dataset_dir = _ensure_dataset(cfg)
    sweep_dir = os.path.join(cfg.out_dir, f"ablate_{axis.replace('-', '_')}")

    cells: list[tuple[str, RunConfig]] = []
    if axis == "modalities":
        for name, mods in _MODALITY_CELLS:
            cells.append((name, dataclasses.replace(
                cfg, codec=dataclasses.replace(cfg.codec, modalities=mods))))
    elif axis == "t_m":
        for value in _T_M_CELLS:
            cells.append((f"t_m_{value}", dataclasses.replace(
                cfg, scheduler=dataclasses.replace(cfg.scheduler, t_m_infer=value))))
    else:
        for mode in _NOISE_MODE_CELLS:
            cells.append((mode, dataclasses.replace(
                cfg, trainer=dataclasses.replace(cfg.trainer, noise_mode=mode))))

    # On the t_m axis every cell reuses one checkpoint: the memory noise level
    # is an inference-time knob, so the comparison isolates it.
    shared_model = None
    if axis == "t_m":
        base_dir = os.path.join(sweep_dir, "shared_train")
        shared = training.train(cfg, dataset_dir, base_dir)
        shared_model = shared.model

    rows = []
    for name, cell_cfg in cells:
        cell_dir = os.path.join(sweep_dir, name.replace("+", "_"))
        try:
            validate_config(cell_cfg)
            if shared_model is not None:
                model = shared_model
            else:
                result = training.train(cell_cfg, dataset_dir,
                                        os.path.join(cell_dir, "train"))
                model = result.model
            metrics = _eval_cell(cell_cfg, model, dataset_dir, cell_dir, name)
            rows.append({"cell": name, **metrics})
            click.echo(f"cell {name}: ok")
        except Exception as exc:  # noqa: BLE001 - sweep must survive cell failures
            rows.append({"cell": name, "error": f"{type(exc).__name__}: {exc}"})
            click.echo(f"cell {name}: failed ({exc})", err=True)

    _write_json(os.path.join(sweep_dir, "sweep.json"), {
        "format_version": cfg.format_version,
        "config_hash": config_hash(cfg),
        "axis": axis,
        "rows": rows,
    })
    with open(os.path.join(sweep_dir, "sweep.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", *_SWEEP_METRICS, "error"])
        for row in rows:
            record = [row["cell"]]
            for key in _SWEEP_METRICS:
                value = row.get(key)
                record.append("" if value is None else f"{value:.8f}")
            record.append(row.get("error", ""))
            writer.writerow(record)
    figures.save_sweep_figure(rows, _SWEEP_METRICS, os.path.join(sweep_dir, "sweep.png"))
    click.echo(f"sweep written to {sweep_dir}")


if __name__ == "__main__":
    main()
