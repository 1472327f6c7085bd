"""Training loop: window sampling, noise assignment, AdamW, checkpoints.

Windows are contiguous clip slices split [long-term | short-term | prediction]
in time and stacked [short | long | prediction] slot-wise, matching the
rollout engine's assembly. All randomness flows through numpy PCG64 streams
(one for windows/schedules, one for the x0 noise draws, one for model init),
so a run is a pure function of (seed, config, dataset) and resume is
bit-exact: the optimizer moments and both stream states ride along with the
checkpoint.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import flowmatch
from .codec import channels_per_modality, encode_clip_arrays, latent_layout, modality_sequence
from .config import RunConfig, arch_fingerprint, config_hash
from .errors import ConfigurationError, DataError, NumericError
from .model import Denoiser, _DTYPES, _NP_DTYPES, init_model, load_checkpoint, save_checkpoint
from .schedule import (
    BankNoisePolicy,
    WindowNoise,
    sample_group_schedule,
    window_noise_from_pred_t,
)
from .world import list_clips, load_clip

ADAM_EPS = 1e-8


def window_len(cfg: RunConfig) -> int:
    s = cfg.scheduler
    return s.short_term + s.long_term + s.groups * s.group_size


@dataclass
class TrainingWindow:
    x1: np.ndarray  # (W, C, h, w) window latents, slot order [short|long|pred]
    x0: np.ndarray  # noise draw, same shape
    noise: WindowNoise
    y: np.ndarray  # descriptor
    uniform_branch: bool


def slice_to_slots(window: np.ndarray, short_term: int, long_term: int) -> np.ndarray:
    """Reorder a temporally contiguous slice [long|short|pred] into the slot
    order [short|long|pred] used by the model window."""
    s, l = short_term, long_term
    return np.concatenate([window[l : l + s], window[:l], window[l + s :]], axis=0)


def make_window(
    clip_latent: np.ndarray,
    descriptor: np.ndarray,
    cfg: RunConfig,
    policy: BankNoisePolicy,
    rng: np.random.Generator,
    noise_rng: np.random.Generator,
) -> TrainingWindow:
    """Draw one training window from a clip: random temporal offset, noise
    assignment per the configured mode, and a fresh x0 ~ N(0, I).

    With probability cfg.trainer.uniform_prob the prediction frames share a
    single t ~ U(0,1); the memory policy stays active unless
    uniform_overrides_memory is set.
    """
    w = window_len(cfg)
    n_frames = clip_latent.shape[0]
    if n_frames < w:
        raise DataError(f"clip has {n_frames} frames, window needs {w}")
    sch = cfg.scheduler
    offset = int(rng.integers(0, n_frames - w + 1))
    x1 = slice_to_slots(clip_latent[offset : offset + w], sch.short_term, sch.long_term)
    n_pred = sch.groups * sch.group_size
    uniform_branch = float(rng.uniform()) < cfg.trainer.uniform_prob
    if uniform_branch:
        pred_t = flowmatch.sample_uniform_window_t(rng, n_pred)
    elif cfg.trainer.noise_mode == "grouped":
        schedule = sample_group_schedule(sch.groups, rng, group_size=sch.group_size)
        pred_t = np.repeat(schedule.t_values, sch.group_size)
    elif cfg.trainer.noise_mode == "per-frame-random":
        pred_t = rng.uniform(0.0, 1.0, size=n_pred)
    elif cfg.trainer.noise_mode == "linear-ramp":
        schedule = sample_group_schedule(n_pred, rng, group_size=1)
        pred_t = schedule.t_values
    else:
        raise ConfigurationError(f"unknown noise mode '{cfg.trainer.noise_mode}'")
    noise = window_noise_from_pred_t(pred_t, policy, "train", rng)
    if uniform_branch and cfg.trainer.uniform_overrides_memory:
        flat = np.full_like(noise.t_modality, pred_t[0])
        noise = WindowNoise(
            t_modality=flat,
            mask=noise.mask,
            frame_t=flat[:, noise.layout.index("rgb")].copy(),
            t_m=noise.t_m,
            layout=noise.layout,
        )
    x0 = noise_rng.standard_normal(size=x1.shape)
    return TrainingWindow(
        x1=x1, x0=x0, noise=noise, y=descriptor, uniform_branch=uniform_branch
    )


@dataclass
class Batch:
    x1: torch.Tensor
    x0: torch.Tensor
    t_channel: torch.Tensor
    frame_t: torch.Tensor
    mask: torch.Tensor
    y: torch.Tensor


def collate(windows: list[TrainingWindow], layout: dict, c_total: int, dtype: str) -> Batch:
    td = _DTYPES[dtype]
    stack = lambda arrs: torch.from_numpy(np.stack(arrs)).to(td)
    return Batch(
        x1=stack([w.x1 for w in windows]),
        x0=stack([w.x0 for w in windows]),
        t_channel=stack([w.noise.channel_t(layout, c_total) for w in windows]),
        frame_t=stack([w.noise.frame_t for w in windows]),
        mask=stack([w.noise.mask for w in windows]),
        y=stack([w.y for w in windows]),
    )


def batch_loss(model: Denoiser, batch: Batch) -> torch.Tensor:
    x_t = flowmatch.interpolate(batch.x1, batch.x0, batch.t_channel)
    v = flowmatch.velocity_target(batch.x1, batch.x0)
    pred = model(x_t, batch.frame_t, batch.y)
    return flowmatch.joint_loss(pred, v, batch.mask)


# ---------------------------------------------------------------------------
# Optimizer: AdamW with decoupled weight decay, explicit state for exact
# serialization.
# ---------------------------------------------------------------------------

class AdamW:
    def __init__(self, params: list[torch.Tensor], lr: float, beta1: float,
                 beta2: float, weight_decay: float):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]
        self.step_count = 0

    @torch.no_grad()
    def step(self, grads: list[torch.Tensor]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p.mul_(1.0 - self.lr * self.weight_decay)
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.add_((m / bc1) / ((v / bc2).sqrt() + ADAM_EPS), alpha=-self.lr)


def clip_grad_norm(grads: list[torch.Tensor], max_norm: float) -> None:
    total = torch.sqrt(sum((g * g).sum() for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)


def train_step(model: Denoiser, opt: AdamW, batch: Batch, cfg: RunConfig) -> float:
    """One optimization step; returns the pre-update loss.

    A non-finite loss aborts before any state is touched. Gradient clipping
    applies only in f32 runs — f64 is the gradient-verification regime and is
    left unclipped.
    """
    loss = batch_loss(model, batch)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite training loss at step {opt.step_count}")
    model.zero_grad(set_to_none=True)
    loss.backward()
    grads = [p.grad for p in model.parameters()]
    if cfg.trainer.grad_clip is not None and cfg.trainer.dtype == "f32":
        clip_grad_norm(grads, cfg.trainer.grad_clip)
    opt.step(grads)
    return float(loss.detach())


# ---------------------------------------------------------------------------
# Full training runs
# ---------------------------------------------------------------------------

@dataclass
class LoadedDataset:
    latents: list[np.ndarray]
    descriptors: list[np.ndarray]
    clip_dirs: list[str]


def load_dataset_latents(dataset_dir: str, cfg: RunConfig) -> LoadedDataset:
    """Encode every sufficiently long clip; reject the rest."""
    w = window_len(cfg)
    latents, descriptors, kept = [], [], []
    for clip_dir in list_clips(dataset_dir):
        arrays, meta = load_clip(clip_dir)
        if arrays["rgb"].shape[0] < w:
            continue
        z = encode_clip_arrays(arrays, cfg.codec)
        latents.append(z.data)
        descriptors.append(np.asarray(meta["descriptor"], dtype=np.float64))
        kept.append(clip_dir)
    if not latents:
        raise DataError(
            f"no clip in {dataset_dir} is long enough for a {w}-frame window"
        )
    return LoadedDataset(latents=latents, descriptors=descriptors, clip_dirs=kept)


@dataclass
class TrainResult:
    checkpoint_dir: str
    losses: list[float]
    model: Denoiser


def _rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def _save_opt(ckpt_dir: str, opt: AdamW, dtype: str) -> None:
    for tag, tensors in (("m", opt.m), ("v", opt.v)):
        flat = np.concatenate(
            [t.detach().cpu().numpy().astype(_NP_DTYPES[dtype]).ravel() for t in tensors]
        )
        flat.tofile(os.path.join(ckpt_dir, f"opt_{tag}.{dtype}"))


def _load_opt(ckpt_dir: str, opt: AdamW, dtype: str) -> None:
    for tag, tensors in (("m", opt.m), ("v", opt.v)):
        path = os.path.join(ckpt_dir, f"opt_{tag}.{dtype}")
        flat = np.fromfile(path, dtype=_NP_DTYPES[dtype])
        offset = 0
        for t in tensors:
            n = t.numel()
            with torch.no_grad():
                t.copy_(torch.from_numpy(flat[offset : offset + n].reshape(tuple(t.shape)).copy()))
            offset += n


def train(
    cfg: RunConfig,
    dataset_dir: str,
    out_dir: str,
    resume_from: str | None = None,
    hook=None,
) -> TrainResult:
    """Run (or resume) a training job and write checkpoint + loss curve.

    The checkpoint directory carries parameters, optimizer moments, both rng
    stream states, and the step count, so `resume_from` continues the exact
    trajectory the uninterrupted run would have taken.
    """
    data = load_dataset_latents(dataset_dir, cfg)
    order = modality_sequence(cfg.codec)
    layout = latent_layout(cfg.codec)
    c_total = channels_per_modality(cfg.codec) * len(order)
    policy = BankNoisePolicy.from_config(cfg.scheduler, order)
    dtype = cfg.trainer.dtype

    ss = np.random.SeedSequence(cfg.seed)
    s_model, s_data, s_noise = ss.spawn(3)
    rng_data = np.random.Generator(np.random.PCG64(s_data))
    rng_noise = np.random.Generator(np.random.PCG64(s_noise))

    start_step = 0
    losses: list[float] = []
    if resume_from is None:
        rng_model = np.random.Generator(np.random.PCG64(s_model))
        model = init_model(c_total, data.descriptors[0].shape[0], cfg.model, rng_model, dtype)
        opt = AdamW(
            list(model.parameters()),
            cfg.trainer.lr,
            cfg.trainer.beta1,
            cfg.trainer.beta2,
            cfg.trainer.weight_decay,
        )
    else:
        model, meta = load_checkpoint(resume_from)
        if meta["dtype"] != dtype:
            raise ConfigurationError(
                f"checkpoint dtype {meta['dtype']} does not match config dtype {dtype}"
            )
        opt = AdamW(
            list(model.parameters()),
            cfg.trainer.lr,
            cfg.trainer.beta1,
            cfg.trainer.beta2,
            cfg.trainer.weight_decay,
        )
        _load_opt(resume_from, opt, dtype)
        with open(os.path.join(resume_from, "trainer_state.json")) as fh:
            state = json.load(fh)
        start_step = state["step"]
        opt.step_count = state["step"]
        rng_data.bit_generator.state = state["rng_data"]
        rng_noise.bit_generator.state = state["rng_noise"]
        losses = list(state["losses"])

    n_clips = len(data.latents)
    for step in range(start_step, cfg.trainer.steps):
        windows = []
        for _ in range(cfg.trainer.batch_size):
            ci = int(rng_data.integers(0, n_clips))
            windows.append(
                make_window(
                    data.latents[ci], data.descriptors[ci], cfg, policy, rng_data, rng_noise
                )
            )
        batch = collate(windows, layout, c_total, dtype)
        loss = train_step(model, opt, batch, cfg)
        losses.append(loss)
        if hook is not None and cfg.trainer.eval_every and (step + 1) % cfg.trainer.eval_every == 0:
            hook(step + 1, model, loss)

    ckpt_dir = os.path.join(out_dir, "checkpoint")
    save_checkpoint(
        ckpt_dir,
        model,
        dtype,
        {
            "step": cfg.trainer.steps,
            "config_hash": config_hash(cfg),
            "arch_fingerprint": arch_fingerprint(cfg),
            "modalities": list(order),
        },
    )
    _save_opt(ckpt_dir, opt, dtype)
    with open(os.path.join(ckpt_dir, "trainer_state.json"), "w") as fh:
        json.dump(
            {
                "step": cfg.trainer.steps,
                "rng_data": _rng_state(rng_data),
                "rng_noise": _rng_state(rng_noise),
                "losses": losses,
            },
            fh,
        )
    with open(os.path.join(out_dir, "loss.json"), "w") as fh:
        json.dump(
            {
                "format_version": "1",
                "config_hash": config_hash(cfg),
                "steps": list(range(1, len(losses) + 1)),
                "loss": losses,
            },
            fh,
        )
    return TrainResult(checkpoint_dir=ckpt_dir, losses=losses, model=model)
