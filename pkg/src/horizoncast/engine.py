"""Streaming long-horizon rollout.

The engine keeps a memory bank (clean short-term frames; long-term frames
with clean depth and partially re-noised rgb/flow) and a staircase of active
prediction groups whose noise indices are spaced exactly 1000/G apart. Every
step runs one forward pass over [short-term | long-term | groups], advances
each active group by one Euler step, and — on the cadence of
n_steps_per_group — emits the fully denoised leading group into memory and
materializes a fresh pure-noise group at the tail.

The staircase fills progressively: the engine starts with a single group at
index 0 and adds the next group each time the youngest one has climbed
1000/G, so the exact-spacing invariant holds from the first step and the
first emission lands after G*n_steps_per_group steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import flowmatch
from .codec import (
    JointLatent,
    channels_per_modality,
    latent_layout,
    modality_sequence,
    decode,
    rgb_to_flow,
    SEG_PALETTE,
)
from .config import RunConfig
from .errors import ConfigurationError, DataError
from .model import Denoiser
from .schedule import TIMESTEPS, BankNoisePolicy


@dataclass
class LongTermEntry:
    clean: np.ndarray  # (C, h, w) fully denoised latent frame
    noise: np.ndarray  # the x0 draw used for re-noising
    stored: np.ndarray  # what the model sees: depth clean, rest at t_m
    step: int  # insertion counter, used by the eviction stride


@dataclass
class MemoryBank:
    short: list[tuple[np.ndarray, int]]
    long: list[LongTermEntry]
    capacity_short: int
    capacity_long: int
    insert_count: int = 0


@dataclass
class ActiveGroup:
    frames: np.ndarray  # (group_size, C, h, w)
    k: int  # denoising steps taken; index = 1000*k/(G*n_steps_per_group)


@dataclass
class RolloutState:
    bank: MemoryBank
    groups: list[ActiveGroup]
    emitted: list[np.ndarray]
    step_count: int
    rng: np.random.Generator
    model: Denoiser
    cfg: RunConfig
    descriptor: np.ndarray
    trace: list[dict] = field(default_factory=list)

    @property
    def indices(self) -> list[float]:
        total = self.cfg.scheduler.groups * self.cfg.rollout.n_steps_per_group
        return [TIMESTEPS * g.k / total for g in self.groups]


def _noised_copy(
    clean: np.ndarray, noise: np.ndarray, t_m: float, layout: dict[str, tuple[int, int]]
) -> np.ndarray:
    """Interpolate all non-depth channel ranges to t_m; keep depth clean."""
    stored = clean.copy()
    t = np.asarray(t_m, dtype=clean.dtype)
    for m, (a, b) in layout.items():
        if m == "depth":
            continue
        stored[a:b] = flowmatch.interpolate(clean[a:b], noise[a:b], t)
    return stored


def init_rollout(
    context: np.ndarray,
    descriptor: np.ndarray,
    model: Denoiser,
    cfg: RunConfig,
    rng: np.random.Generator,
) -> RolloutState:
    """Bootstrap the memory bank from ground-truth context latents.

    The newest S context frames become clean short-term memory; the L frames
    before them become long-term memory with rgb/flow re-noised at the
    inference memory level.
    """
    sch = cfg.scheduler
    need = sch.short_term + sch.long_term
    if context.shape[0] < need:
        raise DataError(
            f"rollout needs at least {need} context frames, got {context.shape[0]}"
        )
    np_dtype = np.float64 if next(model.parameters()).dtype == torch.float64 else np.float32
    context = context.astype(np_dtype)
    layout = latent_layout(cfg.codec)
    bank = MemoryBank(
        short=[], long=[], capacity_short=sch.short_term, capacity_long=sch.long_term
    )
    long_frames = context[context.shape[0] - need : context.shape[0] - sch.short_term]
    short_frames = context[context.shape[0] - sch.short_term :]
    for frame in long_frames:
        noise = rng.standard_normal(size=frame.shape).astype(np_dtype)
        bank.long.append(
            LongTermEntry(
                clean=frame.copy(),
                noise=noise,
                stored=_noised_copy(frame, noise, sch.t_m_infer, layout),
                step=bank.insert_count,
            )
        )
        bank.insert_count += 1
    for frame in short_frames:
        bank.short.append((frame.copy(), bank.insert_count))
        bank.insert_count += 1
    return RolloutState(
        bank=bank,
        groups=[],
        emitted=[],
        step_count=0,
        rng=rng,
        model=model,
        cfg=cfg,
        descriptor=np.asarray(descriptor, dtype=np.float64),
    )


def update_memory(
    bank: MemoryBank,
    frames: np.ndarray,
    rng: np.random.Generator,
    t_m: float,
    layout: dict[str, tuple[int, int]],
) -> None:
    """Insert emitted (fully denoised) frames into the bank.

    Overflowing short-term frames migrate to long-term with a fresh noise
    draw at t_m on their non-depth channels. Long-term overflow is evicted by
    a stride: positions 1, 3, 5, ... of the combined insertion-ordered list
    go first, which thins history evenly instead of dropping the oldest run.
    """
    for frame in frames:
        bank.short.append((frame.copy(), bank.insert_count))
        bank.insert_count += 1
    while len(bank.short) > bank.capacity_short:
        frame, step = bank.short.pop(0)
        noise = rng.standard_normal(size=frame.shape).astype(frame.dtype)
        bank.long.append(
            LongTermEntry(
                clean=frame,
                noise=noise,
                stored=_noised_copy(frame, noise, t_m, layout),
                step=step,
            )
        )
    while len(bank.long) > bank.capacity_long:
        excess = len(bank.long) - bank.capacity_long
        evict = set(range(1, min(2 * excess, len(bank.long)), 2))
        bank.long = [e for i, e in enumerate(bank.long) if i not in evict]


def rollout_step(state: RolloutState) -> np.ndarray | None:
    """Advance the engine by one denoising step; returns an emitted group's
    frames when the leading group completes, else None."""
    cfg = state.cfg
    sch = cfg.scheduler
    nspg = cfg.rollout.n_steps_per_group
    total = sch.groups * nspg
    layout = latent_layout(cfg.codec)
    model = state.model
    np_dtype = np.float64 if next(model.parameters()).dtype == torch.float64 else np.float32

    # Materialize the next group once the staircase has room for it.
    if len(state.groups) < sch.groups and (
        not state.groups or state.groups[-1].k >= nspg
    ):
        frames = state.rng.standard_normal(
            size=(sch.group_size, model.c_total, *state.bank.short[0][0].shape[1:])
        ).astype(np_dtype)
        state.groups.append(ActiveGroup(frames=frames, k=0))

    if cfg.rollout.renoise_each_step:
        for entry in state.bank.long:
            entry.noise = state.rng.standard_normal(size=entry.clean.shape).astype(np_dtype)
            entry.stored = _noised_copy(entry.clean, entry.noise, sch.t_m_infer, layout)

    short = [f for f, _ in state.bank.short]
    long = [e.stored for e in state.bank.long]
    group_frames = [g.frames for g in state.groups]
    window = np.concatenate([np.stack(short + long)] + group_frames, axis=0)
    t_vec = np.concatenate(
        [
            np.ones(len(short)),
            np.full(len(long), sch.t_m_infer),
            np.repeat([g.k / total for g in state.groups], sch.group_size),
        ]
    )
    td = next(model.parameters()).dtype
    with torch.no_grad():
        velocity = model(
            torch.from_numpy(window[None]).to(td),
            torch.from_numpy(t_vec[None]).to(td),
            torch.from_numpy(state.descriptor[None]).to(td),
        )[0].cpu().numpy()

    dt = 1.0 / total
    n_mem = len(short) + len(long)
    for gi, group in enumerate(state.groups):
        a = n_mem + gi * sch.group_size
        v = velocity[a : a + sch.group_size]
        group.frames = flowmatch.euler_step(group.frames, v.astype(np_dtype), dt)
        group.k += 1

    state.step_count += 1
    emitted = None
    if state.groups and state.groups[0].k == total:
        leader = state.groups.pop(0)
        emitted = leader.frames
        for frame in emitted:
            state.emitted.append(frame.copy())
        update_memory(state.bank, emitted, state.rng, sch.t_m_infer, layout)
    state.trace.append(
        {
            "step": state.step_count,
            "indices": [TIMESTEPS * g.k / total for g in state.groups]
            + ([float(TIMESTEPS)] if emitted is not None else []),
            "window_t": [float(t) for t in t_vec],
            "n_short": len(short),
            "n_long": len(long),
            "emitted_total": len(state.emitted),
        }
    )
    return emitted


@dataclass
class RolloutResult:
    latents: np.ndarray  # (n_frames, C, h, w)
    arrays: dict[str, np.ndarray]  # decoded, dataset-layout arrays
    flow_valid: np.ndarray | None  # unsaturated-pixel mask for the flow field
    trace: list[dict]
    state: RolloutState


def decode_emitted(latents: np.ndarray, cfg: RunConfig) -> tuple[dict, np.ndarray | None]:
    """Decode emitted latent frames back to dataset-layout pixel arrays."""
    order = modality_sequence(cfg.codec)
    c = channels_per_modality(cfg.codec)
    layout = latent_layout(cfg.codec)
    z = JointLatent(
        data=latents.astype(np.float32), layout=layout, modalities=order, patch=cfg.codec.patch
    )
    clips = decode(z, cfg.codec)
    arrays: dict[str, np.ndarray] = {}
    flow_valid = None
    rgb = np.clip(clips["rgb"].data, 0.0, 1.0)
    arrays["rgb"] = rgb.transpose(0, 2, 3, 1)
    if "depth" in clips:
        arrays["depth"] = np.clip(clips["depth"].data.mean(axis=1), 0.0, 1.0)
    if "flow" in clips:
        clipped = clips["flow"]
        clipped = type(clipped)(
            modality="flow", data=np.clip(clipped.data, 0.0, 1.0)
        )
        flow, saturated = rgb_to_flow(clipped, cfg.codec.flow_sigma)
        n, _, h, w = flow.shape
        padded = np.zeros((n + 1, h, w, 2), dtype=np.float32)
        padded[:n] = flow.transpose(0, 2, 3, 1)
        arrays["flow"] = padded
        flow_valid = ~saturated
    if "seg" in clips:
        colors = np.clip(clips["seg"].data, 0.0, 1.0).transpose(0, 2, 3, 1)
        n, h, w, _ = colors.shape
        palette = np.concatenate([np.zeros((1, 3), dtype=np.float32), SEG_PALETTE])
        dists = ((colors[..., None, :] - palette) ** 2).sum(-1)
        nearest = dists.argmin(-1)  # 0 = background
        masks = np.zeros((n, len(SEG_PALETTE), h, w), dtype=np.uint8)
        for i in range(len(SEG_PALETTE)):
            masks[:, i] = nearest == i + 1
        arrays["seg"] = masks
    return arrays, flow_valid


def rollout(
    model: Denoiser,
    context: np.ndarray,
    descriptor: np.ndarray,
    n_frames: int,
    cfg: RunConfig,
    rng: np.random.Generator,
) -> RolloutResult:
    """Stream until n_frames are emitted; decode them for evaluation."""
    if n_frames < 1:
        raise ConfigurationError("n_frames must be >= 1")
    state = init_rollout(context, descriptor, model, cfg, rng)
    sch = cfg.scheduler
    nspg = cfg.rollout.n_steps_per_group
    warmup = (sch.groups - 1) * nspg
    budget = warmup + nspg * (n_frames // sch.group_size + 2) * max(1, sch.groups)
    while len(state.emitted) < n_frames:
        rollout_step(state)
        if state.step_count > budget + sch.groups * nspg:
            raise ConfigurationError("rollout failed to emit the requested frames")
    latents = np.stack(state.emitted[:n_frames])
    arrays, flow_valid = decode_emitted(latents, cfg)
    return RolloutResult(
        latents=latents, arrays=arrays, flow_valid=flow_valid, trace=state.trace, state=state
    )
