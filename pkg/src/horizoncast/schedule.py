"""Group-wise noise schedules and the memory-bank noise policy.

Training draws a staircase of noise indices: one base index i uniform in
[N - N/G, N) and group k at i - k*N/G, with N = 1000 training timesteps. The
index-to-noise-level curve is linear (t = index/N) and injectable so an
alternative curve can be swapped without touching callers.

At inference the same staircase advances by N/(G*n_steps_per_group) per
denoising step. Indices are kept as integer step counters underneath, so a
group completes at exactly index 1000 — the streaming state machine never has
to reason about float tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import SchedulerConfig
from .errors import ConfigurationError, StateError

TIMESTEPS = 1000


def linear_index_curve(index):
    """Default noise curve: t = index / 1000, so t(0)=0 and t(1000)=1."""
    return np.asarray(index, dtype=np.float64) / TIMESTEPS


def index_to_t(index, curve: Callable = linear_index_curve):
    idx = np.asarray(index, dtype=np.float64)
    if np.any(idx < 0) or np.any(idx > TIMESTEPS):
        raise ValueError(f"noise index {index} outside [0, {TIMESTEPS}]")
    t = curve(idx)
    return float(t) if np.isscalar(index) or np.ndim(index) == 0 else t


@dataclass(frozen=True)
class GroupSchedule:
    groups: int
    group_size: int
    indices: np.ndarray  # (G,) real-valued noise indices, decreasing
    t_values: np.ndarray  # (G,) noise levels via the curve
    base_index: float | None = None  # the sampled i, when drawn by Eq.-style sampling
    # Inference-side bookkeeping: integer step counters per group such that
    # index = TIMESTEPS * steps / (G * n_steps_per_group). None for training
    # schedules, which are sampled continuously.
    steps: tuple[int, ...] | None = None
    n_steps_per_group: int | None = None

    @property
    def complete(self) -> np.ndarray:
        return self.indices >= TIMESTEPS


def sample_group_schedule(
    groups: int,
    rng: np.random.Generator,
    group_size: int = 1,
    curve: Callable = linear_index_curve,
) -> GroupSchedule:
    """Draw a training staircase: i ~ U(N - N/G, N), group k at i - k*N/G.

    The spacing N/G is exact by construction; every index lands in [0, N).
    """
    if groups < 1:
        raise ConfigurationError(f"group count must be >= 1, got {groups}")
    span = TIMESTEPS / groups
    i = float(rng.uniform(TIMESTEPS - span, TIMESTEPS))
    indices = i - np.arange(groups, dtype=np.float64) * span
    return GroupSchedule(
        groups=groups,
        group_size=group_size,
        indices=indices,
        t_values=curve(indices),
        base_index=i,
    )


def inference_schedule(
    groups: int,
    group_size: int,
    steps: tuple[int, ...],
    n_steps_per_group: int,
    curve: Callable = linear_index_curve,
) -> GroupSchedule:
    """Build a staircase from integer per-group step counters.

    A counter of k means the group has taken k of its G*n_steps_per_group
    denoising steps; the full budget lands the index at exactly 1000.
    """
    if n_steps_per_group < 1:
        raise ConfigurationError("n_steps_per_group must be >= 1")
    total = groups * n_steps_per_group
    if any(k < 0 or k > total for k in steps):
        raise ConfigurationError(f"step counters {steps} outside [0, {total}]")
    indices = np.array([TIMESTEPS * k / total for k in steps], dtype=np.float64)
    return GroupSchedule(
        groups=groups,
        group_size=group_size,
        indices=indices,
        t_values=curve(indices),
        steps=tuple(steps),
        n_steps_per_group=n_steps_per_group,
    )


def advance_inference_schedule(
    schedule: GroupSchedule,
    n_steps: int,
    n_steps_per_group: int | None = None,
    curve: Callable = linear_index_curve,
) -> GroupSchedule:
    """Advance every group by n_steps denoising steps.

    Each step raises each group's index by 1000/(G*n_steps_per_group), so a
    fresh group needs G*n_steps_per_group steps in total. A schedule carrying
    a completed group (index exactly 1000) cannot advance further — the
    caller must emit and retire that group first.
    """
    nspg = n_steps_per_group if n_steps_per_group is not None else schedule.n_steps_per_group
    if nspg is None or nspg < 1:
        raise ConfigurationError("n_steps_per_group must be >= 1")
    if schedule.steps is not None:
        counters = list(schedule.steps)
    else:
        # Adopt integer counters for a schedule that was built from indices.
        total = schedule.groups * nspg
        counters = []
        for idx in schedule.indices:
            k = round(idx * total / TIMESTEPS)
            if not np.isclose(TIMESTEPS * k / total, idx, rtol=0, atol=1e-9):
                raise ConfigurationError(
                    f"index {idx} is not on the step grid of 1000/{total}"
                )
            counters.append(int(k))
    total = schedule.groups * nspg
    for _ in range(n_steps):
        if any(k >= total for k in counters):
            raise StateError("schedule has a completed group; emit it before advancing")
        counters = [k + 1 for k in counters]
    return inference_schedule(schedule.groups, schedule.group_size, tuple(counters), nspg, curve)


# ---------------------------------------------------------------------------
# Memory-bank noise policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BankNoisePolicy:
    short_term: int
    long_term: int
    modalities: tuple[str, ...]
    t_m_train: tuple[float, float] = (0.7, 0.9)
    t_m_infer: float = 0.8

    @classmethod
    def from_config(cls, cfg: SchedulerConfig, modalities: tuple[str, ...]) -> "BankNoisePolicy":
        return cls(
            short_term=cfg.short_term,
            long_term=cfg.long_term,
            modalities=modalities,
            t_m_train=cfg.t_m_train,
            t_m_infer=cfg.t_m_infer,
        )


@dataclass(frozen=True)
class WindowNoise:
    """Noise assignment for one training/inference window.

    t_modality is (F, M) over the policy's modality order; frame_t collapses
    that to the single per-frame conditioning scalar the denoiser embeds (the
    rgb value — depth deviates from it only on long-term memory frames, where
    it is pinned clean).
    """

    t_modality: np.ndarray
    mask: np.ndarray
    frame_t: np.ndarray
    t_m: float
    layout: tuple[str, ...] = field(default=())

    def channel_t(self, channel_layout: dict[str, tuple[int, int]], c_total: int) -> np.ndarray:
        """Expand (F, M) noise levels to per-channel (F, c_total)."""
        out = np.empty((self.t_modality.shape[0], c_total), dtype=np.float64)
        for j, m in enumerate(self.layout):
            a, b = channel_layout[m]
            out[:, a:b] = self.t_modality[:, j : j + 1]
        return out


def draw_t_m(policy: BankNoisePolicy, phase: str, rng: np.random.Generator | None) -> float:
    if phase == "train":
        if rng is None:
            raise ConfigurationError("training-phase noise assignment needs an rng")
        lo, hi = policy.t_m_train
        return float(rng.uniform(lo, hi))
    if phase == "infer":
        return policy.t_m_infer
    raise ConfigurationError(f"unknown phase '{phase}'")


def memory_noise(policy: BankNoisePolicy, t_m: float) -> np.ndarray:
    """Per-frame-per-modality t for the S+L memory slots.

    Short-term frames are clean (t=1) in every modality. Long-term frames
    keep depth clean and carry t_m on everything else.
    """
    n_mem = policy.short_term + policy.long_term
    t = np.empty((n_mem, len(policy.modalities)), dtype=np.float64)
    t[: policy.short_term] = 1.0
    for j, m in enumerate(policy.modalities):
        t[policy.short_term :, j] = 1.0 if m == "depth" else t_m
    return t


def window_noise_from_pred_t(
    pred_t: np.ndarray,
    policy: BankNoisePolicy,
    phase: str,
    rng: np.random.Generator | None = None,
    t_m: float | None = None,
) -> WindowNoise:
    """Assemble a full window's noise from arbitrary prediction-frame levels.

    Window slot order is [short-term | long-term | prediction frames]; memory
    frames get policy noise and loss weight 0, prediction frames get pred_t
    across all modalities and loss weight 1.
    """
    if t_m is None:
        t_m = draw_t_m(policy, phase, rng)
    pred_t = np.asarray(pred_t, dtype=np.float64)
    n_mem = policy.short_term + policy.long_term
    n = n_mem + pred_t.shape[0]
    t = np.empty((n, len(policy.modalities)), dtype=np.float64)
    t[:n_mem] = memory_noise(policy, t_m)
    t[n_mem:] = pred_t[:, None]
    mask = np.zeros(n, dtype=np.float64)
    mask[n_mem:] = 1.0
    rgb_col = policy.modalities.index("rgb")
    return WindowNoise(
        t_modality=t,
        mask=mask,
        frame_t=t[:, rgb_col].copy(),
        t_m=t_m,
        layout=policy.modalities,
    )


def assign_window_noise(
    schedule: GroupSchedule,
    policy: BankNoisePolicy,
    phase: str,
    rng: np.random.Generator | None = None,
    t_m: float | None = None,
) -> WindowNoise:
    """Compose the memory policy with a group staircase over the window.

    Prediction frame j belongs to group j // group_size and shares that
    group's noise level across all modalities.
    """
    pred_t = np.repeat(schedule.t_values, schedule.group_size)
    noise = window_noise_from_pred_t(pred_t, policy, phase, rng, t_m)
    expected = policy.short_term + policy.long_term + schedule.groups * schedule.group_size
    if noise.t_modality.shape[0] != expected:
        raise ValueError("window length mismatch")
    return noise
