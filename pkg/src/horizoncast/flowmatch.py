"""Flow-matching primitives: interpolant, velocity target, masked loss, Euler.

Convention: t = 1 is clean data, t = 0 is pure noise, and the path between
them is the straight line x_t = t*x1 + (1-t)*x0 with constant velocity
v = x1 - x0. Noise levels are per frame (optionally per channel, which is how
the memory bank noises rgb/flow but not depth within one frame).

These functions are written against the array protocol shared by numpy and
torch (shape/reshape/arithmetic/sum), so the same code path serves both the
oracle tests and the differentiable training graph.
"""

from __future__ import annotations


def _broadcast_t(t, ref):
    """Reshape a per-frame (..., F) or per-channel (..., F, C) noise-level
    array so it broadcasts against a (..., F, C, H, W) latent."""
    if t.ndim == ref.ndim:
        return t
    if t.ndim == ref.ndim - 3:  # per frame
        return t[..., None, None, None]
    if t.ndim == ref.ndim - 2:  # per frame, per channel
        return t[..., None, None]
    raise ValueError(
        f"noise levels of shape {tuple(t.shape)} do not broadcast against "
        f"latent of shape {tuple(ref.shape)}"
    )


def interpolate(x1, x0, t):
    """x_t = t*x1 + (1-t)*x0, with t per frame or per (frame, channel)."""
    if x1.shape != x0.shape:
        raise ValueError(f"shape mismatch: x1 {tuple(x1.shape)} vs x0 {tuple(x0.shape)}")
    tb = _broadcast_t(t, x1)
    return tb * x1 + (1.0 - tb) * x0


def velocity_target(x1, x0):
    """The constant velocity of the linear path, v = x1 - x0."""
    if x1.shape != x0.shape:
        raise ValueError(f"shape mismatch: x1 {tuple(x1.shape)} vs x0 {tuple(x0.shape)}")
    return x1 - x0


def joint_loss(pred, target, mask):
    """Masked mean squared error over all modality channels jointly.

    `mask` has one weight per frame (1 = prediction frame, 0 = memory frame,
    leading batch dimensions allowed). The sum of squared errors is divided by
    the number of elements in unmasked frames — not the total count — so
    growing the memory bank does not rescale the gradient.
    """
    if pred.shape != target.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )
    if tuple(mask.shape) != tuple(pred.shape[:-3]):
        raise ValueError(
            f"mask shape {tuple(mask.shape)} does not match frame dims "
            f"{tuple(pred.shape[:-3])}"
        )
    n_frames = mask.sum()
    if float(n_frames) == 0.0:
        raise ValueError("loss mask is all zero; at least one prediction frame required")
    per_frame = 1
    for s in pred.shape[-3:]:
        per_frame *= s
    err = (pred - target) ** 2
    return (err * mask[..., None, None, None]).sum() / (n_frames * per_frame)


def euler_step(z, u, dt: float):
    """One explicit Euler step along the velocity field: z + dt*u."""
    if z.shape != u.shape:
        raise ValueError(f"shape mismatch: z {tuple(z.shape)} vs u {tuple(u.shape)}")
    if dt <= 0:
        raise ValueError(f"Euler step size must be positive, got {dt}")
    return z + dt * u


def sample_uniform_window_t(rng, n_frames: int):
    """One t ~ U(0,1) broadcast to all prediction frames (the occasional
    constant-level training step that keeps the whole-window case covered)."""
    import numpy as np

    t = float(rng.uniform(0.0, 1.0))
    return np.full(n_frames, t, dtype=np.float64)
