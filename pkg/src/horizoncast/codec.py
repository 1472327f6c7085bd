"""Perceptual encodings and the invertible latent codec.

Depth, optical flow, and segmentation are mapped into three-channel clips in
[0, 1] so they can ride through the same latent pathway as RGB. The latent
map itself is a deterministic space-to-depth rearrangement — a permutation,
hence exactly invertible — rather than a learned autoencoder, which keeps
pixel-space statements (drift, sharpness, warp error) exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .config import CodecConfig
from .errors import ConfigurationError, FormatError

MODALITY_ORDER = ("rgb", "depth", "flow", "seg")

# Fixed palette for segmentation masks: index 0 first, background black.
SEG_PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.5, 0.0],
        [0.5, 0.0, 1.0],
    ],
    dtype=np.float32,
)


@dataclass(frozen=True)
class ModalityClip:
    modality: str
    data: np.ndarray  # (F, 3, H, W) float32 in [0, 1]
    degenerate: bool = False


@dataclass(frozen=True)
class JointLatent:
    data: np.ndarray  # (f, c_total, h, w) float32
    layout: dict[str, tuple[int, int]] = field(repr=False)
    modalities: tuple[str, ...] = ()
    patch: int = 2


def modality_sequence(cfg: CodecConfig) -> tuple[str, ...]:
    """Active modalities in the fixed channel-concatenation order."""
    return tuple(m for m in MODALITY_ORDER if m in cfg.modalities)


def normalize_depth(raw: np.ndarray) -> ModalityClip:
    """Min-max normalize a depth clip to [0, 1] and triple the channel.

    Accepts (F, H, W) or (F, 1, H, W). A constant clip has no dynamic range;
    it maps to all 0.5 and is flagged degenerate rather than erroring.
    """
    d = np.asarray(raw, dtype=np.float64)
    if d.ndim == 4:
        d = d[:, 0]
    if not np.all(np.isfinite(d)):
        raise ConfigurationError("depth clip contains non-finite values")
    lo, hi = float(d.min()), float(d.max())
    degenerate = hi == lo
    norm = np.full_like(d, 0.5) if degenerate else (d - lo) / (hi - lo)
    data = np.repeat(norm[:, None].astype(np.float32), 3, axis=1)
    return ModalityClip(modality="depth", data=data, degenerate=degenerate)


def align_depth_scale_shift(
    frames: np.ndarray, reference: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Least-squares affine alignment of per-frame relative depth to a reference.

    For each frame d, solves min_{a,b} sum((a*d + b - ref)^2) in closed form
    (normal equations) and returns (aligned frames, (a, b) per frame,
    degenerate flags). A zero-variance frame leaves the slope undefined; it
    gets (a, b) = (0, mean(ref)) and a degenerate flag.
    """
    frames = np.asarray(frames, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.shape[-2:] != reference.shape:
        raise ConfigurationError(
            f"frame shape {frames.shape[-2:]} does not match reference {reference.shape}"
        )
    n = frames.shape[0]
    aligned = np.empty_like(frames)
    coeffs = np.empty((n, 2))
    degenerate = np.zeros(n, dtype=bool)
    ref_mean = reference.mean()
    for i, d in enumerate(frames):
        var = d.var()
        if var == 0.0:
            a, b = 0.0, ref_mean
            degenerate[i] = True
        else:
            a = ((d - d.mean()) * (reference - ref_mean)).mean() / var
            b = ref_mean - a * d.mean()
        coeffs[i] = (a, b)
        aligned[i] = a * d + b
    return aligned, coeffs, degenerate


def flow_to_rgb(flow: np.ndarray, sigma: float = 0.15) -> ModalityClip:
    """Encode a flow field as colors: direction picks the hue, magnitude the
    opacity over white.

    Takes (F-1, 2, H, W) displacements and returns F frames — a neutral
    all-white zero frame is appended so flow aligns with the video length.
    Opacity is m = min(1, |uv| / (sigma * sqrt(H^2 + W^2))), so zero flow is
    pure white and magnitudes at or beyond the clamp saturate at the full
    wheel color.
    """
    if sigma <= 0:
        raise ConfigurationError("flow sigma must be > 0")
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ConfigurationError(f"expected (F-1, 2, H, W) flow, got {flow.shape}")
    n, _, h, w = flow.shape
    u, v = flow[:, 0], flow[:, 1]
    mag = np.sqrt(u * u + v * v)
    m = np.minimum(1.0, mag / (sigma * np.hypot(h, w)))
    alpha = np.arctan2(v, u)
    hue = ((alpha + np.pi) / (2.0 * np.pi)) % 1.0
    hsv = np.stack([hue, np.ones_like(hue), np.ones_like(hue)], axis=-1)
    wheel = hsv_to_rgb(hsv)  # (F-1, H, W, 3)
    colors = (1.0 - m[..., None]) + m[..., None] * wheel
    out = np.empty((n + 1, 3, h, w), dtype=np.float32)
    out[:n] = colors.transpose(0, 3, 1, 2)
    out[n] = 1.0
    return ModalityClip(modality="flow", data=out)


def rgb_to_flow(clip: ModalityClip, sigma: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """Invert flow_to_rgb: recover (u, v) per pixel plus a saturation mask.

    The white share of a pixel is its minimum channel, so m = 1 - min(rgb)
    and the wheel color is (rgb - (1-m)) / m. Direction always comes back;
    magnitude is unrecoverable where m saturated at 1, and those pixels are
    marked in the returned mask. The appended final frame is dropped.
    """
    data = np.asarray(clip.data, dtype=np.float64)
    frames = data[:-1]  # (F-1, 3, H, W)
    n, _, h, w = frames.shape
    rgb = frames.transpose(0, 2, 3, 1)
    m = 1.0 - rgb.min(axis=-1)
    saturated = m >= 1.0
    flow = np.zeros((n, 2, h, w))
    active = m > 0.0
    wheel = np.zeros_like(rgb)
    np.divide(rgb - (1.0 - m)[..., None], m[..., None], out=wheel, where=active[..., None])
    hue = rgb_to_hsv(np.clip(wheel, 0.0, 1.0))[..., 0]
    alpha = hue * 2.0 * np.pi - np.pi
    mag = m * sigma * np.hypot(h, w)
    flow[:, 0] = np.where(active, mag * np.cos(alpha), 0.0)
    flow[:, 1] = np.where(active, mag * np.sin(alpha), 0.0)
    return flow, saturated


def seg_to_rgb(masks: np.ndarray) -> ModalityClip:
    """Paint binary masks with a fixed palette over a black background.

    Overlaps resolve to the lowest mask index. The palette bounds the mask
    budget at 8.
    """
    masks = np.asarray(masks)
    if masks.ndim != 4:
        raise ConfigurationError(f"expected (F, K, H, W) masks, got {masks.shape}")
    n, k, h, w = masks.shape
    if k > len(SEG_PALETTE):
        raise ConfigurationError(f"{k} masks exceed the palette size {len(SEG_PALETTE)}")
    out = np.zeros((n, 3, h, w), dtype=np.float32)
    claimed = np.zeros((n, h, w), dtype=bool)
    for i in range(k):
        on = (masks[:, i] > 0) & ~claimed
        for c in range(3):
            out[:, c][on] = SEG_PALETTE[i, c]
        claimed |= on
    return ModalityClip(modality="seg", data=out)


# ---------------------------------------------------------------------------
# Latent codec: space-to-depth rearrangement, exactly invertible.
# ---------------------------------------------------------------------------

def channels_per_modality(cfg: CodecConfig) -> int:
    return 3 * cfg.patch * cfg.patch


def latent_layout(cfg: CodecConfig) -> dict[str, tuple[int, int]]:
    c = channels_per_modality(cfg)
    layout = {}
    for i, m in enumerate(modality_sequence(cfg)):
        layout[m] = (i * c, (i + 1) * c)
    return layout


def encode(clips: dict[str, ModalityClip], cfg: CodecConfig) -> JointLatent:
    """Patchify each modality clip and concatenate along channels.

    Space-to-depth with patch p turns (F, 3, H, W) into (F, 3p^2, H/p, W/p);
    modalities stack in the fixed order, giving one joint latent per clip.
    """
    order = modality_sequence(cfg)
    missing = [m for m in order if m not in clips]
    if missing:
        raise ConfigurationError(f"missing modality clip(s) {missing}")
    p = cfg.patch
    parts = []
    shape = None
    for m in order:
        data = clips[m].data
        if shape is None:
            shape = data.shape
        elif data.shape != shape:
            raise ConfigurationError(
                f"modality '{m}' shape {data.shape} differs from {shape}"
            )
        f, c, h, w = data.shape
        if h % p or w % p:
            raise ConfigurationError(f"frame size {h}x{w} not divisible by patch {p}")
        x = data.reshape(f, c, h // p, p, w // p, p)
        x = x.transpose(0, 1, 3, 5, 2, 4).reshape(f, c * p * p, h // p, w // p)
        parts.append(x)
    joint = np.concatenate(parts, axis=1).astype(np.float32)
    return JointLatent(data=joint, layout=latent_layout(cfg), modalities=order, patch=p)


def decode(z: JointLatent, cfg: CodecConfig) -> dict[str, ModalityClip]:
    """Exact inverse of encode."""
    if z.layout != latent_layout(cfg) or z.patch != cfg.patch:
        raise FormatError("latent channel layout does not match the codec config")
    p = cfg.patch
    f, c_total, h, w = z.data.shape
    if c_total != channels_per_modality(cfg) * len(z.modalities):
        raise FormatError(
            f"latent has {c_total} channels, layout expects "
            f"{channels_per_modality(cfg) * len(z.modalities)}"
        )
    clips = {}
    for m, (start, stop) in z.layout.items():
        x = z.data[:, start:stop]
        c = (stop - start) // (p * p)
        x = x.reshape(f, c, p, p, h, w)
        x = x.transpose(0, 1, 4, 2, 5, 3).reshape(f, c, h * p, w * p)
        clips[m] = ModalityClip(modality=m, data=np.ascontiguousarray(x))
    return clips


def encode_clip_arrays(arrays: dict[str, np.ndarray], cfg: CodecConfig) -> JointLatent:
    """Build modality clips from raw world arrays and encode them jointly."""
    clips: dict[str, ModalityClip] = {}
    order = modality_sequence(cfg)
    if "rgb" in order:
        clips["rgb"] = ModalityClip(
            modality="rgb",
            data=np.ascontiguousarray(arrays["rgb"].transpose(0, 3, 1, 2)).astype(np.float32),
        )
    if "depth" in order:
        clips["depth"] = normalize_depth(arrays["depth"])
    if "flow" in order:
        raw = arrays["flow"][:-1].transpose(0, 3, 1, 2)  # drop the padded last frame
        clips["flow"] = flow_to_rgb(raw, cfg.flow_sigma)
    if "seg" in order:
        clips["seg"] = seg_to_rgb(arrays["seg"])
    return encode(clips, cfg)


def save_latent(path_dir: str, z: JointLatent) -> None:
    os.makedirs(path_dir, exist_ok=True)
    z.data.astype("<f4").tofile(os.path.join(path_dir, "latent.f32"))
    meta = {
        "format_version": "1",
        "modalities": list(z.modalities),
        "c_per_modality": (z.layout[z.modalities[0]][1] - z.layout[z.modalities[0]][0]),
        "patch": z.patch,
        "shape": list(z.data.shape),
    }
    with open(os.path.join(path_dir, "latent_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


def load_latent(path_dir: str) -> JointLatent:
    meta_path = os.path.join(path_dir, "latent_meta.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"no latent cache at {path_dir}") from exc
    if meta.get("format_version") != "1":
        raise FormatError(f"{meta_path}: unsupported format version")
    shape = tuple(meta["shape"])
    flat = np.fromfile(os.path.join(path_dir, "latent.f32"), dtype="<f4")
    if flat.size != int(np.prod(shape)):
        raise FormatError(f"latent.f32 size does not match shape {shape}")
    modalities = tuple(meta["modalities"])
    c = int(meta["c_per_modality"])
    layout = {m: (i * c, (i + 1) * c) for i, m in enumerate(modalities)}
    return JointLatent(
        data=flat.reshape(shape).astype(np.float32),
        layout=layout,
        modalities=modalities,
        patch=int(meta["patch"]),
    )
