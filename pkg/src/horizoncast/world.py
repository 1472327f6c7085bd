"""Synthetic 2D world: moving shapes over a background at distinct depths.

Every rendered quantity (RGB, depth, optical flow, segmentation) comes from
the same trajectory arithmetic, so the modalities are mutually consistent by
construction and downstream claims can be checked against exact ground truth.
Positions and velocities are integers and rasterization is hard-edged, which
makes warp-consistency checks exact (zero MSE, not "small").
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, WorldConfig, descriptor_dim
from .errors import ConfigurationError, DataError, FormatError

SHAPES = ("disk", "rectangle", "triangle")


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: tuple[float, float, float]
    size: int
    depth: float
    # centers[k] is the integer (cx, cy) at frame k; piecewise linear with
    # billiard bounces off the frame edges.
    centers: np.ndarray = field(repr=False)
    velocity: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    width: int
    height: int
    n_objects: int
    objects: tuple[ObjectSpec, ...]
    background: tuple[float, float, float]
    descriptor: np.ndarray
    clip_len: int
    mask_budget: int


@dataclass(frozen=True)
class FrameBundle:
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32, raw scene depth, background = 1.0
    flow: np.ndarray  # (H, W, 2) float32, (u, v) displacement to next frame
    seg: np.ndarray  # (K, H, W) uint8 binary masks, pairwise disjoint


def _shape_extents(shape: str, size: int) -> tuple[int, int, int, int]:
    """Half-extents (left, right, top, bottom) of the mask around its center."""
    if shape == "disk":
        r = size // 2
        return r, r, r, r
    if shape == "rectangle":
        lo = size // 2
        hi = size - lo - 1
        return lo, hi, lo, hi
    if shape == "triangle":
        half_w = (size - 1) // 2
        top = size // 2
        return half_w, half_w, top, size - 1 - top
    raise ConfigurationError(f"unknown shape '{shape}'")


def _shape_mask(shape: str, size: int, cx: int, cy: int, width: int, height: int) -> np.ndarray:
    """Rasterize a hard-edged mask. Depends only on integer offsets from the
    center, so translating the center translates the mask exactly."""
    ys, xs = np.mgrid[0:height, 0:width]
    dx = xs - cx
    dy = ys - cy
    if shape == "disk":
        r = size / 2.0
        return (dx * dx + dy * dy) <= r * r
    if shape == "rectangle":
        lo = size // 2
        return (dx >= -lo) & (dx < size - lo) & (dy >= -lo) & (dy < size - lo)
    if shape == "triangle":
        top = size // 2
        row = dy + top  # 0 at the apex row
        return (row >= 0) & (row < size) & (np.abs(dx) <= row // 2)
    raise ConfigurationError(f"unknown shape '{shape}'")


def _bounce_path(start: tuple[int, int], vel: tuple[int, int], n_frames: int,
                 x_range: tuple[int, int], y_range: tuple[int, int]) -> np.ndarray:
    """Integer billiard trajectory of a center point, one row per frame."""
    centers = np.empty((n_frames, 2), dtype=np.int64)
    cx, cy = start
    vx, vy = vel
    for k in range(n_frames):
        centers[k] = (cx, cy)
        for axis, (lo, hi) in enumerate((x_range, y_range)):
            v = (vx, vy)[axis]
            c = (cx, cy)[axis] + v
            while c < lo or c > hi:
                if c < lo:
                    c = 2 * lo - c
                else:
                    c = 2 * hi - c
                v = -v
            if axis == 0:
                cx, vx = c, v
            else:
                cy, vy = c, v
    return centers


def gen_scene(seed: int, cfg: WorldConfig) -> SceneSpec:
    """Sample a scene deterministically from (seed, cfg).

    Objects get distinct depths (strict z-order), integer spawn positions that
    keep them fully inside the frame, and integer velocities capped at
    cfg.max_speed. The descriptor packs (x, y, vx, vy, size, depth) per object
    slot, normalized into [-1, 1] and zero-padded to the slot budget.
    """
    if cfg.width < 8 or cfg.height < 8:
        raise ConfigurationError("world dimensions must be at least 8x8")
    if cfg.n_objects < 0:
        raise ConfigurationError("n_objects must be >= 0")
    if cfg.n_objects > cfg.mask_budget:
        raise ConfigurationError(
            f"n_objects ({cfg.n_objects}) exceeds the mask budget ({cfg.mask_budget})"
        )
    rng = np.random.default_rng(np.random.PCG64(seed))
    background = tuple(rng.uniform(0.0, 1.0, size=3).astype(np.float64))
    # Distinct depths in (0, 1), background sits at 1.0.
    n = cfg.n_objects
    depth_values = (np.arange(n) + 1.0) / (n + 1.0)
    depth_order = rng.permutation(n)
    objects = []
    for i in range(n):
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        size = int(rng.integers(cfg.size_min, cfg.size_max + 1))
        color = tuple(rng.uniform(0.0, 1.0, size=3))
        left, right, top, bottom = _shape_extents(shape, size)
        x_range = (left, cfg.width - 1 - right)
        y_range = (top, cfg.height - 1 - bottom)
        if x_range[0] > x_range[1] or y_range[0] > y_range[1]:
            raise ConfigurationError(
                f"object size {size} does not fit a {cfg.width}x{cfg.height} frame"
            )
        start = (
            int(rng.integers(x_range[0], x_range[1] + 1)),
            int(rng.integers(y_range[0], y_range[1] + 1)),
        )
        if cfg.static:
            vel = (0, 0)
        else:
            vel = (
                int(rng.integers(-cfg.max_speed, cfg.max_speed + 1)),
                int(rng.integers(-cfg.max_speed, cfg.max_speed + 1)),
            )
        centers = _bounce_path(start, vel, cfg.clip_len, x_range, y_range)
        objects.append(ObjectSpec(
            shape=shape,
            color=color,
            size=size,
            depth=float(depth_values[depth_order[i]]),
            centers=centers,
            velocity=vel,
        ))
    descriptor = _descriptor(objects, cfg)
    return SceneSpec(
        seed=seed,
        width=cfg.width,
        height=cfg.height,
        n_objects=n,
        objects=tuple(objects),
        background=background,
        descriptor=descriptor,
        clip_len=cfg.clip_len,
        mask_budget=cfg.mask_budget,
    )


def _descriptor(objects: list[ObjectSpec], cfg: WorldConfig) -> np.ndarray:
    out = np.zeros(6 * cfg.max_objects, dtype=np.float32)
    for i, obj in enumerate(objects[: cfg.max_objects]):
        cx, cy = obj.centers[0]
        out[6 * i : 6 * i + 6] = (
            2.0 * cx / (cfg.width - 1) - 1.0,
            2.0 * cy / (cfg.height - 1) - 1.0,
            obj.velocity[0] / max(cfg.max_speed, 1),
            obj.velocity[1] / max(cfg.max_speed, 1),
            obj.size / cfg.size_max,
            obj.depth,
        )
    return out


def render_frame(scene: SceneSpec, k: int) -> FrameBundle:
    """Render one frame with exact depth, flow, and segmentation.

    The visible object at a pixel is the one with minimum depth among the
    covering objects; flow at a pixel is the displacement of its visible
    object to the next frame (zero on background and on the final frame).
    """
    if not 0 <= k < scene.clip_len:
        raise IndexError(f"frame index {k} outside [0, {scene.clip_len})")
    h, w = scene.height, scene.width
    rgb = np.empty((h, w, 3), dtype=np.float32)
    rgb[:] = np.asarray(scene.background, dtype=np.float32)
    depth = np.full((h, w), 1.0, dtype=np.float32)
    flow = np.zeros((h, w, 2), dtype=np.float32)
    seg = np.zeros((scene.mask_budget, h, w), dtype=np.uint8)
    owner = np.full((h, w), -1, dtype=np.int64)
    for i, obj in enumerate(scene.objects):
        cx, cy = obj.centers[k]
        mask = _shape_mask(obj.shape, obj.size, int(cx), int(cy), w, h)
        visible = mask & (obj.depth < depth)
        rgb[visible] = np.asarray(obj.color, dtype=np.float32)
        depth[visible] = obj.depth
        owner[visible] = i
    for i, obj in enumerate(scene.objects):
        visible = owner == i
        if k + 1 < scene.clip_len:
            step = obj.centers[k + 1] - obj.centers[k]
            flow[visible] = step.astype(np.float32)
        seg[i][visible] = 1
    return FrameBundle(rgb=rgb, depth=depth, flow=flow, seg=seg)


def render_clip(scene: SceneSpec, n_frames: int) -> list[FrameBundle]:
    if n_frames < 1:
        raise ValueError("frame count must be >= 1")
    frames = [render_frame(scene, k) for k in range(n_frames)]
    last = frames[-1]
    if n_frames == scene.clip_len:
        return frames
    # Rendering stopped short of the trajectory: the final emitted frame has a
    # successor in the scene, but by the padding convention its flow is zero.
    frames[-1] = FrameBundle(
        rgb=last.rgb, depth=last.depth, flow=np.zeros_like(last.flow), seg=last.seg
    )
    return frames


# ---------------------------------------------------------------------------
# Dataset I/O: one subdirectory per clip, raw little-endian arrays plus a
# JSON sidecar carrying dimensions and the scene descriptor.
# ---------------------------------------------------------------------------

def clip_arrays(frames: list[FrameBundle]) -> dict[str, np.ndarray]:
    return {
        "rgb": np.stack([f.rgb for f in frames]),
        "depth": np.stack([f.depth for f in frames]),
        "flow": np.stack([f.flow for f in frames]),
        "seg": np.stack([f.seg for f in frames]),
    }


def write_arrays(clip_dir: str, arrays: dict[str, np.ndarray], meta_fields: dict) -> None:
    """Write modality arrays in the clip directory format (raw little-endian
    files, shapes and extra fields in meta.json)."""
    os.makedirs(clip_dir, exist_ok=True)
    meta = {"format_version": "1", **meta_fields, "shapes": {}}
    for name, arr in arrays.items():
        dtype = "u1" if arr.dtype == np.uint8 else "<f4"
        ext = "u8" if dtype == "u1" else "f32"
        arr.astype(dtype).tofile(os.path.join(clip_dir, f"{name}.{ext}"))
        meta["shapes"][name] = list(arr.shape)
    with open(os.path.join(clip_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


def save_clip(clip_dir: str, scene: SceneSpec, frames: list[FrameBundle]) -> None:
    write_arrays(
        clip_dir,
        clip_arrays(frames),
        {
            "scene_seed": scene.seed,
            "width": scene.width,
            "height": scene.height,
            "n_frames": len(frames),
            "descriptor": [float(v) for v in scene.descriptor],
        },
    )


def load_clip(clip_dir: str) -> tuple[dict[str, np.ndarray], dict]:
    meta_path = os.path.join(clip_dir, "meta.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"no clip at {clip_dir} (missing meta.json)") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path} is not valid JSON") from exc
    if meta.get("format_version") != "1":
        raise FormatError(
            f"{meta_path}: unsupported format version {meta.get('format_version')!r}"
        )
    arrays = {}
    for name, shape in meta["shapes"].items():
        is_u8 = os.path.exists(os.path.join(clip_dir, f"{name}.u8"))
        dtype = np.uint8 if is_u8 else np.dtype("<f4")
        ext = "u8" if is_u8 else "f32"
        path = os.path.join(clip_dir, f"{name}.{ext}")
        try:
            flat = np.fromfile(path, dtype=dtype)
        except FileNotFoundError as exc:
            raise DataError(f"clip {clip_dir} is missing {name}.{ext}") from exc
        expected = int(np.prod(shape))
        if flat.size != expected:
            raise FormatError(
                f"{path}: expected {expected} elements for shape {shape}, got {flat.size}"
            )
        arrays[name] = flat.reshape(shape).astype(
            np.float32 if dtype != np.uint8 else np.uint8
        )
    return arrays, meta


def generate_dataset(cfg: RunConfig, out_dir: str) -> list[str]:
    """Render cfg.world.n_clips clips (seeds seed, seed+1, ...) to out_dir."""
    clip_dirs = []
    for i in range(cfg.world.n_clips):
        scene = gen_scene(cfg.seed + i, cfg.world)
        frames = render_clip(scene, cfg.world.clip_len)
        clip_dir = os.path.join(out_dir, f"clip_{i:04d}")
        save_clip(clip_dir, scene, frames)
        clip_dirs.append(clip_dir)
    return clip_dirs


def list_clips(data_dir: str) -> list[str]:
    if not os.path.isdir(data_dir):
        raise DataError(f"dataset directory {data_dir} does not exist")
    dirs = sorted(
        os.path.join(data_dir, d)
        for d in os.listdir(data_dir)
        if d.startswith("clip_") and os.path.isdir(os.path.join(data_dir, d))
    )
    if not dirs:
        raise DataError(f"dataset directory {data_dir} contains no clips")
    return dirs


def scene_descriptor_dim(cfg: RunConfig) -> int:
    return descriptor_dim(cfg)
