"""Figure rendering for CLI reports: contact sheets, curves, sweep charts.

Everything renders headless (Agg) straight to files; animated previews go
through Pillow.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .codec import flow_to_rgb, seg_to_rgb


def _flow_colors(flow: np.ndarray) -> np.ndarray:
    """(F, H, W, 2) pixel-displacement field -> (F, H, W, 3) color frames."""
    clip = flow_to_rgb(flow.transpose(0, 3, 1, 2))
    return clip.data[: len(flow)].transpose(0, 2, 3, 1)


def save_contact_sheet(arrays: dict[str, np.ndarray], path: str, max_cols: int = 8) -> None:
    """Grid of sampled frames, one row per modality."""
    n = len(arrays["rgb"])
    cols = min(max_cols, n)
    picks = np.linspace(0, n - 1, cols).round().astype(int)
    rows: list[tuple[str, np.ndarray]] = [("rgb", arrays["rgb"])]
    if "depth" in arrays:
        rows.append(("depth", arrays["depth"]))
    if "flow" in arrays:
        rows.append(("flow", _flow_colors(arrays["flow"])))
    if "seg" in arrays:
        rows.append(("seg", seg_to_rgb(arrays["seg"]).data.transpose(0, 2, 3, 1)))
    fig, axes = plt.subplots(
        len(rows), cols, figsize=(1.6 * cols, 1.7 * len(rows)), squeeze=False
    )
    for r, (name, data) in enumerate(rows):
        for c, k in enumerate(picks):
            ax = axes[r][c]
            frame = data[k]
            if frame.ndim == 2:
                ax.imshow(frame, cmap="viridis", vmin=0.0, vmax=1.0)
            else:
                ax.imshow(np.clip(frame, 0.0, 1.0))
            ax.set_axis_off()
            if r == 0:
                ax.set_title(f"frame {k}", fontsize=8)
        axes[r][0].set_axis_on()
        axes[r][0].set_ylabel(name, fontsize=9)
        axes[r][0].set_xticks([])
        axes[r][0].set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_curve(losses: list[float], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(1, len(losses) + 1), losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_quality_figure(report: dict, path: str) -> None:
    """Per-frame quality with the two drift windows shaded."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    sharp = report["series"]["sharpness"]
    ax.plot(sharp, label="sharpness", lw=1.0)
    ref = report["series"]["referenced_quality"]
    if ref is not None:
        ax.plot(ref, label="quality vs ground truth", lw=1.0)
    w = int(round(report["drift_window_seconds"] * report["frame_rate"]))
    n = report["n_frames"]
    if n >= 2 * w:
        ax.axvspan(0, w - 1, alpha=0.12, color="green")
        ax.axvspan(n - w, n - 1, alpha=0.12, color="red")
    ax.set_xlabel("frame")
    ax.set_ylabel("quality")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sweep_figure(rows: list[dict], metric_keys: list[str], path: str) -> None:
    """Grouped bars: one cluster per sweep cell, one bar per metric."""
    ok = [r for r in rows if "error" not in r]
    fig, ax = plt.subplots(figsize=(1.2 + 1.4 * max(1, len(ok)), 3.8))
    x = np.arange(len(ok))
    width = 0.8 / max(1, len(metric_keys))
    for j, key in enumerate(metric_keys):
        vals = [r.get(key) if r.get(key) is not None else np.nan for r in ok]
        ax.bar(x + j * width, vals, width, label=key)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels([str(r["cell"]) for r in ok], rotation=20, ha="right", fontsize=8)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_gif(rgb: np.ndarray, path: str, upscale: int = 6, ms_per_frame: int = 250) -> None:
    frames = []
    for frame in rgb:
        img = Image.fromarray((np.clip(frame, 0.0, 1.0) * 255).astype(np.uint8))
        img = img.resize((img.width * upscale, img.height * upscale), Image.NEAREST)
        frames.append(img)
    frames[0].save(
        path, save_all=True, append_images=frames[1:], duration=ms_per_frame, loop=0
    )
