"""Rollout quality metrics: drift, consistency, per-frame quality, flow error.

The central number is the drift delta: the absolute difference between mean
frame quality over the first and last windows of a rollout. Quality is PSNR
against ground truth (capped at 60 dB and scaled to [0,1]) when a reference
exists, and a normalized Laplacian-sharpness proxy when it does not. A
desk-scale "second" is frame_rate frames (default 4), so the default
5-second drift windows span 20 frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import align_depth_scale_shift, normalize_depth
from .config import RunConfig
from .errors import DataError

PSNR_CAP_DB = 60.0
# A Laplacian response of data in [0,1] lies in [-4, 4], so its variance is
# bounded by 16; dividing by that bound maps sharpness into [0, 1].
LAPLACIAN_VAR_BOUND = 16.0


@dataclass(frozen=True)
class QualitySeries:
    values: np.ndarray
    frame_rate: int


def frame_quality(frame: np.ndarray, reference: np.ndarray | None = None) -> float:
    """Per-frame quality in [0, 1].

    With a reference: PSNR/60, capped at 1.0 for identical frames. Without:
    variance of the discrete Laplacian over the grayscale interior, divided
    by its theoretical bound.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if reference is not None:
        reference = np.asarray(reference, dtype=np.float64)
        if frame.shape != reference.shape:
            raise ValueError(
                f"frame shape {frame.shape} does not match reference {reference.shape}"
            )
        mse = float(((frame - reference) ** 2).mean())
        if mse == 0.0:
            return 1.0
        psnr = min(PSNR_CAP_DB, -10.0 * np.log10(mse))
        return psnr / PSNR_CAP_DB
    gray = frame.mean(axis=-1) if frame.ndim == 3 else frame
    lap = (
        -4.0 * gray[1:-1, 1:-1]
        + gray[:-2, 1:-1]
        + gray[2:, 1:-1]
        + gray[1:-1, :-2]
        + gray[1:-1, 2:]
    )
    return min(1.0, float(lap.var()) / LAPLACIAN_VAR_BOUND)


def quality_series(
    frames: np.ndarray, references: np.ndarray | None, frame_rate: int
) -> QualitySeries:
    values = np.array(
        [
            frame_quality(f, None if references is None else references[i])
            for i, f in enumerate(frames)
        ]
    )
    return QualitySeries(values=values, frame_rate=frame_rate)


def drift_delta(series: QualitySeries, window_seconds: float = 5.0) -> float:
    """|mean(first W) - mean(last W)| with W = window_seconds * frame_rate."""
    w = int(round(window_seconds * series.frame_rate))
    if len(series.values) < 2 * w:
        raise DataError(
            f"series of {len(series.values)} frames is shorter than two "
            f"{w}-frame windows"
        )
    return float(abs(series.values[:w].mean() - series.values[-w:].mean()))


def temporal_consistency(frames: np.ndarray) -> float:
    """Mean Pearson correlation between adjacent flattened frames."""
    if len(frames) < 2:
        raise DataError("temporal consistency needs at least 2 frames")
    corrs = []
    for a, b in zip(frames[:-1], frames[1:]):
        x = np.asarray(a, dtype=np.float64).ravel()
        y = np.asarray(b, dtype=np.float64).ravel()
        dx = x - x.mean()
        dy = y - y.mean()
        sx = float((dx * dx).sum())
        sy = float((dy * dy).sum())
        if sx == 0.0 or sy == 0.0:
            continue  # constant frame: correlation undefined, pair skipped
        corrs.append(float((dx * dy).sum()) / np.sqrt(sx * sy))
    if not corrs:
        raise DataError("all frame pairs were constant; consistency undefined")
    return float(np.mean(corrs))


def flow_epe(
    pred_flow: np.ndarray, gt_flow: np.ndarray, valid: np.ndarray | None = None
) -> float:
    """Mean Euclidean endpoint error over valid pixels."""
    pred_flow = np.asarray(pred_flow, dtype=np.float64)
    gt_flow = np.asarray(gt_flow, dtype=np.float64)
    if pred_flow.shape != gt_flow.shape:
        raise ValueError(
            f"flow shapes differ: {pred_flow.shape} vs {gt_flow.shape}"
        )
    err = np.sqrt(((pred_flow - gt_flow) ** 2).sum(axis=-1))
    if valid is None:
        valid = np.ones(err.shape, dtype=bool)
    if valid.sum() == 0:
        raise DataError("no valid pixels for endpoint error")
    return float(err[valid].mean())


def eval_rollout(
    arrays: dict[str, np.ndarray],
    gt_arrays: dict[str, np.ndarray] | None,
    cfg: RunConfig,
    flow_valid: np.ndarray | None = None,
    produced_by: str | None = None,
) -> dict:
    """Build the evaluation report for a decoded rollout.

    `gt_arrays`, when given, must be aligned frame-for-frame with the rollout
    (the caller slices the ground-truth clip at the context offset). Metrics
    that need ground truth or a minimum length come back null rather than
    failing the whole report.
    """
    rgb = arrays["rgb"]
    if len(rgb) == 0:
        raise DataError("empty rollout")
    frame_rate = cfg.metrics.frame_rate
    window_seconds = cfg.metrics.drift_window_seconds
    sharp = quality_series(rgb, None, frame_rate)
    ref_series = None
    if gt_arrays is not None:
        if gt_arrays["rgb"].shape != rgb.shape:
            raise ValueError(
                f"ground truth rgb {gt_arrays['rgb'].shape} does not align "
                f"with rollout {rgb.shape}"
            )
        ref_series = quality_series(rgb, gt_arrays["rgb"], frame_rate)

    def drift_or_null(series):
        if series is None or len(series.values) < 2 * int(round(window_seconds * frame_rate)):
            return None
        return drift_delta(series, window_seconds)

    epe = None
    if gt_arrays is not None and "flow" in arrays and "flow" in gt_arrays:
        valid = flow_valid if flow_valid is not None else None
        # The final frame's flow is padding by convention on both sides.
        epe = flow_epe(arrays["flow"][:-1], gt_arrays["flow"][: len(arrays["flow"]) - 1], valid)
    depth_mae = None
    if gt_arrays is not None and "depth" in arrays and "depth" in gt_arrays:
        # Predicted depth is relative, so score it scale/shift-invariantly:
        # align each frame to the normalized ground truth before the MAE.
        gt_norm = normalize_depth(gt_arrays["depth"]).data[:, 0].astype(np.float64)
        errors = []
        for pred_frame, ref_frame in zip(arrays["depth"], gt_norm):
            aligned, _, _ = align_depth_scale_shift(pred_frame, ref_frame)
            errors.append(np.abs(aligned[0] - ref_frame).mean())
        depth_mae = float(np.mean(errors))

    metrics = {
        "drift_referenced": drift_or_null(ref_series),
        "drift_no_reference": drift_or_null(sharp),
        "temporal_consistency": temporal_consistency(rgb),
        "mean_frame_quality": (
            float(ref_series.values.mean()) if ref_series is not None else None
        ),
        "mean_sharpness": float(sharp.values.mean()),
        "flow_epe": epe,
        "depth_mae": depth_mae,
    }
    return {
        "format_version": "1",
        "config_hash": produced_by,
        "n_frames": int(len(rgb)),
        "frame_rate": frame_rate,
        "drift_window_seconds": window_seconds,
        "metrics": metrics,
        "series": {
            "referenced_quality": (
                [float(v) for v in ref_series.values] if ref_series is not None else None
            ),
            "sharpness": [float(v) for v in sharp.values],
        },
    }
