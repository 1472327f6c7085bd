"""Evaluation metric tests: frame quality, sharpness, drift, consistency,
flow endpoint error, and the full report."""

import json

import numpy as np
import pytest

from horizoncast import evaluate, world
from horizoncast.errors import DataError

from conftest import tiny_config


# ---------------------------------------------------------------------------
# Frame quality
# ---------------------------------------------------------------------------

def test_identical_frames_score_exactly_one():
    frame = np.random.default_rng(0).uniform(0, 1, (8, 8, 3)).astype(np.float32)
    assert evaluate.frame_quality(frame, frame.copy()) == 1.0


def test_referenced_quality_follows_log_error():
    ref = np.zeros((8, 8, 3))
    off = np.full((8, 8, 3), 0.1)  # mse = 0.01 -> 20 dB -> 1/3 of the 60 dB cap
    assert np.isclose(evaluate.frame_quality(off, ref), 20.0 / 60.0)


def test_referenced_quality_caps_at_unity():
    ref = np.zeros((4, 4, 3))
    near = np.full((4, 4, 3), 1e-9)  # far above the 60 dB cap
    assert evaluate.frame_quality(near, ref) == 1.0


def test_flat_frame_has_zero_sharpness():
    assert evaluate.frame_quality(np.full((8, 8, 3), 0.5)) == 0.0


def test_checkerboard_saturates_sharpness():
    yy, xx = np.mgrid[0:8, 0:8]
    board = ((yy + xx) % 2).astype(np.float64)
    frame = np.repeat(board[:, :, None], 3, axis=2)
    assert evaluate.frame_quality(frame) == 1.0


def test_sharpness_orders_blur_levels():
    gen = np.random.default_rng(1)
    sharp = gen.uniform(0, 1, (16, 16, 3))
    soft = 0.25 * sharp + 0.375  # shrink contrast toward the mean
    assert evaluate.frame_quality(soft) < evaluate.frame_quality(sharp)


# ---------------------------------------------------------------------------
# Drift
# ---------------------------------------------------------------------------

def test_drift_is_difference_of_window_means():
    # frame_rate 4, window 5 s -> 20-frame windows.
    values = np.concatenate([np.full(20, 0.9), np.full(10, 0.7), np.full(20, 0.5)])
    series = evaluate.QualitySeries(values=values, frame_rate=4)
    assert np.isclose(evaluate.drift_delta(series, 5.0), 0.4)


def test_constant_series_has_zero_drift():
    series = evaluate.QualitySeries(values=np.full(50, 0.8), frame_rate=4)
    assert evaluate.drift_delta(series, 5.0) == 0.0


def test_drift_needs_two_full_windows():
    series = evaluate.QualitySeries(values=np.full(30, 0.8), frame_rate=4)
    with pytest.raises(DataError):
        evaluate.drift_delta(series, 5.0)


# ---------------------------------------------------------------------------
# Temporal consistency
# ---------------------------------------------------------------------------

def test_static_sequence_is_exactly_one():
    frame = np.random.default_rng(2).uniform(0, 1, (8, 8, 3))
    frames = np.stack([frame] * 5)
    assert evaluate.temporal_consistency(frames) == 1.0


def test_inverted_pair_is_exactly_minus_one():
    # Values from {0.25, 0.75}: 1 - x is exact, so r = -1 with no rounding.
    gen = np.random.default_rng(3)
    a = np.where(gen.uniform(size=(8, 8, 3)) < 0.5, 0.25, 0.75)
    frames = np.stack([a, 1.0 - a])
    assert np.isclose(evaluate.temporal_consistency(frames), -1.0, atol=1e-12)


def test_flat_pairs_are_skipped():
    gen = np.random.default_rng(4)
    textured = gen.uniform(0, 1, (8, 8, 3))
    flat = np.full((8, 8, 3), 0.5)
    # flat->flat pair skipped; textured pairs dominate.
    frames = np.stack([textured, textured, flat, flat])
    # pairs: (textured,textured)=1, (textured,flat) has one flat side -> skipped,
    # (flat,flat) skipped.
    assert evaluate.temporal_consistency(frames) == 1.0


def test_all_flat_sequence_rejected():
    frames = np.full((4, 8, 8, 3), 0.5)
    with pytest.raises(DataError):
        evaluate.temporal_consistency(frames)


# ---------------------------------------------------------------------------
# Flow endpoint error
# ---------------------------------------------------------------------------

def test_epe_zero_for_identical_flow():
    flow = np.random.default_rng(5).normal(size=(3, 8, 8, 2)).astype(np.float32)
    assert evaluate.flow_epe(flow, flow.copy()) == 0.0


def test_epe_measures_euclidean_displacement():
    gt = np.zeros((1, 4, 4, 2))
    pred = np.zeros((1, 4, 4, 2))
    pred[..., 0] = 3.0
    pred[..., 1] = 4.0
    assert np.isclose(evaluate.flow_epe(pred, gt), 5.0)


def test_epe_respects_validity_mask():
    gt = np.zeros((1, 4, 4, 2))
    pred = np.zeros((1, 4, 4, 2))
    pred[0, 0, 0] = (10.0, 0.0)
    valid = np.ones((1, 4, 4), dtype=bool)
    valid[0, 0, 0] = False
    assert evaluate.flow_epe(pred, gt, valid) == 0.0
    with pytest.raises(DataError):
        evaluate.flow_epe(pred, gt, np.zeros((1, 4, 4), dtype=bool))


# ---------------------------------------------------------------------------
# Full report
# ---------------------------------------------------------------------------

def clip_for_eval(cfg, n=None):
    scene = world.gen_scene(cfg.seed, cfg.world)
    frames = world.render_clip(scene, n or cfg.world.clip_len)
    return world.clip_arrays(frames)


def test_self_evaluation_is_perfect():
    cfg = tiny_config(world={"clip_len": 48}, metrics={"drift_window_seconds": 2.0})
    arrays = clip_for_eval(cfg)
    report = evaluate.eval_rollout(arrays, arrays, cfg, produced_by="0" * 12)
    m = report["metrics"]
    assert m["mean_frame_quality"] == 1.0
    assert m["flow_epe"] == 0.0
    assert m["depth_mae"] < 1e-6
    assert m["drift_referenced"] == 0.0
    assert report["series"]["referenced_quality"] == [1.0] * 48


def test_report_nulls_without_ground_truth():
    cfg = tiny_config()
    arrays = clip_for_eval(cfg)
    report = evaluate.eval_rollout(arrays, None, cfg, produced_by="0" * 12)
    m = report["metrics"]
    assert m["mean_frame_quality"] is None
    assert m["flow_epe"] is None
    assert m["depth_mae"] is None
    assert report["series"]["referenced_quality"] is None
    assert m["mean_sharpness"] > 0.0


def test_short_series_nulls_drift_but_keeps_quality():
    cfg = tiny_config()  # 20 frames < 2 windows at 4 fps * 5 s
    arrays = clip_for_eval(cfg)
    report = evaluate.eval_rollout(arrays, arrays, cfg, produced_by="0" * 12)
    assert report["metrics"]["drift_referenced"] is None
    assert report["metrics"]["drift_no_reference"] is None
    assert report["metrics"]["mean_frame_quality"] == 1.0


def test_report_validates_against_published_schema():
    jsonschema = pytest.importorskip("jsonschema")
    cfg = tiny_config(world={"clip_len": 48}, metrics={"drift_window_seconds": 2.0})
    arrays = clip_for_eval(cfg)
    with open("docs/report.schema.json") as fh:
        schema = json.load(fh)
    for gt in (arrays, None):
        report = evaluate.eval_rollout(arrays, gt, cfg, produced_by="a1b2c3d4e5f6")
        jsonschema.validate(report, schema)
