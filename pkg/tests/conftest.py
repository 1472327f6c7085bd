"""Shared test fixtures and statistics helpers."""

from __future__ import annotations

import numpy as np
import pytest

from horizoncast.config import config_from_dict


def ks_statistic(samples, cdf) -> float:
    """Kolmogorov-Smirnov distance between an empirical sample and a CDF."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    f = cdf(x)
    upper = np.arange(1, n + 1) / n - f
    lower = f - np.arange(0, n) / n
    return float(max(upper.max(), lower.max()))


def uniform_cdf(lo: float, hi: float):
    def cdf(x):
        return np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)

    return cdf


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def tiny_config(**over):
    """A 16x16-world, small-model config that keeps every test fast."""
    base = {
        "seed": 11,
        "world": {
            "width": 16,
            "height": 16,
            "n_objects": 2,
            "max_objects": 3,
            "clip_len": 20,
            "n_clips": 2,
            "size_min": 4,
            "size_max": 6,
        },
        "scheduler": {"groups": 2, "group_size": 2, "short_term": 2, "long_term": 2},
        "model": {"d_model": 32, "blocks": 1, "heads": 4},
        "trainer": {"steps": 3, "batch_size": 2},
        "rollout": {"n_steps_per_group": 2, "n_frames": 6},
    }
    return config_from_dict(_merge(base, over))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
