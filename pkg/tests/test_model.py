"""Denoiser tests: parameter accounting, initialization, conditioning,
channel extension, and checkpoint I/O."""

import numpy as np
import pytest
import torch

from horizoncast import model
from horizoncast.config import ModelConfig
from horizoncast.errors import ConfigurationError, NumericError


def model_cfg(**over) -> ModelConfig:
    base = dict(d_model=32, blocks=1, heads=4)
    base.update(over)
    return ModelConfig(**base)


def fresh(c_total=12, desc=6, cfg=None, seed=0, dtype="f32"):
    cfg = cfg or model_cfg()
    rng = np.random.Generator(np.random.PCG64(seed))
    return model.init_model(c_total, desc, cfg, rng, dtype=dtype)


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("c_total,d,blocks,desc", [
    (12, 32, 1, 6),
    (36, 64, 2, 24),
    (48, 16, 3, 12),
])
def test_param_count_matches_closed_form(c_total, d, blocks, desc):
    net = fresh(c_total, desc, model_cfg(d_model=d, blocks=blocks, heads=4))
    assert model.param_count(net) == model.param_count_formula(c_total, d, blocks, desc)


def test_default_architecture_size():
    assert model.param_count_formula(36, 64, 2, 24) == 144100


def test_budget_exceeded_rejected():
    with pytest.raises(ConfigurationError):
        fresh(36, 24, model_cfg(d_model=64, blocks=2, param_budget=100_000))


def test_invalid_head_split_rejected():
    with pytest.raises(ConfigurationError):
        fresh(12, 6, model_cfg(d_model=32, heads=5))  # width not divisible by heads
    with pytest.raises(ConfigurationError):
        fresh(12, 6, model_cfg(d_model=12, heads=4))  # odd per-head width


# ---------------------------------------------------------------------------
# Initialization and determinism
# ---------------------------------------------------------------------------

def test_init_is_deterministic_in_the_rng():
    a = fresh(seed=5)
    b = fresh(seed=5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = fresh(seed=6)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_output_projection_starts_at_zero():
    net = fresh()
    assert torch.all(net.out_proj.weight == 0)
    assert torch.all(net.out_proj.bias == 0)
    z = torch.zeros(1, 2, 12, 4, 4)
    t = torch.full((1, 2), 0.5)
    y = torch.zeros(1, 6)
    out = net(z, t, y)
    assert torch.all(out == 0)


def test_forward_shape_and_dtype():
    net = fresh(dtype="f64")
    z = torch.randn(2, 3, 12, 4, 4, dtype=torch.float64)
    t = torch.rand(2, 3, dtype=torch.float64)
    y = torch.randn(2, 6, dtype=torch.float64)
    out = net(z, t, y)
    assert out.shape == (2, 3, 12, 4, 4)
    assert out.dtype == torch.float64


def test_forward_validates_inputs():
    net = fresh()
    z = torch.zeros(1, 2, 12, 4, 4)
    t = torch.full((1, 2), 0.5)
    y = torch.zeros(1, 6)
    with pytest.raises(ValueError):
        net(z[:, :, :11], t, y)  # wrong channel count
    with pytest.raises(ValueError):
        net(z, t + 1.0, y)  # t outside [0, 1]
    bad = z.clone()
    bad[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        net(bad, t, y)
    with pytest.raises(ValueError):
        net(z[0], t, y)  # missing batch axis


def test_noise_level_changes_the_output():
    net = fresh(seed=7)
    # Break the zero-output init so conditioning is observable.
    with torch.no_grad():
        net.out_proj.weight.uniform_(-0.1, 0.1)
    z = torch.randn(1, 2, 12, 4, 4)
    y = torch.zeros(1, 6)
    a = net(z, torch.full((1, 2), 0.2), y)
    b = net(z, torch.full((1, 2), 0.9), y)
    assert not torch.allclose(a, b)


def test_descriptor_changes_the_output():
    net = fresh(seed=8)
    with torch.no_grad():
        net.out_proj.weight.uniform_(-0.1, 0.1)
    z = torch.randn(1, 2, 12, 4, 4)
    t = torch.full((1, 2), 0.5)
    a = net(z, t, torch.zeros(1, 6))
    b = net(z, t, torch.ones(1, 6))
    assert not torch.allclose(a, b)


def test_batch_elements_are_independent():
    net = fresh(seed=9)
    with torch.no_grad():
        net.out_proj.weight.uniform_(-0.1, 0.1)
    z = torch.randn(2, 2, 12, 4, 4, dtype=torch.float64)
    t = torch.rand(2, 2, dtype=torch.float64)
    y = torch.randn(2, 6, dtype=torch.float64)
    net = net.double()
    both = net(z, t, y)
    solo = net(z[:1], t[:1], y[:1])
    assert torch.allclose(both[:1], solo, atol=1e-12)


# ---------------------------------------------------------------------------
# Channel extension
# ---------------------------------------------------------------------------

def test_extension_copies_rgb_projections_and_interior():
    cfg = model_cfg()
    rng = np.random.Generator(np.random.PCG64(3))
    base = model.init_model(12, 6, cfg, rng)
    base_layout = {"rgb": (0, 12)}
    new_layout = {"rgb": (0, 12), "depth": (12, 24), "flow": (24, 36)}
    ext = model.extend_channels(base, base_layout, new_layout, cfg, rng)
    assert ext.c_total == 36
    assert torch.equal(ext.in_proj.weight[:, :12], base.in_proj.weight)
    assert torch.equal(ext.in_proj.bias, base.in_proj.bias)
    assert torch.equal(ext.out_proj.weight[:12], base.out_proj.weight)
    assert torch.equal(ext.out_proj.bias[:12], base.out_proj.bias)
    # New output rows keep the zero init; new input columns are fresh draws.
    assert torch.all(ext.out_proj.weight[12:] == 0)
    assert not torch.all(ext.in_proj.weight[:, 12:] == 0)
    for (na, pa), (nb, pb) in zip(base.blocks.named_parameters(), ext.blocks.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    assert torch.equal(base.t_proj.weight, ext.t_proj.weight)
    assert torch.equal(base.desc_proj.weight, ext.desc_proj.weight)


def test_extension_requires_matching_rgb_range():
    cfg = model_cfg()
    rng = np.random.Generator(np.random.PCG64(4))
    base = model.init_model(12, 6, cfg, rng)
    with pytest.raises(ConfigurationError):
        model.extend_channels(base, {"rgb": (0, 12)}, {"depth": (0, 12), "rgb": (12, 24)}, cfg, rng)


def test_extension_preserves_rgb_behavior_on_rgb_input():
    # Feeding the extended model a latent whose non-rgb channels are zero and
    # reading back the rgb rows reproduces the base model exactly: the zero
    # output rows of new channels cannot leak into rgb, and fresh input
    # columns only see zeros.
    cfg = model_cfg()
    rng = np.random.Generator(np.random.PCG64(5))
    base = model.init_model(12, 6, cfg, rng, dtype="f64")
    ext = model.extend_channels(
        base, {"rgb": (0, 12)}, {"rgb": (0, 12), "depth": (12, 24)}, cfg, rng, dtype="f64")
    z_rgb = torch.randn(1, 2, 12, 4, 4, dtype=torch.float64)
    z_ext = torch.zeros(1, 2, 24, 4, 4, dtype=torch.float64)
    z_ext[:, :, :12] = z_rgb
    t = torch.rand(1, 2, dtype=torch.float64)
    y = torch.randn(1, 6, dtype=torch.float64)
    assert torch.allclose(ext(z_ext, t, y)[:, :, :12], base(z_rgb, t, y), atol=1e-12)


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    net = fresh(seed=11)
    model.save_checkpoint(str(tmp_path), net, "f32", {"step": 7})
    back, meta = model.load_checkpoint(str(tmp_path))
    for pa, pb in zip(net.parameters(), back.parameters()):
        assert torch.equal(pa, pb)
    assert meta["step"] == 7
    assert meta["dtype"] == "f32"


def test_checkpoint_rejects_truncated_params(tmp_path):
    net = fresh(seed=12)
    model.save_checkpoint(str(tmp_path), net, "f32", {})
    path = tmp_path / "params.f32"
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(Exception):
        model.load_checkpoint(str(tmp_path))


def test_sinusoid_features_shape_and_range():
    x = torch.linspace(0, 1000, 7)
    feats = model.sinusoid_features(x, 16)
    assert feats.shape == (7, 16)
    assert feats.abs().max() <= 1.0
    # Distinct inputs produce distinct features.
    assert not torch.allclose(feats[0], feats[1])
