"""Velocity-predictor network with per-frame noise conditioning.

A small factorized transformer: spatial attention within each frame, temporal
attention across frames at each spatial site, pre-LN, GELU MLP. Every frame
gets its own noise-level embedding (sinusoidal in the 0..1000 index scale),
the scene descriptor is projected and added to all tokens, and the output
projection starts at zero so an untrained model predicts zero velocity.
Attention is non-causal: memory and prediction frames all attend to each
other.

Weights are drawn from a numpy generator in declaration order, which keeps
initialization, channel extension, and checkpoint bytes reproducible without
touching torch's global RNG.
"""

from __future__ import annotations

import json
import math
import os

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .errors import ConfigurationError, FormatError, NumericError
from .schedule import TIMESTEPS

_DTYPES = {"f32": torch.float32, "f64": torch.float64}
_NP_DTYPES = {"f32": "<f4", "f64": "<f8"}


def sinusoid_features(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos features of a scalar signal, (...,) -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=x.dtype, device=x.device) / half
    )
    angles = x[..., None] * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def _attend(x: torch.Tensor, qkv: nn.Linear, proj: nn.Linear, heads: int) -> torch.Tensor:
    b, n, d = x.shape
    q, k, v = qkv(x).chunk(3, dim=-1)

    def split(u):
        return u.view(b, n, heads, d // heads).transpose(1, 2)

    out = F.scaled_dot_product_attention(split(q), split(k), split(v))
    return proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv_s = nn.Linear(d, 3 * d)
        self.proj_s = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.qkv_t = nn.Linear(d, 3 * d)
        self.proj_t = nn.Linear(d, d)
        self.ln3 = nn.LayerNorm(d)
        self.mlp1 = nn.Linear(d, 4 * d)
        self.mlp2 = nn.Linear(4 * d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, f, s, d = x.shape
        h = self.ln1(x).reshape(n * f, s, d)
        x = x + _attend(h, self.qkv_s, self.proj_s, self.heads).view(n, f, s, d)
        h = self.ln2(x).transpose(1, 2).reshape(n * s, f, d)
        x = x + _attend(h, self.qkv_t, self.proj_t, self.heads).view(n, s, f, d).transpose(1, 2)
        return x + self.mlp2(F.gelu(self.mlp1(self.ln3(x))))


class Denoiser(nn.Module):
    def __init__(self, c_total: int, descriptor_dim: int, cfg: ModelConfig):
        super().__init__()
        if cfg.d_model % cfg.heads or (cfg.d_model // cfg.heads) % 2:
            raise ConfigurationError("d_model must split into heads of even size")
        if cfg.d_model % 2:
            raise ConfigurationError("d_model must be even for sinusoidal features")
        self.c_total = c_total
        self.descriptor_dim = descriptor_dim
        self.d_model = cfg.d_model
        self.heads = cfg.heads
        self.n_blocks = cfg.blocks
        d = cfg.d_model
        self.in_proj = nn.Linear(c_total, d)
        self.t_proj = nn.Linear(d, d)
        self.desc_proj = nn.Linear(descriptor_dim, d)
        self.blocks = nn.ModuleList(Block(d, cfg.heads) for _ in range(cfg.blocks))
        self.final_ln = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, c_total)

    def _linears(self) -> list[nn.Linear]:
        mods = [self.in_proj, self.t_proj, self.desc_proj]
        for b in self.blocks:
            mods += [b.qkv_s, b.proj_s, b.qkv_t, b.proj_t, b.mlp1, b.mlp2]
        return mods

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        y: torch.Tensor,
        frame_positions: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if z.ndim != 5:
            raise ValueError(f"expected latent (N, F, C, h, w), got shape {tuple(z.shape)}")
        if not torch.isfinite(z).all():
            raise NumericError("non-finite values in the latent input")
        if not torch.isfinite(t).all() or t.min() < 0 or t.max() > 1:
            raise ValueError("noise levels must lie in [0, 1]")
        n, f, c, h, w = z.shape
        if c != self.c_total:
            raise ValueError(f"latent has {c} channels, model expects {self.c_total}")
        d = self.d_model
        x = self.in_proj(z.permute(0, 1, 3, 4, 2).reshape(n, f, h * w, c))
        cond = self.t_proj(sinusoid_features(t * TIMESTEPS, d)) + self.desc_proj(y)[:, None]
        x = x + cond[:, :, None]
        sites = torch.arange(h * w, dtype=z.dtype, device=z.device)
        x = x + sinusoid_features(sites, d)[None, None]
        if frame_positions is None:
            frame_positions = torch.arange(f, dtype=z.dtype, device=z.device)
        pos_t = sinusoid_features(frame_positions.to(z.dtype), d)
        x = x + (pos_t[None, :, None] if pos_t.ndim == 2 else pos_t[:, :, None])
        for block in self.blocks:
            x = block(x)
        out = self.out_proj(self.final_ln(x))
        return out.reshape(n, f, h, w, c).permute(0, 1, 4, 2, 3)


def param_count(model: Denoiser) -> int:
    return sum(p.numel() for p in model.parameters())


def param_count_formula(c_total: int, d: int, blocks: int, descriptor_dim: int) -> int:
    """Closed-form parameter count of this architecture; the factorized block
    contributes 16*d^2 + 19*d (two attentions at 4d^2+6d each, MLP at 8d^2+7d)."""
    return (
        (c_total + 1) * d
        + (d + 1) * d
        + (descriptor_dim + 1) * d
        + blocks * (16 * d * d + 19 * d)
        + 2 * d
        + (d + 1) * c_total
    )


def init_model(
    c_total: int,
    descriptor_dim: int,
    cfg: ModelConfig,
    rng: np.random.Generator,
    dtype: str = "f32",
) -> Denoiser:
    """Build a denoiser with scaled-uniform weights U(-1/sqrt(fan_in), +) drawn
    from `rng` in declaration order; biases and the output projection are zero."""
    model = Denoiser(c_total, descriptor_dim, cfg)
    with torch.no_grad():
        for lin in model._linears():
            fan_in = lin.weight.shape[1]
            scale = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-scale, scale, size=tuple(lin.weight.shape))
            lin.weight.copy_(torch.from_numpy(w))
            lin.bias.zero_()
        for name, p in model.named_parameters():
            if "ln" in name or "final_ln" in name:
                if name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
        model.out_proj.weight.zero_()
        model.out_proj.bias.zero_()
    model = model.to(_DTYPES[dtype])
    n = param_count(model)
    if n > cfg.param_budget:
        raise ConfigurationError(
            f"model has {n} parameters, over the budget of {cfg.param_budget}"
        )
    return model


def extend_channels(
    base: Denoiser,
    base_layout: dict[str, tuple[int, int]],
    new_layout: dict[str, tuple[int, int]],
    cfg: ModelConfig,
    rng: np.random.Generator,
    dtype: str = "f32",
) -> Denoiser:
    """Grow a model to a wider channel layout, keeping its rgb pathway.

    Input-projection columns and output-projection rows covering the rgb
    range are copied bit-exactly from the base; weights for the new channels
    get a fresh draw under the init rule (which leaves new output rows at
    zero, so the extended model initially reproduces the base rgb velocity
    on inputs whose new channels are zero). Interior blocks and conditioning
    projections carry over unchanged.
    """
    if "rgb" not in base_layout or "rgb" not in new_layout:
        raise ConfigurationError("both layouts must contain an rgb channel range")
    rgb_old, rgb_new = base_layout["rgb"], new_layout["rgb"]
    if rgb_old != rgb_new:
        raise ConfigurationError(
            f"rgb range moved from {rgb_old} to {rgb_new}; layouts are incompatible"
        )
    c_new = max(b for _, b in new_layout.values())
    if c_new < base.c_total:
        raise ConfigurationError("new layout is narrower than the base model")
    model = init_model(c_new, base.descriptor_dim, cfg, rng, dtype=dtype)
    a, b = rgb_old
    with torch.no_grad():
        state = {k: v.clone() for k, v in base.state_dict().items()}
        for name, p in model.named_parameters():
            if name == "in_proj.weight":
                p[:, a:b] = state[name][:, a:b].to(p.dtype)
            elif name == "out_proj.weight":
                p[a:b, :] = state[name][a:b, :].to(p.dtype)
            elif name == "out_proj.bias":
                p[a:b] = state[name][a:b].to(p.dtype)
            else:
                p.copy_(state[name].to(p.dtype))
    return model


# ---------------------------------------------------------------------------
# Checkpoints: parameters concatenated in declaration order, raw bytes,
# shapes and provenance in a JSON sidecar.
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt_dir: str, model: Denoiser, dtype: str, meta: dict) -> None:
    os.makedirs(ckpt_dir, exist_ok=True)
    names, shapes, chunks = [], [], []
    for name, p in model.named_parameters():
        names.append(name)
        shapes.append(list(p.shape))
        chunks.append(p.detach().cpu().numpy().astype(_NP_DTYPES[dtype]).ravel())
    np.concatenate(chunks).tofile(os.path.join(ckpt_dir, f"params.{dtype}"))
    doc = {
        "format_version": "1",
        "dtype": dtype,
        "param_names": names,
        "param_shapes": shapes,
        "c_total": model.c_total,
        "descriptor_dim": model.descriptor_dim,
        "d_model": model.d_model,
        "heads": model.heads,
        "blocks": model.n_blocks,
    }
    doc.update(meta)
    with open(os.path.join(ckpt_dir, "checkpoint_meta.json"), "w") as fh:
        json.dump(doc, fh, indent=1)


def load_checkpoint(ckpt_dir: str) -> tuple[Denoiser, dict]:
    meta_path = os.path.join(ckpt_dir, "checkpoint_meta.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"no checkpoint at {ckpt_dir}") from exc
    if meta.get("format_version") != "1":
        raise FormatError(f"{meta_path}: unsupported format version")
    dtype = meta["dtype"]
    if dtype not in _NP_DTYPES:
        raise FormatError(f"{meta_path}: unknown dtype '{dtype}'")
    cfg = ModelConfig(d_model=meta["d_model"], blocks=meta["blocks"], heads=meta["heads"])
    model = Denoiser(meta["c_total"], meta["descriptor_dim"], cfg).to(_DTYPES[dtype])
    flat = np.fromfile(os.path.join(ckpt_dir, f"params.{dtype}"), dtype=_NP_DTYPES[dtype])
    expected = sum(int(np.prod(s)) for s in meta["param_shapes"])
    if flat.size != expected:
        raise FormatError(
            f"params.{dtype} holds {flat.size} values, meta declares {expected}"
        )
    offset = 0
    with torch.no_grad():
        params = dict(model.named_parameters())
        for name, shape in zip(meta["param_names"], meta["param_shapes"]):
            if name not in params:
                raise FormatError(f"checkpoint parameter '{name}' not in model")
            n = int(np.prod(shape))
            params[name].copy_(
                torch.from_numpy(flat[offset : offset + n].reshape(shape).copy())
            )
            offset += n
    return model, meta
