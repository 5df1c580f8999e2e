"""Two-role denoiser: role-encoded dual branches with shared weights,
weighted condition splitting, windowed local attention per branch, global
fusion self-attention across both role streams, per-role cross-attention with
re-injected conditions, and a shared clean-sample prediction head.

Both role streams run through the same parameters; the trailing role
embedding and the condition magnitudes are what tell them apart. Positions
are encoded over the time axis only, so swapping the two roles (inputs,
embedding rows and condition weights together) swaps the two outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .blocks import (
    AttentionMask,
    ParamSet,
    ParamSpec,
    as_tensor,
    block_diagonal_mask,
    encoder_block,
    encoder_block_param_spec,
    ffn,
    ffn_param_spec,
    full_mask,
    init_params,
    layer_norm,
    linear,
    local_mask,
    mha,
    mha_param_spec,
    sinusoidal_time_encoding,
)
from .motion import RoleLabel


class DenoiserError(ValueError):
    """Invalid denoiser configuration or call."""


@dataclass(frozen=True)
class DenoiserConfig:
    motion_dim: int = 23
    cond_dim: int = 4
    role_dim: int = 16
    width: int = 64
    heads: int = 4
    cla_window: int = 8
    cla_layers: int = 2
    fusion_layers: int = 2
    timesteps: int = 50
    lambda_weight: float = 0.8
    cross_role_attention: bool = True

    def __post_init__(self):
        sizes = {
            "motion_dim": self.motion_dim,
            "cond_dim": self.cond_dim,
            "role_dim": self.role_dim,
            "width": self.width,
            "heads": self.heads,
            "cla_window": self.cla_window,
            "cla_layers": self.cla_layers,
            "fusion_layers": self.fusion_layers,
            "timesteps": self.timesteps,
        }
        for k, v in sizes.items():
            if v < 1:
                raise DenoiserError(f"{k} must be >= 1, got {v}")
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise DenoiserError(f"lambda_weight must be in [0, 1], got {self.lambda_weight}")
        if self.width % self.heads != 0:
            raise DenoiserError("width must be divisible by heads")

    @property
    def ffn_hidden(self) -> int:
        return 2 * self.width


def denoiser_param_spec(cfg: DenoiserConfig) -> ParamSpec:
    w, h = cfg.width, cfg.ffn_hidden
    spec: ParamSpec = [
        ("role_embed", (2, cfg.role_dim), ("normal", 1.0)),
        ("t_embed", (cfg.timesteps, w), ("normal", 0.02)),
        ("in_proj.w", (cfg.motion_dim + cfg.role_dim + cfg.cond_dim, w), "weight"),
        ("in_proj.b", (w,), "bias"),
    ]
    for i in range(cfg.cla_layers):
        spec += encoder_block_param_spec(f"cla.{i}", w, h)
    for i in range(cfg.fusion_layers):
        spec += encoder_block_param_spec(f"fuse.{i}", w, h)
    spec += [
        ("ca.in.w", (w + cfg.cond_dim, w), "weight"),
        ("ca.in.b", (w,), "bias"),
        ("ca.ln_q.g", (w,), "gain"),
        ("ca.ln_q.b", (w,), "bias"),
        ("ca.ln_kv.g", (w,), "gain"),
        ("ca.ln_kv.b", (w,), "bias"),
    ]
    spec += mha_param_spec("ca.attn", w)
    spec += [
        ("ca.ln2.g", (w,), "gain"),
        ("ca.ln2.b", (w,), "bias"),
    ]
    spec += ffn_param_spec("ca.ffn", w, h)
    spec += [
        ("ca.ln_out.g", (w,), "gain"),
        ("ca.ln_out.b", (w,), "bias"),
        ("head.w", (w, cfg.motion_dim), "weight"),
        ("head.b", (cfg.motion_dim,), "bias"),
    ]
    return spec


def init_denoiser(cfg: DenoiserConfig, seed: int) -> ParamSet:
    return init_params(denoiser_param_spec(cfg), seed)


# ---------------------------------------------------------------------------
# stages

def split_condition(cond, lambda_weight: float):
    """Weight the shared condition between the roles: (lambda C, (1-lambda) C).

    The smaller share is computed as the remainder of the larger one, so the
    subtraction is exact (the scaled term lies within a factor of two of C)
    and the two parts always sum to C bit for bit.
    """
    if not 0.0 <= lambda_weight <= 1.0:
        raise DenoiserError(f"lambda must be in [0, 1], got {lambda_weight}")
    if lambda_weight >= 0.5:
        c_speaker = lambda_weight * cond
        return c_speaker, cond - c_speaker
    c_listener = (1.0 - lambda_weight) * cond
    return cond - c_listener, c_listener


def encode_role(x: torch.Tensor, role: RoleLabel, role_embed: torch.Tensor) -> torch.Tensor:
    """Append the role's embedding row to every frame; widens D to D + r."""
    row = role_embed[int(role)]
    tail = row.expand(*x.shape[:-1], row.shape[-1])
    return torch.cat([x, tail], dim=-1)


def branch_encode(x_aug: torch.Tensor, c_role: torch.Tensor, params: ParamSet, cfg: DenoiserConfig) -> torch.Tensor:
    """Shallow per-role branch: condition concat, projection to model width,
    time positions, then windowed local-attention layers."""
    if x_aug.shape[-2] != c_role.shape[-2]:
        raise DenoiserError(
            f"frame mismatch: motion has {x_aug.shape[-2]} frames, condition {c_role.shape[-2]}"
        )
    h = linear(torch.cat([x_aug, c_role], dim=-1), params["in_proj.w"], params["in_proj.b"])
    frames = h.shape[-2]
    h = h + sinusoidal_time_encoding(frames, cfg.width)
    mask = local_mask(frames, cfg.cla_window)
    for i in range(cfg.cla_layers):
        h = encoder_block(h, params, f"cla.{i}", cfg.heads, mask)
    return h


def _t_embedding(t, params: ParamSet, cfg: DenoiserConfig) -> torch.Tensor:
    table = params["t_embed"]
    if isinstance(t, (int, np.integer)):
        t = int(t)
        if not 0 <= t < cfg.timesteps:
            raise DenoiserError(f"timestep {t} outside [0, {cfg.timesteps})")
        return table[t]
    idx = torch.as_tensor(np.asarray(t), dtype=torch.long)
    if not bool(((idx >= 0) & (idx < cfg.timesteps)).all()):
        raise DenoiserError("timestep array outside schedule range")
    return table[idx].unsqueeze(-2)  # (..., 1, width) broadcasts over frames


def _cross_head(
    q_stream: torch.Tensor,
    kv_stream: torch.Tensor,
    c_role: torch.Tensor,
    params: ParamSet,
    cfg: DenoiserConfig,
) -> torch.Tensor:
    """Condition re-injection, cross-attention onto the other stream, and the
    shared projection down to motion features."""
    q0 = linear(torch.cat([q_stream, c_role], dim=-1), params["ca.in.w"], params["ca.in.b"])
    frames = q0.shape[-2]
    q_n = layer_norm(q0, params["ca.ln_q.g"], params["ca.ln_q.b"])
    kv_n = layer_norm(kv_stream, params["ca.ln_kv.g"], params["ca.ln_kv.b"])
    h = q0 + mha(q_n, kv_n, params, "ca.attn", cfg.heads, full_mask(frames, frames))
    h = h + ffn(layer_norm(h, params["ca.ln2.g"], params["ca.ln2.b"]), params, "ca.ffn")
    out = layer_norm(h, params["ca.ln_out.g"], params["ca.ln_out.b"])
    return linear(out, params["head.w"], params["head.b"])


def fuse_and_predict(
    z_s: torch.Tensor,
    z_l: torch.Tensor,
    c_speaker: torch.Tensor,
    c_listener: torch.Tensor,
    t,
    params: ParamSet,
    cfg: DenoiserConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Deep joint stage: timestep injection, self-attention over the stacked
    role-time axis, split back, per-role cross-attention, prediction heads."""
    if z_s.shape != z_l.shape:
        raise DenoiserError(f"branch shapes differ: {tuple(z_s.shape)} vs {tuple(z_l.shape)}")
    te = _t_embedding(t, params, cfg)
    z_s = z_s + te
    z_l = z_l + te
    frames = z_s.shape[-2]
    z = torch.cat([z_s, z_l], dim=-2)  # (..., 2F, width)
    if cfg.cross_role_attention:
        mask = full_mask(2 * frames, 2 * frames)
    else:
        mask = block_diagonal_mask([frames, frames])
    for i in range(cfg.fusion_layers):
        z = encoder_block(z, params, f"fuse.{i}", cfg.heads, mask)
    zs, zl = z[..., :frames, :], z[..., frames:, :]
    if cfg.cross_role_attention:
        out_s = _cross_head(zs, zl, c_speaker, params, cfg)
        out_l = _cross_head(zl, zs, c_listener, params, cfg)
    else:
        out_s = _cross_head(zs, zs, c_speaker, params, cfg)
        out_l = _cross_head(zl, zl, c_listener, params, cfg)
    return out_s, out_l


def denoise(
    x_t_speaker,
    x_t_listener,
    t,
    cond,
    cfg: DenoiserConfig,
    params: ParamSet,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Predict the clean samples for both roles from their noisy frames.

    Accepts (frames, D) or (batch, frames, D) arrays (numpy or torch) with a
    matching condition of trailing width cond_dim; `t` is an int or, for
    batched input, a per-sample integer array. Returns torch tensors shaped
    like the inputs.
    """
    xs = as_tensor(x_t_speaker)
    xl = as_tensor(x_t_listener)
    c = as_tensor(cond)
    if xs.shape != xl.shape:
        raise DenoiserError(f"speaker {tuple(xs.shape)} and listener {tuple(xl.shape)} shapes differ")
    if xs.shape[-1] != cfg.motion_dim:
        raise DenoiserError(f"motion width {xs.shape[-1]} != configured {cfg.motion_dim}")
    if c.shape[-1] != cfg.cond_dim:
        raise DenoiserError(f"condition width {c.shape[-1]} != configured {cfg.cond_dim}")
    if c.ndim == xs.ndim - 1:
        c = c.expand(*xs.shape[:-2], *c.shape)
    if c.shape[:-1] != xs.shape[:-1]:
        raise DenoiserError(f"condition shape {tuple(c.shape)} incompatible with motion {tuple(xs.shape)}")

    c_speaker, c_listener = split_condition(c, cfg.lambda_weight)
    a_s = encode_role(xs, RoleLabel.SPEAKER, params["role_embed"])
    a_l = encode_role(xl, RoleLabel.LISTENER, params["role_embed"])
    z_s = branch_encode(a_s, c_speaker, params, cfg)
    z_l = branch_encode(a_l, c_listener, params, cfg)
    return fuse_and_predict(z_s, z_l, c_speaker, c_listener, t, params, cfg)
