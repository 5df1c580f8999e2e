"""Joint generation of paired speaker/listener motion from a condition track.

The reverse chain runs in numpy (all randomness from the caller's generator)
and queries the denoiser per step. Guidance mixes the conditional and
zero-condition predictions in noise space before each reverse step. Motion is
denoised in the normalized feature space stored with the checkpoint and then
mapped back to raw features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .blocks import ParamSet
from .denoiser import DenoiserConfig, denoise
from .motion import MotionSequence, RoleLabel, Skeleton, unflatten
from .schedule import (
    NoiseSchedule,
    cfg_combine,
    ddim_step,
    ddpm_step,
    eps_to_x0,
    x0_to_eps,
)
from .training import Checkpoint


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerSpec:
    """Reverse-process choice: full ancestral chain or a DDIM subsequence."""

    kind: str = "ddpm"
    ddim_steps: int = 0
    eta: float = 0.0

    @staticmethod
    def parse(text: str) -> "SamplerSpec":
        """Accepts 'ddpm' or 'ddim:K' (K reverse steps, deterministic)."""
        text = text.strip().lower()
        if text == "ddpm":
            return SamplerSpec("ddpm")
        if text.startswith("ddim"):
            parts = text.split(":")
            steps = int(parts[1]) if len(parts) > 1 and parts[1] else 10
            if steps < 1:
                raise SamplingError("ddim step count must be >= 1")
            return SamplerSpec("ddim", ddim_steps=steps)
        raise SamplingError(f"unknown sampler '{text}' (expected 'ddpm' or 'ddim:K')")


def _guided_x0(x, x0_cond, x0_unc, t, sch, scale):
    if scale == 0.0 or x0_unc is None:
        return x0_cond
    eps_c = x0_to_eps(x, x0_cond, t, sch)
    eps_u = x0_to_eps(x, x0_unc, t, sch)
    return eps_to_x0(x, cfg_combine(eps_c, eps_u, scale), t, sch)


def generate_features(
    params: ParamSet,
    model_cfg: DenoiserConfig,
    sch: NoiseSchedule,
    condition: np.ndarray,
    n: int,
    rng: np.random.Generator,
    guidance_scale: float = 2.5,
    sampler: SamplerSpec = SamplerSpec(),
) -> tuple[np.ndarray, np.ndarray]:
    """Sample n paired sequences in normalized feature space.

    Returns (speaker, listener) arrays of shape (n, frames, D).
    """
    if n < 1:
        raise SamplingError(f"sample count must be >= 1, got {n}")
    cond = np.asarray(condition, dtype=np.float64)
    if cond.ndim != 2 or cond.shape[1] != model_cfg.cond_dim:
        raise SamplingError(
            f"condition must be (frames, {model_cfg.cond_dim}), got {cond.shape}"
        )
    if sch.timesteps != model_cfg.timesteps:
        raise SamplingError("schedule/model timestep mismatch")
    frames = cond.shape[0]
    d = model_cfg.motion_dim
    cond_b = np.broadcast_to(cond, (n, frames, cond.shape[1]))
    null_b = np.zeros_like(cond_b)

    x_s = rng.standard_normal((n, frames, d))
    x_l = rng.standard_normal((n, frames, d))

    def predict(t: int):
        with torch.no_grad():
            c_s, c_l = denoise(x_s, x_l, t, cond_b, model_cfg, params)
            if guidance_scale != 0.0:
                u_s, u_l = denoise(x_s, x_l, t, null_b, model_cfg, params)
                return (c_s.numpy(), u_s.numpy()), (c_l.numpy(), u_l.numpy())
        return (c_s.numpy(), None), (c_l.numpy(), None)

    if sampler.kind == "ddpm":
        for t in reversed(range(sch.timesteps)):
            (cs, us), (cl, ul) = predict(t)
            g_s = _guided_x0(x_s, cs, us, t, sch, guidance_scale)
            g_l = _guided_x0(x_l, cl, ul, t, sch, guidance_scale)
            x_s = ddpm_step(x_s, g_s, t, sch, rng)
            x_l = ddpm_step(x_l, g_l, t, sch, rng)
    elif sampler.kind == "ddim":
        k = min(sampler.ddim_steps, sch.timesteps)
        taus = np.unique(np.round(np.linspace(0, sch.timesteps - 1, k)).astype(int))
        for i in range(taus.size - 1, -1, -1):
            t = int(taus[i])
            t_prev = int(taus[i - 1]) if i > 0 else -1
            (cs, us), (cl, ul) = predict(t)
            g_s = _guided_x0(x_s, cs, us, t, sch, guidance_scale)
            g_l = _guided_x0(x_l, cl, ul, t, sch, guidance_scale)
            x_s = ddim_step(x_s, g_s, t, t_prev, sch, sampler.eta, rng)
            x_l = ddim_step(x_l, g_l, t, t_prev, sch, sampler.eta, rng)
    else:
        raise SamplingError(f"unknown sampler kind '{sampler.kind}'")
    return x_s, x_l


def generate_from_checkpoint(
    ck: Checkpoint,
    condition: np.ndarray,
    n: int,
    rng: np.random.Generator,
    guidance_scale: float = 2.5,
    sampler: SamplerSpec = SamplerSpec(),
) -> tuple[np.ndarray, np.ndarray]:
    """Sample n raw-feature pairs using a trained checkpoint."""
    params = ParamSet.from_arrays(ck.params, requires_grad=False)
    sch = NoiseSchedule(betas=ck.betas)
    xs, xl = generate_features(
        params, ck.model_cfg, sch, condition, n, rng, guidance_scale, sampler
    )
    return xs * ck.feat_std + ck.feat_mean, xl * ck.feat_std + ck.feat_mean


def features_to_motions(
    speaker_feats: np.ndarray,
    listener_feats: np.ndarray,
    skeleton: Skeleton,
    fps: float,
) -> list[tuple[MotionSequence, MotionSequence]]:
    out = []
    for fs, fl in zip(speaker_feats, listener_feats):
        out.append(
            (
                unflatten(fs, skeleton, fps, RoleLabel.SPEAKER),
                unflatten(fl, skeleton, fps, RoleLabel.LISTENER),
            )
        )
    return out
