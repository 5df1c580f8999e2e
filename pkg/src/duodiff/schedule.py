"""Noise schedule and diffusion-process primitives.

Houses the beta/alpha tables, the forward marginal x_t = sqrt(abar_t) x0 +
sqrt(1 - abar_t) eps, conversions between clean-sample and noise
parameterizations, guidance combination, and single DDPM/DDIM reverse steps.

Everything here is a pure function of its inputs; callers own all randomness
through explicit numpy generators. The elementwise operations accept numpy
arrays or torch tensors when the timestep is a scalar (coefficients reduce to
Python floats), and numpy arrays with per-sample timestep arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule construction or timestep argument."""


class DegenerateTimestepError(ScheduleError):
    """Requested a noise-space conversion at a timestep with abar == 1."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule over T timesteps: betas, alphas = 1 - betas, and
    alpha_bars their cumulative product."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError("betas must be a non-empty 1-D array")
        if not ((betas > 0.0) & (betas < 1.0)).all():
            raise ScheduleError("betas must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for arr in (betas, alphas, alpha_bars):
            arr.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def timesteps(self) -> int:
        return self.betas.size

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.timesteps:
            raise ScheduleError(f"timestep {t} outside [0, {self.timesteps})")
        return t

    def alpha_bar_prev(self, t: int) -> float:
        """abar_{t-1}, with the abar_{-1} = 1 convention."""
        t = self.check_t(t)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def make_linear_schedule(timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas including both endpoints (a single step uses
    beta_start)."""
    if timesteps < 1:
        raise ScheduleError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if timesteps == 1:
        betas = np.array([beta_start])
    else:
        betas = np.linspace(beta_start, beta_end, timesteps)
    return NoiseSchedule(betas=betas)


def _coef(table: np.ndarray, t, x):
    """Look up table[t]; scalar t yields a float, an index array broadcasts
    against x over its leading axes."""
    if isinstance(t, (int, np.integer)):
        return float(table[int(t)])
    t = np.asarray(t)
    c = table[t]
    return c.reshape(c.shape + (1,) * (np.ndim(x) - t.ndim))


def q_sample(x0, t, eps, sch: NoiseSchedule):
    """Forward marginal: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if x0.shape != eps.shape:
        raise ScheduleError(f"x0 {x0.shape} and eps {eps.shape} shapes differ")
    if isinstance(t, (int, np.integer)):
        sch.check_t(t)
    elif not ((np.asarray(t) >= 0) & (np.asarray(t) < sch.timesteps)).all():
        raise ScheduleError("timestep array outside schedule range")
    abar = _coef(sch.alpha_bars, t, x0)
    return abar**0.5 * x0 + (1.0 - abar) ** 0.5 * eps


def eps_to_x0(x_t, eps_hat, t, sch: NoiseSchedule):
    """Recover the clean-sample estimate from a noise estimate."""
    abar = _coef(sch.alpha_bars, t, x_t)
    return (x_t - (1.0 - abar) ** 0.5 * eps_hat) / abar**0.5


def x0_to_eps(x_t, x0_hat, t, sch: NoiseSchedule):
    """Noise estimate implied by a clean-sample estimate."""
    abar = _coef(sch.alpha_bars, t, x_t)
    if np.min(1.0 - abar) < 1e-15:
        raise DegenerateTimestepError(
            "abar is 1 at this timestep; the noise parameterization is undefined"
        )
    return (x_t - abar**0.5 * x0_hat) / (1.0 - abar) ** 0.5


def cfg_combine(eps_cond, eps_uncond, scale_s: float):
    """Guided noise estimate eps_c + s (eps_c - eps_u).

    Algebraically (1 + s) eps_c - s eps_u; the factored form keeps the
    combination an exact no-op when the two branches agree.
    """
    if eps_cond.shape != eps_uncond.shape:
        raise ScheduleError("conditional/unconditional shapes differ")
    return eps_cond + scale_s * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scale and the stand-in for the unconditional input (an
    all-zero condition track)."""

    scale_s: float = 2.5

    def __post_init__(self):
        if not math.isfinite(self.scale_s) or self.scale_s < 0.0:
            raise ScheduleError(f"guidance scale must be finite and >= 0, got {self.scale_s}")

    @staticmethod
    def null_condition(frames: int, channels: int) -> np.ndarray:
        return np.zeros((frames, channels))


def posterior_coefficients(t: int, sch: NoiseSchedule) -> tuple[float, float, float]:
    """(coef on x0_hat, coef on x_t, variance) of q(x_{t-1} | x_t, x0_hat)."""
    t = sch.check_t(t)
    abar_t = float(sch.alpha_bars[t])
    abar_prev = sch.alpha_bar_prev(t)
    beta_t = float(sch.betas[t])
    alpha_t = float(sch.alphas[t])
    denom = 1.0 - abar_t
    coef_x0 = math.sqrt(abar_prev) * beta_t / denom
    coef_xt = math.sqrt(alpha_t) * (1.0 - abar_prev) / denom
    var = (1.0 - abar_prev) / denom * beta_t
    return coef_x0, coef_xt, var


def ddpm_step(x_t, x0_hat, t: int, sch: NoiseSchedule, rng: np.random.Generator):
    """One ancestral step: sample x_{t-1} from the posterior given x0_hat.

    At t == 0 the posterior collapses onto x0_hat and no noise is added.
    """
    coef_x0, coef_xt, var = posterior_coefficients(t, sch)
    mean = coef_x0 * x0_hat + coef_xt * x_t
    if t == 0:
        return mean
    return mean + math.sqrt(var) * rng.standard_normal(np.shape(x_t))


def ddim_step(
    x_t,
    x0_hat,
    t: int,
    t_prev: int,
    sch: NoiseSchedule,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
):
    """One DDIM step from t to t_prev (t_prev == -1 jumps to the clean sample).

    eta = 0 is fully deterministic; eta = 1 reproduces the DDPM posterior
    marginals when t_prev == t - 1.
    """
    t = sch.check_t(t)
    if t_prev >= t:
        raise ScheduleError(f"t_prev ({t_prev}) must be < t ({t})")
    if not 0.0 <= eta <= 1.0:
        raise ScheduleError(f"eta must be in [0, 1], got {eta}")
    abar_t = float(sch.alpha_bars[t])
    abar_prev = 1.0 if t_prev < 0 else float(sch.alpha_bars[t_prev])
    eps_hat = (x_t - math.sqrt(abar_t) * x0_hat) / math.sqrt(1.0 - abar_t)
    sigma2 = 0.0
    if eta > 0.0 and abar_prev < 1.0:
        sigma2 = (
            eta**2
            * (1.0 - abar_prev)
            / (1.0 - abar_t)
            * (1.0 - abar_t / abar_prev)
        )
    out = (
        math.sqrt(abar_prev) * x0_hat
        + math.sqrt(max(1.0 - abar_prev - sigma2, 0.0)) * eps_hat
    )
    if sigma2 > 0.0:
        if rng is None:
            raise ScheduleError("eta > 0 requires an rng")
        out = out + math.sqrt(sigma2) * rng.standard_normal(np.shape(x_t))
    return out
