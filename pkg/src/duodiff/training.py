"""Training: reconstruction losses (data- or noise-space residuals),
foot-contact loss, Adam with decoupled weight decay, the per-step loop, and
versioned checkpointing.

Every source of randomness in a run flows through one numpy generator whose
state is captured in each checkpoint, so a resumed run replays the remaining
steps bit for bit. Parameters are mutated only here (single writer); batch
assembly and the forward pass are pure.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .blocks import DTYPE, ParamSet, as_tensor
from .denoiser import DenoiserConfig, denoise, init_denoiser
from .motion import PairedInteraction, Skeleton, flatten
from .schedule import NoiseSchedule, q_sample

CHECKPOINT_VERSION = 1
DOWN_AXIS = np.array([0.0, 0.0, -1.0])  # feet hang one unit below the root


class TrainingError(RuntimeError):
    pass


class TrainingDivergenceError(TrainingError):
    """Loss or gradients went non-finite; carries the last good checkpoint."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 96
    lr: float = 2e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 1e-5
    alpha_foot: float = 0.1
    steps: int = 1000
    seed: int = 0
    lambda_weight: float = 0.8
    cond_dropout: float = 0.1
    checkpoint_every: int = 500
    # residual space for the reconstruction term: "data" penalizes the
    # clean-sample prediction directly; "noise" penalizes the implied noise
    # estimate, which scales the same error by snr(t) and at desk scale
    # starves the high-noise steps that generation leans on
    loss_space: str = "data"
    # discriminator rate kept for config compatibility; nothing consumes it
    lr_discriminator: float = 1e-4

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.lr <= 0:
            raise TrainingError("lr must be positive")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise TrainingError(f"{name} must be in [0, 1), got {b}")
        if self.alpha_foot < 0:
            raise TrainingError("alpha_foot must be >= 0")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise TrainingError("cond_dropout must be in [0, 1]")
        if self.steps < 0 or self.checkpoint_every < 1:
            raise TrainingError("steps must be >= 0 and checkpoint_every >= 1")
        if self.loss_space not in ("data", "noise"):
            raise TrainingError(f"loss_space must be 'data' or 'noise', got {self.loss_space!r}")


# ---------------------------------------------------------------------------
# foot geometry

def foot_positions(features, skeleton: Skeleton) -> torch.Tensor:
    """Positions of the foot joints, shape (..., frames, n_feet, 3).

    Each foot sits one unit along the down axis from the root, rotated by the
    joint's quaternion. Quaternions are renormalized (with a floor, so the
    map stays differentiable on model outputs).
    """
    feat = as_tensor(features)
    root = feat[..., :3]
    down = torch.as_tensor(DOWN_AXIS, dtype=DTYPE)
    per_foot = []
    for j in sorted(skeleton.foot_joint_ids):
        q = feat[..., 3 + 4 * j : 3 + 4 * j + 4]
        q = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-8)
        w, qv = q[..., :1], q[..., 1:]
        t2 = 2.0 * torch.cross(qv, down.expand_as(qv), dim=-1)
        rotated = down + w * t2 + torch.cross(qv, t2, dim=-1)
        per_foot.append(root + rotated)
    if not per_foot:
        return torch.zeros(*feat.shape[:-1], 0, 3, dtype=DTYPE)
    return torch.stack(per_foot, dim=-2)


def foot_contacts(
    features,
    skeleton: Skeleton,
    height_thresh: float = 0.05,
    speed_thresh: float = 0.01,
) -> np.ndarray:
    """Grounded mask (frames, n_feet) from reference motion: a foot is in
    contact when low and (nearly) still. The last frame reuses the previous
    interval's speed."""
    pos = foot_positions(features, skeleton).detach().numpy()
    height = pos[..., 2]
    vel = np.linalg.norm(np.diff(pos, axis=-3), axis=-1)
    speed = np.concatenate([vel, vel[..., -1:, :]], axis=-2)
    return (height < height_thresh) & (speed < speed_thresh)


def loss_foot(x0_hat_features, contact_mask, skeleton: Skeleton) -> torch.Tensor:
    """Mean squared foot velocity over contact intervals; zero with no
    contacts. A contact at frame f penalizes the step from f to f+1."""
    pos = foot_positions(x0_hat_features, skeleton)
    if pos.shape[-2] == 0 or pos.shape[-3] < 2:
        return torch.zeros((), dtype=DTYPE)
    vel = pos[..., 1:, :, :] - pos[..., :-1, :, :]
    sq = (vel**2).sum(dim=-1)
    mask = torch.as_tensor(np.asarray(contact_mask, dtype=bool))[..., :-1, :]
    count = int(mask.sum())
    if count == 0:
        return torch.zeros((), dtype=DTYPE)
    return (sq * mask).sum() / count


# ---------------------------------------------------------------------------
# losses

@dataclass
class BatchArrays:
    """Flattened, length-aligned training tensors for a batch or dataset."""

    speaker: np.ndarray  # (n, frames, D)
    listener: np.ndarray  # (n, frames, D)
    cond: np.ndarray  # (n, frames, A)

    def __post_init__(self):
        if not (self.speaker.shape == self.listener.shape and self.speaker.ndim == 3):
            raise TrainingError("speaker/listener arrays must share a (n, frames, D) shape")
        if self.cond.shape[:2] != self.speaker.shape[:2]:
            raise TrainingError("condition array misaligned with motion arrays")

    @property
    def size(self) -> int:
        return self.speaker.shape[0]


def batch_from_pairs(pairs: list[PairedInteraction]) -> BatchArrays:
    frames = {p.frame_count for p in pairs}
    if len(frames) != 1:
        raise TrainingError(f"training pairs must share one length, got {sorted(frames)}")
    return BatchArrays(
        speaker=np.stack([flatten(p.speaker) for p in pairs]),
        listener=np.stack([flatten(p.listener) for p in pairs]),
        cond=np.stack([p.condition.features for p in pairs]),
    )


def reconstruction_loss_terms(
    batch: BatchArrays,
    t: np.ndarray,
    eps_s: np.ndarray,
    eps_l: np.ndarray,
    params: ParamSet,
    model_cfg: DenoiserConfig,
    sch: NoiseSchedule,
    denoise_fn=denoise,
    space: str = "noise",
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Reconstruction loss for given draws, summed over both roles' channels
    and averaged over the batch.

    space = "noise": squared error between the drawn noise and the noise
    implied by the clean-sample prediction. space = "data": squared error
    between the clean samples and their predictions (the same residual
    rescaled per sample by snr(t)).

    Returns (loss, x0_hat_speaker, x0_hat_listener) so callers can attach
    auxiliary terms to the same forward pass.
    """
    xt_s = q_sample(batch.speaker, t, eps_s, sch)
    xt_l = q_sample(batch.listener, t, eps_l, sch)
    x0h_s, x0h_l = denoise_fn(xt_s, xt_l, t, batch.cond, model_cfg, params)
    if space == "noise":
        abar = sch.alpha_bars[t].reshape(-1, 1, 1)
        ca = torch.as_tensor(np.sqrt(abar), dtype=DTYPE)
        cb = torch.as_tensor(np.sqrt(1.0 - abar), dtype=DTYPE)
        res_s = as_tensor(eps_s) - (as_tensor(xt_s) - ca * x0h_s) / cb
        res_l = as_tensor(eps_l) - (as_tensor(xt_l) - ca * x0h_l) / cb
    elif space == "data":
        res_s = as_tensor(batch.speaker) - x0h_s
        res_l = as_tensor(batch.listener) - x0h_l
    else:
        raise TrainingError(f"unknown loss space {space!r}")
    loss = ((res_s**2).sum(dim=(-1, -2)) + (res_l**2).sum(dim=(-1, -2))).mean()
    return loss, x0h_s, x0h_l


def simple_loss_terms(
    batch: BatchArrays,
    t: np.ndarray,
    eps_s: np.ndarray,
    eps_l: np.ndarray,
    params: ParamSet,
    model_cfg: DenoiserConfig,
    sch: NoiseSchedule,
    denoise_fn=denoise,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Noise-space reconstruction loss (the classic simplified objective)."""
    return reconstruction_loss_terms(
        batch, t, eps_s, eps_l, params, model_cfg, sch, denoise_fn, space="noise"
    )


def loss_simple(
    batch: BatchArrays,
    params: ParamSet,
    model_cfg: DenoiserConfig,
    sch: NoiseSchedule,
    rng: np.random.Generator,
    cond_dropout: float = 0.0,
    denoise_fn=denoise,
) -> torch.Tensor:
    """Sample per-item timesteps and per-role noise, optionally blank the
    condition, and evaluate the noise-residual loss."""
    n = batch.size
    t = rng.integers(0, sch.timesteps, n)
    eps_s = rng.standard_normal(batch.speaker.shape)
    eps_l = rng.standard_normal(batch.listener.shape)
    cond = batch.cond
    if cond_dropout > 0.0:
        dropped = rng.random(n) < cond_dropout
        cond = cond.copy()
        cond[dropped] = 0.0
    work = BatchArrays(batch.speaker, batch.listener, cond)
    loss, _, _ = simple_loss_terms(work, t, eps_s, eps_l, params, model_cfg, sch, denoise_fn)
    if not torch.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss (t draws {t.tolist()[:8]}...)")
    return loss


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0

    @staticmethod
    def for_params(params: ParamSet) -> "AdamState":
        zeros = lambda t: torch.zeros_like(t.detach())
        return AdamState(
            m={n: zeros(t) for n, t in params.items()},
            v={n: zeros(t) for n, t in params.items()},
        )


def adam_step(
    params: ParamSet,
    grads: dict[str, torch.Tensor],
    state: AdamState,
    cfg: TrainConfig,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update with decoupled weight decay, in place.

    Rejects the whole step (mutating nothing) if any gradient is non-finite.
    """
    for name in params.names():
        g = grads.get(name)
        if g is not None and not torch.isfinite(g).all():
            raise TrainingDivergenceError(f"non-finite gradient for '{name}' at step {state.step}")
    state.step += 1
    c1 = 1.0 - cfg.adam_beta1**state.step
    c2 = 1.0 - cfg.adam_beta2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = state.m[name]
            v = state.v[name]
            m.mul_(cfg.adam_beta1).add_(g, alpha=1.0 - cfg.adam_beta1)
            v.mul_(cfg.adam_beta2).addcmul_(g, g, value=1.0 - cfg.adam_beta2)
            update = (m / c1) / ((v / c2).sqrt() + eps)
            if cfg.weight_decay != 0.0:
                update = update + cfg.weight_decay * p
            p.sub_(cfg.lr * update)


# ---------------------------------------------------------------------------
# checkpointing

@dataclass
class Checkpoint:
    version: int
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    betas: np.ndarray
    model_cfg: DenoiserConfig
    train_cfg: TrainConfig
    rng_state: dict
    skeleton: Skeleton
    feat_mean: np.ndarray
    feat_std: np.ndarray
    fps: float


def _np_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.asarray(arr))
    return buf.getvalue()


def _np_from_bytes(data: bytes) -> np.ndarray:
    return np.load(io.BytesIO(data))


def save_checkpoint(ck: Checkpoint, path) -> None:
    manifest = {
        "version": ck.version,
        "step": ck.step,
        "model_cfg": asdict(ck.model_cfg),
        "train_cfg": asdict(ck.train_cfg),
        "rng_state": ck.rng_state,
        "skeleton": {
            "joint_names": list(ck.skeleton.joint_names),
            "parents": list(ck.skeleton.parent_index),
            "foot_joints": sorted(ck.skeleton.foot_joint_ids),
        },
        "fps": ck.fps,
        "param_names": list(ck.params),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stamp = (1980, 1, 1, 0, 0, 0)  # fixed timestamps keep archives reproducible

    def entry(name, data):
        info = zipfile.ZipInfo(name, date_time=stamp)
        zf.writestr(info, data)

    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        entry("manifest.json", json.dumps(manifest, indent=1))
        entry("betas.npy", _np_bytes(ck.betas))
        entry("feat_mean.npy", _np_bytes(ck.feat_mean))
        entry("feat_std.npy", _np_bytes(ck.feat_std))
        for name, arr in ck.params.items():
            entry(f"params/{name}.npy", _np_bytes(arr))
            entry(f"adam_m/{name}.npy", _np_bytes(ck.adam_m[name]))
            entry(f"adam_v/{name}.npy", _np_bytes(ck.adam_v[name]))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise TrainingError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        version = manifest.get("version")
        if version != CHECKPOINT_VERSION:
            raise TrainingError(
                f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )
        names = manifest["param_names"]
        params = {n: _np_from_bytes(zf.read(f"params/{n}.npy")) for n in names}
        adam_m = {n: _np_from_bytes(zf.read(f"adam_m/{n}.npy")) for n in names}
        adam_v = {n: _np_from_bytes(zf.read(f"adam_v/{n}.npy")) for n in names}
        sk = manifest["skeleton"]
        return Checkpoint(
            version=version,
            step=manifest["step"],
            params=params,
            adam_m=adam_m,
            adam_v=adam_v,
            betas=_np_from_bytes(zf.read("betas.npy")),
            model_cfg=DenoiserConfig(**manifest["model_cfg"]),
            train_cfg=TrainConfig(**manifest["train_cfg"]),
            rng_state=manifest["rng_state"],
            skeleton=Skeleton(
                joint_names=tuple(sk["joint_names"]),
                parent_index=tuple(sk["parents"]),
                foot_joint_ids=frozenset(sk["foot_joints"]),
            ),
            feat_mean=_np_from_bytes(zf.read("feat_mean.npy")),
            feat_std=_np_from_bytes(zf.read("feat_std.npy")),
            fps=manifest["fps"],
        )


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: np.ndarray
    written: list[Path] = field(default_factory=list)


def normalization_stats(data: BatchArrays) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std pooled over both roles; stds are floored so
    constant channels normalize to zero instead of exploding."""
    stacked = np.concatenate([data.speaker, data.listener], axis=0).reshape(-1, data.speaker.shape[-1])
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-3)
    return mean, std


def train(
    pairs: list[PairedInteraction],
    model_cfg: DenoiserConfig,
    train_cfg: TrainConfig,
    sch: NoiseSchedule,
    out_dir=None,
    resume_from: Checkpoint | None = None,
) -> TrainResult:
    """Run the training loop over paired interactions.

    Per step: draw a batch, per-sample timesteps and per-role noise, blank
    the condition on dropped samples, predict both roles' clean samples,
    take the reconstruction loss (in the configured residual space) plus the
    weighted foot term, and apply one Adam step. Checkpoints are emitted
    every `checkpoint_every` steps and at the end; a divergent step aborts
    with the last good state attached.
    """
    if not pairs:
        raise TrainingError("training needs a non-empty dataset")
    if sch.timesteps != model_cfg.timesteps:
        raise TrainingError(
            f"schedule has {sch.timesteps} steps but the model expects {model_cfg.timesteps}"
        )
    model_cfg = replace(model_cfg, lambda_weight=train_cfg.lambda_weight)
    skeleton = pairs[0].speaker.skeleton
    fps = pairs[0].speaker.fps
    data = batch_from_pairs(pairs)
    mean, std = normalization_stats(data)
    norm = BatchArrays(
        speaker=(data.speaker - mean) / std,
        listener=(data.listener - mean) / std,
        cond=data.cond,
    )
    contacts_s = np.stack([foot_contacts(f, skeleton) for f in data.speaker])
    contacts_l = np.stack([foot_contacts(f, skeleton) for f in data.listener])
    mean_t = as_tensor(mean)
    std_t = as_tensor(std)

    if resume_from is not None:
        params = ParamSet.from_arrays(resume_from.params)
        state = AdamState(
            m={n: as_tensor(a).clone() for n, a in resume_from.adam_m.items()},
            v={n: as_tensor(a).clone() for n, a in resume_from.adam_v.items()},
            step=resume_from.step,
        )
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_from.rng_state
        start = resume_from.step
    else:
        params = init_denoiser(model_cfg, train_cfg.seed)
        state = AdamState.for_params(params)
        rng = np.random.default_rng(train_cfg.seed)
        start = 0

    def snapshot() -> Checkpoint:
        return Checkpoint(
            version=CHECKPOINT_VERSION,
            step=state.step,
            params=params.to_arrays(),
            adam_m={n: t.numpy().copy() for n, t in state.m.items()},
            adam_v={n: t.numpy().copy() for n, t in state.v.items()},
            betas=np.asarray(sch.betas).copy(),
            model_cfg=model_cfg,
            train_cfg=train_cfg,
            rng_state=rng.bit_generator.state,
            skeleton=skeleton,
            feat_mean=mean.copy(),
            feat_std=std.copy(),
            fps=fps,
        )

    losses: list[float] = []
    written: list[Path] = []
    last_good = snapshot()
    out_dir = Path(out_dir) if out_dir is not None else None

    for step in range(start, train_cfg.steps):
        idx = rng.integers(0, norm.size, train_cfg.batch_size)
        t = rng.integers(0, sch.timesteps, train_cfg.batch_size)
        eps_s = rng.standard_normal((train_cfg.batch_size,) + norm.speaker.shape[1:])
        eps_l = rng.standard_normal((train_cfg.batch_size,) + norm.listener.shape[1:])
        dropped = rng.random(train_cfg.batch_size) < train_cfg.cond_dropout
        cond_b = norm.cond[idx].copy()
        cond_b[dropped] = 0.0
        work = BatchArrays(norm.speaker[idx], norm.listener[idx], cond_b)

        loss, x0h_s, x0h_l = reconstruction_loss_terms(
            work, t, eps_s, eps_l, params, model_cfg, sch, space=train_cfg.loss_space
        )
        if train_cfg.alpha_foot > 0.0:
            foot = 0.5 * (
                loss_foot(x0h_s * std_t + mean_t, contacts_s[idx], skeleton)
                + loss_foot(x0h_l * std_t + mean_t, contacts_l[idx], skeleton)
            )
            loss = loss + train_cfg.alpha_foot * foot

        if not torch.isfinite(loss):
            raise TrainingDivergenceError(
                f"loss diverged at step {step}", last_checkpoint=last_good
            )
        params.zero_grads()
        loss.backward()
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        try:
            adam_step(params, grads, state, train_cfg)
        except TrainingDivergenceError as e:
            e.last_checkpoint = last_good
            raise
        losses.append(float(loss.detach()))

        if (step + 1) % train_cfg.checkpoint_every == 0 or step + 1 == train_cfg.steps:
            last_good = snapshot()
            if out_dir is not None:
                p = out_dir / f"checkpoint_{step + 1:06d}.zip"
                save_checkpoint(last_good, p)
                written.append(p)

    return TrainResult(checkpoint=snapshot(), losses=np.asarray(losses), written=written)
