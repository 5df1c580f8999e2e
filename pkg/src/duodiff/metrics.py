"""Evaluation: Fréchet distance between encoded gesture distributions (FGD),
beat alignment (BA) between audio beats and kinematic pauses, pairwise L1
diversity (DIV), and the lag analysis used to verify learned listener timing.

FGD encodes fixed-length motion windows with a small trained autoencoder,
fits a Gaussian to each set of codes, and takes the Fréchet distance between
the two Gaussians. The matrix square root goes through a symmetric
eigendecomposition of A^(1/2) B A^(1/2) for stability.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .blocks import ParamSet, as_tensor, init_params, linear
from .motion import ConditionTrack, MotionSequence, quat_angle
from .training import AdamState, TrainConfig, adam_step

DEFAULT_WINDOW = 30
DEFAULT_STRIDE = 10
LATENT_DIM = 32


class MetricsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# windowing

def motion_windows(features: np.ndarray, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE) -> np.ndarray:
    """Slice a (frames, D) feature matrix into flattened length-`window`
    snippets, shape (k, window * D)."""
    feat = np.asarray(features, dtype=np.float64)
    frames = feat.shape[0]
    if frames < window:
        return np.zeros((0, window * feat.shape[1]))
    starts = range(0, frames - window + 1, stride)
    return np.stack([feat[s : s + window].reshape(-1) for s in starts])


def windows_from_set(feature_set, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE) -> np.ndarray:
    chunks = [motion_windows(f, window, stride) for f in feature_set]
    chunks = [c for c in chunks if len(c)]
    if not chunks:
        raise MetricsError(f"no motion is long enough for {window}-frame windows")
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# feature encoder (autoencoder over windows)

@dataclass
class FeatureEncoder:
    params: ParamSet
    mean: np.ndarray
    std: np.ndarray
    window: int
    latent_dim: int

    def _forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = torch.nn.functional.silu(linear(x, self.params["enc.w1"], self.params["enc.b1"]))
        z = linear(h, self.params["enc.w2"], self.params["enc.b2"])
        h2 = torch.nn.functional.silu(linear(z, self.params["dec.w1"], self.params["dec.b1"]))
        out = linear(h2, self.params["dec.w2"], self.params["dec.b2"])
        return z, out

    def encode(self, windows: np.ndarray) -> np.ndarray:
        x = as_tensor((np.asarray(windows) - self.mean) / self.std)
        with torch.no_grad():
            z, _ = self._forward(x)
        return z.numpy()

    def reconstruction_error(self, windows: np.ndarray) -> float:
        x = as_tensor((np.asarray(windows) - self.mean) / self.std)
        with torch.no_grad():
            _, out = self._forward(x)
            return float(((out - x) ** 2).mean())


def _encoder_spec(in_dim: int, hidden: int, latent: int):
    return [
        ("enc.w1", (in_dim, hidden), "weight"),
        ("enc.b1", (hidden,), "bias"),
        ("enc.w2", (hidden, latent), "weight"),
        ("enc.b2", (latent,), "bias"),
        ("dec.w1", (latent, hidden), "weight"),
        ("dec.b1", (hidden,), "bias"),
        ("dec.w2", (hidden, in_dim), "weight"),
        ("dec.b2", (in_dim,), "bias"),
    ]


def train_feature_encoder(
    motions,
    seed: int,
    window: int = DEFAULT_WINDOW,
    stride: int = DEFAULT_STRIDE,
    latent_dim: int = LATENT_DIM,
    hidden: int = 128,
    steps: int = 400,
    lr: float = 1e-3,
) -> tuple[FeatureEncoder, np.ndarray]:
    """Fit the windowed autoencoder on real motion features.

    Returns the encoder and the per-step full-batch training loss history.
    Deterministic given the seed; needs at least 100 windows.
    """
    wins = windows_from_set(motions, window, stride)
    if len(wins) < 100:
        raise MetricsError(f"need >= 100 windows to fit the encoder, got {len(wins)}")
    mean = wins.mean(axis=0)
    # floor keeps near-constant channels from amplifying tiny off-manifold
    # deviations of generated motion into huge standardized inputs
    std = np.maximum(wins.std(axis=0), 1e-2)
    x = as_tensor((wins - mean) / std)

    params = init_params(_encoder_spec(wins.shape[1], hidden, latent_dim), seed)
    enc = FeatureEncoder(params=params, mean=mean, std=std, window=window, latent_dim=latent_dim)
    opt_cfg = TrainConfig(batch_size=1, lr=lr, weight_decay=0.0, alpha_foot=0.0, steps=steps, seed=seed)
    state = AdamState.for_params(params)
    history = np.zeros(steps)
    for step in range(steps):
        params.zero_grads()
        _, out = enc._forward(x)
        loss = ((out - x) ** 2).mean()
        loss.backward()
        adam_step(params, {n: p.grad for n, p in params.items()}, state, opt_cfg)
        history[step] = float(loss.detach())
    return enc, history


def random_projection_error(
    windows_train: np.ndarray, windows_eval: np.ndarray, latent_dim: int, seed: int
) -> float:
    """Reconstruction error of a random orthonormal projection baseline."""
    rng = np.random.default_rng(seed)
    mean = windows_train.mean(axis=0)
    std = np.maximum(windows_train.std(axis=0), 1e-6)
    x = (windows_eval - mean) / std
    q, _ = np.linalg.qr(rng.standard_normal((x.shape[1], latent_dim)))
    recon = (x @ q) @ q.T
    return float(((recon - x) ** 2).mean())


# ---------------------------------------------------------------------------
# Frechet distance

@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise MetricsError(f"summary shapes inconsistent: {mean.shape} vs {cov.shape}")
        asym = np.abs(cov - cov.T).max() if cov.size else 0.0
        if asym > 1e-9:
            raise MetricsError(f"covariance asymmetric by {asym:.3g}")
        evals = np.linalg.eigvalsh(cov)
        if evals.min() < -1e-8 * max(1.0, float(evals.max())):
            raise MetricsError(f"covariance has negative eigenvalue {evals.min():.3g}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def summarize(features: np.ndarray, shrinkage: float = 0.0) -> GaussianSummary:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise MetricsError("need at least two feature rows to fit a Gaussian")
    cov = np.cov(feats, rowvar=False)
    cov = np.atleast_2d(cov)
    if shrinkage > 0.0:
        cov = cov + shrinkage * np.eye(cov.shape[0])
    cov = (cov + cov.T) / 2.0
    return GaussianSummary(mean=feats.mean(axis=0), cov=cov)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(cov)
    return (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    if a.dim != b.dim:
        raise MetricsError(f"summary dims differ: {a.dim} vs {b.dim}")
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    inner = (inner + inner.T) / 2.0
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum()
    diff = a.mean - b.mean
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(fd, 0.0)


def fgd_from_features(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets; shrinks the
    covariance (1e-6 I) with a warning when a set is rank deficient."""
    out = []
    for feats in (feats_a, feats_b):
        feats = np.asarray(feats)
        shrink = 0.0
        if feats.shape[0] <= feats.shape[1]:
            warnings.warn(
                f"only {feats.shape[0]} rows for {feats.shape[1]}-dim features; "
                "covariance is rank deficient, shrinking by 1e-6 I",
                RuntimeWarning,
                stacklevel=2,
            )
            shrink = 1e-6
        out.append(summarize(feats, shrinkage=shrink))
    return frechet_distance(out[0], out[1])


def fgd(real_set, gen_set, encoder: FeatureEncoder) -> float:
    """FGD between two sets of (frames, D) motion feature matrices."""
    real_w = windows_from_set(real_set, encoder.window)
    gen_w = windows_from_set(gen_set, encoder.window)
    return fgd_from_features(encoder.encode(real_w), encoder.encode(gen_w))


# ---------------------------------------------------------------------------
# beat alignment

def audio_beat_frames(condition: ConditionTrack) -> np.ndarray:
    """Positive local maxima of the beat-envelope channel (channel 0)."""
    c = condition.features[:, 0]
    n = c.size
    beats = []
    for f in range(n):
        if c[f] <= 0.0:
            continue
        left_ok = f == 0 or c[f] > c[f - 1]
        right_ok = f == n - 1 or c[f] >= c[f + 1]
        if left_ok and right_ok:
            beats.append(f)
    return np.asarray(beats, dtype=int)


def mean_angular_speed(motion: MotionSequence) -> np.ndarray:
    """Per-interval mean joint rotation angle, length frames - 1."""
    if motion.frame_count < 2:
        return np.zeros(0)
    return quat_angle(motion.rotations[1:], motion.rotations[:-1]).mean(axis=1)


def gesture_beat_frames(motion: MotionSequence) -> np.ndarray:
    """Interior local minima of the mean angular speed (kinematic pauses),
    reported at the left frame of the minimal interval.

    A dip must undercut its right neighbor by more than a relative epsilon,
    so last-ulp wobble on constant-speed stretches does not register."""
    s = mean_angular_speed(motion)
    if s.size < 3:
        return np.zeros(0, dtype=int)
    eps = 1e-9 * (s.max() + 1e-12)
    beats = [
        i
        for i in range(1, s.size - 1)
        if s[i] <= s[i - 1] + eps and s[i] < s[i + 1] - eps
    ]
    return np.asarray(beats, dtype=int)


def beat_align(motion: MotionSequence, condition: ConditionTrack, sigma: float) -> float:
    """Mean Gaussian-kernel agreement between each audio beat and its nearest
    gesture beat; 1.0 when they coincide, 0.0 when no pause exists."""
    if sigma <= 0.0:
        raise MetricsError(f"sigma must be positive, got {sigma}")
    if motion.frame_count < 1:
        raise MetricsError("empty motion")
    audio = audio_beat_frames(condition)
    if audio.size == 0:
        raise MetricsError("condition has no audio beats")
    gesture = gesture_beat_frames(motion)
    if gesture.size == 0:
        return 0.0
    score = 0.0
    for ta in audio:
        d = np.abs(gesture - ta).min()
        score += float(np.exp(-(d**2) / (2.0 * sigma**2)))
    return score / audio.size


def default_beat_sigma(fps: float) -> float:
    return 0.1 * fps


# ---------------------------------------------------------------------------
# diversity and lag

def diversity(samples) -> float:
    """Mean absolute difference per element, averaged over all unordered
    pairs of samples generated under one condition."""
    if len(samples) < 2:
        raise MetricsError("diversity needs at least two samples")
    arrs = [np.asarray(s, dtype=np.float64) for s in samples]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise MetricsError("diversity samples must share one shape")
    total, pairs = 0.0, 0
    for i in range(len(arrs)):
        for k in range(i + 1, len(arrs)):
            total += float(np.abs(arrs[i] - arrs[k]).mean())
            pairs += 1
    return total / pairs


def peak_lag(a: np.ndarray, b: np.ndarray, max_lag: int) -> int:
    """Lag in [-max_lag, max_lag] maximizing the normalized cross-correlation
    of mean-removed signals; positive means b trails a."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size or a.size < max_lag + 2:
        raise MetricsError("signals too short for the requested lag range")
    a = a - a.mean()
    b = b - b.mean()
    best_lag, best = 0, -np.inf
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            x, y = a[: a.size - lag], b[lag:]
        else:
            x, y = a[-lag:], b[: b.size + lag]
        c = float(np.mean(x * y))
        if c > best:
            best, best_lag = c, lag
    return best_lag


# ---------------------------------------------------------------------------
# report

@dataclass
class MetricsReport:
    fgd: float
    ba: float
    div: float
    sample_count: int
    seeds: list[int] = field(default_factory=list)
    checkpoint_id: str = ""

    def __post_init__(self):
        for name in ("fgd", "ba", "div"):
            if not np.isfinite(getattr(self, name)):
                raise MetricsError(f"{name} is not finite")

    def to_json(self) -> str:
        return json.dumps(
            {
                "fgd": self.fgd,
                "ba": self.ba,
                "div": self.div,
                "sample_count": self.sample_count,
                "seeds": self.seeds,
                "checkpoint_id": self.checkpoint_id,
            },
            indent=1,
        )

    def table(self) -> str:
        header = f"{'FGD':>10}  {'BA':>6}  {'DIV':>6}"
        row = f"{self.fgd:>10.4f}  {self.ba:>6.3f}  {self.div:>6.3f}"
        return header + "\n" + row
