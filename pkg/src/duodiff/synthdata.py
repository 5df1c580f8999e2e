"""Deterministic synthetic speaker/listener dataset with known interaction
structure, plus ingestion of externally provided motion/feature files.

The generator plants measurable ground truth so learning is checkable with
plain signal processing: the speaker's hands move with per-frame angular
speed proportional to a beat-driven energy curve (times a per-sample random
modulation the condition does not carry), the listener's head nods with the
same profile delayed by a configured lag and scaled by a gain, and foot
joints stay bit-exactly planted outside a scripted step so contact frames
are known. Everything is a pure function of (seed, index).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .motion import (
    ConditionTrack,
    MotionError,
    MotionSequence,
    PairedInteraction,
    RoleLabel,
    Skeleton,
    default_skeleton,
    load_condition,
    load_motion,
    quat_from_axis_angle,
    quat_mul,
    retime,
    save_condition,
    save_motion,
)

ENVELOPE_DECAY = 0.75
ENERGY_FLOOR = 0.05
HAND_SPEED_SCALE = 0.25


class SynthError(ValueError):
    pass


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    sample_count: int = 100
    frame_count: int = 60
    fps: float = 30.0
    bpm_low: float = 60.0
    bpm_high: float = 60.0
    cond_channels: int = 4
    listener_lag: int = 6
    listener_gain: float = 0.9
    noise_level: float = 0.0
    role_switch: bool = False
    skeleton: Skeleton = field(default_factory=default_skeleton)

    def __post_init__(self):
        if self.sample_count < 1:
            raise SynthError("sample_count must be >= 1")
        if self.frame_count < 2:
            raise SynthError("frame_count must be >= 2")
        if self.listener_lag < 0:
            raise SynthError("listener_lag must be >= 0")
        if self.frame_count < 2 * self.listener_lag:
            raise SynthError("frame_count must be at least twice the listener lag")
        if not (0.0 < self.listener_gain <= 1.0):
            raise SynthError("listener_gain must be in (0, 1]")
        if self.noise_level < 0.0:
            raise SynthError("noise_level must be >= 0")
        if not (0.0 < self.bpm_low <= self.bpm_high):
            raise SynthError("need 0 < bpm_low <= bpm_high")
        if self.fps <= 0 or self.cond_channels < 1:
            raise SynthError("fps must be positive and cond_channels >= 1")


def beat_frames(frame_count: int, bpm: float, fps: float) -> np.ndarray:
    """Frames carrying a beat: multiples of the beat period, rounded."""
    period = fps * 60.0 / bpm
    k = np.arange(int(np.ceil(frame_count / period)) + 1)
    frames = np.unique(np.round(k * period).astype(int))
    return frames[frames < frame_count]


def gen_condition(seed, frame_count: int, bpm: float, fps: float, channels: int) -> ConditionTrack:
    """Beat impulse envelope on channel 0 (unit spike at each beat frame,
    geometric decay between), low-frequency random tones on the rest."""
    if bpm <= 0 or fps <= 0:
        raise SynthError("bpm and fps must be positive")
    rng = np.random.default_rng(seed)
    feat = np.zeros((frame_count, channels))
    beats = set(beat_frames(frame_count, bpm, fps).tolist())
    level = 0.0
    for f in range(frame_count):
        level = 1.0 if f in beats else level * ENVELOPE_DECAY
        feat[f, 0] = level
    t = np.arange(frame_count) / fps
    for ch in range(1, channels):
        sig = np.zeros(frame_count)
        for _ in range(6):
            freq = rng.uniform(0.3, 2.0)
            amp = rng.uniform(0.1, 0.4)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            sig += amp * np.sin(2.0 * np.pi * freq * t + phase)
        feat[:, ch] = sig
    return ConditionTrack(features=feat, fps=fps)


def condition_energy(track: ConditionTrack) -> np.ndarray:
    """Smoothed beat envelope with a positive floor; the drive signal for
    generated gestures."""
    env = track.features[:, 0]
    kernel = np.ones(5) / 5.0
    return np.convolve(env, kernel, mode="same") + ENERGY_FLOOR


def _angles_to_quats(angles: np.ndarray, axis) -> np.ndarray:
    return quat_from_axis_angle(axis, angles)


def gen_pair(spec: SynthSpec, index: int) -> PairedInteraction:
    """Generate one deterministic interaction sample."""
    f = spec.frame_count
    j = spec.skeleton.joint_count
    if spec.skeleton.joint_names != default_skeleton().joint_names:
        raise SynthError("the generator targets the default 5-joint skeleton")
    rng = np.random.default_rng([spec.seed, index, 1])
    bpm = float(rng.uniform(spec.bpm_low, spec.bpm_high))
    cond = gen_condition([spec.seed, index, 0], f, bpm, spec.fps, spec.cond_channels)
    energy = condition_energy(cond)

    # per-sample slow modulation, deliberately absent from the condition track
    mod_freq = rng.uniform(0.2, 0.5)
    mod_phase = rng.uniform(0.0, 2.0 * np.pi)
    t_axis = np.arange(f) / spec.fps
    modulation = 1.0 + 0.4 * np.sin(2.0 * np.pi * mod_freq * t_axis + mod_phase)
    drive = energy * modulation  # per-frame angular speed profile, scaled below

    lag, gain = spec.listener_lag, spec.listener_gain
    if spec.role_switch:
        switch = f // 2
        active_a = (np.arange(f) < switch).astype(float)
    else:
        active_a = np.ones(f)
    active_b = 1.0 - active_a if spec.role_switch else np.zeros(f)

    def gesture_angles(active: np.ndarray) -> np.ndarray:
        inc = HAND_SPEED_SCALE * drive * active
        inc[0] = 0.0
        return np.cumsum(inc)

    def nod_angles(active_other: np.ndarray) -> np.ndarray:
        # responds to the other's gesturing `lag` frames later, mirroring the
        # gesture speed profile exactly (first increment zeroed the same way)
        src = HAND_SPEED_SCALE * drive * active_other
        src[0] = 0.0
        inc = np.zeros(f)
        if lag < f:
            inc[lag:] = gain * src[: f - lag]
        return np.cumsum(inc)

    def idle_angles(amp: float, freq: float, phase: float) -> np.ndarray:
        return amp * np.sin(2.0 * np.pi * freq * t_axis + phase)

    def build_motion(role: RoleLabel, active: np.ndarray, active_other: np.ndarray) -> MotionSequence:
        root = np.tile([0.0, 0.0, 1.0], (f, 1))
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (f, j, 1))
        # inactive hands drift idly, so a listening role still moves on its own;
        # the listening head is the pure lagged response (measurable exactly)
        hand_idle = idle_angles(0.05, rng.uniform(0.2, 0.4), rng.uniform(0.0, 2.0 * np.pi))
        hand = gesture_angles(active) + hand_idle * (1.0 - active)
        rot[:, 2] = _angles_to_quats(hand, [0, 1, 0])
        rot[:, 3] = _angles_to_quats(-hand, [0, 1, 0])
        head_idle = idle_angles(0.02, rng.uniform(0.2, 0.4), rng.uniform(0.0, 2.0 * np.pi))
        head = nod_angles(active_other) + head_idle * active
        rot[:, 1] = _angles_to_quats(head, [1, 0, 0])
        # scripted step for the speaker role; listener feet stay planted
        if role == RoleLabel.SPEAKER and f >= 20:
            start, length = f // 2, 6
            swing = 0.5 * np.sin(np.pi * (np.arange(length) + 1) / (length + 1))
            rot[start : start + length, 4] = _angles_to_quats(swing, [1, 0, 0])
        if spec.noise_level > 0.0:
            for jj in (1, 2, 3):
                axes = rng.standard_normal((f, 3))
                axes /= np.linalg.norm(axes, axis=1, keepdims=True)
                angles = spec.noise_level * rng.standard_normal(f)
                wobble = np.stack(
                    [
                        np.cos(angles / 2),
                        axes[:, 0] * np.sin(angles / 2),
                        axes[:, 1] * np.sin(angles / 2),
                        axes[:, 2] * np.sin(angles / 2),
                    ],
                    axis=-1,
                )
                rot[:, jj] = quat_mul(rot[:, jj], wobble)
        return MotionSequence(
            skeleton=spec.skeleton, fps=spec.fps, root_pos=root, rotations=rot, role=role
        )

    speaker = build_motion(RoleLabel.SPEAKER, active_a, active_b)
    listener = build_motion(RoleLabel.LISTENER, active_b, active_a)
    return PairedInteraction(speaker=speaker, listener=listener, condition=cond)


# ---------------------------------------------------------------------------
# dataset assembly and splits

SPLIT_FRACTIONS = {"train": 0.8, "val": 0.1, "test": 0.1}


@dataclass
class DyadDataset:
    pairs: list[PairedInteraction]
    split: dict[str, list[int]]
    ids: list[str]

    def subset(self, name: str) -> list[PairedInteraction]:
        return [self.pairs[i] for i in self.split[name]]


def split_indices(seed: int, count: int) -> dict[str, list[int]]:
    """Deterministic disjoint train/val/test split: indices ordered by a
    seeded hash, then cut at the 0.8/0.1/0.1 marks (sizes exact to rounding)."""
    keyed = sorted(
        range(count),
        key=lambda i: hashlib.sha256(f"{seed}:{i}".encode()).hexdigest(),
    )
    n_train = round(SPLIT_FRACTIONS["train"] * count)
    n_val = round(SPLIT_FRACTIONS["val"] * count)
    return {
        "train": sorted(keyed[:n_train]),
        "val": sorted(keyed[n_train : n_train + n_val]),
        "test": sorted(keyed[n_train + n_val :]),
    }


def build_dataset(spec: SynthSpec) -> DyadDataset:
    if spec.sample_count < 10:
        raise SynthError("need at least 10 samples to split")
    pairs = [gen_pair(spec, i) for i in range(spec.sample_count)]
    return DyadDataset(
        pairs=pairs,
        split=split_indices(spec.seed, spec.sample_count),
        ids=[f"{i:04d}" for i in range(spec.sample_count)],
    )


def write_dataset(ds: DyadDataset, out_dir) -> Path:
    """Write per-sample motion/feature files plus a newline-delimited
    manifest mapping sample id to paths and split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split_of = {i: name for name, idxs in ds.split.items() for i in idxs}
    lines = []
    for i, (sid, pair) in enumerate(zip(ds.ids, ds.pairs)):
        names = {
            "speaker": f"{sid}_speaker.json",
            "listener": f"{sid}_listener.json",
            "condition": f"{sid}_condition.json",
        }
        save_motion(pair.speaker, out_dir / names["speaker"])
        save_motion(pair.listener, out_dir / names["listener"])
        save_condition(pair.condition, out_dir / names["condition"])
        lines.append(json.dumps({"id": sid, "split": split_of[i], **names}))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_dataset(manifest_path) -> DyadDataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.jsonl"
    if not manifest_path.exists():
        raise IngestError(f"dataset manifest not found: {manifest_path}")
    base = manifest_path.parent
    pairs, ids = [], []
    split: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        pair = PairedInteraction(
            speaker=load_motion(base / rec["speaker"]),
            listener=load_motion(base / rec["listener"]),
            condition=load_condition(base / rec["condition"]),
        )
        split.setdefault(rec["split"], []).append(len(pairs))
        pairs.append(pair)
        ids.append(rec["id"])
    return DyadDataset(pairs=pairs, split=split, ids=ids)


# ---------------------------------------------------------------------------
# external ingestion

def ingest_external(motion_dir, feature_dir) -> DyadDataset:
    """Pair up {id}_speaker.json / {id}_listener.json motion files with
    {id}_condition.json feature files, aligning every sequence to the
    condition length (mirror-extended when shorter, resampled when longer)
    and forcing the 0/1 role labels."""
    motion_dir, feature_dir = Path(motion_dir), Path(feature_dir)
    speaker_files = sorted(motion_dir.glob("*_speaker.json"))
    if not speaker_files:
        raise IngestError(f"no *_speaker.json files under {motion_dir}")
    pairs, ids = [], []
    for sf in speaker_files:
        sid = sf.name[: -len("_speaker.json")]
        lf = motion_dir / f"{sid}_listener.json"
        cf = feature_dir / f"{sid}_condition.json"
        missing = [str(p) for p in (lf, cf) if not p.exists()]
        if missing:
            raise IngestError(f"sample '{sid}' incomplete; missing {missing}")
        speaker = load_motion(sf)
        listener = load_motion(lf)
        cond = load_condition(cf)
        if speaker.skeleton != listener.skeleton:
            raise IngestError(f"sample '{sid}': speaker and listener skeletons differ")
        target = cond.frame_count
        speaker = retime(speaker, target, pingpong_extend=True)
        listener = retime(listener, target, pingpong_extend=True)
        pairs.append(
            PairedInteraction(
                speaker=replace(speaker, role=RoleLabel.SPEAKER),
                listener=replace(listener, role=RoleLabel.LISTENER),
                condition=cond,
            )
        )
        ids.append(sid)
    n = len(pairs)
    return DyadDataset(pairs=pairs, split={"train": list(range(n)), "val": [], "test": []}, ids=ids)
