"""Skeletal motion data model: skeletons, quaternion tracks, retiming, file I/O.

Pose representation is a root position (3 channels, meters) plus one unit
quaternion (w, x, y, z) per joint, so a flattened frame has D = 3 + 4*J
channels. All containers are immutable after construction and all operations
are pure functions.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

QUAT_UNIT_TOL = 1e-6


class MotionError(ValueError):
    """Invalid motion data (bad shapes, non-unit quaternions, bad skeleton)."""


class MotionParseError(MotionError):
    """Malformed motion or feature file; message names the offending field."""


class RoleLabel(IntEnum):
    SPEAKER = 0
    LISTENER = 1


@dataclass(frozen=True)
class Skeleton:
    """Joint tree. parent_index is -1 for the single root joint."""

    joint_names: tuple[str, ...]
    parent_index: tuple[int, ...]
    foot_joint_ids: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        j = self.joint_count
        if j < 1:
            raise MotionError("skeleton needs at least one joint")
        if len(self.parent_index) != j:
            raise MotionError("parent_index length != joint count")
        roots = [i for i, p in enumerate(self.parent_index) if p == -1]
        if len(roots) != 1:
            raise MotionError(f"skeleton must have exactly one root, got {len(roots)}")
        for i, p in enumerate(self.parent_index):
            if p != -1 and not (0 <= p < j):
                raise MotionError(f"joint {i}: parent index {p} out of range")
        # reject cycles: walking up from any joint must reach the root in <= J hops
        for i in range(j):
            cur, hops = i, 0
            while self.parent_index[cur] != -1:
                cur = self.parent_index[cur]
                hops += 1
                if hops > j:
                    raise MotionError(f"parent_index has a cycle through joint {i}")
        for f in self.foot_joint_ids:
            if not (0 <= f < j):
                raise MotionError(f"foot joint id {f} out of range")

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    @property
    def feature_dim(self) -> int:
        return 3 + 4 * self.joint_count


def default_skeleton() -> Skeleton:
    """Desk-scale 5-joint skeleton: root, head, both hands, composite feet."""
    return Skeleton(
        joint_names=("root", "head", "hand_l", "hand_r", "feet"),
        parent_index=(-1, 0, 0, 0, 0),
        foot_joint_ids=frozenset({4}),
    )


@dataclass(frozen=True)
class MotionSequence:
    """One role's trajectory: root positions (F, 3) and rotations (F, J, 4)."""

    skeleton: Skeleton
    fps: float
    root_pos: np.ndarray
    rotations: np.ndarray
    role: RoleLabel

    def __post_init__(self):
        if self.fps <= 0:
            raise MotionError("fps must be positive")
        rp = np.asarray(self.root_pos, dtype=np.float64)
        rot = np.asarray(self.rotations, dtype=np.float64)
        if rp.ndim != 2 or rp.shape[1] != 3:
            raise MotionError(f"root_pos must be (frames, 3), got {rp.shape}")
        f = rp.shape[0]
        if f < 1:
            raise MotionError("need at least one frame")
        j = self.skeleton.joint_count
        if rot.shape != (f, j, 4):
            raise MotionError(f"rotations must be ({f}, {j}, 4), got {rot.shape}")
        if not (np.isfinite(rp).all() and np.isfinite(rot).all()):
            raise MotionError("non-finite values in motion data")
        norms = np.linalg.norm(rot, axis=-1)
        bad = np.abs(norms - 1.0) > QUAT_UNIT_TOL
        if bad.any():
            f_i, j_i = np.argwhere(bad)[0]
            raise MotionError(
                f"non-unit quaternion at frame {f_i}, joint {j_i} (norm {norms[f_i, j_i]:.6g})"
            )
        rp.setflags(write=False)
        rot.setflags(write=False)
        object.__setattr__(self, "root_pos", rp)
        object.__setattr__(self, "rotations", rot)

    @property
    def frame_count(self) -> int:
        return self.root_pos.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.skeleton.feature_dim


@dataclass(frozen=True)
class ConditionTrack:
    """Per-frame control features (audio-derived at full scale), shape (F, A)."""

    features: np.ndarray
    fps: float

    def __post_init__(self):
        feat = np.asarray(self.features, dtype=np.float64)
        if feat.ndim != 2 or feat.shape[0] < 1 or feat.shape[1] < 1:
            raise MotionError(f"condition features must be (frames, channels), got {feat.shape}")
        if not np.isfinite(feat).all():
            raise MotionError("non-finite values in condition track")
        if self.fps <= 0:
            raise MotionError("fps must be positive")
        feat.setflags(write=False)
        object.__setattr__(self, "features", feat)

    @property
    def frame_count(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PairedInteraction:
    """One training sample: aligned speaker motion, listener motion, condition."""

    speaker: MotionSequence
    listener: MotionSequence
    condition: ConditionTrack

    def __post_init__(self):
        if not (
            self.speaker.frame_count
            == self.listener.frame_count
            == self.condition.frame_count
        ):
            raise MotionError(
                "speaker/listener/condition frame counts differ: "
                f"{self.speaker.frame_count}/{self.listener.frame_count}/{self.condition.frame_count}"
            )
        if self.speaker.role != RoleLabel.SPEAKER:
            raise MotionError("speaker sequence must carry the SPEAKER role")
        if self.listener.role != RoleLabel.LISTENER:
            raise MotionError("listener sequence must carry the LISTENER role")

    @property
    def frame_count(self) -> int:
        return self.speaker.frame_count


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z convention)

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, broadcasting over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    """Unit quaternion for a rotation of `angle` radians about `axis`.

    `angle` may be an array; the result broadcasts to angle.shape + (4,).
    """
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    angle = np.asarray(angle, dtype=np.float64)
    half = angle / 2.0
    s = np.sin(half)
    return np.stack(
        [np.cos(half), axis[0] * s, axis[1] * s, axis[2] * s], axis=-1
    )


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by unit quaternion(s) q; broadcasts over leading axes."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * np.cross(qv, np.broadcast_to(v, qv.shape))
    return v + w * t + np.cross(qv, t)


def quat_angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation angle (radians, in [0, pi]) between unit quaternions.

    The rotation angle is twice the 4-vector angle between the (sign-aligned)
    quaternions, computed in atan2 form, which stays accurate for nearly
    identical pairs where arccos-of-dot loses half the significant digits.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = np.sum(a * b, axis=-1, keepdims=True)
    b = np.where(d < 0.0, -b, b)
    diff = np.linalg.norm(a - b, axis=-1)
    summ = np.linalg.norm(a + b, axis=-1)
    return 4.0 * np.arctan2(diff, summ)


def canonical_sign(q: np.ndarray) -> np.ndarray:
    """Flip quaternions so w >= 0 (ties broken toward the given sign of x)."""
    q = np.asarray(q, dtype=np.float64)
    flip = q[..., 0] < 0.0
    out = q.copy()
    out[flip] = -out[flip]
    return out


_NLERP_DOT = 0.9995


def slerp(q0, q1, u: float) -> np.ndarray:
    """Spherical linear interpolation between two unit quaternions.

    Takes the shortest arc (q1 is sign-flipped when dot < 0). Near-identical
    pairs fall back to normalized linear interpolation.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > _NLERP_DOT:
        out = q0 + u * (q1 - q0)
        return out / np.linalg.norm(out)
    theta = math.acos(min(dot, 1.0))
    s = math.sin(theta)
    out = (math.sin((1.0 - u) * theta) / s) * q0 + (math.sin(u * theta) / s) * q1
    return out / np.linalg.norm(out)


# ---------------------------------------------------------------------------
# flatten / unflatten

def flatten(m: MotionSequence) -> np.ndarray:
    """Pack a sequence into a (frames, 3 + 4*J) feature matrix."""
    f = m.frame_count
    return np.concatenate([m.root_pos, m.rotations.reshape(f, -1)], axis=1)


def unflatten(
    features: np.ndarray,
    skeleton: Skeleton,
    fps: float,
    role: RoleLabel,
) -> MotionSequence:
    """Inverse of flatten. Quaternions are renormalized; a degenerate
    (near-zero) quaternion is replaced by the identity."""
    feat = np.asarray(features, dtype=np.float64)
    if feat.ndim != 2 or feat.shape[1] != skeleton.feature_dim:
        raise MotionError(
            f"feature matrix must be (frames, {skeleton.feature_dim}), got {feat.shape}"
        )
    root = feat[:, :3].copy()
    quats = feat[:, 3:].reshape(feat.shape[0], skeleton.joint_count, 4).copy()
    norms = np.linalg.norm(quats, axis=-1, keepdims=True)
    degenerate = norms[..., 0] < 1e-8
    quats[degenerate] = IDENTITY_QUAT
    norms = np.linalg.norm(quats, axis=-1, keepdims=True)
    quats = quats / norms
    return MotionSequence(skeleton=skeleton, fps=fps, root_pos=root, rotations=quats, role=role)


# ---------------------------------------------------------------------------
# retiming

def _pingpong_index(k: int, n: int) -> int:
    """Triangle-wave index walk over [0, n): 0,1,..,n-1,n-2,..,1,0,1,.."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    p = k % period
    return p if p < n else period - p


def retime(m: MotionSequence, target_frames: int, pingpong_extend: bool = False) -> MotionSequence:
    """Resample a sequence to `target_frames`.

    The default resamples on a uniform grid in either direction: linear
    interpolation on the root track, slerp on rotations, endpoints kept
    exactly for target >= 2. With ``pingpong_extend`` a longer target is
    instead filled by mirroring the frames back and forth (reverse-connect),
    which keeps playback speed and grants C0 continuity at every seam; this
    is the mode used to extend listener clips to a longer audio track.
    """
    if target_frames < 1:
        raise MotionError(f"target_frames must be >= 1, got {target_frames}")
    src_f = m.frame_count
    if pingpong_extend and target_frames > src_f:
        idx = [_pingpong_index(k, src_f) for k in range(target_frames)]
        return MotionSequence(
            skeleton=m.skeleton,
            fps=m.fps,
            root_pos=m.root_pos[idx],
            rotations=m.rotations[idx],
            role=m.role,
        )

    if target_frames == 1 or src_f == 1:
        grid = np.zeros(target_frames)
    else:
        grid = np.arange(target_frames) * (src_f - 1) / (target_frames - 1)
    lo = np.floor(grid).astype(int)
    hi = np.minimum(lo + 1, src_f - 1)
    frac = grid - lo

    root = m.root_pos[lo] * (1.0 - frac)[:, None] + m.root_pos[hi] * frac[:, None]
    rot = np.empty((target_frames, m.skeleton.joint_count, 4))
    for k in range(target_frames):
        if frac[k] == 0.0:
            rot[k] = m.rotations[lo[k]]
            root[k] = m.root_pos[lo[k]]
            continue
        for j in range(m.skeleton.joint_count):
            rot[k, j] = slerp(m.rotations[lo[k], j], m.rotations[hi[k], j], frac[k])
    return MotionSequence(
        skeleton=m.skeleton, fps=m.fps, root_pos=root, rotations=rot, role=m.role
    )


# ---------------------------------------------------------------------------
# file I/O
#
# Motion file: UTF-8 JSON with fps, role, joint_names, parents, foot_joints,
# frame_count and frames, each frame a row [root xyz, q0 wxyz, q1 wxyz, ...].
# Floats go through repr so a round-trip is bit exact.

def save_motion(m: MotionSequence, path) -> None:
    doc = {
        "fps": m.fps,
        "role": int(m.role),
        "joint_names": list(m.skeleton.joint_names),
        "parents": list(m.skeleton.parent_index),
        "foot_joints": sorted(m.skeleton.foot_joint_ids),
        "frame_count": m.frame_count,
        "frames": flatten(m).tolist(),
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_motion(path) -> MotionSequence:
    """Parse a motion file. Quaternion signs are canonicalized to w >= 0."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MotionParseError(f"{path}: invalid JSON ({e})") from e
    for key in ("fps", "role", "joint_names", "parents", "foot_joints", "frame_count", "frames"):
        if key not in doc:
            raise MotionParseError(f"{path}: missing field '{key}'")
    skeleton = Skeleton(
        joint_names=tuple(doc["joint_names"]),
        parent_index=tuple(int(p) for p in doc["parents"]),
        foot_joint_ids=frozenset(int(f) for f in doc["foot_joints"]),
    )
    frames = doc["frames"]
    declared = int(doc["frame_count"])
    if len(frames) != declared:
        raise MotionParseError(
            f"{path}: frame_count declares {declared} frames but {len(frames)} rows present"
        )
    d = skeleton.feature_dim
    for i, row in enumerate(frames):
        if len(row) != d:
            raise MotionParseError(f"{path}: frame {i} has {len(row)} channels, expected {d}")
    feat = np.asarray(frames, dtype=np.float64)
    if not np.isfinite(feat).all():
        i, c = np.argwhere(~np.isfinite(feat))[0]
        raise MotionParseError(f"{path}: non-finite value at frame {i}, channel {c}")
    quats = feat[:, 3:].reshape(len(frames), skeleton.joint_count, 4)
    norms = np.linalg.norm(quats, axis=-1)
    zero = norms < 1e-8
    if zero.any():
        f_i, j_i = np.argwhere(zero)[0]
        raise MotionParseError(f"{path}: zero quaternion at frame {f_i}, joint {j_i}")
    quats = canonical_sign(quats / norms[..., None])
    return MotionSequence(
        skeleton=skeleton,
        fps=float(doc["fps"]),
        root_pos=feat[:, :3],
        rotations=quats,
        role=RoleLabel(int(doc["role"])),
    )


def save_condition(c: ConditionTrack, path) -> None:
    doc = {"fps": c.fps, "channels": c.channels, "frames": c.features.tolist()}
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_condition(path) -> ConditionTrack:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MotionParseError(f"{path}: invalid JSON ({e})") from e
    for key in ("fps", "channels", "frames"):
        if key not in doc:
            raise MotionParseError(f"{path}: missing field '{key}'")
    feat = np.asarray(doc["frames"], dtype=np.float64)
    if feat.ndim != 2 or feat.shape[1] != int(doc["channels"]):
        raise MotionParseError(
            f"{path}: frames are {feat.shape} but {doc['channels']} channels declared"
        )
    if not np.isfinite(feat).all():
        raise MotionParseError(f"{path}: non-finite value in condition frames")
    return ConditionTrack(features=feat, fps=float(doc["fps"]))
