"""File-emitting plots: stick-figure frame strips and speed/beat overlays.

Everything renders off-screen (Agg) and writes image files; nothing opens a
window.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import audio_beat_frames, gesture_beat_frames, mean_angular_speed
from .motion import ConditionTrack, MotionSequence, quat_rotate

# display offsets for the desk skeleton; unknown joints fan out on a circle
_NAMED_OFFSETS = {
    "head": np.array([0.0, 0.0, 0.6]),
    "hand_l": np.array([-0.5, 0.0, 0.2]),
    "hand_r": np.array([0.5, 0.0, 0.2]),
    "feet": np.array([0.0, 0.0, -1.0]),
}


def _display_offset(name: str, index: int, count: int) -> np.ndarray:
    if name in _NAMED_OFFSETS:
        return _NAMED_OFFSETS[name]
    angle = 2.0 * np.pi * index / max(count, 1)
    return 0.5 * np.array([np.cos(angle), 0.0, np.sin(angle)])


def joint_positions(motion: MotionSequence, frame: int) -> np.ndarray:
    """World positions of all joints at one frame (root included first)."""
    sk = motion.skeleton
    root = motion.root_pos[frame]
    pos = np.zeros((sk.joint_count, 3))
    for j, name in enumerate(sk.joint_names):
        if sk.parent_index[j] == -1:
            pos[j] = root
            continue
        off = _display_offset(name, j, sk.joint_count)
        pos[j] = root + quat_rotate(motion.rotations[frame, j], off)
    return pos


def stick_figure_strip(motion: MotionSequence, path, panels: int = 6) -> Path:
    """Render evenly spaced frames as XZ-plane stick figures side by side."""
    path = Path(path)
    frames = np.linspace(0, motion.frame_count - 1, min(panels, motion.frame_count)).astype(int)
    fig, axes = plt.subplots(1, len(frames), figsize=(2.2 * len(frames), 3), squeeze=False)
    sk = motion.skeleton
    for ax, f in zip(axes[0], frames):
        pos = joint_positions(motion, int(f))
        for j, parent in enumerate(sk.parent_index):
            if parent == -1:
                continue
            ax.plot(
                [pos[parent, 0], pos[j, 0]],
                [pos[parent, 2], pos[j, 2]],
                "o-",
                color="tab:blue",
                markersize=3,
            )
        ax.set_title(f"frame {f}", fontsize=8)
        ax.set_aspect("equal")
        ax.set_xlim(-1.2, 1.2)
        ax.set_ylim(-0.4, 2.0)
        ax.tick_params(labelsize=6)
    fig.suptitle(f"{motion.role.name.lower()} stick figures")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def speed_overlay(motion: MotionSequence, condition: ConditionTrack | None, path) -> Path:
    """Plot the mean angular speed with detected pauses, and the condition's
    beat envelope with detected audio beats when a condition is given."""
    path = Path(path)
    speed = mean_angular_speed(motion)
    gestures = gesture_beat_frames(motion)
    rows = 2 if condition is not None else 1
    fig, axes = plt.subplots(rows, 1, figsize=(8, 2.2 * rows), sharex=True, squeeze=False)
    ax = axes[0][0]
    ax.plot(speed, color="tab:blue", label="mean joint speed")
    if gestures.size:
        ax.plot(gestures, speed[gestures], "v", color="tab:red", label="gesture beats")
    ax.set_ylabel("rad/frame")
    ax.legend(fontsize=7)
    if condition is not None:
        ax2 = axes[1][0]
        env = condition.features[:, 0]
        beats = audio_beat_frames(condition)
        ax2.plot(env, color="tab:orange", label="beat envelope")
        if beats.size:
            ax2.plot(beats, env[beats], "^", color="tab:green", label="audio beats")
        ax2.set_ylabel("envelope")
        ax2.set_xlabel("frame")
        ax2.legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
