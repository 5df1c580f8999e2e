import numpy as np
import pytest
import torch

from duodiff.motion import (
    ConditionTrack,
    MotionSequence,
    RoleLabel,
    Skeleton,
    default_skeleton,
    quat_normalize,
)

# one pass/fail line per acceptance criterion, printed at the end of the run
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_acceptance(name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if passed else "FAIL"
        line = f"{status}  {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)


def random_unit_quats(rng: np.random.Generator, shape) -> np.ndarray:
    q = rng.standard_normal(shape + (4,))
    return quat_normalize(q)


def random_motion(
    rng: np.random.Generator,
    frames: int = 10,
    skeleton: Skeleton | None = None,
    fps: float = 30.0,
    role: RoleLabel = RoleLabel.SPEAKER,
) -> MotionSequence:
    skeleton = skeleton or default_skeleton()
    return MotionSequence(
        skeleton=skeleton,
        fps=fps,
        root_pos=rng.standard_normal((frames, 3)),
        rotations=random_unit_quats(rng, (frames, skeleton.joint_count)),
        role=role,
    )


def random_condition(rng: np.random.Generator, frames: int = 10, channels: int = 4,
                     fps: float = 30.0) -> ConditionTrack:
    return ConditionTrack(features=rng.standard_normal((frames, channels)), fps=fps)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------------------
# finite-difference gradient oracle (64-bit, central differences)

def fd_grad_tensors(loss_fn, tensors, h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of a scalar loss for each tensor, mutating
    elements in place under no_grad and restoring them."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = np.zeros(tuple(t.shape))
            flat = t.view(-1)
            gf = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                lp = float(loss_fn())
                flat[i] = orig - h
                lm = float(loss_fn())
                flat[i] = orig
                gf[i] = (lp - lm) / (2.0 * h)
            grads.append(g)
    return grads


def fd_grad_params(loss_fn, params, h: float = 1e-5) -> dict[str, np.ndarray]:
    names = params.names()
    grads = fd_grad_tensors(loss_fn, [params[n] for n in names], h=h)
    return dict(zip(names, grads))


def fd_check_params(loss_fn, params, h: float = 1e-5, limit: int | None = None) -> dict[str, float]:
    """Compare autograd gradients of a scalar loss against central finite
    differences for every parameter; returns max relative error per tensor.

    `limit` caps the number of perturbed elements per tensor (leading slice)
    to keep smoke checks fast; None checks every element.
    """
    params.zero_grads()
    loss_fn().backward()
    errs: dict[str, float] = {}
    with torch.no_grad():
        for name, t in params.items():
            an = (
                t.grad.numpy().reshape(-1).copy()
                if t.grad is not None
                else np.zeros(t.numel())
            )
            flat = t.view(-1)
            n = flat.numel() if limit is None else min(limit, flat.numel())
            fd = np.zeros(n)
            for i in range(n):
                orig = flat[i].item()
                flat[i] = orig + h
                lp = float(loss_fn())
                flat[i] = orig - h
                lm = float(loss_fn())
                flat[i] = orig
                fd[i] = (lp - lm) / (2.0 * h)
            errs[name] = max_rel_err(fd, an[:n])
    params.zero_grads()
    return errs


def toy_denoiser_config(**overrides):
    from duodiff.denoiser import DenoiserConfig

    base = dict(
        motion_dim=7,
        cond_dim=2,
        role_dim=2,
        width=8,
        heads=2,
        cla_window=2,
        cla_layers=1,
        fusion_layers=1,
        timesteps=4,
        lambda_weight=0.7,
    )
    base.update(overrides)
    return DenoiserConfig(**base)


def max_rel_err(fd: np.ndarray, analytic: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise difference over the tensor's gradient magnitude.

    When both gradients are negligible (below `floor`, e.g. a parameter the
    loss provably cannot depend on) the comparison is vacuous and returns 0.
    """
    scale = max(float(np.abs(analytic).max()), float(np.abs(fd).max()))
    if scale < floor:
        return 0.0
    return float(np.abs(fd - analytic).max()) / scale
