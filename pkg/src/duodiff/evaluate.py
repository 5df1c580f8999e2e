"""Checkpoint evaluation: FGD / BA / DIV over a dataset's test split.

FGD is computed on joint features (speaker and listener channels concatenated
per frame), so it is sensitive to the cross-role structure and not only to
marginal motion quality. BA scores generated speaker motion against the
condition's beat envelope. DIV pools generations drawn under one shared
condition.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .metrics import (
    MetricsReport,
    beat_align,
    default_beat_sigma,
    diversity,
    fgd,
    train_feature_encoder,
)
from .motion import flatten, unflatten, RoleLabel
from .sampling import SamplerSpec, generate_from_checkpoint
from .synthdata import DyadDataset
from .training import Checkpoint


def joint_features(pair_feats: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    s, l = pair_feats
    return np.concatenate([s, l], axis=-1)


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def train_joint_encoder(
    dataset: DyadDataset, seed: int = 0, steps: int = 400, window: int | None = None
):
    """Fit the FGD feature encoder on the train split's joint features."""
    corpus = [
        joint_features((flatten(p.speaker), flatten(p.listener)))
        for p in dataset.subset("train")
    ]
    kwargs = {} if window is None else {"window": window, "stride": max(window // 3, 1)}
    encoder, _ = train_feature_encoder(corpus, seed=seed, steps=steps, **kwargs)
    return encoder


def evaluate_checkpoint(
    ck: Checkpoint,
    dataset: DyadDataset,
    seed: int,
    n_diversity: int = 6,
    guidance_scale: float = 2.5,
    sampler: SamplerSpec = SamplerSpec(),
    encoder_seed: int = 0,
    encoder_steps: int = 400,
    checkpoint_id: str = "",
    max_conditions: int | None = None,
    window: int | None = None,
    encoder=None,
) -> MetricsReport:
    """Generate against every test-split condition and score the three
    metrics. Deterministic given (checkpoint, dataset, seed).

    Pass a prebuilt `encoder` (from train_joint_encoder) to score several
    checkpoints against the same feature space.
    """
    rng = np.random.default_rng(seed)
    test_pairs = dataset.subset("test")
    if not test_pairs:
        raise ValueError("dataset has an empty test split")
    if max_conditions is not None:
        test_pairs = test_pairs[:max_conditions]

    real_joint = [joint_features((flatten(p.speaker), flatten(p.listener))) for p in test_pairs]
    if encoder is None:
        encoder = train_joint_encoder(
            dataset, seed=encoder_seed, steps=encoder_steps, window=window
        )

    gen_joint = []
    ba_scores = []
    sigma = default_beat_sigma(ck.fps)
    for pair in test_pairs:
        xs, xl = generate_from_checkpoint(
            ck, pair.condition.features, n=1, rng=rng,
            guidance_scale=guidance_scale, sampler=sampler,
        )
        # score what a consumer of the motion sees: unit quaternions
        speaker = unflatten(xs[0], ck.skeleton, ck.fps, RoleLabel.SPEAKER)
        listener = unflatten(xl[0], ck.skeleton, ck.fps, RoleLabel.LISTENER)
        gen_joint.append(joint_features((flatten(speaker), flatten(listener))))
        ba_scores.append(beat_align(speaker, pair.condition, sigma))

    fgd_value = fgd(real_joint, gen_joint, encoder)

    shared_cond = test_pairs[0].condition.features
    div_s, div_l = generate_from_checkpoint(
        ck, shared_cond, n=n_diversity, rng=rng,
        guidance_scale=guidance_scale, sampler=sampler,
    )
    div_value = diversity([joint_features((div_s[i], div_l[i])) for i in range(n_diversity)])

    return MetricsReport(
        fgd=float(fgd_value),
        ba=float(np.mean(ba_scores)),
        div=float(div_value),
        sample_count=len(test_pairs),
        seeds=[seed],
        checkpoint_id=checkpoint_id,
    )
