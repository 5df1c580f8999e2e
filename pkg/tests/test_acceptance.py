"""Acceptance suite: one test per release criterion, each printing a
pass/fail line in the terminal summary.

The learning and ablation criteria train real desk-scale models (width 64,
50 timesteps, 2000 steps, 3 seeds each for the full and the
no-cross-attention variants), so this module dominates the suite's runtime.
"""
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from duodiff.blocks import (
    AttentionMask,
    as_tensor,
    attention,
    encoder_block,
    encoder_block_param_spec,
    ffn,
    ffn_param_spec,
    init_params,
    layer_norm,
    linear,
    local_mask,
    mha,
    mha_param_spec,
)
from duodiff.cli import main as cli_main
from duodiff.denoiser import (
    DenoiserConfig,
    branch_encode,
    denoise,
    encode_role,
    init_denoiser,
    split_condition,
)
from duodiff.evaluate import evaluate_checkpoint, train_joint_encoder
from duodiff.metrics import (
    beat_align,
    diversity,
    fgd,
    fgd_from_features,
    peak_lag,
    train_feature_encoder,
)
from duodiff.motion import RoleLabel, quat_angle
from duodiff.sampling import generate_from_checkpoint
from duodiff.schedule import cfg_combine, ddpm_step, make_linear_schedule, q_sample
from duodiff.synthdata import SynthSpec, build_dataset
from duodiff.training import TrainConfig, save_checkpoint, train

from conftest import fd_check_params, max_rel_err, record_acceptance, toy_denoiser_config
from test_metrics import impulse_condition, motion_with_speeds

DESK_SPEC = SynthSpec(
    seed=0,
    sample_count=200,
    frame_count=60,
    fps=30.0,
    listener_lag=6,
    listener_gain=0.9,
    noise_level=0.01,
)
DESK_BETAS = (4e-3, 0.3)
DESK_SEEDS = (0, 1, 2)


def desk_train_cfg(seed: int) -> TrainConfig:
    return TrainConfig(
        batch_size=8,
        lr=1e-3,
        steps=2000,
        seed=seed,
        alpha_foot=0.1,
        cond_dropout=0.1,
        lambda_weight=0.8,
        checkpoint_every=2000,
    )


@pytest.fixture(scope="module")
def desk_dataset():
    return build_dataset(DESK_SPEC)


def _train_desk(dataset, seed: int, cross_role: bool):
    mcfg = DenoiserConfig(cross_role_attention=cross_role)
    sch = make_linear_schedule(50, *DESK_BETAS)
    return train(dataset.subset("train"), mcfg, desk_train_cfg(seed), sch)


@pytest.fixture(scope="module")
def desk_runs(desk_dataset):
    t0 = time.time()
    runs = {seed: _train_desk(desk_dataset, seed, cross_role=True) for seed in DESK_SEEDS}
    return runs, time.time() - t0


@pytest.fixture(scope="module")
def desk_ablations(desk_dataset):
    return {seed: _train_desk(desk_dataset, seed, cross_role=False) for seed in DESK_SEEDS}


def check(name: str, passed: bool, detail: str = ""):
    record_acceptance(name, bool(passed), detail)
    assert passed, f"{name}: {detail}"


# ---------------------------------------------------------------------------

class TestC1ScheduleMoments:
    def test_forward_marginal_moments(self):
        t0 = time.time()
        rng = np.random.default_rng(0)
        worst = 0.0
        for steps, (b0, b1) in ((4, (0.1, 0.4)), (50, DESK_BETAS)):
            sch = make_linear_schedule(steps, b0, b1)
            for t in (steps // 2, steps - 1):
                x0 = np.full(100_000, 2.0)
                eps = rng.standard_normal(100_000)
                xt = q_sample(x0, t, eps, sch)
                abar = sch.alpha_bars[t]
                mean_err = abs(xt.mean() / (np.sqrt(abar) * 2.0) - 1.0)
                var_err = abs(xt.var() / (1.0 - abar) - 1.0)
                worst = max(worst, mean_err, var_err)
        elapsed = time.time() - t0
        check(
            "C1 schedule moments (2% over 1e5 draws, T in {4, 50}, < 10 s)",
            worst < 0.02 and elapsed < 10.0,
            f"worst rel err {worst:.4f}, {elapsed:.1f}s",
        )


class TestC2GuidanceFidelity:
    def test_combination_and_noop(self):
        rng = np.random.default_rng(1)
        ok = True
        worst = 0.0
        for _ in range(100):
            s = float(rng.uniform(0.0, 8.0))
            ec = rng.standard_normal((5, 4))
            eu = rng.standard_normal((5, 4))
            got = cfg_combine(ec, eu, s)
            want = (1.0 + s) * ec - s * eu
            scale = np.abs(want).max() + 1e-12
            worst = max(worst, float(np.abs(got - want).max() / scale))
            ok &= np.array_equal(cfg_combine(ec, ec, s), ec)
        check(
            "C2 guidance fidelity ((1+s)ec - s eu; exact no-op on agreement)",
            ok and worst < 1e-12,
            f"max combination error {worst:.2e}",
        )


class TestC3GradientSuite:
    def test_all_blocks_and_full_denoiser(self):
        t0 = time.time()
        rng = np.random.default_rng(2)
        failures = []

        def run(name, loss_fn, params):
            errs = fd_check_params(loss_fn, params)
            worst = max(errs.values())
            if worst >= 1e-4:
                failures.append(f"{name}={worst:.2e}")

        x = as_tensor(rng.standard_normal((5, 6)))
        r = as_tensor(rng.standard_normal((5, 6)))

        p_lin = init_params([("w", (6, 6), "weight"), ("b", (6,), "bias")], 0)
        run("linear", lambda: (linear(x, p_lin["w"], p_lin["b"]) * r).sum(), p_lin)

        p_ln = init_params([("g", (6,), ("normal", 0.5)), ("b", (6,), "bias")], 1)
        run("layer_norm", lambda: (layer_norm(x, p_ln["g"], p_ln["b"]) * r).sum(), p_ln)

        p_ffn = init_params(ffn_param_spec("f", 6, 8), 2)
        run("ffn", lambda: (ffn(x, p_ffn, "f") * r).sum(), p_ffn)

        p_qkv = init_params(
            [("q", (4, 4), "weight"), ("k", (5, 4), "weight"), ("v", (5, 4), "weight")], 3
        )
        mask = AttentionMask(local_mask(5, 2).values[:4])
        r_att = as_tensor(rng.standard_normal((4, 4)))
        run(
            "attention",
            lambda: (attention(p_qkv["q"], p_qkv["k"], p_qkv["v"], mask) * r_att).sum(),
            p_qkv,
        )

        p_mha = init_params(mha_param_spec("a", 6), 4)
        xq = as_tensor(rng.standard_normal((4, 6)))
        xkv = as_tensor(rng.standard_normal((5, 6)))
        m_full = AttentionMask(torch.ones(4, 5, dtype=torch.bool))
        r_mha = as_tensor(rng.standard_normal((4, 6)))
        run("mha", lambda: (mha(xq, xkv, p_mha, "a", 2, m_full) * r_mha).sum(), p_mha)

        p_blk = init_params(encoder_block_param_spec("b", 6, 8), 5)
        r_blk = as_tensor(rng.standard_normal((5, 6)))
        run(
            "encoder_block",
            lambda: (encoder_block(x, p_blk, "b", 2, local_mask(5, 2)) * r_blk).sum(),
            p_blk,
        )

        cfg = toy_denoiser_config()
        p_all = init_denoiser(cfg, 6)
        frames = 4
        xs = rng.standard_normal((frames, cfg.motion_dim))
        xl = rng.standard_normal((frames, cfg.motion_dim))
        c = rng.standard_normal((frames, cfg.cond_dim))
        r_s = as_tensor(rng.standard_normal((frames, cfg.motion_dim)))
        r_l = as_tensor(rng.standard_normal((frames, cfg.motion_dim)))

        def denoiser_loss():
            out_s, out_l = denoise(xs, xl, 1, c, cfg, p_all)
            return (out_s * r_s).sum() + (out_l * r_l).sum()

        run("denoiser", denoiser_loss, p_all)

        elapsed = time.time() - t0
        check(
            "C3 gradient suite (blocks + full denoiser, rel err < 1e-4, < 2 min)",
            not failures and elapsed < 120.0,
            f"{elapsed:.0f}s" + (f"; failed: {failures}" if failures else ""),
        )


class TestC4ArchitectureInvariants:
    def test_role_swap_split_and_lambda_one(self):
        rng = np.random.default_rng(3)
        cfg = toy_denoiser_config()
        params = init_denoiser(cfg, 7)
        frames = 5
        xs = rng.standard_normal((frames, cfg.motion_dim))
        xl = rng.standard_normal((frames, cfg.motion_dim))
        c = rng.standard_normal((frames, cfg.cond_dim))

        # role swap: swapped inputs, embedding rows and condition weights
        out_s, out_l = denoise(xs, xl, 2, c, cfg, params)
        arrays = {k: v.copy() for k, v in params.to_arrays().items()}
        arrays["role_embed"] = arrays["role_embed"][::-1].copy()
        from duodiff.blocks import ParamSet

        swapped = ParamSet.from_arrays(arrays)
        sw_cfg = replace(cfg, lambda_weight=1.0 - cfg.lambda_weight)
        sw_s, sw_l = denoise(xl, xs, 2, c, sw_cfg, swapped)
        with torch.no_grad():
            swap_err = max(
                float((sw_s - out_l).abs().max()), float((sw_l - out_s).abs().max())
            )

        # exact condition-split conservation across lambda values
        conserved = True
        for lam in np.linspace(0.0, 1.0, 21):
            cs, cl = split_condition(c, float(lam))
            conserved &= np.array_equal(cs + cl, c)

        # lambda = 1: the listener branch's pre-fusion latent ignores C
        cfg1 = replace(cfg, lambda_weight=1.0)
        c2 = c + rng.standard_normal(c.shape)

        def z_listener(cond):
            _, cl = split_condition(as_tensor(cond), 1.0)
            aug = encode_role(as_tensor(xl), RoleLabel.LISTENER, params["role_embed"])
            return branch_encode(aug, cl, params, cfg1)

        invariant = torch.equal(z_listener(c), z_listener(c2))

        check(
            "C4 architecture invariants (role swap 1e-6; split exact; lambda=1 isolation)",
            swap_err < 1e-6 and conserved and invariant,
            f"swap err {swap_err:.2e}",
        )


class TestC5OracleSampling:
    def test_ancestral_recovery(self):
        sch = make_linear_schedule(50, *DESK_BETAS)
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal(8)
        runs = np.empty((1000, 8))
        for r in range(1000):
            x = rng.standard_normal(8)
            for t in reversed(range(sch.timesteps)):
                x = ddpm_step(x, x0, t, sch, rng)
            runs[r] = x
        se = runs.std(axis=0, ddof=1) / np.sqrt(len(runs))
        diff = np.abs(runs.mean(axis=0) - x0)
        ok = (diff <= 3.0 * se + 1e-12).all()
        check(
            "C5 oracle-denoiser ancestral sampling recovers x0 (3 SE, T=50)",
            ok,
            f"max |mean - x0| {diff.max():.2e}",
        )


def _generated_lag_median(ck, dataset, seed):
    rng = np.random.default_rng(900 + seed)
    lags = []

    def smooth(sig):
        return np.convolve(sig, np.ones(3) / 3.0, mode="same")

    for pair in dataset.subset("test")[:4]:
        xs, xl = generate_from_checkpoint(
            ck, pair.condition.features, n=2, rng=rng, guidance_scale=2.5
        )
        for i in range(2):
            qs = xs[i][:, 3:].reshape(-1, 5, 4)
            qs = qs / np.linalg.norm(qs, axis=-1, keepdims=True)
            ql = xl[i][:, 3:].reshape(-1, 5, 4)
            ql = ql / np.linalg.norm(ql, axis=-1, keepdims=True)
            hand = quat_angle(qs[1:, 2], qs[:-1, 2])
            head = quat_angle(ql[1:, 1], ql[:-1, 1])
            lags.append(peak_lag(smooth(hand), smooth(head), max_lag=12))
    return float(np.median(lags))


class TestC6LearningSignal:
    def test_loss_drop_and_lag_recovery(self, desk_dataset, desk_runs):
        runs, train_time = desk_runs
        t0 = time.time()
        drops, medians = {}, {}
        for seed, result in runs.items():
            losses = result.losses
            drops[seed] = 1.0 - losses[-100:].mean() / losses[:100].mean()
            medians[seed] = _generated_lag_median(result.checkpoint, desk_dataset, seed)
        elapsed = train_time + (time.time() - t0)
        drop_ok = all(d >= 0.30 for d in drops.values())
        lag_hits = sum(abs(m - DESK_SPEC.listener_lag) <= 2.0 for m in medians.values())
        check(
            "C6 learning signal (loss drop >= 30%; lag within +-2 in >= 2/3 seeds; < 30 min)",
            drop_ok and lag_hits >= 2 and elapsed < 1800.0,
            f"drops {[f'{d:.0%}' for d in drops.values()]}, lag medians {list(medians.values())}, "
            f"{elapsed/60:.1f} min",
        )


class TestC7MetricOracles:
    def test_all_metric_oracles(self):
        rng = np.random.default_rng(5)
        # closed-form Gaussian distance, n = 1e4, F = 8
        mu_b = np.full(8, 0.5)
        a = rng.standard_normal((10_000, 8))
        b = rng.standard_normal((10_000, 8)) * 2.0 + mu_b
        want = float(mu_b @ mu_b) + 8 * (2.0 - 1.0) ** 2
        got = fgd_from_features(a, b)
        gauss_ok = abs(got - want) / want < 0.05

        # fgd of a set against itself through the trained encoder
        spec = SynthSpec(seed=7, sample_count=30, frame_count=60, listener_lag=5, noise_level=0.02)
        from duodiff.motion import flatten
        from duodiff.synthdata import gen_pair

        motions = [flatten(gen_pair(spec, i).speaker) for i in range(30)]
        enc, _ = train_feature_encoder(motions, seed=0, steps=40)
        self_fgd = fgd(motions, motions, enc)

        # beat alignment pins
        speeds = np.full(20, 0.2)
        speeds[[5, 12]] = 0.05
        ba_perfect = beat_align(motion_with_speeds(speeds), impulse_condition(21, [5, 12]), sigma=3.0)
        speeds2 = np.full(20, 0.2)
        speeds2[13] = 0.05
        ba_offset = beat_align(motion_with_speeds(speeds2), impulse_condition(21, [10]), sigma=3.0)

        # diversity pins
        s = rng.standard_normal((4, 5))
        div_same = diversity([s, s.copy()])
        div_pair = diversity([np.array([0.0]), np.array([3.0])])

        ok = (
            gauss_ok
            and self_fgd < 1e-9
            and ba_perfect == 1.0
            and abs(ba_offset - np.exp(-0.5)) < 1e-6
            and div_same == 0.0
            and div_pair == 3.0
        )
        check(
            "C7 metric oracles (fgd 5% + self 1e-9; BA pins; DIV pins)",
            ok,
            f"gauss {got:.3f}/{want:.3f}, self-fgd {self_fgd:.1e}, "
            f"ba {ba_perfect:.3f}/{ba_offset:.4f}, div {div_same}/{div_pair}",
        )


class TestC8DirectionalAblation:
    def test_cross_attention_helps_fgd(self, desk_dataset, desk_runs, desk_ablations):
        runs, _ = desk_runs
        encoder = train_joint_encoder(desk_dataset, seed=0, steps=400)
        wins = 0
        detail = []
        for seed in DESK_SEEDS:
            full = evaluate_checkpoint(
                runs[seed].checkpoint, desk_dataset, seed=700 + seed,
                n_diversity=4, encoder=encoder, max_conditions=10,
            )
            ablated = evaluate_checkpoint(
                desk_ablations[seed].checkpoint, desk_dataset, seed=700 + seed,
                n_diversity=4, encoder=encoder, max_conditions=10,
            )
            wins += full.fgd <= ablated.fgd
            detail.append(f"seed {seed}: {full.fgd:.2f} vs {ablated.fgd:.2f}")
        check(
            "C8 ablation ordering (full FGD <= no-cross-attention FGD in >= 2/3 seeds)",
            wins >= 2,
            "; ".join(detail),
        )


class TestC9Reproducibility:
    def test_commands_and_resume(self, tmp_path):
        # dataset generation is byte identical
        cfg_file = tmp_path / "cfg.ini"
        cfg_file.write_text(
            "[data]\nseed = 3\nsample_count = 12\nframe_count = 16\nlistener_lag = 4\n"
            "noise_level = 0.01\n"
            "[model]\nmotion_dim = 23\ncond_dim = 4\nrole_dim = 2\nwidth = 8\nheads = 2\n"
            "cla_window = 2\ncla_layers = 1\nfusion_layers = 1\ntimesteps = 4\n"
            "[schedule]\nbeta_start = 1e-2\nbeta_end = 0.3\n"
            "[train]\nbatch_size = 4\nlr = 1e-3\nsteps = 14\nseed = 0\ncheckpoint_every = 7\n"
        )
        da, db = tmp_path / "da", tmp_path / "db"
        assert cli_main(["gen-data", "--config", str(cfg_file), "--out", str(da)]) == 0
        assert cli_main(["gen-data", "--config", str(cfg_file), "--out", str(db)]) == 0
        data_identical = all(
            f.read_bytes() == (db / f.name).read_bytes() for f in sorted(da.iterdir())
        )

        # checkpoint resume reproduces 10 subsequent steps bitwise
        from duodiff.synthdata import read_dataset

        ds = read_dataset(da)
        mcfg = toy_denoiser_config(motion_dim=23, cond_dim=4, timesteps=4)
        sch = make_linear_schedule(4, 1e-2, 0.3)
        full = train(ds.subset("train"), mcfg, desk_toy_cfg(14), sch)
        head = train(ds.subset("train"), mcfg, desk_toy_cfg(4), sch)
        tail = train(ds.subset("train"), mcfg, desk_toy_cfg(14), sch, resume_from=head.checkpoint)
        resume_identical = all(
            np.array_equal(full.checkpoint.params[n], tail.checkpoint.params[n])
            for n in full.checkpoint.params
        )

        # sampling from a fixed seed is bitwise reproducible through the CLI
        ck_path = tmp_path / "ck.zip"
        save_checkpoint(full.checkpoint, ck_path)
        cond = next(iter(sorted(da.glob("*_condition.json"))))
        sa, sb = tmp_path / "sa", tmp_path / "sb"
        args = ["sample", "--checkpoint", str(ck_path), "--condition", str(cond),
                "--n", "2", "--seed", "11"]
        assert cli_main(args + ["--out", str(sa)]) == 0
        assert cli_main(args + ["--out", str(sb)]) == 0
        samples_identical = all(
            f.read_bytes() == (sb / f.name).read_bytes() for f in sorted(sa.iterdir())
        )

        check(
            "C9 reproducibility (gen-data bytes; resume 10 steps bitwise; sample bytes)",
            data_identical and resume_identical and samples_identical,
            f"data {data_identical}, resume {resume_identical}, samples {samples_identical}",
        )


def desk_toy_cfg(steps: int) -> TrainConfig:
    return TrainConfig(
        batch_size=4, lr=1e-3, steps=steps, seed=0, alpha_foot=0.1,
        cond_dropout=0.1, lambda_weight=0.7, checkpoint_every=7,
    )
