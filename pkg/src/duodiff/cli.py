"""Command-line surface: dataset generation, training, sampling, evaluation,
retiming, and plot emission.

Configuration is a flat INI file with [data], [model], [schedule] and [train]
sections whose keys mirror the SynthSpec, DenoiserConfig and TrainConfig
fields; any value can be overridden with --set section.key=value. All
randomness flows from explicit seeds, so every command is reproducible from
(config, seed). Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig
from .evaluate import checkpoint_digest, evaluate_checkpoint
from .motion import load_condition, load_motion, retime, save_motion
from .sampling import SamplerSpec, features_to_motions, generate_from_checkpoint
from .schedule import make_linear_schedule
from .synthdata import SynthSpec, build_dataset, read_dataset, write_dataset
from .training import TrainConfig, load_checkpoint, train

OUT_ROOT_ENV = "DUODIFF_OUT"

SCHEDULE_DEFAULTS = {"beta_start": "4e-3", "beta_end": "0.3"}


class UsageError(ValueError):
    """Bad flags, unknown config keys, or unparseable values (exit code 2)."""


def _dataclass_keys(cls) -> dict[str, type]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name == "skeleton":
            continue
        out[f.name] = f.type
    return out


_SECTION_FIELDS = {
    "data": _dataclass_keys(SynthSpec),
    "model": _dataclass_keys(DenoiserConfig),
    "train": _dataclass_keys(TrainConfig),
    "schedule": {"beta_start": float, "beta_end": float},
}


def _coerce(section: str, key: str, raw: str):
    fields = _SECTION_FIELDS[section]
    ftype = str(fields[key])
    if "bool" in ftype:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{section}.{key}: expected a boolean, got '{raw}'")
    try:
        if "int" in ftype:
            return int(raw)
        if "float" in ftype:
            return float(raw)
    except ValueError as e:
        raise UsageError(f"{section}.{key}: {e}") from e
    return raw


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict[str, str]]:
    cfg: dict[str, dict[str, str]] = {s: {} for s in _SECTION_FIELDS}
    cfg["schedule"].update(SCHEDULE_DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise UsageError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in cfg:
                raise UsageError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in _SECTION_FIELDS[section]:
                    raise UsageError(f"unknown config key {section}.{key}")
                cfg[section][key] = value
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got '{item}'")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in cfg:
            raise UsageError(f"unknown config section '{section}' in --set")
        if key not in _SECTION_FIELDS[section]:
            raise UsageError(f"unknown config key {section}.{key}")
        cfg[section][key] = value
    return cfg


def _build(section: str, cfg: dict[str, dict[str, str]], cls, **extra):
    kwargs = {k: _coerce(section, k, v) for k, v in cfg[section].items()}
    kwargs.update(extra)
    return cls(**kwargs)


def build_synth_spec(cfg, seed: int | None = None) -> SynthSpec:
    extra = {} if seed is None else {"seed": seed}
    return _build("data", cfg, SynthSpec, **extra)


def build_model_cfg(cfg) -> DenoiserConfig:
    return _build("model", cfg, DenoiserConfig)


def build_train_cfg(cfg, seed: int | None = None) -> TrainConfig:
    extra = {} if seed is None else {"seed": seed}
    return _build("train", cfg, TrainConfig, **extra)


def build_schedule(cfg, timesteps: int):
    return make_linear_schedule(
        timesteps,
        float(cfg["schedule"]["beta_start"]),
        float(cfg["schedule"]["beta_end"]),
    )


def _out_dir(arg: str | None, sub: str) -> Path:
    if arg:
        return Path(arg)
    root = os.environ.get(OUT_ROOT_ENV, "duodiff_out")
    return Path(root) / sub


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set)
    spec = build_synth_spec(cfg, seed=args.seed)
    out = _out_dir(args.out, "data")
    manifest = write_dataset(build_dataset(spec), out)
    print(f"wrote dataset manifest: {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    dataset = read_dataset(args.data)
    model_cfg = build_model_cfg(cfg)
    train_cfg = build_train_cfg(cfg, seed=args.seed)
    sch = build_schedule(cfg, model_cfg.timesteps)
    out = _out_dir(args.out, "train")
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(
        dataset.subset("train"), model_cfg, train_cfg, sch, out_dir=out, resume_from=resume
    )
    out.mkdir(parents=True, exist_ok=True)
    losses = out / "losses.csv"
    with open(losses, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        start = result.checkpoint.step - len(result.losses)
        for i, val in enumerate(result.losses):
            fh.write(f"{start + i + 1},{val!r}\n")
    final = result.written[-1] if result.written else None
    print(f"trained {len(result.losses)} steps; loss log: {losses}")
    if final:
        print(f"final checkpoint: {final}")
    return 0


def cmd_sample(args) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    ck = load_checkpoint(args.checkpoint)
    cond = load_condition(args.condition)
    sampler = SamplerSpec.parse(args.sampler)
    rng = np.random.default_rng(args.seed)
    xs, xl = generate_from_checkpoint(
        ck, cond.features, n=args.n, rng=rng, guidance_scale=args.scale, sampler=sampler
    )
    out = _out_dir(args.out, "samples")
    out.mkdir(parents=True, exist_ok=True)
    for i, (speaker, listener) in enumerate(features_to_motions(xs, xl, ck.skeleton, ck.fps)):
        save_motion(speaker, out / f"sample_{i:03d}_speaker.json")
        save_motion(listener, out / f"sample_{i:03d}_listener.json")
    print(f"wrote {args.n} generated pairs to {out}")
    return 0


def cmd_evaluate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.data)
    report = evaluate_checkpoint(
        ck,
        dataset,
        seed=args.seed,
        n_diversity=args.n_diversity,
        guidance_scale=args.scale,
        sampler=SamplerSpec.parse(args.sampler),
        checkpoint_id=checkpoint_digest(args.checkpoint),
        max_conditions=args.max_conditions,
        window=args.fgd_window,
    )
    out_file = Path(args.out) if args.out else _out_dir(None, "eval") / "report.json"
    out_file.parent.mkdir(parents=True, exist_ok=True)
    out_file.write_text(report.to_json(), encoding="utf-8")
    print(report.table())
    print(f"report: {out_file}")
    return 0


def cmd_retime(args) -> int:
    if args.frames < 1:
        raise UsageError(f"--frames must be >= 1, got {args.frames}")
    motion = load_motion(args.input)
    out = retime(motion, args.frames, pingpong_extend=args.pingpong)
    save_motion(out, args.out)
    print(f"retimed {motion.frame_count} -> {args.frames} frames: {args.out}")
    return 0


def cmd_plot(args) -> int:
    from .plots import speed_overlay, stick_figure_strip

    out = _out_dir(args.out, "plots")
    cond = load_condition(args.condition) if args.condition else None
    written = []
    for mp in args.input:
        motion = load_motion(mp)
        stem = Path(mp).stem
        written.append(stick_figure_strip(motion, out / f"{stem}_strip.png"))
        written.append(speed_overlay(motion, cond, out / f"{stem}_speed.png"))
    for p in written:
        print(f"wrote {p}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duodiff",
        description="Two-role conditional diffusion for paired speaker/listener motion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="INI config file")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                           help="override a config value (repeatable)")
        p.add_argument("--out", help=f"output location (default under ${OUT_ROOT_ENV})")

    p = sub.add_parser("gen-data", help="write a synthetic paired dataset")
    common(p)
    p.add_argument("--seed", type=int, default=None, help="override data.seed")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a denoiser on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset dir or manifest")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate motion pairs from a checkpoint")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--condition", required=True, help="condition feature file")
    p.add_argument("--n", type=int, default=4, help="number of pairs")
    p.add_argument("--scale", type=float, default=2.5, help="guidance scale")
    p.add_argument("--sampler", default="ddpm", help="'ddpm' or 'ddim:K'")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("evaluate", help="FGD/BA/DIV of a checkpoint on a dataset")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset dir or manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=2.5)
    p.add_argument("--sampler", default="ddpm")
    p.add_argument("--n-diversity", type=int, default=6)
    p.add_argument("--max-conditions", type=int, default=None)
    p.add_argument("--fgd-window", type=int, default=None,
                   help="override the FGD window length (for short clips)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("retime", help="resample a motion file to a new length")
    p.add_argument("--input", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pingpong", action="store_true",
                   help="extend by mirroring instead of stretching")
    p.set_defaults(fn=cmd_retime)

    p = sub.add_parser("plot", help="emit stick-figure strips and speed overlays")
    common(p, config=False)
    p.add_argument("--input", nargs="+", required=True, help="motion file(s)")
    p.add_argument("--condition", help="optional condition file for beat overlay")
    p.set_defaults(fn=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
