"""Command-line front end: gen-data, train, sample, eval.

Configuration is an INI file with sections [model], [dataset], [train],
[sampler]; every key has a default, unknown keys are rejected by name.
The FOLEYGRID_CONFIG environment variable supplies the config path when
--config is not given.  Exit codes: 2 config error, 3 I/O or file-format
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import os
import sys

import numpy as np

from . import evaluation as ev
from . import token_space as ts
from . import trainer as tr
from .backbone import ConditionEmbedding, ModelConfig
from .checkpoint import load_checkpoint
from .errors import ConfigError, FormatError, NumericError
from .features import align_control, make_projection_params
from .sampler import GUIDANCE_MODES, SamplerConfig, generate, write_trace_csv
from .synthetic import DatasetConfig, make_dataset, read_dataset, write_dataset
from .token_space import PatchGeometry

_ENV_CONFIG = "FOLEYGRID_CONFIG"

_DEFAULTS = {
    "model": {
        "depth": "4", "dim": "64", "heads": "2", "ff_dim": "128", "vocab": "64",
        "mel_bins": "80", "frames": "848", "patch": "16", "condition_dim": "16",
        "n_copy": "2",
    },
    "dataset": {
        "classes": "4", "sync_frames": "240", "semantic_frames": "80",
        "feature_dim": "16", "noise": "0.1", "background": "0",
        "class_block": "8", "seed": "0", "vocab": "64", "max_events": "3",
        "min_duration": "0.5", "max_duration": "2.0", "min_gap": "0.4",
        "clip_length": "10.0",
    },
    "train": {
        "total_steps": "3000", "batch_size": "64", "base_lr": "1e-3",
        "warmup_fraction": "0.02", "condition_dropout": "0.9", "seed": "0",
        "checkpoint_every": "0",
    },
    "sampler": {
        "steps": "12", "cfg_max": "3.0", "gumbel_temp": "9.0",
        "greedy_final": "true",
    },
}


def load_run_config(path: str | None) -> dict:
    """Defaults overlaid with the INI file; unknown sections/keys rejected."""
    merged = {s: dict(kv) for s, kv in _DEFAULTS.items()}
    if path is None:
        path = os.environ.get(_ENV_CONFIG)
    if path:
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            if section not in merged:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in merged[section]:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                merged[section][key] = value
    return merged


def _get(section: dict, key: str, kind):
    raw = section[key]
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def model_config_from(run: dict) -> ModelConfig:
    m = run["model"]
    return ModelConfig(
        depth=_get(m, "depth", int), dim=_get(m, "dim", int),
        heads=_get(m, "heads", int), ff_dim=_get(m, "ff_dim", int),
        vocab=_get(m, "vocab", int),
        geometry=PatchGeometry(mel_bins=_get(m, "mel_bins", int),
                               frames=_get(m, "frames", int),
                               patch=_get(m, "patch", int)),
        condition_dim=_get(m, "condition_dim", int),
    )


def dataset_config_from(run: dict, seed: int | None = None) -> DatasetConfig:
    d = run["dataset"]
    return DatasetConfig(
        classes=_get(d, "classes", int),
        sync_frames=_get(d, "sync_frames", int),
        semantic_frames=_get(d, "semantic_frames", int),
        feature_dim=_get(d, "feature_dim", int),
        noise=_get(d, "noise", float),
        background=_get(d, "background", int),
        class_block=_get(d, "class_block", int),
        seed=_get(d, "seed", int) if seed is None else seed,
        vocab=_get(d, "vocab", int),
        max_events=_get(d, "max_events", int),
        min_duration=_get(d, "min_duration", float),
        max_duration=_get(d, "max_duration", float),
        min_gap=_get(d, "min_gap", float),
        clip_length=_get(d, "clip_length", float),
    )


def train_config_from(run: dict, phase: str, steps: int | None,
                      seed: int | None) -> tr.TrainConfig:
    t = run["train"]
    return tr.TrainConfig(
        total_steps=_get(t, "total_steps", int) if steps is None else steps,
        batch_size=_get(t, "batch_size", int),
        base_lr=_get(t, "base_lr", float),
        warmup_fraction=_get(t, "warmup_fraction", float),
        condition_dropout=_get(t, "condition_dropout", float),
        seed=_get(t, "seed", int) if seed is None else seed,
        phase=phase,
    )


def sampler_config_from(run: dict, args) -> SamplerConfig:
    s = run["sampler"]
    return SamplerConfig(
        steps=_get(s, "steps", int) if args.steps is None else args.steps,
        cfg_max=_get(s, "cfg_max", float) if args.cfg_max is None else args.cfg_max,
        gumbel_temp=(_get(s, "gumbel_temp", float)
                     if args.gumbel is None else args.gumbel),
        greedy_final=_get(s, "greedy_final", bool),
    )


def _check_compat(model: ModelConfig, ds: DatasetConfig) -> None:
    if model.vocab != ds.vocab:
        raise ConfigError(
            f"model vocab {model.vocab} != dataset vocab {ds.vocab}"
        )
    if model.condition_dim != ds.feature_dim:
        raise ConfigError(
            f"model condition_dim {model.condition_dim} != dataset "
            f"feature_dim {ds.feature_dim}"
        )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    run = load_run_config(args.config)
    model = model_config_from(run)
    ds = dataset_config_from(run, seed=args.seed)
    _check_compat(model, ds)
    records = make_dataset(ds, model.geometry, args.count)
    write_dataset(args.out, records, ds)
    digest = hashlib.sha256(repr(ds).encode()).hexdigest()[:16]
    print(f"wrote {len(records)} records to {args.out} (config {digest})")
    return 0


def _cmd_train(args) -> int:
    run = load_run_config(args.config)
    phase = {"pretrain": "pretrain_backbone", "controlnet": "train_controlnet"}[
        args.phase]
    config = train_config_from(run, phase, args.steps, args.seed)
    records, ds = read_dataset(args.data)
    model = model_config_from(run)
    _check_compat(model, ds)
    n_copy = _get(run["model"], "n_copy", int)
    log_path = args.log or args.out + ".loss.csv"
    if phase == "train_controlnet" and args.base is None and not args.resume:
        raise ConfigError("--phase controlnet needs --base BACKBONE_CHECKPOINT")
    state, rows = tr.run_training(
        records, config, model, args.out, log_path, n_copy=n_copy,
        base_checkpoint=args.base, resume=args.resume,
        checkpoint_every=_get(run["train"], "checkpoint_every", int),
    )
    print(f"trained {phase} to step {state.step}; checkpoint {args.out}, "
          f"log {log_path}")
    return 0


def _load_models(backbone_path, controlnet_path):
    bundle = load_checkpoint(backbone_path)
    cnet = bundle.cnet
    if controlnet_path:
        other = load_checkpoint(controlnet_path)
        if other.cnet is None:
            raise ConfigError(f"{controlnet_path} has no control branch section")
        cnet = other.cnet
    return bundle.backbone, cnet


def _record_control(record, model: ModelConfig) -> np.ndarray:
    params = make_projection_params(record.sync.dim, model.dim,
                                    model.geometry.time_tokens)
    return align_control(record.sync, record.semantic, params,
                         model.geometry.freq_tokens)


def _cmd_sample(args) -> int:
    backbone, cnet = _load_models(args.backbone, args.controlnet)
    records, ds = read_dataset(args.data)
    if not 0 <= args.data_record < len(records):
        raise ConfigError(
            f"--data-record {args.data_record} outside [0, {len(records)})"
        )
    rec = records[args.data_record]
    run = load_run_config(args.config)
    config = sampler_config_from(run, args)
    mode = args.mode
    if mode is None:
        mode = "multi" if cnet is not None else "uncond"
    if mode != "uncond" and cnet is None:
        raise ConfigError(f"guidance mode {mode!r} needs a control branch")
    control = None if mode == "uncond" else _record_control(rec, backbone.config)
    prompt = ConditionEmbedding(rec.prompt)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed,
                                                        args.data_record]))
    trace: list | None = [] if args.trace else None
    token_map = generate(backbone, cnet, prompt, control, config, rng,
                         mode=mode, trace=trace)
    ts.write_csv(args.out + ".csv", token_map)
    ts.write_pgm(args.out + ".pgm", token_map)
    if args.trace:
        write_trace_csv(args.trace, trace)
    print(f"sampled record {args.data_record} ({mode}, {config.steps} steps) "
          f"-> {args.out}.csv, {args.out}.pgm")
    return 0


def _cmd_eval(args) -> int:
    backbone, cnet = _load_models(args.backbone, args.controlnet)
    if cnet is None:
        raise ConfigError("eval needs a checkpoint with a control branch")
    records, ds = read_dataset(args.data)
    records = records[:args.count] if args.count else records
    if len(records) < 2:
        raise ConfigError(f"eval needs >= 2 records, got {len(records)}")
    run = load_run_config(args.config)
    config = sampler_config_from(run, args)
    controls = tr.control_grids(records, backbone.config)
    report = ev.ablation_report(backbone, cnet, records, controls, ds,
                                config=config, seed=args.seed,
                                sweep=not args.no_sweep)
    ev.write_report(args.report, report)
    for row in report["ablation"]:
        print(f"{row['variant']:>13}: fd={row['fd']:.4f} "
              f"desync={row['toy_desync']:.4f}s "
              f"acc={row['masked_accuracy']:.4f}")
    print(f"report written to {args.report}")
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="foleygrid",
        description="Masked token-map generation with an aligned control branch.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help=f"INI config path (default: ${_ENV_CONFIG})")
        p.add_argument("--seed", type=int, default=0, help="run seed")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    common(p)
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--count", type=int, default=512, help="number of records")
    p.set_defaults(fn=_cmd_gen_data, seed=None)

    p = sub.add_parser("train", help="run one training phase")
    common(p)
    p.add_argument("--phase", choices=("pretrain", "controlnet"), required=True)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="loss CSV path")
    p.add_argument("--base", default=None,
                   help="backbone checkpoint (controlnet phase)")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint at --out")
    p.add_argument("--steps", type=int, default=None, help="override total steps")
    p.set_defaults(fn=_cmd_train, seed=None)

    p = sub.add_parser("sample", help="decode one clip from a dataset record")
    common(p)
    p.add_argument("--backbone", required=True, help="checkpoint path")
    p.add_argument("--controlnet", default=None,
                   help="checkpoint with the control branch (if separate)")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--data-record", type=int, default=0, help="record index")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cfg-max", type=float, default=None)
    p.add_argument("--gumbel", type=float, default=None)
    p.add_argument("--mode", choices=GUIDANCE_MODES, default=None,
                   help="guidance variant (default: multi, or uncond "
                        "without a control branch)")
    p.add_argument("--trace", default=None, help="per-step trace CSV path")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("eval", help="ablation table and step sweep")
    common(p)
    p.add_argument("--backbone", required=True, help="checkpoint path")
    p.add_argument("--controlnet", default=None)
    p.add_argument("--data", required=True, help="held-out dataset file")
    p.add_argument("--report", required=True, help="report output directory")
    p.add_argument("--count", type=int, default=64,
                   help="clips to evaluate (0 = all)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cfg-max", type=float, default=None)
    p.add_argument("--gumbel", type=float, default=None)
    p.add_argument("--no-sweep", action="store_true", help="skip the step sweep")
    p.set_defaults(fn=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"file format error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
