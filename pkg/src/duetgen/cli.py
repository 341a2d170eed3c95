"""Command-line interface.

Subcommands: gen-corpus, train, generate, eval, ablate, inspect.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .backbone import LayoutError
from .checkpoint import CheckpointError, build_model, describe, load_checkpoint
from .codec import CodecError, fit_stats
from .config import ConfigError, TrainConfig, load_config
from .pipeline import (
    EvalSettings,
    GenerationError,
    GenerationRequest,
    evaluate,
    generate,
    run_ablation,
    write_ablation_csv,
    write_report_csv,
)
from .streamio import StreamFormatError, read_stream, write_stream
from .tensor import NumericsError
from .trainer import TrainingError, build_corpus, eval_scripts, train

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config_arg(path: str) -> TrainConfig:
    config = load_config(path)
    env_seed = os.environ.get("TTAV_SEED")
    if env_seed is not None:
        config = dataclasses.replace(config, seed=int(env_seed))
    return config


def _cmd_gen_corpus(args) -> int:
    from .model import Model

    config = _load_config_arg(args.config)
    model = Model(config)
    corpus = build_corpus(model.codec, config)
    held_out = eval_scripts(model.codec, config)
    out = Path(args.out)
    streams_dir = out / "streams"
    streams_dir.mkdir(parents=True, exist_ok=True)

    manifest = {"config": dataclasses.asdict(config), "splits": {}}
    all_streams = []
    for split, scripts, with_video in (
        ("t2av", corpus.t2av, True),
        ("tts", corpus.tts, False),
        ("eval", held_out, True),
    ):
        entries = []
        for i, script in enumerate(scripts):
            audio, video = model.codec.render_streams(script)
            stem = f"{split}_{i:05d}"
            write_stream(streams_dir / f"{stem}.audio.tlat", audio)
            files = {"audio": f"streams/{stem}.audio.tlat"}
            if with_video:
                write_stream(streams_dir / f"{stem}.video.tlat", video)
                files["video"] = f"streams/{stem}.video.tlat"
            if split != "eval":
                all_streams.append(audio)
                if with_video:
                    all_streams.append(video)
            entries.append(
                {"seed": script.seed, "symbols": list(script.symbols), "durations": list(script.durations), "files": files}
            )
        manifest["splits"][split] = entries
    stats = fit_stats(all_streams)
    manifest["stats"] = {
        m: {"mean": getattr(stats, m).mean.tolist(), "std": getattr(stats, m).std.tolist()}
        for m in ("audio", "video")
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {sum(len(v) for v in manifest['splits'].values())} scripts under {out}")
    return 0


def _cmd_train(args) -> int:
    config = _load_config_arg(args.config)
    out = Path(args.out)
    train(config, out_dir=out, progress=not args.quiet)
    print(f"checkpoint: {out / 'checkpoint.ttav'}")
    print(f"metrics:    {out / 'metrics.jsonl'}")
    return 0


def _parse_symbols(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in raw.split(",") if s.strip() != "")
    except ValueError as exc:
        raise UsageError(f"bad --symbols list: {raw!r}") from exc


def _cmd_generate(args) -> int:
    model, _ = build_model(load_checkpoint(args.checkpoint))
    if (args.symbols is None) == (args.script_seed is None):
        raise UsageError("provide exactly one of --symbols or --script-seed")
    if args.symbols is not None:
        symbols = _parse_symbols(args.symbols)
        from .codec import SymbolScript

        script = SymbolScript(symbols, model.codec.intrinsic_durations(symbols), seed=args.seed)
    else:
        script = model.codec.sample_script(args.script_seed)
    cond = None
    if args.mode in ("a2v", "v2a"):
        if args.cond_stream is None:
            raise UsageError(f"--mode {args.mode} requires --cond-stream")
        cond = read_stream(args.cond_stream)
    elif args.cond_stream is not None:
        raise UsageError("--cond-stream only applies to a2v / v2a")
    request = GenerationRequest(
        mode=args.mode,
        script=script,
        cond_stream=cond,
        steps=args.steps,
        temperature=args.temperature,
        cfg_scale=args.cfg_scale,
        stop_threshold=args.stop_threshold,
        max_patches=args.max_patches,
        seed=args.seed,
    )
    result = generate(model, request)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    audio_path = out.with_suffix(".audio.tlat")
    video_path = out.with_suffix(".video.tlat")
    write_stream(audio_path, result.audio)
    write_stream(video_path, result.video)
    print(f"generated {result.n_patches} patches ({result.audio.n_frames} frames)")
    print(f"audio: {audio_path}")
    print(f"video: {video_path}")
    return 0


def _cmd_eval(args) -> int:
    model, _ = build_model(load_checkpoint(args.checkpoint))
    config = model.config
    if args.scripts is not None:
        config = dataclasses.replace(config, eval_scripts=args.scripts)
    scripts = eval_scripts(model.codec, config)
    settings = EvalSettings(
        task=args.mode,
        steps=args.steps,
        temperature=args.temperature,
        cfg_scale=args.cfg_scale,
        stop_threshold=args.stop_threshold,
        max_patches=args.max_patches,
        seed=args.seed,
    )
    report = evaluate(model, scripts, settings)
    write_report_csv(report, args.out)
    agg_path = Path(args.out).with_suffix(".aggregates.json")
    agg_path.write_text(json.dumps(report.aggregates, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    for key in sorted(report.aggregates):
        print(f"{key}: {report.aggregates[key]:.6f}")
    print(f"rows: {args.out}")
    print(f"aggregates: {agg_path}")
    return 0


def _cmd_ablate(args) -> int:
    config = _load_config_arg(args.config)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if len(modes) < 2:
        raise UsageError("--modes needs at least two comma-separated fusion modes")
    result = run_ablation(modes, config, n_seeds=args.seeds, progress=not args.quiet)
    write_ablation_csv(result, args.out)
    for row in result.rows:
        if row.seed == "mean":
            print(f"{row.fusion:>14} {row.task}: sync {row.sync_score:.4f}  audio_mse {row.audio_mse:.4f}  video_mse {row.video_mse:.4f}")
    for v in result.violations:
        print(f"ordering violation: {v}")
    for f in result.failed:
        print(f"failed run: {f}")
    print(f"table: {args.out}")
    return 0


def _cmd_inspect(args) -> int:
    data = load_checkpoint(args.checkpoint)
    info = describe(data)
    print(f"version: {info['version']}")
    print(f"step: {info['step']}")
    print(f"fusion: {info['fusion']}")
    print(f"parameters: {info['n_parameter_values']}")
    print(f"tensors: {info['n_tensors']}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="duetgen", description="Joint audio-video latent sequence generation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="render the synthetic corpus to TLAT streams")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_corpus)

    p = sub.add_parser("train", help="train a model end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("generate", help="generate streams from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True, choices=("t2av", "a2v", "v2a"))
    p.add_argument("--out", required=True, help="output path stem for .audio.tlat / .video.tlat")
    p.add_argument("--symbols", help="comma-separated symbol ids")
    p.add_argument("--script-seed", type=int, help="sample the script from this seed")
    p.add_argument("--cond-stream", help="TLAT stream for a2v / v2a")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--cfg-scale", type=float, default=2.0)
    p.add_argument("--stop-threshold", type=float, default=0.5)
    p.add_argument("--max-patches", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out scripts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", default="t2av", choices=("t2av", "a2v", "v2a"))
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--scripts", type=int, help="override held-out script count")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--cfg-scale", type=float, default=2.0)
    p.add_argument("--stop-threshold", type=float, default=0.5)
    p.add_argument("--max-patches", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="token-arrangement ablation across fusion modes")
    p.add_argument("--config", required=True)
    p.add_argument("--modes", required=True, help="comma-separated fusion modes")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("inspect", help="dump checkpoint header")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (
        ConfigError,
        CheckpointError,
        StreamFormatError,
        GenerationError,
        TrainingError,
        CodecError,
        LayoutError,
        NumericsError,
        FileNotFoundError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
