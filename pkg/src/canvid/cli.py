"""Command-line entry points: dataset generation, training, sampling,
evaluation and throughput benchmarking.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command is
deterministic under an explicit --seed; without one a fresh seed is drawn
and logged.
"""
from __future__ import annotations

import argparse
import json
import secrets
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import (SyntheticSpec, load_dataset, read_video, write_dataset,
                   write_ppm, write_video)
from .evalmetrics import FeatureEmbedder, eval_protocol_debiased, eval_protocol_standard
from .generation import (AugmentConfig, GuidanceScales, SampleSettings, Sampler,
                         rollout, rollout_batch)
from .model import VideoModel
from .optim import OptState
from .training import TrainDiagnostics, train_loop


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; usage errors are 1 here
        raise UsageError(message)


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    fresh = secrets.randbits(32)
    print(f"seed not given; drew seed={fresh}")
    return fresh


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(kind=args.kind, frames=args.frames, height=args.height,
                         width=args.width, num_shapes=args.shapes,
                         velocity=args.velocity, seed=_resolve_seed(args.seed))
    spec.validate()
    manifest = write_dataset(args.out, spec, args.clips)
    print(f"wrote {manifest['count']} {spec.kind} clips to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.steps is not None:
        cfg.steps = args.steps
    cfg.validate()
    dataset, manifest = load_dataset(args.data)
    if dataset.shape[2] != cfg.height or dataset.shape[3] != cfg.width:
        raise ValueError(f"dataset frames are {dataset.shape[2]}x{dataset.shape[3]} but the model "
                         f"expects {cfg.height}x{cfg.width}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.resume:
        model, opt, start_step = load_checkpoint(args.resume, expected_config=cfg.model_config())
        if opt is None:
            raise ValueError("checkpoint has no optimizer state; cannot resume")
        print(f"resumed from {args.resume} at step {start_step}")
    else:
        model = VideoModel(cfg.model_config(), seed=cfg.seed)
        opt = OptState.for_params(model.named_params(), lr=cfg.lr)

    latest = out / "latest.cmar"
    log_path = out / "metrics.log"
    log_fh = open(log_path, "a", encoding="utf-8")

    def on_step(step, metrics):
        line = (f"step={step} canvas={metrics['canvas_loss']:.6f} flow={metrics['flow_loss']:.6f} "
                f"grad_norm={metrics['grad_norm']:.4f} lr={metrics['lr']:.6g}")
        log_fh.write(line + "\n")
        if step % cfg.log_every == 0 or step == 1:
            print(line)
        if step % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"step_{step:07d}.cmar", model, opt)
            save_checkpoint(latest, model, opt)

    try:
        train_loop(model, dataset, opt, cfg.train_settings(), steps=cfg.steps,
                   batch_size=cfg.batch_size, clip_len=cfg.clip_len, seed=cfg.seed,
                   on_step=on_step)
    except TrainDiagnostics as exc:
        log_fh.write(f"aborted: {exc}\n")
        log_fh.close()
        print(f"training aborted: {exc}; last good checkpoint kept at {latest}", file=sys.stderr)
        return 2
    save_checkpoint(latest, model, opt)
    save_checkpoint(out / f"step_{opt.step:07d}.cmar", model, opt)
    log_fh.close()
    print(f"finished at step {opt.step}; checkpoint at {latest}")
    return 0


def cmd_sample(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    cond = read_video(args.cond)
    if cond.shape[1] != model.cfg.height or cond.shape[2] != model.cfg.width:
        raise ValueError(f"conditioning video is {cond.shape[1]}x{cond.shape[2]} but the model "
                         f"expects {model.cfg.height}x{model.cfg.width}")
    cond = cond[:args.cond_frames] if args.cond_frames else cond
    seed = _resolve_seed(args.seed)
    settings = SampleSettings(decode_steps=args.steps,
                              scales=GuidanceScales(args.ws, args.wt),
                              aug=AugmentConfig(args.aug_r, args.aug_r_prime),
                              group=args.group)
    result = rollout(model, cond, args.num_frames, settings, seed,
                     collect_canvases=bool(args.dump_canvas))
    video, canvases = result if args.dump_canvas else (result, None)
    write_video(args.out, np.clip(video, 0.0, 1.0))
    print(f"wrote {video.shape[0]} frames ({cond.shape[0]} conditioning) to {args.out}")
    frame_dir = Path(args.dump_frames) if args.dump_frames else Path(str(args.out) + ".frames")
    frame_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video):
        write_ppm(frame_dir / f"frame_{i:04d}.ppm", frame)
    if args.dump_canvas:
        canvas_dir = Path(args.dump_canvas)
        canvas_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(canvases):
            write_ppm(canvas_dir / f"canvas_{i:04d}.ppm", np.clip(frame, 0.0, 1.0))
    return 0


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    dataset, _ = load_dataset(args.data)
    seed = _resolve_seed(args.seed)
    settings = SampleSettings(decode_steps=args.steps,
                              scales=GuidanceScales(args.ws, args.wt),
                              aug=AugmentConfig(args.aug_r, args.aug_r_prime),
                              group=args.group)
    sampler = Sampler(model, settings)
    embedder = FeatureEmbedder(channels=model.cfg.channels, seed=args.embedder_seed)
    if args.protocol == "standard":
        result = eval_protocol_standard(sampler, dataset, clips_per_condition=args.samples,
                                        max_test_clips=args.test_clips, gen_len=args.gen_len,
                                        embedder=embedder, seed=seed)
    else:
        result = eval_protocol_debiased(sampler, dataset, repeats=args.samples,
                                        max_test_clips=args.test_clips,
                                        gen_len=args.gen_len or 4,
                                        embedder=embedder, seed=seed)
    record = result.to_json_dict(config_hash="")
    record["checkpoint"] = str(args.checkpoint)
    line = json.dumps(record)
    print(line)
    if args.out:
        with open(args.out, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
    return 0


def cmd_bench(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    max_group = len(model.canvas.heads) if model.canvas is not None else 1
    seed = _resolve_seed(args.seed)
    rows = []
    for group in args.group:
        if group > max_group:
            raise ValueError(f"checkpoint supports groups up to {max_group}, requested {group}")
        for batch in args.batch:
            cond = np.full((batch, 1, model.cfg.height, model.cfg.width, model.cfg.channels),
                           0.5, dtype=np.float32)
            settings = SampleSettings(decode_steps=args.steps, scales=GuidanceScales(1.0, 1.0),
                                      aug=AugmentConfig(), group=group)
            times = []
            for run in range(args.runs + 1):
                start = time.perf_counter()
                rollout_batch(model, cond, args.frames, settings, seed + run)
                times.append(time.perf_counter() - start)
            median = float(np.median(times[1:]))  # first run warms caches
            fps = batch * args.frames / median
            rows.append({"group": group, "batch": batch, "frames_per_sec": fps,
                         "median_sec": median})
            print(f"group={group} batch={batch} frames/s={fps:.2f} (median of {args.runs})")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=1)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="canvid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic video dataset")
    p.add_argument("--kind", required=True, choices=["bouncing", "coinflip"])
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=256)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--shapes", type=int, default=2)
    p.add_argument("--velocity", type=float, default=2.0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="continue a conditioning video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cond", required=True, help="CMV1 video supplying conditioning frames")
    p.add_argument("--cond-frames", type=int, default=1)
    p.add_argument("--num-frames", type=int, default=7)
    p.add_argument("--steps", type=int, default=6, help="masked decoding steps per frame")
    p.add_argument("--ws", type=float, default=1.0)
    p.add_argument("--wt", type=float, default=1.0)
    p.add_argument("--aug-r", type=float, default=0.4)
    p.add_argument("--aug-r-prime", type=float, default=0.4)
    p.add_argument("--group", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-frames")
    p.add_argument("--dump-canvas")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=["standard", "debiased"], default="standard")
    p.add_argument("--samples", type=int, default=16,
                   help="continuations per condition (standard) or repeats (debiased)")
    p.add_argument("--test-clips", type=int, default=64)
    p.add_argument("--gen-len", type=int)
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--ws", type=float, default=1.0)
    p.add_argument("--wt", type=float, default=1.0)
    p.add_argument("--aug-r", type=float, default=0.4)
    p.add_argument("--aug-r-prime", type=float, default=0.4)
    p.add_argument("--group", type=int, default=1)
    p.add_argument("--embedder-seed", type=int, default=2024)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="throughput table over group sizes and batch sizes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--group", type=int, nargs="+", default=[1])
    p.add_argument("--batch", type=int, nargs="+", default=[1])
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, CheckpointError, TrainDiagnostics, FileNotFoundError, ValueError,
            FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
