"""Command line entry point: ``tempme <command> ...``.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure
(non-finite values during training). Outputs go to ``--out`` when given,
else to ``$TEMPME_OUT_DIR/<command>.<ext>`` when that variable is set, else
to stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import torch

from .config import DEFAULT_SCHEDULES, PRESETS, preset
from .errors import ContractError, DivergenceError, ScheduleError
from .formats import validate
from .schedule import MergeSchedule, parse_schedule, predict_token_counts

OUT_DIR_ENV = "TEMPME_OUT_DIR"

# Merging-strategy ablation: progressive/holistic/continuous and their variants.
ABLATION_ROWS = [
    ("A0", "12@9:6@10:3@11:1"),
    ("A1", "12@9:4@10:1"),
    ("A1", "12@9:1"),
    ("A2", "12@9:6@10:3"),
    ("A2", "12@9:4"),
    ("A3", "12@7:6@9:3@11:1"),
    ("A3", "12@4:6@7:3@10:1"),
    ("A3", "12@1:6@5:3@9:1"),
]


class UsageError(Exception):
    pass


def _config(args):
    overrides = {}
    if getattr(args, "frames", None):
        overrides["frames"] = args.frames
    if getattr(args, "width", None):
        width = args.width
        overrides.update(width=width, heads=max(1, min(PRESETS[args.preset].heads, width // 8)))
    return preset(args.preset, **overrides)


def _schedule(args, cfg) -> MergeSchedule:
    text = args.schedule
    if text is None:
        text = DEFAULT_SCHEDULES[args.preset]
        if cfg.frames != PRESETS[args.preset].frames:
            raise UsageError("--schedule is required when --frames differs from the preset")
    return parse_schedule(text)


def _merge_options(name: str) -> str:
    return " ".join(DEFAULT_SCHEDULES[name].split()[1:])


def _emit(args, command: str, payload: dict, table: str | None = None) -> None:
    validate(payload, command)
    fmt = getattr(args, "format", "json")
    text = table if fmt == "table" and table is not None else json.dumps(payload, indent=2) + "\n"
    out = args.out
    if out is None and os.environ.get(OUT_DIR_ENV):
        out = str(Path(os.environ[OUT_DIR_ENV]) / f"{command}.{'txt' if fmt == 'table' else 'json'}")
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def cmd_tokens(args) -> None:
    cfg = _config(args)
    report = predict_token_counts(cfg, _schedule(args, cfg))
    _emit(args, "tokens", report.to_dict(), report.to_table())


def cmd_flops(args) -> None:
    from .accounting import estimate_flops

    cfg = _config(args)
    report = estimate_flops(cfg, _schedule(args, cfg))
    _emit(args, "flops", report.to_dict(), report.to_table())


def cmd_ablate(args) -> None:
    from .accounting import estimate_flops

    cfg = _config(args)
    if cfg.frames != 12:
        raise UsageError(f"the ablation rows are defined for 12 frames; preset {args.preset} has {cfg.frames}")
    opts = _merge_options(args.preset)
    rows = []
    for label, head in ABLATION_ROWS:
        sched = parse_schedule(f"{head} {opts}")
        fl = estimate_flops(cfg, sched)
        tc = predict_token_counts(cfg, sched)
        rows.append(
            {
                "label": label,
                "schedule": sched.to_text(),
                "notation": sched.arrow_notation(),
                "gflops": round(fl.gflops, 2),
                "fraction_of_baseline": round(fl.fraction, 4),
                "final_clip_count": tc.final_clip_count,
                "final_tokens_per_clip": tc.final_tokens_per_clip,
                "max_attention_capacity": max(l.attention_capacity for l in tc.layers),
            }
        )
    lines = [f"{'row':<4} {'schedule':<28} {'GFLOPs':>7} {'%':>5} {'# Tokens':>10} {'attn':>5}"]
    for r in rows:
        tokens = f"{r['final_clip_count']} x {r['final_tokens_per_clip']}"
        lines.append(
            f"{r['label']:<4} {r['notation']:<28} {r['gflops']:>7.1f} {r['fraction_of_baseline']:>5.0%} "
            f"{tokens:>10} {r['max_attention_capacity']:>5}"
        )
    _emit(args, "ablate", {"preset": args.preset, "options": opts, "rows": rows}, "\n".join(lines) + "\n")


def cmd_forward(args) -> None:
    from .container import load_weights
    from .encoder import ForwardTrace, encode_video, init_weights
    from .synthgen import SynthSpec, generate

    if args.weights:
        weights = load_weights(args.weights)
        cfg = weights.cfg
    else:
        cfg = _config(args)
        weights = init_weights(cfg, args.seed)
    sched = _schedule(args, cfg)
    predicted = predict_token_counts(cfg, sched)
    data = generate(SynthSpec.for_config(cfg, 1, redundancy=args.redundancy, seed=args.seed))
    trace = ForwardTrace()
    t0 = time.perf_counter()
    with torch.no_grad():
        emb = encode_video(data.frames[0], weights, None, None, sched, trace=trace, workers=args.workers)
    wall = time.perf_counter() - t0
    layers = [
        {
            "layer": rec.layer,
            "kind": rec.kind,
            "clip_count": rec.clip_count,
            "tokens_after_cross_merge": rec.tokens_after_cross_merge,
            "tokens_after_intra_merge": rec.tokens_after_intra_merge,
            "attention_capacity": rec.attention_capacity,
            "cls_tokens": rec.cls_tokens,
        }
        for rec in trace.layers
    ]
    matches = all(
        (r.clip_count, r.tokens_after_cross_merge, r.tokens_after_intra_merge, r.attention_capacity)
        == (p.clip_count, p.tokens_after_cross_merge, p.tokens_after_intra_merge, p.attention_capacity)
        for r, p in zip(trace.layers, predicted.layers)
    )
    payload = {
        "preset": args.preset,
        "schedule": sched.to_text(),
        "seed": args.seed,
        "layers": layers,
        "final_token_count": trace.layers[-1].clip_count * trace.layers[-1].tokens_after_intra_merge,
        "matches_prediction": matches,
        "embedding_norm": float(emb.norm()),
        "wall_time_s": wall,
    }
    if args.export_merge_map:
        mm = trace.merge_map(0)
        mm.update(frames=cfg.frames, patch_grid=cfg.patch_grid, schedule=sched.to_text())
        validate(mm, "merge_map")
        Path(args.export_merge_map).write_text(json.dumps(mm) + "\n")
    rows = [f"{'layer':>5} {'kind':<5} {'clips':>5} {'attn':>6} {'out':>6}"]
    for l in layers:
        rows.append(f"{l['layer']:>5} {l['kind']:<5} {l['clip_count']:>5} {l['attention_capacity']:>6} {l['tokens_after_intra_merge']:>6}")
    rows.append(f"matches prediction: {matches}")
    rows.append(f"embedding norm: {payload['embedding_norm']:.6f}")
    rows.append(f"wall time (s): {wall:.4f}")
    _emit(args, "forward", payload, "\n".join(rows) + "\n")


def cmd_train(args) -> None:
    from .retrieval import TrainConfig, train_toy
    from .synthgen import SynthSpec, generate

    cfg = _config(args)
    sched = _schedule(args, cfg)
    data = generate(SynthSpec.for_config(cfg, args.pairs, redundancy=args.redundancy, seed=args.seed))
    opt = TrainConfig(steps=args.steps, lr=args.lr, momentum=args.momentum, batch_size=args.batch, seed=args.seed)
    log_fh = open(args.log, "w") if args.log else None
    try:
        on_step = (lambda rec: log_fh.write(json.dumps(rec) + "\n")) if log_fh else None
        result = train_toy(data, cfg, sched, opt, on_step=on_step)
    finally:
        if log_fh:
            log_fh.close()
    payload = {
        "preset": args.preset,
        "schedule": sched.to_text(),
        "pairs": args.pairs,
        "steps": args.steps,
        "seed": args.seed,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "loss_ratio": result.final_loss / result.initial_loss,
        "metrics": result.final_metrics.to_dict(),
    }
    _emit(args, "train", payload)


def cmd_bench(args) -> None:
    from .accounting import bench_forward

    if args.repeats < 3:
        raise UsageError("--repeats must be at least 3")
    cfg = _config(args)
    sched = _schedule(args, cfg)
    report = bench_forward(
        cfg, sched, batch=args.batch, repeats=args.repeats, seed=args.seed,
        threads=args.threads, workers=args.workers, preset_name=args.preset,
    )
    payload = report.to_dict()
    table = (
        f"baseline {report.baseline.videos_per_s:10.2f} videos/s\n"
        f"merged   {report.merged.videos_per_s:10.2f} videos/s\n"
        f"speedup  {report.speedup:10.2f}x (wall clock)\n"
    )
    _emit(args, "bench", payload, table)


def cmd_synth(args) -> None:
    from .synthgen import SynthSpec, generate

    cfg = _config(args)
    data = generate(SynthSpec.for_config(cfg, args.pairs, redundancy=args.redundancy, seed=args.seed))
    data.save(args.dataset)


def cmd_weights(args) -> None:
    from .container import save_weights
    from .encoder import init_weights

    save_weights(args.weights_out, init_weights(_config(args), args.seed))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempme", description="Temporal token merging toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, schedule=True, default_preset="b32"):
        p.add_argument("--preset", choices=sorted(PRESETS), default=default_preset)
        p.add_argument("--frames", type=int, help="override the preset's frame count")
        if schedule:
            p.add_argument("--schedule", help="merge schedule, e.g. '12@9:6@10:3@11:1 r=2 Rc=0.7 Ri=0.9'")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output file (default: stdout or $%s)" % OUT_DIR_ENV)
        p.add_argument("--format", choices=["json", "table"], default="json")

    p = sub.add_parser("tokens", help="predict per-layer token counts")
    common(p)
    p.set_defaults(func=cmd_tokens)

    p = sub.add_parser("flops", help="estimate video-tower GFLOPs")
    common(p)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("ablate", help="token counts and GFLOPs for the merging-strategy variants")
    common(p, schedule=False)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("forward", help="run the video tower on synthetic input and trace token counts")
    common(p, default_preset="toy")
    p.add_argument("--width", type=int, help="shrink the model width (token counts do not depend on it)")
    p.add_argument("--weights", help="weight container to load instead of seeded weights")
    p.add_argument("--redundancy", type=float, default=0.8)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--export-merge-map", metavar="PATH")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("train", help="train LoRA and clip embeddings on synthetic pairs")
    common(p, default_preset="micro")
    p.add_argument("--pairs", type=int, default=32)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.03)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--redundancy", type=float, default=0.8)
    p.add_argument("--log", help="write the per-step log as JSON lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="wall-clock throughput, merged schedule vs no merging")
    common(p, default_preset="toy")
    p.add_argument("--width", type=int)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic dataset container")
    common(p, schedule=False, default_preset="micro")
    p.add_argument("--pairs", type=int, default=32)
    p.add_argument("--redundancy", type=float, default=0.8)
    p.add_argument("dataset", help="output path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("weights", help="write seeded synthetic backbone weights")
    common(p, schedule=False, default_preset="toy")
    p.add_argument("--width", type=int)
    p.add_argument("weights_out", help="output path")
    p.set_defaults(func=cmd_weights)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ScheduleError, ContractError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
