"""GFLOPs estimation for the video tower and wall-clock throughput benchmarks.

One multiply-accumulate counts as one FLOP. Per layer and per sequence, with
``a`` tokens entering attention and ``f`` tokens entering the FFN::

    projections  4 * a * D^2        (Q, K, V, O)
    attention    2 * a^2 * D        (scores + weighted sum of values)
    ffn          2 * f * D * H      (H = hidden width, 4D by default)

plus the patch embedding ``F * P * (3 p^2) * D``. Layer norms, softmax,
biases, GELU and the merge similarity computations are not counted.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field

import torch

from .config import ModelConfig
from .schedule import MergeSchedule, identity_schedule, predict_token_counts

FOOTER = "MACs counted as FLOPs; layer norm, softmax, bias, GELU and merge matching excluded."


@dataclass
class LayerFlops:
    layer: int
    sequences: int
    attention_tokens: int
    ffn_tokens: int
    projection_macs: int
    attention_macs: int
    ffn_macs: int

    @property
    def total(self) -> int:
        return self.projection_macs + self.attention_macs + self.ffn_macs


@dataclass
class FlopsReport:
    schedule: str
    patch_embed_macs: int
    layers: list[LayerFlops] = field(default_factory=list)
    baseline_macs: int | None = None

    @property
    def total_macs(self) -> int:
        return self.patch_embed_macs + sum(l.total for l in self.layers)

    @property
    def gflops(self) -> float:
        return self.total_macs / 1e9

    @property
    def fraction(self) -> float:
        return self.total_macs / self.baseline_macs if self.baseline_macs else 1.0

    def to_dict(self) -> dict:
        layers = []
        for l in self.layers:
            d = asdict(l)
            d["total_macs"] = l.total
            layers.append(d)
        return {
            "schedule": self.schedule,
            "patch_embed_macs": self.patch_embed_macs,
            "layers": layers,
            "total_macs": self.total_macs,
            "gflops": round(self.gflops, 4),
            "baseline_gflops": round(self.baseline_macs / 1e9, 4) if self.baseline_macs else None,
            "fraction_of_baseline": round(self.fraction, 6),
            "note": FOOTER,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        head = f"{'layer':>5} {'seqs':>5} {'attn':>6} {'ffn':>6} {'proj GF':>9} {'attn GF':>9} {'ffn GF':>9}"
        rows = [f"schedule: {self.schedule}", head, "-" * len(head)]
        for l in self.layers:
            rows.append(
                f"{l.layer:>5} {l.sequences:>5} {l.attention_tokens:>6} {l.ffn_tokens:>6} "
                f"{l.projection_macs / 1e9:>9.3f} {l.attention_macs / 1e9:>9.3f} {l.ffn_macs / 1e9:>9.3f}"
            )
        rows.append("-" * len(head))
        rows.append(f"patch embedding: {self.patch_embed_macs / 1e9:.3f} GFLOPs")
        rows.append(f"GFLOPs: {self.gflops:.1f} ({self.fraction:.0%})")
        rows.append(FOOTER)
        return "\n".join(rows) + "\n"


def _raw_flops(cfg: ModelConfig, sched: MergeSchedule) -> FlopsReport:
    counts = predict_token_counts(cfg, sched)
    d, h = cfg.width, cfg.hidden_dim
    report = FlopsReport(
        schedule=sched.to_text(),
        patch_embed_macs=cfg.frames * cfg.patches_per_frame * cfg.patch_dim * d,
    )
    for lc in counts.layers:
        s, a, f = lc.clip_count, lc.attention_capacity, lc.tokens_after_intra_merge
        report.layers.append(
            LayerFlops(
                layer=lc.layer,
                sequences=s,
                attention_tokens=a,
                ffn_tokens=f,
                projection_macs=s * 4 * a * d * d,
                attention_macs=s * 2 * a * a * d,
                ffn_macs=s * 2 * f * d * h,
            )
        )
    return report


def estimate_flops(cfg: ModelConfig, sched: MergeSchedule) -> FlopsReport:
    report = _raw_flops(cfg, sched)
    report.baseline_macs = _raw_flops(cfg, identity_schedule(cfg.frames)).total_macs
    return report


@dataclass
class BenchResult:
    schedule: str
    batch: int
    repeats: int
    seconds: list[float]

    @property
    def median_s(self) -> float:
        return statistics.median(self.seconds)

    @property
    def videos_per_s(self) -> float:
        return self.batch / self.median_s

    def to_dict(self) -> dict:
        rates = [self.batch / s for s in self.seconds]
        return {
            "schedule": self.schedule,
            "batch": self.batch,
            "repeats": self.repeats,
            "wall_median_s": self.median_s,
            "videos_per_s": self.videos_per_s,
            "videos_per_s_mean": statistics.mean(rates),
            "videos_per_s_std": statistics.stdev(rates) if len(rates) > 1 else 0.0,
        }


@dataclass
class BenchReport:
    preset: str
    threads: int
    baseline: BenchResult
    merged: BenchResult

    @property
    def speedup(self) -> float:
        return self.merged.videos_per_s / self.baseline.videos_per_s

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "threads": self.threads,
            "baseline": self.baseline.to_dict(),
            "merged": self.merged.to_dict(),
            "speedup": self.speedup,
            "note": "all fields except preset, threads, batch and repeats are wall-clock measurements",
        }


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def bench_forward(
    cfg: ModelConfig,
    sched: MergeSchedule,
    batch: int = 32,
    repeats: int = 5,
    seed: int = 0,
    threads: int = 1,
    workers: int = 1,
    preset_name: str = "custom",
) -> BenchReport:
    """Median videos/s of the merged schedule against the identity schedule."""
    from .encoder import encode_video, init_weights
    from .errors import ContractError

    if repeats < 3:
        raise ContractError("repeats must be at least 3")
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(threads)
    try:
        weights = init_weights(cfg, seed)
        gen = torch.Generator().manual_seed(seed)
        frames = torch.randn(batch, cfg.frames, cfg.patches_per_frame, cfg.patch_dim, generator=gen)
        base_sched = identity_schedule(cfg.frames)

        def run_base():
            encode_video(frames, weights, None, None, base_sched, workers=workers)

        def run_merged():
            encode_video(frames, weights, None, None, sched, workers=workers)

        base, merged = [], []
        with torch.no_grad():
            run_base(), run_merged()  # warm-up, not timed
            # interleaved so slow drifts in machine load hit both sides alike
            for _ in range(repeats):
                base.append(_timed(run_base))
                merged.append(_timed(run_merged))
    finally:
        torch.set_num_threads(prev_threads)
    return BenchReport(
        preset=preset_name,
        threads=threads,
        baseline=BenchResult(base_sched.to_text(), batch, repeats, base),
        merged=BenchResult(sched.to_text(), batch, repeats, merged),
    )
