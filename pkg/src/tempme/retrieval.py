"""Contrastive objective, retrieval metrics and desk-scale LoRA training."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch

from . import numerics as nx
from .config import ModelConfig
from .encoder import (
    ClipPositionalEmbeddings,
    EncoderWeights,
    ForwardTrace,
    LoraParams,
    encode_text,
    encode_video,
    init_weights,
)
from .errors import ContractError, DivergenceError
from .schedule import MergeSchedule


@dataclass
class SimilarityMatrix:
    """``values[i, j]`` is the cosine similarity of text ``i`` and video ``j``."""

    values: torch.Tensor
    temperature: float = 0.05

    @property
    def batch(self) -> int:
        return self.values.shape[0]


def similarity(text_emb: torch.Tensor, video_emb: torch.Tensor, temperature: float = 0.05) -> SimilarityMatrix:
    if (text_emb.norm(dim=-1) == 0).any() or (video_emb.norm(dim=-1) == 0).any():
        raise ContractError("cosine similarity of a zero embedding is undefined")
    return SimilarityMatrix(nx.normalize_rows(text_emb) @ nx.normalize_rows(video_emb).T, temperature)


def _log_softmax(x: torch.Tensor, dim: int) -> torch.Tensor:
    # log-sum-exp as max + log1p(rest): stays accurate when one entry dominates
    m, idx = x.max(dim=dim, keepdim=True)
    shifted = x - m
    rest = torch.exp(shifted).scatter(dim, idx, 0.0).sum(dim=dim, keepdim=True)
    return shifted - torch.log1p(rest)


def _check(sim: SimilarityMatrix) -> None:
    if sim.temperature <= 0:
        raise ContractError("temperature must be positive")
    if sim.values.ndim != 2 or sim.values.shape[0] != sim.values.shape[1] or sim.batch < 2:
        raise ContractError("similarity matrix must be square with B >= 2")


def contrastive_loss(sim: SimilarityMatrix) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Symmetric InfoNCE. Returns (mean loss, text-to-video, video-to-text)."""
    _check(sim)
    logits = sim.values / sim.temperature
    t2v = -torch.diagonal(_log_softmax(logits, 1)).mean()
    v2t = -torch.diagonal(_log_softmax(logits, 0)).mean()
    return (t2v + v2t) / 2, t2v, v2t


def loss_grad(sim: SimilarityMatrix) -> torch.Tensor:
    """d loss / d similarity, closed form."""
    _check(sim)
    b, tau = sim.batch, sim.temperature
    logits = sim.values / tau
    eye = torch.eye(b, dtype=sim.values.dtype)
    rows = torch.exp(_log_softmax(logits, 1))
    cols = torch.exp(_log_softmax(logits, 0))
    return ((rows - eye) + (cols - eye)) / (2 * b * tau)


@dataclass
class RetrievalMetrics:
    r1: float
    r5: float
    r10: float
    mean_rank: float
    ranks: list[int] = field(default_factory=list, repr=False)

    @property
    def rsum(self) -> float:
        return self.r1 + self.r5 + self.r10

    def to_dict(self) -> dict:
        return {"R@1": self.r1, "R@5": self.r5, "R@10": self.r10, "R-Sum": self.rsum, "MnR": self.mean_rank}


def true_match_ranks(values: torch.Tensor) -> list[int]:
    """1-based rank of the diagonal entry in each row; ties go to the earlier column."""
    v = values.detach().double()
    diag = torch.diagonal(v).unsqueeze(1)
    b = v.shape[0]
    earlier = torch.arange(b).unsqueeze(0) < torch.arange(b).unsqueeze(1)
    beaten = (v > diag) | ((v == diag) & earlier)
    return (beaten.sum(1) + 1).tolist()


def retrieval_metrics(sim: SimilarityMatrix | torch.Tensor, direction: str = "t2v") -> RetrievalMetrics:
    values = sim.values if isinstance(sim, SimilarityMatrix) else sim
    if direction == "v2t":
        values = values.T
    elif direction != "t2v":
        raise ContractError(f"direction must be t2v or v2t, got {direction!r}")
    if values.shape[0] < 1:
        raise ContractError("empty similarity matrix")
    ranks = true_match_ranks(values)
    n = len(ranks)

    def recall(k):
        return 100.0 * sum(r <= k for r in ranks) / n

    return RetrievalMetrics(recall(1), recall(5), recall(10), sum(ranks) / n, ranks)


@dataclass
class Trainables:
    """Everything that is trained: LoRA for both towers and the clip embeddings."""

    video_lora: LoraParams
    text_lora: LoraParams
    cpe: ClipPositionalEmbeddings

    @classmethod
    def init(cls, cfg: ModelConfig, sched: MergeSchedule, seed: int, up_std: float = 0.0, cpe_std: float = 0.0) -> Trainables:
        return cls(
            LoraParams.init(cfg, seed + 1, up_std),
            LoraParams.init(cfg, seed + 2, up_std),
            ClipPositionalEmbeddings.init(cfg, sched, seed + 3, cpe_std),
        )

    def named_parameters(self) -> list[tuple[str, torch.Tensor]]:
        return (
            self.video_lora.named_parameters("video_lora")
            + self.text_lora.named_parameters("text_lora")
            + [(f"cpe.{i}", t) for i, t in enumerate(self.cpe.tables)]
        )

    def parameters(self) -> list[torch.Tensor]:
        return [t for _, t in self.named_parameters()]

    def to(self, dtype: torch.dtype) -> Trainables:
        return Trainables(self.video_lora.to(dtype), self.text_lora.to(dtype), self.cpe.to(dtype))

    def detached_copy(self) -> Trainables:
        out = self.to(self.parameters()[0].dtype if self.parameters() else torch.float32)
        for p in out.parameters():
            p.data = p.detach().clone()
        return out


def batch_loss(
    frames: torch.Tensor,
    text_ids: torch.Tensor,
    weights: EncoderWeights,
    params: Trainables,
    sched: MergeSchedule,
    trace: ForwardTrace | None = None,
) -> tuple[torch.Tensor, SimilarityMatrix]:
    v = encode_video(frames, weights, params.video_lora, params.cpe, sched, trace=trace)
    t = encode_text(text_ids, weights, params.text_lora)
    sim = similarity(t, v, weights.cfg.temperature)
    return contrastive_loss(sim)[0], sim


def is_micro(cfg: ModelConfig, batch: int) -> bool:
    return cfg.width <= 32 and cfg.num_layers <= 4 and cfg.frames * cfg.tokens_per_frame <= 20 and batch <= 8


def param_grad(
    frames: torch.Tensor,
    text_ids: torch.Tensor,
    weights: EncoderWeights,
    params: Trainables,
    sched: MergeSchedule,
    mode: str = "analytic",
    eps: float = 1e-5,
) -> dict[str, torch.Tensor]:
    """Gradient of the batch loss for every trainable tensor, in float64.

    Merge decisions are taken from an unperturbed forward and held fixed, so
    gradients flow through the weighted averaging but not the matching.
    ``mode="fd"`` uses central differences and is limited to micro configs.
    """
    if mode not in ("analytic", "fd"):
        raise ContractError(f"mode must be analytic or fd, got {mode!r}")
    if mode == "fd" and not is_micro(weights.cfg, frames.shape[0]):
        raise ContractError("finite differences are only allowed on micro configs (cost guard)")
    w64 = weights.to(torch.float64)
    p64 = params.to(torch.float64).detached_copy()
    f64 = frames.to(torch.float64)
    probe = ForwardTrace()
    with torch.no_grad():
        batch_loss(f64, text_ids, w64, p64, sched, trace=probe)
    plans = probe.plans

    def loss_fn() -> torch.Tensor:
        return batch_loss(f64, text_ids, w64, p64, sched, trace=ForwardTrace(replay=plans))[0]

    named = p64.named_parameters()
    if mode == "analytic":
        for _, p in named:
            p.requires_grad_(True)
        loss = loss_fn()
        grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
        return {n: (g if g is not None else torch.zeros_like(p)).detach() for (n, p), g in zip(named, grads)}

    # a text-side entry cannot move the video embedding and vice versa, so only
    # the perturbed tower is recomputed
    tau = weights.cfg.temperature

    def video():
        return encode_video(f64, w64, p64.video_lora, p64.cpe, sched, trace=ForwardTrace(replay=plans))

    def text():
        return encode_text(text_ids, w64, p64.text_lora)

    out = {}
    with torch.no_grad():
        v0, t0 = video(), text()
        for name, p in named:
            on_text = name.startswith("text_lora")

            def probe_loss() -> float:
                v, t = (v0, text()) if on_text else (video(), t0)
                return float(contrastive_loss(similarity(t, v, tau))[0])

            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = probe_loss()
                flat[i] = orig - eps
                down = probe_loss()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            out[name] = g
    return out


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 0.03
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0


@dataclass
class TrainResult:
    log: list[dict]
    params: Trainables
    weights: EncoderWeights
    initial_loss: float
    final_loss: float
    final_metrics: RetrievalMetrics

    def log_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.log)


def train_toy(dataset, cfg: ModelConfig, sched: MergeSchedule, opt: TrainConfig, weights: EncoderWeights | None = None, on_step=None) -> TrainResult:
    """Momentum SGD over LoRA factors and clip embeddings; the backbone stays frozen."""
    weights = weights if weights is not None else init_weights(cfg, opt.seed)
    params = Trainables.init(cfg, sched, opt.seed)
    trainable = params.parameters()
    for p in trainable:
        p.requires_grad_(True)
    optimizer = torch.optim.SGD(trainable, lr=opt.lr, momentum=opt.momentum)
    n = len(dataset)
    gen = torch.Generator().manual_seed(opt.seed)
    log = []

    def guarded_loss(frames, ids, step):
        try:
            return batch_loss(frames, ids, weights, params, sched)
        except ContractError as exc:
            # a collapsed (zero) embedding during training means the run blew up
            raise DivergenceError(f"{exc} at step {step}") from exc

    def evaluate(step):
        with torch.no_grad():
            loss, sim = guarded_loss(dataset.frames, dataset.text_ids, step)
        return float(loss), retrieval_metrics(sim)

    initial_loss, _ = evaluate(0)
    for step in range(opt.steps):
        idx = torch.arange(n) if opt.batch_size >= n else torch.randperm(n, generator=gen)[: opt.batch_size]
        loss, sim = guarded_loss(dataset.frames[idx], dataset.text_ids[idx], step)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if not all(bool(torch.isfinite(p).all()) for p in trainable):
            raise DivergenceError(f"parameters became non-finite at step {step}")
        rec ={"step": step, "loss": value, "r1": retrieval_metrics(sim).r1}
        log.append(rec)
        if on_step is not None:
            on_step(rec)
    final_loss, metrics = evaluate(opt.steps)
    if not math.isfinite(final_loss):
        raise DivergenceError(f"final loss is {final_loss}")
    for p in trainable:
        p.requires_grad_(False)
    return TrainResult(log, params, weights, initial_loss, final_loss, metrics)
