"""Synthetic paired text/video data with tunable temporal redundancy.

Every video shows ``subject_count`` subjects drawn from a shared pool, one
per contiguous block of patches. A subject's latent vector sets the base
pattern of its patches; frame ``i`` is ``sqrt(rho) * base + sqrt(1 - rho) *
noise_i``. The caption is the list of subject ids, so matching pairs are
learnable from the video content.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .config import ModelConfig
from .container import read_container, write_container
from .errors import ContractError
from .numerics import rng


@dataclass(frozen=True)
class SynthSpec:
    num_pairs: int
    frames: int
    patches: int  # patches per frame, CLS excluded
    dim: int  # patch vector width
    redundancy: float = 0.8
    subject_count: int = 2
    vocab_size: int = 32  # last two ids are reserved for start/end
    jitter: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.redundancy <= 1.0:
            raise ContractError(f"redundancy must lie in [0, 1], got {self.redundancy}")
        if not 1 <= self.subject_count <= min(self.patches, self.vocab_size - 2):
            raise ContractError("subject_count must be between 1 and the number of patches / subjects")

    @classmethod
    def for_config(cls, cfg: ModelConfig, num_pairs: int, **kw) -> SynthSpec:
        return cls(
            num_pairs=num_pairs,
            frames=cfg.frames,
            patches=cfg.patches_per_frame,
            dim=cfg.patch_dim,
            vocab_size=cfg.text_vocab_size,
            **kw,
        )


@dataclass
class SynthDataset:
    spec: SynthSpec
    text_ids: torch.Tensor  # (num_pairs, subject_count + 2) int64
    frames: torch.Tensor  # (num_pairs, F, P, dim) float32
    pair_ids: torch.Tensor  # (num_pairs,) int64
    subjects: torch.Tensor  # (num_pairs, subject_count) int64

    def __len__(self) -> int:
        return self.frames.shape[0]

    def save(self, path) -> None:
        write_container(
            path,
            [("text_ids", self.text_ids), ("frames", self.frames), ("pair_ids", self.pair_ids), ("subjects", self.subjects)],
            {"kind": "synthetic-dataset", "spec": asdict(self.spec)},
        )

    @classmethod
    def load(cls, path) -> SynthDataset:
        header, t = read_container(path)
        if header["meta"].get("kind") != "synthetic-dataset":
            raise ContractError("container does not hold a synthetic dataset")
        return cls(SynthSpec(**header["meta"]["spec"]), t["text_ids"], t["frames"], t["pair_ids"], t["subjects"])


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate(spec: SynthSpec) -> SynthDataset:
    gen = rng(spec.seed)
    pool = spec.vocab_size - 2
    latents = _unit(gen.standard_normal((pool, spec.dim)))
    # contiguous patch blocks, one per subject slot
    block = np.minimum(np.arange(spec.patches) * spec.subject_count // spec.patches, spec.subject_count - 1)
    a, b = math.sqrt(spec.redundancy), math.sqrt(1.0 - spec.redundancy)

    subjects = np.stack([gen.choice(pool, size=spec.subject_count, replace=False) for _ in range(spec.num_pairs)])
    frames = np.empty((spec.num_pairs, spec.frames, spec.patches, spec.dim))
    for i in range(spec.num_pairs):
        base = latents[subjects[i]][block] + spec.jitter * gen.standard_normal((spec.patches, spec.dim)) / math.sqrt(spec.dim)
        base = _unit(base)
        noise = _unit(gen.standard_normal((spec.frames, spec.patches, spec.dim)))
        frames[i] = a * base + b * noise
    sot, eot = spec.vocab_size - 2, spec.vocab_size - 1
    ids = np.concatenate(
        [np.full((spec.num_pairs, 1), sot), subjects, np.full((spec.num_pairs, 1), eot)], axis=1
    )
    return SynthDataset(
        spec=spec,
        text_ids=torch.from_numpy(ids.astype(np.int64)),
        frames=torch.from_numpy(frames.astype(np.float32)),
        pair_ids=torch.arange(spec.num_pairs),
        subjects=torch.from_numpy(subjects.astype(np.int64)),
    )


def mean_interframe_similarity(frames: torch.Tensor) -> float:
    """Mean cosine similarity of same-position patches in consecutive frames."""
    x = frames.double()
    x = x / x.norm(dim=-1, keepdim=True)
    return float((x[:, 1:] * x[:, :-1]).sum(-1).mean())
