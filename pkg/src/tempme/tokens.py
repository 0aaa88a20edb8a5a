"""Token sets and bipartite soft matching.

A :class:`TokenSet` holds ``G`` independent token sequences of equal length
``T`` (a stack of frames, or a stack of clips). Every sequence keeps an
``owner`` map from each original (frame, patch) token it covers to the index
of the current token that absorbed it, which gives merge provenance without
per-token Python sets.

Patch index 0 of every frame is that frame's CLS token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import torch

from .errors import ContractError
from .numerics import normalize_rows


@dataclass(frozen=True)
class TokenSet:
    features: torch.Tensor  # (G, T, D)
    sizes: torch.Tensor  # (G, T) int64, original tokens absorbed
    clip_id: torch.Tensor  # (G, T) int64
    is_cls: torch.Tensor  # (G, T) bool
    owner: torch.Tensor  # (G, U) int64, current index of each original token
    origin_frame: torch.Tensor  # (G, U) int64
    origin_patch: torch.Tensor  # (G, U) int64

    @classmethod
    def from_frames(cls, features: torch.Tensor, frames_per_video: int | None = None) -> TokenSet:
        """One sequence per frame; ``features`` is (F, N, D) with CLS at index 0.

        With ``frames_per_video`` the stack holds several videos back to back
        and frame numbers restart at 0 for each.
        """
        f, n, _ = features.shape
        frames = torch.arange(f)
        if frames_per_video:
            frames = frames % frames_per_video
        frames = frames.unsqueeze(1).expand(f, n)
        patches = torch.arange(n).unsqueeze(0).expand(f, n)
        is_cls = patches == 0
        return cls(
            features=features,
            sizes=torch.ones(f, n, dtype=torch.int64),
            clip_id=frames.clone(),
            is_cls=is_cls.clone(),
            owner=patches.clone(),
            origin_frame=frames.clone(),
            origin_patch=patches.clone(),
        )

    @property
    def num_sequences(self) -> int:
        return self.features.shape[0]

    def __len__(self) -> int:
        return self.features.shape[1]

    @property
    def width(self) -> int:
        return self.features.shape[2]

    def with_features(self, features: torch.Tensor) -> TokenSet:
        return replace(self, features=features)

    def origins(self, seq: int = 0) -> list[list[tuple[int, int]]]:
        """Per current token, the sorted (frame, patch) pairs it covers."""
        out: list[list[tuple[int, int]]] = [[] for _ in range(len(self))]
        for tok, fr, pa in zip(
            self.owner[seq].tolist(), self.origin_frame[seq].tolist(), self.origin_patch[seq].tolist()
        ):
            out[tok].append((fr, pa))
        return [sorted(o) for o in out]

    def concat_groups(self, group: int) -> TokenSet:
        """Concatenate each run of ``group`` consecutive sequences into one."""
        g, t, d = self.features.shape
        if group < 1 or g % group:
            raise ContractError(f"{g} sequences cannot be split into groups of {group}")
        if group == 1:
            return self
        u = self.owner.shape[1]
        shift = (torch.arange(group) * t).view(1, group, 1)
        owner = (self.owner.view(g // group, group, u) + shift).reshape(g // group, group * u)
        return TokenSet(
            features=self.features.reshape(g // group, group * t, d),
            sizes=self.sizes.reshape(g // group, group * t),
            clip_id=self.clip_id.reshape(g // group, group * t),
            is_cls=self.is_cls.reshape(g // group, group * t),
            owner=owner,
            origin_frame=self.origin_frame.reshape(g // group, group * u),
            origin_patch=self.origin_patch.reshape(g // group, group * u),
        )

    @classmethod
    def cat(cls, parts: list[TokenSet]) -> TokenSet:
        """Stack sequence-wise; all parts must have the same length."""
        return cls(*(torch.cat([getattr(p, f.name) for p in parts]) for f in fields(cls)))

    def select(self, start: int, stop: int) -> TokenSet:
        return TokenSet(*(getattr(self, f.name)[start:stop] for f in fields(self)))

    def relabel_clips(self, first_clip: int = 0) -> TokenSet:
        """Give every token of sequence ``i`` the clip id ``first_clip + i``."""
        g, t = self.clip_id.shape
        ids = torch.arange(first_clip, first_clip + g).unsqueeze(1).expand(g, t).clone()
        return replace(self, clip_id=ids)


@dataclass(frozen=True)
class MergePlan:
    """Per sequence, ``src[g, k]`` merges into ``dst[g, k]`` (token indices)."""

    src: torch.Tensor  # (G, m) int64
    dst: torch.Tensor  # (G, m) int64

    def __len__(self) -> int:
        return self.src.shape[1]

    @classmethod
    def cat(cls, parts: list[MergePlan]) -> MergePlan:
        return cls(torch.cat([p.src for p in parts]), torch.cat([p.dst for p in parts]))

    def select(self, start: int, stop: int) -> MergePlan:
        return MergePlan(self.src[start:stop], self.dst[start:stop])

    def pairs(self, seq: int = 0) -> list[tuple[int, int]]:
        return list(zip(self.src[seq].tolist(), self.dst[seq].tolist()))

    @classmethod
    def empty(cls, num_sequences: int) -> MergePlan:
        z = torch.zeros(num_sequences, 0, dtype=torch.int64)
        return cls(z, z.clone())

    @classmethod
    def from_pairs(cls, pairs: list[list[tuple[int, int]]]) -> MergePlan:
        m = {len(p) for p in pairs}
        if len(m) != 1:
            raise ContractError("every sequence must merge the same number of tokens")
        if m == {0}:
            return cls.empty(len(pairs))
        t = torch.tensor(pairs, dtype=torch.int64)
        return cls(t[..., 0].contiguous(), t[..., 1].contiguous())


def alternating_partition(length: int) -> tuple[list[int], list[int]]:
    """Even positions go to set A, odd positions to set B."""
    if length < 2:
        raise ContractError(f"need at least 2 tokens to partition, got {length}")
    return list(range(0, length, 2)), list(range(1, length, 2))


def kept_after_ratio(count: int, keep: float) -> int:
    """Tokens kept when a fraction ``keep`` survives; rounds up."""
    # guard against float noise such as 0.7 * 120 = 84.00000000000001
    return math.ceil(round(count * keep, 9))


def bipartite_soft_match(
    ts: TokenSet,
    merge_count: int,
    protect_cls: bool = True,
    metric: torch.Tensor | None = None,
) -> MergePlan:
    """Pick ``merge_count`` (source, destination) pairs per sequence.

    Each A-token is matched to its most cosine-similar B-token; the A-tokens
    with the highest best-similarity become sources. Ties prefer the lower
    index, for both the source ranking and the destination choice. With
    ``protect_cls`` no CLS token is a source or a destination.

    ``metric`` (G, T, D') overrides the features used for similarity.
    """
    g, t = ts.sizes.shape
    if merge_count < 0:
        raise ContractError("merge_count must be non-negative")
    if merge_count == 0:
        return MergePlan.empty(g)
    a_idx, b_idx = alternating_partition(t)
    if merge_count > len(a_idx):
        raise ContractError(f"merge_count {merge_count} exceeds |A| = {len(a_idx)}")

    x = ts.features if metric is None else metric
    with torch.no_grad():
        x = normalize_rows(x.detach().double())
        a, b = x[:, 0::2], x[:, 1::2]
        scores = a @ b.transpose(1, 2)
        if protect_cls:
            scores = scores.masked_fill(ts.is_cls[:, 0::2].unsqueeze(2), -math.inf)
            scores = scores.masked_fill(ts.is_cls[:, 1::2].unsqueeze(1), -math.inf)
        best, best_b = scores.max(dim=2)
        eligible = torch.isfinite(best).sum(dim=1)
        if int(eligible.min()) < merge_count:
            raise ContractError(
                f"merge_count {merge_count} exceeds the {int(eligible.min())} mergeable A-tokens"
            )
        order = torch.sort(best, dim=1, descending=True, stable=True).indices[:, :merge_count]
        src = order * 2
        dst = best_b.gather(1, order) * 2 + 1
    return MergePlan(src, dst)


def apply_merge(ts: TokenSet, plan: MergePlan, size_weighted: bool = True) -> TokenSet:
    """Fold every source into its destination and drop the sources.

    The destination feature becomes the (size-weighted) mean of itself and its
    sources; the relative order of surviving tokens is kept. Differentiable
    with respect to ``ts.features``.
    """
    m = len(plan)
    if m == 0:
        return ts
    g, t, d = ts.features.shape
    src, dst = plan.src, plan.dst
    if src.shape[0] != g or int(src.min()) < 0 or int(dst.min()) < 0 or max(int(src.max()), int(dst.max())) >= t:
        raise ContractError("merge plan indices out of range")
    is_src = torch.zeros(g, t, dtype=torch.bool).scatter(1, src, True)
    if bool(is_src.gather(1, dst).any()) or int(is_src.sum()) != g * m:
        raise ContractError("merge plan sources must be distinct and never destinations")

    x = ts.features
    w = ts.sizes.to(x.dtype) if size_weighted else torch.ones(g, t, dtype=x.dtype)
    wx = x * w.unsqueeze(2)
    di = dst.unsqueeze(2).expand(g, m, d)
    acc = wx.scatter_add(1, di, wx.gather(1, src.unsqueeze(2).expand(g, m, d)))
    wsum = w.scatter_add(1, dst, w.gather(1, src))
    is_dst = torch.zeros(g, t, dtype=torch.bool).scatter(1, dst, True)
    merged = torch.where(is_dst.unsqueeze(2), acc / wsum.unsqueeze(2), x)

    sizes = ts.sizes.scatter_add(1, dst, ts.sizes.gather(1, src))
    is_cls = ts.is_cls.scatter(1, dst, ts.is_cls.gather(1, src) | ts.is_cls.gather(1, dst))
    keep = ~is_src
    keep_idx = keep.nonzero()[:, 1].view(g, t - m)
    # where each old index lands: kept tokens shift down, sources follow their destination
    new_pos = keep.cumsum(1) - 1
    new_pos = new_pos.scatter(1, src, new_pos.gather(1, dst))
    return TokenSet(
        features=merged.gather(1, keep_idx.unsqueeze(2).expand(g, t - m, d)),
        sizes=sizes.gather(1, keep_idx),
        clip_id=ts.clip_id.gather(1, keep_idx),
        is_cls=is_cls.gather(1, keep_idx),
        owner=new_pos.gather(1, ts.owner),
        origin_frame=ts.origin_frame,
        origin_patch=ts.origin_patch,
    )


def merge_by_ratio(
    ts: TokenSet,
    keep: float,
    protect_cls: bool = True,
    size_weighted: bool = True,
    metric: torch.Tensor | None = None,
) -> tuple[TokenSet, MergePlan]:
    count = len(ts) - kept_after_ratio(len(ts), keep)
    plan = bipartite_soft_match(ts, count, protect_cls, metric)
    return apply_merge(ts, plan, size_weighted), plan
