import math
import random

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tempme.errors import ContractError
from tempme.tokens import (
    MergePlan,
    TokenSet,
    alternating_partition,
    apply_merge,
    bipartite_soft_match,
    kept_after_ratio,
)


def make_set(features, cls_positions=()):
    """Single-sequence TokenSet where every token is its own original (frame 0, patch i)."""
    t, _ = features.shape
    ts = TokenSet.from_frames(features.unsqueeze(0))
    is_cls = torch.zeros(1, t, dtype=torch.bool)
    for p in cls_positions:
        is_cls[0, p] = True
    return TokenSet(ts.features, ts.sizes, ts.clip_id, is_cls, ts.owner, ts.origin_frame, ts.origin_patch)


def oracle_plan(features, merge_count, is_cls=None, protect_cls=True):
    """Exhaustive reference: every A-token's best B match, then a global sort."""
    rows = features.double().tolist()
    t = len(rows)
    is_cls = is_cls or [False] * t

    def cos(u, v):
        return sum(a * b for a, b in zip(u, v)) / math.sqrt(sum(a * a for a in u) * sum(b * b for b in v))

    candidates = []
    for i in range(0, t, 2):
        if protect_cls and is_cls[i]:
            continue
        best, best_j = -math.inf, None
        for j in range(1, t, 2):
            if protect_cls and is_cls[j]:
                continue
            s = cos(rows[i], rows[j])
            if s > best:
                best, best_j = s, j
        if best_j is not None:
            candidates.append((-best, i, best_j))
    candidates.sort()
    return [(i, j) for _, i, j in candidates[:merge_count]]


def test_alternating_partition():
    assert alternating_partition(4) == ([0, 2], [1, 3])
    a, b = alternating_partition(5)
    assert (len(a), len(b)) == (3, 2)
    with pytest.raises(ContractError):
        alternating_partition(1)


def test_partition_spans_clips():
    # two clips of 3 tokens each: both clips contribute to both sets
    two = TokenSet.from_frames(torch.randn(2, 3, 4)).concat_groups(2)
    a, b = alternating_partition(len(two))
    clip = two.clip_id[0].tolist()
    assert {clip[i] for i in a} == {0, 1}
    assert {clip[i] for i in b} == {0, 1}


def test_zero_merge_is_empty_and_identity():
    ts = make_set(torch.randn(6, 4))
    plan = bipartite_soft_match(ts, 0)
    assert len(plan) == 0
    assert apply_merge(ts, plan) is ts


def test_duplicates_merge_first():
    u = torch.tensor([1.0, 0.0, 0.0])
    w = torch.tensor([0.0, 1.0, 0.2])
    x = torch.tensor([0.1, -0.3, 1.0])
    ts = make_set(torch.stack([u, u, w, x]))
    assert bipartite_soft_match(ts, 1, protect_cls=False).pairs() == [(0, 1)]


def test_matches_oracle_on_six_tokens(gen):
    feats = torch.randn(6, 5, generator=gen)
    ts = make_set(feats)
    assert bipartite_soft_match(ts, 2, protect_cls=False).pairs() == oracle_plan(feats, 2, protect_cls=False)


def test_merge_count_too_large():
    ts = make_set(torch.randn(5, 3), cls_positions=[0])
    with pytest.raises(ContractError):
        bipartite_soft_match(ts, 4)
    with pytest.raises(ContractError):
        bipartite_soft_match(ts, 3)  # one of the three A-tokens is CLS


def test_cls_never_source_or_destination(gen):
    feats = torch.randn(10, 4, generator=gen)
    feats[1] = feats[0]  # CLS at 0 has an exact twin in B
    ts = make_set(feats, cls_positions=[0, 3])
    plan = bipartite_soft_match(ts, 4)
    touched = {i for pair in plan.pairs() for i in pair}
    assert not touched & {0, 3}


def test_weighted_mean_definition():
    a, b = torch.tensor([1.0, 2.0]), torch.tensor([5.0, -1.0])
    ts = make_set(torch.stack([a, b]))
    ts = TokenSet(ts.features, torch.tensor([[1, 3]]), ts.clip_id, ts.is_cls, ts.owner, ts.origin_frame, ts.origin_patch)
    out = apply_merge(ts, MergePlan.from_pairs([[(0, 1)]]))
    assert torch.allclose(out.features[0, 0], (a + 3 * b) / 4)
    assert out.sizes.tolist() == [[4]]
    plain = apply_merge(ts, MergePlan.from_pairs([[(0, 1)]]), size_weighted=False)
    assert torch.allclose(plain.features[0, 0], (a + b) / 2)


def test_apply_merge_keeps_order_and_provenance():
    ts = make_set(torch.randn(6, 2))
    out = apply_merge(ts, MergePlan.from_pairs([[(2, 5), (4, 1)]]))
    # survivors 0, 1, 3, 5 in order
    assert torch.equal(out.features[0, 0], ts.features[0, 0])
    assert torch.equal(out.features[0, 2], ts.features[0, 3])
    assert out.origins() == [[(0, 0)], [(0, 1), (0, 4)], [(0, 3)], [(0, 2), (0, 5)]]


def test_apply_merge_rejects_bad_plans():
    ts = make_set(torch.randn(4, 2))
    with pytest.raises(ContractError):
        apply_merge(ts, MergePlan.from_pairs([[(0, 9)]]))
    with pytest.raises(ContractError):
        apply_merge(ts, MergePlan.from_pairs([[(0, 1), (1, 3)]]))  # 1 is both
    with pytest.raises(ContractError):
        apply_merge(ts, MergePlan.from_pairs([[(0, 1), (0, 3)]]))  # duplicate source


def test_kept_after_ratio_rounds_up():
    assert kept_after_ratio(68, 0.7) == 48
    assert kept_after_ratio(168, 0.7) == 118
    assert kept_after_ratio(120, 0.7) == 84  # 120 * 0.7 is 84.00000000000001 in floating point
    assert kept_after_ratio(10, 1.0) == 10


def random_merge_sequence(seed: int):
    rnd = random.Random(seed)
    g = torch.Generator().manual_seed(seed)
    frames, n, d = rnd.randint(1, 3), rnd.randint(3, 8), rnd.randint(2, 6)
    ts = TokenSet.from_frames(torch.randn(frames, n, d, generator=g, dtype=torch.float64)).concat_groups(frames)
    history = [ts]
    for _ in range(rnd.randint(1, 4)):
        non_cls_a = int((~ts.is_cls[0, 0::2]).sum())
        if non_cls_a == 0 or len(ts) < 3:
            break
        m = rnd.randint(0, non_cls_a)
        ts = apply_merge(ts, bipartite_soft_match(ts, m), size_weighted=True)
        history.append(ts)
    return history


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_conservation_properties(seed):
    history = random_merge_sequence(seed)
    first = history[0]
    mass = (first.features * first.sizes.unsqueeze(2)).sum(1)
    universe = sorted(zip(first.origin_frame[0].tolist(), first.origin_patch[0].tolist()))
    for ts in history[1:]:
        assert int(ts.sizes.sum()) == int(first.sizes.sum())
        now = (ts.features * ts.sizes.unsqueeze(2)).sum(1)
        assert torch.allclose(now, mass, rtol=1e-5, atol=1e-9)
        covered = [o for tok in ts.origins() for o in tok]
        assert sorted(covered) == universe
        assert all(tok for tok in ts.origins())
        assert int(ts.is_cls.sum()) == int(first.is_cls.sum())


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_bsm_matches_oracle(seed):
    rnd = random.Random(seed)
    g = torch.Generator().manual_seed(seed)
    t = rnd.randint(2, 12)
    feats = torch.randn(t, rnd.randint(2, 5), generator=g)
    protect = rnd.random() < 0.5
    cls = [0] if protect else []
    ts = make_set(feats, cls)
    a_count = (t + 1) // 2 - (1 if protect else 0)
    m = rnd.randint(0, a_count) if t > (2 if protect else 1) else 0
    plan = bipartite_soft_match(ts, m, protect_cls=protect)
    assert plan.pairs() == oracle_plan(feats, m, [i in cls for i in range(t)], protect)


def test_bsm_is_deterministic(gen):
    ts = make_set(torch.randn(11, 4, generator=gen), [0])
    p1, p2 = bipartite_soft_match(ts, 4), bipartite_soft_match(ts, 4)
    assert torch.equal(p1.src, p2.src) and torch.equal(p1.dst, p2.dst)


def test_batched_sequences_are_independent(gen):
    feats = torch.randn(3, 9, 4, generator=gen)
    ts = TokenSet.from_frames(feats)
    plan = bipartite_soft_match(ts, 3)
    merged = apply_merge(ts, plan)
    for s in range(3):
        single = TokenSet.from_frames(feats[s : s + 1])
        p = bipartite_soft_match(single, 3)
        assert p.pairs() == plan.pairs(s)
        assert torch.equal(apply_merge(single, p).features[0], merged.features[s])


def test_merge_is_differentiable(gen):
    x = torch.randn(1, 6, 3, generator=gen, dtype=torch.float64, requires_grad=True)
    ts = TokenSet.from_frames(x)
    out = apply_merge(ts, MergePlan.from_pairs([[(2, 1), (4, 1)]]))
    out.features.sum().backward()
    # a merged token is a mean over 3 inputs, so each contributes 1/3
    assert torch.allclose(x.grad[0, 2], torch.full((3,), 1 / 3, dtype=torch.float64))
    assert torch.allclose(x.grad[0, 0], torch.ones(3, dtype=torch.float64))
