"""Toy CLIP-style dual encoder with image-level and clip-level merge blocks.

Both towers are pre-norm transformers (norm -> sublayer -> residual). The
video tower runs image layers on every frame independently, removing ``r``
tokens per layer between attention and FFN, then clip layers that add clip
positional embeddings, merge across a group of adjacent clips, attend over
the fused clip and merge again inside it before the FFN.

The backbone is frozen; only LoRA factors on the Q/K/V projections and the
clip positional embeddings are meant to be trained.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import torch

from . import numerics as nx
from .config import ModelConfig
from .errors import ContractError
from .schedule import LayerAction, MergeSchedule, clip_groups, layer_actions, predict_token_counts
from .tokens import MergePlan, TokenSet, apply_merge, bipartite_soft_match, kept_after_ratio


@dataclass
class LayerWeights:
    ln1_g: torch.Tensor
    ln1_b: torch.Tensor
    wq: torch.Tensor  # (D, D), applied as x @ wq
    bq: torch.Tensor
    wk: torch.Tensor
    bk: torch.Tensor
    wv: torch.Tensor
    bv: torch.Tensor
    wo: torch.Tensor
    bo: torch.Tensor
    ln2_g: torch.Tensor
    ln2_b: torch.Tensor
    w1: torch.Tensor  # (D, hidden)
    b1: torch.Tensor
    w2: torch.Tensor  # (hidden, D)
    b2: torch.Tensor


@dataclass
class VisionWeights:
    patch_proj: torch.Tensor  # (patch_dim, D)
    class_embed: torch.Tensor  # (D,)
    pos_embed: torch.Tensor  # (N, D)
    layers: list[LayerWeights]
    ln_final_g: torch.Tensor
    ln_final_b: torch.Tensor
    proj: torch.Tensor  # (D, embed_dim)


@dataclass
class TextWeights:
    token_embed: torch.Tensor  # (vocab, D)
    pos_embed: torch.Tensor  # (max_len, D)
    layers: list[LayerWeights]
    ln_final_g: torch.Tensor
    ln_final_b: torch.Tensor
    proj: torch.Tensor  # (D, embed_dim)


@dataclass
class EncoderWeights:
    cfg: ModelConfig
    visual: VisionWeights
    text: TextWeights

    def named_tensors(self) -> list[tuple[str, torch.Tensor]]:
        """Every tensor in a fixed, documented order (used by the file format)."""
        return _flatten(self.visual, "visual") + _flatten(self.text, "text")

    def to(self, dtype: torch.dtype) -> EncoderWeights:
        return EncoderWeights(self.cfg, _map(self.visual, lambda t: t.to(dtype)), _map(self.text, lambda t: t.to(dtype)))

    @classmethod
    def from_named(cls, cfg: ModelConfig, tensors: dict[str, torch.Tensor]) -> EncoderWeights:
        skel = init_weights(cfg, 0, _shapes_only=True)
        out = skel
        for name, _ in skel.named_tensors():
            if name not in tensors:
                raise ContractError(f"missing tensor {name}")
        visual = _rebuild(skel.visual, "visual", tensors)
        text = _rebuild(skel.text, "text", tensors)
        out = cls(cfg, visual, text)
        for name, t in out.named_tensors():
            ref = dict(skel.named_tensors())[name]
            if t.shape != ref.shape:
                raise ContractError(f"tensor {name} has shape {tuple(t.shape)}, expected {tuple(ref.shape)}")
        return out


def _flatten(obj, prefix: str) -> list[tuple[str, torch.Tensor]]:
    out = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, torch.Tensor):
            out.append((f"{prefix}.{f.name}", v))
        elif isinstance(v, list):
            for i, item in enumerate(v):
                out.extend(_flatten(item, f"{prefix}.{f.name}.{i}"))
    return out


def _map(obj, fn):
    kw = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, torch.Tensor):
            kw[f.name] = fn(v)
        elif isinstance(v, list):
            kw[f.name] = [_map(item, fn) for item in v]
        else:
            kw[f.name] = v
    return type(obj)(**kw)


def _rebuild(obj, prefix: str, tensors: dict[str, torch.Tensor]):
    kw = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, torch.Tensor):
            kw[f.name] = tensors[f"{prefix}.{f.name}"]
        elif isinstance(v, list):
            kw[f.name] = [_rebuild(item, f"{prefix}.{f.name}.{i}", tensors) for i, item in enumerate(v)]
    return type(obj)(**kw)


def _init_layer(gen, d: int, h: int, shapes_only: bool) -> LayerWeights:
    def w(rows, cols):
        if shapes_only:
            return torch.empty(rows, cols)
        return nx.gaussian(gen, (rows, cols), 1.0 / math.sqrt(rows))

    ones, zeros = torch.ones(d), torch.zeros(d)
    return LayerWeights(
        ln1_g=ones.clone(), ln1_b=zeros.clone(),
        wq=w(d, d), bq=zeros.clone(), wk=w(d, d), bk=zeros.clone(),
        wv=w(d, d), bv=zeros.clone(), wo=w(d, d), bo=zeros.clone(),
        ln2_g=ones.clone(), ln2_b=zeros.clone(),
        w1=w(d, h), b1=torch.zeros(h), w2=w(h, d), b2=zeros.clone(),
    )


def init_weights(cfg: ModelConfig, seed: int, _shapes_only: bool = False) -> EncoderWeights:
    """Synthetic frozen backbone: Gaussian entries with variance 1/fan_in."""
    gen = nx.rng(seed)
    d, e = cfg.width, cfg.embed_dim

    def w(shape, std):
        return torch.empty(shape) if _shapes_only else nx.gaussian(gen, shape, std)

    visual = VisionWeights(
        patch_proj=w((cfg.patch_dim, d), 1.0 / math.sqrt(cfg.patch_dim)),
        class_embed=w((d,), 1.0),
        pos_embed=w((cfg.tokens_per_frame, d), 1.0 / math.sqrt(d)),
        layers=[_init_layer(gen, d, cfg.hidden_dim, _shapes_only) for _ in range(cfg.num_layers)],
        ln_final_g=torch.ones(d), ln_final_b=torch.zeros(d),
        proj=w((d, e), 1.0 / math.sqrt(d)),
    )
    text = TextWeights(
        token_embed=w((cfg.text_vocab_size, d), 1.0),
        pos_embed=w((cfg.text_max_len, d), 1.0 / math.sqrt(d)),
        layers=[_init_layer(gen, d, cfg.hidden_dim, _shapes_only) for _ in range(cfg.num_layers)],
        ln_final_g=torch.ones(d), ln_final_b=torch.zeros(d),
        proj=w((d, e), 1.0 / math.sqrt(d)),
    )
    return EncoderWeights(cfg, visual, text)


LORA_TARGETS = ("q", "k", "v")


@dataclass
class LoraParams:
    """Per layer and target projection, ``delta W = alpha * down @ up``."""

    down: list[dict[str, torch.Tensor]]  # (D, rank)
    up: list[dict[str, torch.Tensor]]  # (rank, D)
    alpha: float = 1.0

    @property
    def rank(self) -> int:
        return self.down[0]["q"].shape[1] if self.down else 0

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, up_std: float = 0.0) -> LoraParams:
        """Gaussian down-projections; up-projections zero unless ``up_std`` > 0."""
        gen = nx.rng(seed)
        d, r = cfg.width, cfg.lora_rank
        down, up = [], []
        for _ in range(cfg.num_layers):
            down.append({t: nx.gaussian(gen, (d, r), 1.0 / math.sqrt(d)) for t in LORA_TARGETS})
            up.append({t: nx.gaussian(gen, (r, d), up_std) if up_std else torch.zeros(r, d) for t in LORA_TARGETS})
        return cls(down, up, cfg.lora_alpha)

    def parameters(self) -> list[torch.Tensor]:
        return [p[t] for layer in (self.down, self.up) for p in layer for t in LORA_TARGETS]

    def named_parameters(self, prefix: str = "lora") -> list[tuple[str, torch.Tensor]]:
        out = []
        for kind, store in (("down", self.down), ("up", self.up)):
            for i, p in enumerate(store):
                for t in LORA_TARGETS:
                    out.append((f"{prefix}.{i}.{t}.{kind}", p[t]))
        return out

    def delta(self, layer: int, target: str) -> torch.Tensor:
        return self.alpha * (self.down[layer][target] @ self.up[layer][target])

    def to(self, dtype: torch.dtype) -> LoraParams:
        return LoraParams(
            [{t: p[t].to(dtype) for t in p} for p in self.down],
            [{t: p[t].to(dtype) for t in p} for p in self.up],
            self.alpha,
        )


@dataclass
class ClipPositionalEmbeddings:
    """One (group, D) table per merge step; row ``j`` is added to slot ``j`` of a group."""

    tables: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def init(cls, cfg: ModelConfig, sched: MergeSchedule, seed: int | None = None, std: float = 0.0) -> ClipPositionalEmbeddings:
        """Zeros by default, so merging starts from the backbone's own features."""
        gen = nx.rng(seed or 0)
        return cls([nx.gaussian(gen, (g, cfg.width), std) if std else torch.zeros(g, cfg.width) for g in clip_groups(sched)])

    def parameters(self) -> list[torch.Tensor]:
        return list(self.tables)

    def to(self, dtype: torch.dtype) -> ClipPositionalEmbeddings:
        return ClipPositionalEmbeddings([t.to(dtype) for t in self.tables])


@dataclass
class LayerRecord:
    layer: int
    kind: str
    clip_count: int
    tokens_in: int
    tokens_after_cross_merge: int
    tokens_after_intra_merge: int
    attention_capacity: int
    cls_tokens: int


@dataclass
class ForwardTrace:
    """Observations from one ``encode_video`` call.

    Pass ``replay=`` the ``plans`` of an earlier trace to reuse its merge
    decisions (for example to differentiate with the matching held fixed).
    """

    layers: list[LayerRecord] = field(default_factory=list)
    plans: list[MergePlan] = field(default_factory=list)
    final: TokenSet | None = None
    videos: int = 1
    replay: list[MergePlan] | None = None
    _cursor: int = 0

    def plan(self, compute) -> MergePlan:
        if self.replay is not None:
            p = self.replay[self._cursor]
            self._cursor += 1
        else:
            p = compute()
        self.plans.append(p)
        return p

    def merge_map(self, video: int = 0) -> dict:
        if self.final is None:
            raise ContractError("trace has no final token set")
        per_video = self.final.num_sequences // self.videos
        groups = []
        for seq in range(video * per_video, (video + 1) * per_video):
            for tok, origins in enumerate(self.final.origins(seq)):
                patches = [[f, p] for f, p in origins if p != 0]
                if patches:
                    groups.append({"clip": seq - video * per_video, "token": tok, "patches": patches})
        return {"video": video, "groups": groups}


def _project(x, w, b, lora: LoraParams | None, layer: int, target: str):
    out = nx.matmul(x, w) + b
    if lora is not None:
        out = out + lora.alpha * nx.matmul(nx.matmul(x, lora.down[layer][target]), lora.up[layer][target])
    return out


def attention(
    x: torch.Tensor,
    sizes: torch.Tensor | None,
    lw: LayerWeights,
    lora: LoraParams | None,
    layer: int,
    heads: int,
    proportional: bool = True,
    causal: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Multi-head self-attention over ``x`` (G, T, D).

    Returns the output projection (before the residual) and the keys averaged
    over heads, which can serve as the matching metric.
    """
    g, t, d = x.shape
    hd = d // heads
    q = _project(x, lw.wq, lw.bq, lora, layer, "q").view(g, t, heads, hd).transpose(1, 2)
    k = _project(x, lw.wk, lw.bk, lora, layer, "k").view(g, t, heads, hd).transpose(1, 2)
    v = _project(x, lw.wv, lw.bv, lora, layer, "v").view(g, t, heads, hd).transpose(1, 2)
    logits = nx.matmul(q, k.transpose(-1, -2)) / math.sqrt(hd)
    if proportional and sizes is not None:
        logits = logits + torch.log(sizes.to(x.dtype)).view(g, 1, 1, t)
    if causal:
        mask = torch.ones(t, t, dtype=torch.bool).triu(1)
        logits = logits.masked_fill(mask, -math.inf)
    out = nx.matmul(nx.softmax_rows(logits), v).transpose(1, 2).reshape(g, t, d)
    return nx.matmul(out, lw.wo) + lw.bo, k.mean(dim=1)


def _ffn(x: torch.Tensor, lw: LayerWeights) -> torch.Tensor:
    h = nx.layer_norm(x, lw.ln2_g, lw.ln2_b)
    return nx.matmul(nx.gelu(nx.matmul(h, lw.w1) + lw.b1), lw.w2) + lw.b2


def _attend(ts: TokenSet, lw, lora, layer, cfg: ModelConfig) -> tuple[TokenSet, torch.Tensor]:
    h = nx.layer_norm(ts.features, lw.ln1_g, lw.ln1_b)
    out, keys = attention(h, ts.sizes, lw, lora, layer, cfg.heads, cfg.proportional_attention)
    return ts.with_features(ts.features + out), keys


def _merge(ts: TokenSet, count: int, keys, cfg: ModelConfig, trace: ForwardTrace | None) -> TokenSet:
    metric = keys if cfg.match_on_keys else None

    def compute():
        return bipartite_soft_match(ts, count, cfg.protect_cls, metric)

    plan = trace.plan(compute) if trace is not None else compute()
    return apply_merge(ts, plan, cfg.size_weighted_merge)


def imgme_block(
    ts: TokenSet,
    lw: LayerWeights,
    lora: LoraParams | None,
    layer: int,
    r: int,
    cfg: ModelConfig,
    trace: ForwardTrace | None = None,
) -> TokenSet:
    """Attention, remove ``r`` tokens per frame by bipartite matching, FFN."""
    if r >= len(ts):
        raise ContractError(f"cannot remove {r} of {len(ts)} tokens")
    ts, keys = _attend(ts, lw, lora, layer, cfg)
    ts = _merge(ts, r, keys, cfg, trace)
    return ts.with_features(ts.features + _ffn(ts.features, lw))


def clipme_block(
    clips: TokenSet,
    lw: LayerWeights,
    lora: LoraParams | None,
    layer: int,
    cfg: ModelConfig,
    group: int = 1,
    cpe: torch.Tensor | None = None,
    keep_cross: float | None = None,
    keep_intra: float | None = None,
    trace: ForwardTrace | None = None,
) -> TokenSet:
    """Fuse every ``group`` adjacent clips into one, attend, merge within, FFN.

    ``cpe`` is the (group, D) table of clip positional embeddings. The
    cross-clip merge is skipped when ``group == 1`` or ``keep_cross`` is None.
    """
    if clips.num_sequences % group:
        raise ContractError(f"{clips.num_sequences} clips do not split into groups of {group}")
    if group > 1:
        if cpe is None or cpe.shape[0] != group:
            raise ContractError(f"need {group} clip positional embeddings for this step")
        g = clips.num_sequences
        slot_embed = cpe.repeat(g // group, 1).unsqueeze(1)
        clips = clips.with_features(clips.features + slot_embed).concat_groups(group).relabel_clips()
        if keep_cross is not None:
            # no keys exist before attention, so cross-clip matching always uses features
            count = len(clips) - kept_after_ratio(len(clips), keep_cross)
            clips = _merge(clips, count, None, cfg, trace)
    ts, keys = _attend(clips, lw, lora, layer, cfg)
    if keep_intra is not None:
        ts = _merge(ts, len(ts) - kept_after_ratio(len(ts), keep_intra), keys, cfg, trace)
    return ts.with_features(ts.features + _ffn(ts.features, lw))



def _embed_frames(frames: torch.Tensor, vw: VisionWeights) -> torch.Tensor:
    """(S, P, patch_dim) pixels -> (S, N, D) tokens with CLS first."""
    s = frames.shape[0]
    patches = nx.matmul(frames, vw.patch_proj)
    cls = vw.class_embed.expand(s, 1, -1)
    return torch.cat([cls, patches], dim=1) + vw.pos_embed


def _record(trace, act: LayerAction, ts_in: TokenSet, attn: int, after_cross: int, ts_out: TokenSet) -> None:
    if trace is None:
        return
    trace.layers.append(
        LayerRecord(
            layer=act.layer,
            kind=act.kind,
            clip_count=ts_out.num_sequences // trace.videos,
            tokens_in=len(ts_in),
            tokens_after_cross_merge=after_cross,
            tokens_after_intra_merge=len(ts_out),
            attention_capacity=attn,
            cls_tokens=int(ts_out.is_cls.sum()) // trace.videos,
        )
    )


def _image_stage(ts, actions, weights, lora, cfg, trace):
    for act in actions:
        before = ts
        ts = imgme_block(ts, weights.visual.layers[act.layer - 1], lora, act.layer - 1, act.img_r, cfg, trace)
        _record(trace, act, before, len(before), len(before), ts)
    return ts


def _image_stage_parallel(ts, actions, weights, lora, cfg, trace, workers):
    g = ts.num_sequences
    bounds = [(i * g // workers, (i + 1) * g // workers) for i in range(workers)]
    bounds = [b for b in bounds if b[1] > b[0]]
    subtraces = []
    for lo, hi in bounds:
        sub = None
        if trace is not None:
            replay = None
            if trace.replay is not None:
                replay = [p.select(lo, hi) for p in trace.replay[trace._cursor : trace._cursor + len(actions)]]
            sub = ForwardTrace(videos=trace.videos, replay=replay)
        subtraces.append(sub)
    with ThreadPoolExecutor(max_workers=len(bounds)) as pool:
        parts = list(
            pool.map(
                lambda i: _image_stage(ts.select(*bounds[i]), actions, weights, lora, cfg, subtraces[i]),
                range(len(bounds)),
            )
        )
    out = TokenSet.cat(parts)
    if trace is not None:
        if trace.replay is not None:
            trace._cursor += len(actions)
        for k in range(len(actions)):
            trace.plans.append(MergePlan.cat([st.plans[k] for st in subtraces]))
        for k, act in enumerate(actions):
            rec = subtraces[0].layers[k]
            rec.clip_count = sum(st.layers[k].clip_count for st in subtraces)
            rec.cls_tokens = sum(st.layers[k].cls_tokens for st in subtraces)
            trace.layers.append(rec)
    return out


def encode_video(
    frames: torch.Tensor,
    weights: EncoderWeights,
    lora: LoraParams | None,
    cpe: ClipPositionalEmbeddings | None,
    sched: MergeSchedule,
    trace: ForwardTrace | None = None,
    workers: int = 1,
) -> torch.Tensor:
    """Video embeddings (B, embed_dim) from patch pixels (B, F, P, patch_dim).

    A single video (F, P, patch_dim) gives a vector. Image layers may run on
    ``workers`` threads, split by frame; each frame is computed independently.
    """
    cfg = weights.cfg
    single = frames.ndim == 3
    if single:
        frames = frames.unsqueeze(0)
    b, f, p, pd = frames.shape
    if (f, p, pd) != (cfg.frames, cfg.patches_per_frame, cfg.patch_dim):
        raise ContractError(
            f"frames shaped {tuple(frames.shape)}, expected (B, {cfg.frames}, {cfg.patches_per_frame}, {cfg.patch_dim})"
        )
    predict_token_counts(cfg, sched)  # rejects infeasible schedules before any work
    actions = layer_actions(cfg, sched)
    groups = clip_groups(sched)
    if groups and (cpe is None or [t.shape[0] for t in cpe.tables] != groups):
        if cpe is not None:
            raise ContractError(f"clip positional embeddings have groups {[t.shape[0] for t in cpe.tables]}, schedule needs {groups}")
        cpe = ClipPositionalEmbeddings([torch.zeros(g, cfg.width, dtype=frames.dtype) for g in groups])
    if trace is not None:
        trace.videos = b

    x = _embed_frames(frames.reshape(b * f, p, pd), weights.visual)
    ts = TokenSet.from_frames(x, frames_per_video=f)
    image_actions = [a for a in actions if a.kind == "image"]
    if workers > 1 and image_actions:
        ts = _image_stage_parallel(ts, image_actions, weights, lora, cfg, trace, workers)
    else:
        ts = _image_stage(ts, image_actions, weights, lora, cfg, trace)

    for act in actions[len(image_actions):]:
        before = ts
        lw = weights.visual.layers[act.layer - 1]
        if act.group > 1:
            table = cpe.tables[act.step]
            fused_len = len(ts) * act.group
            after_cross = fused_len if act.keep_cross is None else kept_after_ratio(fused_len, act.keep_cross)
        else:
            table, after_cross = None, len(ts)
        ts = clipme_block(ts, lw, lora, act.layer - 1, cfg, act.group, table, act.keep_cross, act.keep_intra, trace)
        _record(trace, act, before, after_cross, after_cross, ts)

    if trace is not None:
        trace.final = ts
    feats = nx.layer_norm(ts.features, weights.visual.ln_final_g, weights.visual.ln_final_b)
    per_video = ts.num_sequences // b
    feats = feats.reshape(b, per_video * len(ts), cfg.width)
    if cfg.pooling == "cls":
        w = ts.is_cls.reshape(b, -1).to(feats.dtype)
    else:
        w = ts.sizes.reshape(b, -1).to(feats.dtype)
    pooled = (feats * w.unsqueeze(2)).sum(1) / w.sum(1, keepdim=True)
    emb = nx.matmul(pooled, weights.visual.proj)
    return emb[0] if single else emb


def tokenize(text: str, cfg: ModelConfig) -> list[int]:
    """Toy tokenizer: start id, one id per whitespace word (CRC32 bucket), end id."""
    sot, eot = cfg.text_vocab_size - 2, cfg.text_vocab_size - 1
    words = text.lower().split()[: cfg.text_max_len - 2]
    return [sot] + [zlib.crc32(w.encode()) % (cfg.text_vocab_size - 2) for w in words] + [eot]


def encode_text(ids, weights: EncoderWeights, lora: LoraParams | None) -> torch.Tensor:
    """Text embeddings from token ids (B, L) or a single id list.

    Causal attention; the feature at the last position is projected.
    """
    cfg = weights.cfg
    single = not isinstance(ids, torch.Tensor) and (len(ids) == 0 or isinstance(ids[0], int))
    ids = torch.as_tensor([ids] if single else ids, dtype=torch.int64)
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise ContractError("token ids must be a non-empty (B, L) array")
    if ids.shape[1] > cfg.text_max_len:
        raise ContractError(f"text length {ids.shape[1]} exceeds {cfg.text_max_len}")
    if int(ids.min()) < 0 or int(ids.max()) >= cfg.text_vocab_size:
        raise ContractError("unknown token id")
    tw = weights.text
    x = tw.token_embed[ids] + tw.pos_embed[: ids.shape[1]]
    for i, lw in enumerate(tw.layers):
        h = nx.layer_norm(x, lw.ln1_g, lw.ln1_b)
        out, _ = attention(h, None, lw, lora, i, cfg.heads, proportional=False, causal=True)
        x = x + out
        x = x + _ffn(x, lw)
    x = nx.layer_norm(x[:, -1], tw.ln_final_g, tw.ln_final_b)
    emb = nx.matmul(x, tw.proj)
    return emb[0] if single else emb


def _fold(layers: list[LayerWeights], lora: LoraParams) -> list[LayerWeights]:
    out = []
    for i, lw in enumerate(layers):
        out.append(
            replace(
                lw,
                wq=lw.wq + lora.delta(i, "q"),
                wk=lw.wk + lora.delta(i, "k"),
                wv=lw.wv + lora.delta(i, "v"),
            )
        )
    return out


def lora_merge(
    weights: EncoderWeights, video_lora: LoraParams | None, text_lora: LoraParams | None = None
) -> EncoderWeights:
    """Fold the LoRA deltas into the frozen projections.

    Run the result with ``lora=None``; the adapters have been consumed.
    """
    visual, text = weights.visual, weights.text
    if video_lora is not None:
        visual = replace(visual, layers=_fold(visual.layers, video_lora))
    if text_lora is not None:
        text = replace(text, layers=_fold(text.layers, text_lora))
    return EncoderWeights(weights.cfg, visual, text)
