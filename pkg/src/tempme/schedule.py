"""Progressive merge schedules and exact per-layer token counts.

Schedule grammar::

    F@L1:C1@L2:C2...  [r=<int>] [Rc=<float>] [Ri=<float>] [start=<int>]
                      [tail=on|off] [gap=on|off]

``F`` frames are regrouped into ``C1`` clips at layer ``L1``, ``C2`` clips at
``L2`` and so on. Layers before ``start`` (default ``L1``) are image layers
that remove ``r`` tokens per frame. From ``start`` on, every layer is a clip
layer: a step layer merges groups of adjacent clips (keep fraction ``Rc``)
and then merges within the new clip (keep fraction ``Ri``); other clip layers
skip the cross-clip step. ``gap`` controls the intra-clip merge in layers
before the final step, ``tail`` in layers after it.

Options default to the identity: ``r=0 Rc=1 Ri=1``.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field

from .config import ModelConfig
from .errors import ScheduleError
from .tokens import kept_after_ratio


@dataclass(frozen=True)
class MergeSchedule:
    frames: int
    steps: tuple[tuple[int, int], ...] = ()
    img_r: int = 0
    keep_cross: float = 1.0
    keep_intra: float = 1.0
    start_clip: int | None = None  # None: first step layer, or never when there are no steps
    tail_intra: bool = True
    gap_intra: bool = True

    def __post_init__(self) -> None:
        for name, v in (("Rc", self.keep_cross), ("Ri", self.keep_intra)):
            if not 0.0 < v <= 1.0:
                raise ScheduleError(f"{name} must lie in (0, 1], got {v}")
        if self.img_r < 0:
            raise ScheduleError("r must be non-negative")
        prev_layer, prev_count = 0, self.frames
        for layer, count in self.steps:
            if layer <= prev_layer:
                raise ScheduleError(f"step layers must increase strictly: {layer} after {prev_layer}")
            if count < 1 or count >= prev_count or prev_count % count:
                raise ScheduleError(f"clip count {count} does not evenly divide {prev_count}")
            prev_layer, prev_count = layer, count
        if self.start_clip is not None:
            if self.start_clip < 1:
                raise ScheduleError("start must be >= 1")
            if self.steps and self.start_clip > self.steps[0][0]:
                raise ScheduleError(f"start={self.start_clip} lies after the first step layer {self.steps[0][0]}")

    def first_clip_layer(self, num_layers: int) -> int:
        if self.start_clip is not None:
            return self.start_clip
        return self.steps[0][0] if self.steps else num_layers + 1

    def final_clip_count(self) -> int:
        return self.steps[-1][1] if self.steps else self.frames

    def to_text(self) -> str:
        head = str(self.frames) + "".join(f"@{l}:{c}" for l, c in self.steps)
        opts = [f"r={self.img_r}", f"Rc={self.keep_cross:g}", f"Ri={self.keep_intra:g}"]
        if self.start_clip is not None:
            opts.append(f"start={self.start_clip}")
        if not self.tail_intra:
            opts.append("tail=off")
        if not self.gap_intra:
            opts.append("gap=off")
        return " ".join([head, *opts])

    def arrow_notation(self) -> str:
        return str(self.frames) + "".join(f" ->{l} {c}" for l, c in self.steps)


_HEAD = re.compile(r"(\d+)((?:@\d+:\d+)*)")
_STEP = re.compile(r"@(\d+):(\d+)")
_OPTS = {"r", "Rc", "Ri", "start", "tail", "gap"}


def parse_schedule(text: str) -> MergeSchedule:
    parts = [(m.start(), m.group()) for m in re.finditer(r"\S+", text)]
    if not parts:
        raise ScheduleError("empty schedule", 0)
    pos, head = parts[0]
    m = _HEAD.fullmatch(head)
    if not m:
        bad = _HEAD.match(head)
        off = bad.end() if bad else 0
        raise ScheduleError(f"malformed schedule head {head!r}", pos + off)
    frames = int(m.group(1))
    if frames < 1:
        raise ScheduleError("frame count must be >= 1", pos)
    steps = []
    prev_layer, prev_count = 0, frames
    for sm in _STEP.finditer(head, m.end(1)):
        layer, count = int(sm.group(1)), int(sm.group(2))
        p = pos + sm.start()
        if layer <= prev_layer:
            raise ScheduleError(f"step layer {layer} does not increase past {prev_layer}", p)
        if count < 1 or count >= prev_count or prev_count % count:
            raise ScheduleError(f"clip count {count} does not evenly divide {prev_count}", p)
        steps.append((layer, count))
        prev_layer, prev_count = layer, count

    kw: dict = {}
    for pos, tok in parts[1:]:
        key, eq, value = tok.partition("=")
        if not eq or key not in _OPTS:
            raise ScheduleError(f"unknown option {tok!r}", pos)
        vpos = pos + len(key) + 1
        try:
            if key == "r":
                kw["img_r"] = int(value)
            elif key == "start":
                kw["start_clip"] = int(value)
            elif key in ("Rc", "Ri"):
                v = float(value)
                if not 0.0 < v <= 1.0:
                    raise ScheduleError(f"{key} must lie in (0, 1], got {value}", vpos)
                kw["keep_cross" if key == "Rc" else "keep_intra"] = v
            else:
                if value not in ("on", "off"):
                    raise ScheduleError(f"{key} must be on or off", vpos)
                kw["tail_intra" if key == "tail" else "gap_intra"] = value == "on"
        except ValueError as exc:
            if isinstance(exc, ScheduleError):
                raise
            raise ScheduleError(f"bad value for {key}: {value!r}", vpos) from None
    try:
        return MergeSchedule(frames=frames, steps=tuple(steps), **kw)
    except ScheduleError as exc:
        raise ScheduleError(str(exc), parts[0][0]) from None


def identity_schedule(frames: int) -> MergeSchedule:
    return MergeSchedule(frames=frames)


@dataclass(frozen=True)
class LayerAction:
    """What one transformer layer of the video tower does."""

    layer: int  # 1-based
    kind: str  # "image" or "clip"
    img_r: int = 0
    group: int = 1  # clips concatenated before the cross-clip merge
    step: int | None = None  # index into the clip positional embeddings
    keep_cross: float | None = None
    keep_intra: float | None = None


def layer_actions(cfg: ModelConfig, sched: MergeSchedule) -> list[LayerAction]:
    if sched.frames != cfg.frames:
        raise ScheduleError(f"schedule has {sched.frames} frames, model expects {cfg.frames}")
    for layer, _ in sched.steps:
        if layer > cfg.num_layers:
            raise ScheduleError(f"step layer {layer} beyond the {cfg.num_layers} layers")
    start = sched.first_clip_layer(cfg.num_layers)
    steps = dict(sched.steps)
    last_step = sched.steps[-1][0] if sched.steps else 0
    actions = []
    clips = sched.frames
    step_index = 0
    for layer in range(1, cfg.num_layers + 1):
        if layer < start:
            actions.append(LayerAction(layer, "image", img_r=sched.img_r))
            continue
        if layer in steps:
            group = clips // steps[layer]
            clips = steps[layer]
            actions.append(
                LayerAction(
                    layer, "clip", group=group, step=step_index,
                    keep_cross=sched.keep_cross, keep_intra=sched.keep_intra,
                )
            )
            step_index += 1
            continue
        intra = sched.tail_intra if layer > last_step else sched.gap_intra
        actions.append(LayerAction(layer, "clip", keep_intra=sched.keep_intra if intra else None))
    return actions


def clip_groups(sched: MergeSchedule) -> list[int]:
    """Group size of every merge step, i.e. the clip slots per positional embedding."""
    groups, clips = [], sched.frames
    for _, c in sched.steps:
        groups.append(clips // c)
        clips = c
    return groups


@dataclass
class LayerCount:
    layer: int
    kind: str
    clip_count: int  # independent sequences in this layer
    tokens_in: int  # per sequence, entering the layer
    tokens_after_cross_merge: int
    tokens_after_intra_merge: int  # per sequence, entering the FFN
    attention_capacity: int  # tokens entering one attention call


@dataclass
class TokenCountReport:
    frames: int
    tokens_per_frame: int
    schedule: str
    layers: list[LayerCount] = field(default_factory=list)

    @property
    def final_clip_count(self) -> int:
        return self.layers[-1].clip_count if self.layers else self.frames

    @property
    def final_tokens_per_clip(self) -> int:
        return self.layers[-1].tokens_after_intra_merge if self.layers else self.tokens_per_frame

    @property
    def final_token_count(self) -> int:
        return self.final_clip_count * self.final_tokens_per_clip

    @property
    def final_fraction_of_input(self) -> float:
        return self.final_token_count / (self.frames * self.tokens_per_frame)

    def layer(self, index: int) -> LayerCount:
        return self.layers[index - 1]

    def to_dict(self) -> dict:
        return {
            "schedule": self.schedule,
            "frames": self.frames,
            "tokens_per_frame": self.tokens_per_frame,
            "layers": [asdict(lc) for lc in self.layers],
            "final_clip_count": self.final_clip_count,
            "final_tokens_per_clip": self.final_tokens_per_clip,
            "final_token_count": self.final_token_count,
            "final_fraction_of_input": round(self.final_fraction_of_input, 6),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        head = f"{'layer':>5} {'kind':<5} {'clips':>5} {'in':>6} {'cross':>6} {'intra':>6} {'attn':>6}"
        rows = [f"schedule: {self.schedule}", head, "-" * len(head)]
        for lc in self.layers:
            rows.append(
                f"{lc.layer:>5} {lc.kind:<5} {lc.clip_count:>5} {lc.tokens_in:>6} "
                f"{lc.tokens_after_cross_merge:>6} {lc.tokens_after_intra_merge:>6} {lc.attention_capacity:>6}"
            )
        rows.append("-" * len(head))
        rows.append(
            f"# Tokens: {self.frames} x {self.tokens_per_frame} -> "
            f"{self.final_clip_count} x {self.final_tokens_per_clip} "
            f"({self.final_fraction_of_input:.0%})"
        )
        return "\n".join(rows) + "\n"


def predict_token_counts(cfg: ModelConfig, sched: MergeSchedule) -> TokenCountReport:
    actions = layer_actions(cfg, sched)
    report = TokenCountReport(cfg.frames, cfg.tokens_per_frame, sched.to_text())
    n = cfg.tokens_per_frame
    clips = cfg.frames
    cls_per_clip = 1
    for act in actions:
        if act.kind == "image":
            ffn = n - act.img_r
            _check_merge(act.layer, n, act.img_r, cls_per_clip, cfg.protect_cls)
            report.layers.append(LayerCount(act.layer, "image", clips, n, n, ffn, n))
            n = ffn
            continue
        tokens_in = n
        if act.group > 1:
            clips //= act.group
            cls_per_clip *= act.group
            total = n * act.group
            cross = kept_after_ratio(total, act.keep_cross)
            _check_merge(act.layer, total, total - cross, cls_per_clip, cfg.protect_cls)
        else:
            cross = n
        intra = cross if act.keep_intra is None else kept_after_ratio(cross, act.keep_intra)
        _check_merge(act.layer, cross, cross - intra, cls_per_clip, cfg.protect_cls)
        report.layers.append(LayerCount(act.layer, "clip", clips, tokens_in, cross, intra, cross))
        n = intra
    return report


def _check_merge(layer: int, count: int, merges: int, cls_tokens: int, protect_cls: bool) -> None:
    if merges == 0:
        return
    protected = cls_tokens if protect_cls else 0
    if count - merges <= protected:
        raise ScheduleError(
            f"layer {layer}: merging {merges} of {count} tokens leaves none beside the {protected} CLS tokens"
        )
    # set A holds ceil(count/2) tokens; in the worst case every CLS token sits in A
    if merges > (count + 1) // 2 - protected:
        raise ScheduleError(f"layer {layer}: cannot merge {merges} of {count} tokens by bipartite matching")
