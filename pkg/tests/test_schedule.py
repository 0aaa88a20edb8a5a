import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tempme.config import preset
from tempme.errors import ScheduleError
from tempme.schedule import (
    clip_groups,
    layer_actions,
    parse_schedule,
    predict_token_counts,
)

from conftest import A0_B16, A0_B32, A0_B32_F64, random_schedule


def test_parse_a0():
    s = parse_schedule(A0_B32)
    assert s.frames == 12
    assert s.steps == ((9, 6), (10, 3), (11, 1))
    assert (s.img_r, s.keep_cross, s.keep_intra) == (2, 0.7, 0.9)
    assert s.first_clip_layer(12) == 9
    assert s.arrow_notation() == "12 ->9 6 ->10 3 ->11 1"


def test_parse_variants():
    s = parse_schedule("12@9:4@10:1")
    assert s.steps == ((9, 4), (10, 1))
    assert (s.img_r, s.keep_cross, s.keep_intra) == (0, 1.0, 1.0)
    s = parse_schedule("12@9:6@10:3@11:1 start=7 tail=off gap=off")
    assert (s.start_clip, s.tail_intra, s.gap_intra) == (7, False, False)
    assert parse_schedule(s.to_text()) == s


@pytest.mark.parametrize(
    "text, position",
    [
        ("12@9:5", 2),
        ("12@9:6@8:3", 6),
        ("12@9:6 Rc=1.5", 10),
        ("12@9:6 Ri=0", 10),
        ("12@9:6 bogus=1", 7),
        ("12@9:6 r=two", 9),
        ("12@9x6", 2),
        ("", 0),
    ],
)
def test_parse_errors_carry_position(text, position):
    with pytest.raises(ScheduleError) as exc:
        parse_schedule(text)
    assert exc.value.position == position


def test_start_after_first_step_is_rejected():
    with pytest.raises(ScheduleError):
        parse_schedule("12@9:6 start=10")


def test_clip_groups():
    assert clip_groups(parse_schedule(A0_B32)) == [2, 2, 3]
    assert clip_groups(parse_schedule(A0_B32_F64)) == [4, 4, 4]


def test_layer_actions_a3_gap_layers():
    acts = layer_actions(preset("b32"), parse_schedule("12@7:6@9:3@11:1 r=2 Rc=0.7 Ri=0.9"))
    kinds = [(a.layer, a.kind, a.group) for a in acts]
    assert kinds[:6] == [(i, "image", 1) for i in range(1, 7)]
    assert [(a.layer, a.group) for a in acts[6:]] == [(7, 2), (8, 1), (9, 2), (10, 1), (11, 3), (12, 1)]
    assert all(a.keep_intra == 0.9 for a in acts[6:])
    off = layer_actions(preset("b32"), parse_schedule("12@7:6@9:3@11:1 Ri=0.9 gap=off"))
    assert [a.keep_intra for a in off[6:]] == [0.9, None, 0.9, None, 0.9, 0.9]


def test_a0_counts_b32():
    rep = predict_token_counts(preset("b32"), parse_schedule(A0_B32))
    assert rep.final_token_count == 97
    assert rep.final_clip_count == 1
    assert rep.layer(11).attention_capacity == 118
    assert rep.layer(9).attention_capacity == 48  # ceil(2 * 34 * 0.7)
    assert [rep.layer(i).tokens_after_intra_merge for i in range(1, 9)] == list(range(48, 33, -2))
    assert round(rep.final_fraction_of_input, 2) == 0.16


def test_a0_counts_b16_and_64_frames():
    assert predict_token_counts(preset("b16"), parse_schedule(A0_B16)).final_token_count == 127
    rep = predict_token_counts(preset("b32", frames=64), parse_schedule(A0_B32_F64))
    assert rep.final_token_count == 500
    assert round(rep.final_fraction_of_input, 2) == 0.16
    assert round(predict_token_counts(preset("b16"), parse_schedule(A0_B16)).final_fraction_of_input, 2) == 0.05


def test_identity_schedule_never_merges():
    cfg = preset("b32")
    rep = predict_token_counts(cfg, parse_schedule("12 r=0 Rc=1 Ri=1"))
    assert all(l.tokens_after_intra_merge == 50 and l.clip_count == 12 for l in rep.layers)
    assert rep.final_token_count == 12 * 50
    # trivial regrouping with both ratios at 1 keeps every token
    rep = predict_token_counts(cfg, parse_schedule("12@9:6@10:3@11:1"))
    assert rep.final_token_count == 600


def test_frame_mismatch_and_infeasible():
    with pytest.raises(ScheduleError):
        predict_token_counts(preset("b32"), parse_schedule("8@9:4"))
    with pytest.raises(ScheduleError):
        predict_token_counts(preset("b32"), parse_schedule("12@13:6"))
    with pytest.raises(ScheduleError):
        predict_token_counts(preset("b32"), parse_schedule("12 r=25"))
    with pytest.raises(ScheduleError):
        predict_token_counts(preset("micro"), parse_schedule("4@2:1 r=1 Rc=0.2"))


def test_table_rendering_is_stable():
    text = predict_token_counts(preset("b32"), parse_schedule(A0_B32)).to_table()
    assert text.splitlines()[-1] == "# Tokens: 12 x 50 -> 1 x 97 (16%)"
    assert "   11 clip      1     56    118    107    118" in text


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31))
def test_counts_never_increase(seed):
    rnd = random.Random(seed)
    cfg = preset("b32")
    try:
        rep = predict_token_counts(cfg, random_schedule(rnd, 12, 12))
    except ScheduleError:
        return
    totals = [cfg.frames * cfg.tokens_per_frame] + [l.clip_count * l.tokens_after_intra_merge for l in rep.layers]
    assert all(b <= a for a, b in zip(totals, totals[1:]))
    for l in rep.layers:
        assert l.attention_capacity >= l.tokens_after_intra_merge
