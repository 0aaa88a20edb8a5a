import pytest

from tempme.accounting import bench_forward, estimate_flops
from tempme.config import preset
from tempme.errors import ContractError
from tempme.schedule import identity_schedule, parse_schedule

from conftest import A0_B16, A0_B32, A0_B32_F64


def test_baselines():
    assert estimate_flops(preset("b32"), identity_schedule(12)).gflops == pytest.approx(53.0, rel=0.05)
    assert estimate_flops(preset("b16"), identity_schedule(12)).gflops == pytest.approx(211.3, rel=0.05)
    assert estimate_flops(preset("b32", frames=64), identity_schedule(64)).gflops == pytest.approx(276.7, rel=0.05)


def test_merged_schedules():
    b32 = estimate_flops(preset("b32"), parse_schedule(A0_B32))
    assert b32.gflops == pytest.approx(34.8, rel=0.10)
    assert 0.60 <= b32.fraction <= 0.70
    b16 = estimate_flops(preset("b16"), parse_schedule(A0_B16))
    assert b16.gflops == pytest.approx(121.4, rel=0.10)
    assert 0.52 <= b16.fraction <= 0.62
    f64 = estimate_flops(preset("b32", frames=64), parse_schedule(A0_B32_F64))
    assert f64.gflops == pytest.approx(180.3, rel=0.10)


def test_layer_breakdown_by_hand():
    cfg = preset("b32")
    rep = estimate_flops(cfg, parse_schedule(A0_B32))
    d = 768
    l11 = rep.layers[10]
    assert (l11.sequences, l11.attention_tokens, l11.ffn_tokens) == (1, 118, 107)
    assert l11.projection_macs == 4 * 118 * d * d
    assert l11.attention_macs == 2 * 118 * 118 * d
    assert l11.ffn_macs == 8 * 107 * d * d
    l1 = rep.layers[0]
    assert l1.total == 12 * (4 * 50 * d * d + 2 * 50 * 50 * d + 8 * 48 * d * d)
    assert rep.patch_embed_macs == 12 * 49 * 3072 * d
    assert rep.total_macs == rep.patch_embed_macs + sum(l.total for l in rep.layers)


def test_identity_scales_linearly_in_frames():
    one = estimate_flops(preset("b32", frames=1), identity_schedule(1)).total_macs
    for f in (2, 12, 64):
        assert estimate_flops(preset("b32", frames=f), identity_schedule(f)).total_macs == f * one


def test_report_serialization():
    rep = estimate_flops(preset("b32"), parse_schedule(A0_B32))
    d = rep.to_dict()
    assert d["total_macs"] == rep.total_macs
    assert d["baseline_gflops"] == pytest.approx(52.90, abs=0.01)
    assert rep.to_table().splitlines()[-2] == "GFLOPs: 34.7 (66%)"


def test_bench_rejects_too_few_repeats():
    with pytest.raises(ContractError):
        bench_forward(preset("micro"), identity_schedule(4), repeats=1)


def test_bench_identity_is_close_to_one():
    cfg = preset("micro")
    rep = bench_forward(cfg, identity_schedule(cfg.frames), batch=8, repeats=7)
    assert 0.75 <= rep.speedup <= 1.33
    assert rep.to_dict()["baseline"]["repeats"] == 7
