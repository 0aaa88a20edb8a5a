import pytest
import torch

from tempme.errors import ContractError
from tempme.synthgen import SynthDataset, SynthSpec, generate, mean_interframe_similarity


def spec(**kw):
    base = dict(num_pairs=16, frames=6, patches=8, dim=24, seed=3)
    base.update(kw)
    return SynthSpec(**base)


def test_shapes_and_captions():
    d = generate(spec())
    assert d.frames.shape == (16, 6, 8, 24) and d.frames.dtype == torch.float32
    assert d.text_ids.shape == (16, 4)
    assert (d.text_ids[:, 0] == 30).all() and (d.text_ids[:, -1] == 31).all()
    assert torch.equal(d.text_ids[:, 1:-1], d.subjects)
    assert all(len(set(row.tolist())) == 2 for row in d.subjects)


def test_full_redundancy_repeats_frames():
    d = generate(spec(redundancy=1.0))
    assert torch.equal(d.frames, d.frames[:, :1].expand_as(d.frames))
    assert mean_interframe_similarity(d.frames) == pytest.approx(1.0, abs=1e-6)


def test_no_redundancy_gives_independent_frames():
    d = generate(spec(redundancy=0.0, num_pairs=64, dim=48))
    assert abs(mean_interframe_similarity(d.frames)) < 0.05


def test_similarity_grows_with_redundancy():
    sims = [mean_interframe_similarity(generate(spec(redundancy=r)).frames) for r in (0.0, 0.3, 0.6, 0.9, 1.0)]
    assert sims == sorted(sims)
    # unit base and unit noise: similarity tracks rho
    assert sims[2] == pytest.approx(0.6, abs=0.05)


def test_deterministic_by_seed():
    a, b, c = generate(spec()), generate(spec()), generate(spec(seed=4))
    assert torch.equal(a.frames, b.frames) and torch.equal(a.text_ids, b.text_ids)
    assert not torch.equal(a.frames, c.frames)


def test_validation():
    with pytest.raises(ContractError):
        spec(redundancy=1.5)
    with pytest.raises(ContractError):
        spec(subject_count=9)


def test_save_load_roundtrip(tmp_path):
    d = generate(spec())
    d.save(tmp_path / "d.bin")
    e = SynthDataset.load(tmp_path / "d.bin")
    assert e.spec == d.spec
    for name in ("frames", "text_ids", "pair_ids", "subjects"):
        assert torch.equal(getattr(d, name), getattr(e, name))
