from __future__ import annotations

import random

import pytest
import torch

from tempme.config import DEFAULT_SCHEDULES, preset
from tempme.encoder import init_weights
from tempme.schedule import MergeSchedule, parse_schedule

A0_B32 = "12@9:6@10:3@11:1 r=2 Rc=0.7 Ri=0.9"
A0_B16 = "12@9:6@10:3@11:1 r=10 Rc=0.6 Ri=0.8"
A0_B32_F64 = "64@9:16@10:4@11:1 r=2 Rc=0.7 Ri=0.9"


def narrow(name: str, **kw):
    """A preset with its token geometry intact but a small width, for live forwards."""
    return preset(name, width=32, heads=4, text_vocab_size=64, embed_dim=16, **kw)


def random_schedule(rnd: random.Random, frames: int, layers: int) -> MergeSchedule:
    divisors = lambda n: [d for d in range(1, n) if n % d == 0]
    steps, clips, layer = [], frames, rnd.randint(1, layers)
    while clips > 1 and layer <= layers and rnd.random() < 0.8:
        clips = rnd.choice(divisors(clips))
        steps.append((layer, clips))
        layer += rnd.randint(1, 3)
    return MergeSchedule(
        frames=frames,
        steps=tuple(steps),
        img_r=rnd.randint(0, 2),
        keep_cross=rnd.choice([0.5, 0.6, 0.7, 0.85, 1.0]),
        keep_intra=rnd.choice([0.6, 0.8, 0.9, 1.0]),
        tail_intra=rnd.random() < 0.8,
        gap_intra=rnd.random() < 0.8,
    )


@pytest.fixture(scope="session")
def toy_cfg():
    return preset("toy")


@pytest.fixture(scope="session")
def toy_weights(toy_cfg):
    return init_weights(toy_cfg, 0)


@pytest.fixture(scope="session")
def toy_sched():
    return parse_schedule(DEFAULT_SCHEDULES["toy"])


@pytest.fixture(scope="session")
def micro_cfg():
    return preset("micro")


@pytest.fixture(scope="session")
def micro_sched():
    return parse_schedule(DEFAULT_SCHEDULES["micro"])


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)
