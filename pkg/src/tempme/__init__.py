"""Progressive token merging for text-video retrieval, at toy scale.

Core entry points: :func:`parse_schedule`, :func:`predict_token_counts`,
:func:`estimate_flops`, :func:`encode_video` and :func:`train_toy`.
"""

from .accounting import bench_forward, estimate_flops
from .config import DEFAULT_SCHEDULES, ModelConfig, preset
from .encoder import encode_text, encode_video, init_weights, lora_merge
from .errors import ContractError, DivergenceError, ScheduleError
from .retrieval import contrastive_loss, retrieval_metrics, train_toy
from .schedule import MergeSchedule, parse_schedule, predict_token_counts
from .tokens import TokenSet, apply_merge, bipartite_soft_match

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DEFAULT_SCHEDULES",
    "DivergenceError",
    "MergeSchedule",
    "ModelConfig",
    "ScheduleError",
    "TokenSet",
    "apply_merge",
    "bench_forward",
    "bipartite_soft_match",
    "contrastive_loss",
    "encode_text",
    "encode_video",
    "estimate_flops",
    "init_weights",
    "lora_merge",
    "parse_schedule",
    "predict_token_counts",
    "preset",
    "retrieval_metrics",
    "train_toy",
]
