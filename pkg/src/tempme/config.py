"""Model shapes and named presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

from .errors import ContractError


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the dual encoder. The text tower reuses width, heads and depth."""

    num_layers: int = 12
    width: int = 768
    heads: int = 12
    ffn_dim: int | None = None  # defaults to 4 * width
    patch_size: int = 32
    patch_grid: int = 7
    frames: int = 12
    text_vocab_size: int = 49408
    text_max_len: int = 32
    embed_dim: int = 512
    lora_rank: int = 8
    lora_alpha: float = 1.0
    proportional_attention: bool = True
    temperature: float = 0.05
    # merge behavior switches
    protect_cls: bool = True
    size_weighted_merge: bool = True
    match_on_keys: bool = False
    pooling: str = "cls"  # "cls" or "tokens" (size-weighted mean of all final tokens)

    def __post_init__(self) -> None:
        if self.width % self.heads:
            raise ContractError(f"width {self.width} not divisible by heads {self.heads}")
        if self.tokens_per_frame < 2:
            raise ContractError("a frame needs at least one patch besides CLS")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if self.pooling not in ("cls", "tokens"):
            raise ContractError(f"unknown pooling {self.pooling!r}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.width

    @property
    def patches_per_frame(self) -> int:
        return self.patch_grid * self.patch_grid

    @property
    def tokens_per_frame(self) -> int:
        return self.patches_per_frame + 1

    @property
    def patch_dim(self) -> int:
        """Flattened RGB pixels per patch."""
        return 3 * self.patch_size * self.patch_size

    def replace(self, **changes) -> ModelConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


PRESETS: dict[str, ModelConfig] = {
    # CLIP ViT-B/32 video tower at 224px: 7x7 patches + CLS = 50 tokens
    "b32": ModelConfig(),
    # CLIP ViT-B/16: 14x14 patches + CLS = 197 tokens
    "b16": ModelConfig(patch_size=16, patch_grid=14),
    "toy": ModelConfig(
        width=64, heads=4, patch_size=4, patch_grid=4, text_vocab_size=64, text_max_len=16, embed_dim=32
    ),
    "micro": ModelConfig(
        num_layers=2,
        width=16,
        heads=2,
        patch_size=2,
        patch_grid=2,
        frames=4,
        text_vocab_size=32,
        text_max_len=8,
        embed_dim=8,
        lora_rank=2,
    ),
}

# Schedules that play the role of the published defaults for each preset.
DEFAULT_SCHEDULES: dict[str, str] = {
    "b32": "12@9:6@10:3@11:1 r=2 Rc=0.7 Ri=0.9",
    "b16": "12@9:6@10:3@11:1 r=10 Rc=0.6 Ri=0.8",
    "toy": "12@9:6@10:3@11:1 r=1 Rc=0.75 Ri=0.9",
    "micro": "4@2:1 r=1 Rc=0.7 Ri=0.9",
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg
