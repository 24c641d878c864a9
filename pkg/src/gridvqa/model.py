"""Model configuration and parameter initialisation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nn
from .tensor import Tensor

VOCAB_SIZE = 8192
MAX_TOKENS = 33  # start token + 32 word pieces
TAU_INIT = 0.07
TAU_RANGE = (0.01, 1.0)


@dataclass(frozen=True)
class EncoderConfig:
    """Vision/text transformer sizes. ``dim`` is shared by both towers."""

    resolution: int = 32
    patch_size: int = 8
    dim: int = 32
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    text_layers: int = 2
    max_frames: int = 32

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be positive")
        if self.resolution % self.patch_size:
            raise ValueError(f"resolution {self.resolution} not divisible by patch size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.resolution // self.patch_size

    @property
    def patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    @property
    def max_sequence(self) -> int:
        return 1 + self.max_frames * self.patches

    def to_dict(self) -> dict:
        return asdict(self)


TOY_CONFIG = EncoderConfig(resolution=32, patch_size=8, dim=32, layers=2, heads=4)
BENCHMARK_CONFIG = EncoderConfig(resolution=224, patch_size=16, dim=192, layers=6, heads=6)


@dataclass
class ModelWeights:
    config: EncoderConfig
    params: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def values(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def init_weights(config: EncoderConfig, seed: int = 0) -> ModelWeights:
    """Gaussian(0, 0.02) matrices and embeddings, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    d = config.dim
    p: dict[str, Tensor] = {}
    p["vision.patch.w"] = nn.normal(rng, config.patch_dim, d)
    p["vision.patch.b"] = nn.zeros(d)
    p["vision.cls"] = nn.normal(rng, 1, d)
    p["vision.pos"] = nn.normal(rng, 1 + config.patches, d)
    p["vision.frame"] = nn.zeros(config.max_frames, d)
    for i in range(config.layers):
        nn.init_block(p, f"vision.blocks.{i}", d, config.mlp_ratio, rng)
    p["vision.ln_f.g"] = nn.ones(d)
    p["vision.ln_f.b"] = nn.zeros(d)

    p["text.tok"] = nn.normal(rng, VOCAB_SIZE, d)
    p["text.pos"] = nn.normal(rng, MAX_TOKENS, d)
    for i in range(config.text_layers):
        nn.init_block(p, f"text.blocks.{i}", d, config.mlp_ratio, rng)
    p["text.ln_f.g"] = nn.ones(d)
    p["text.ln_f.b"] = nn.zeros(d)

    for name in ("q", "k", "v", "o"):
        p[f"xattn.{name}.w"] = nn.normal(rng, d, d)
    p["tau"] = Tensor(np.array([TAU_INIT]), requires_grad=True)
    return ModelWeights(config, p)
