"""Configuration records for the equivariant network and its training loop."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale defaults; every knob is intentionally small.

    lrc_layers lists the 1-based block indices whose residual additionally
    receives the initial embedding; None means the last two blocks.
    """

    l_max: int = 2
    channels: int = 16
    blocks: int = 2
    heads: int = 2
    r_c: float = 12.0
    max_neighbors: int = 20
    grid_resolution: int = 2
    lrc_layers: tuple[int, ...] | None = None
    n_radial: int = 32
    max_z: int = 118
    n_property: int = 1
    s2_split: int | None = None    # None: half the channels take the direct path

    def __post_init__(self):
        if self.l_max < 1:
            raise ValueError("l_max must be >= 1 (degree-1 outputs are required)")
        if self.channels < 2 or self.channels % self.heads:
            raise ValueError("channels must be >= 2 and divisible by heads")
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0 (0 is the embedding-only degenerate case)")
        if self.grid_resolution < 1:
            raise ValueError("grid resolution must be >= 1")

    def lrc_set(self) -> frozenset[int]:
        if self.lrc_layers is not None:
            return frozenset(self.lrc_layers)
        if self.blocks == 0:
            return frozenset()
        return frozenset({self.blocks - 1, self.blocks}) if self.blocks > 1 else frozenset({1})

    def to_json(self) -> str:
        d = asdict(self)
        d["lrc_layers"] = None if self.lrc_layers is None else list(self.lrc_layers)
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        d = json.loads(text)
        if d.get("lrc_layers") is not None:
            d["lrc_layers"] = tuple(d["lrc_layers"])
        return ModelConfig(**d)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass
class LossWeights:
    """Multi-task loss coefficients; defaults follow the pretraining recipe."""

    pos: float = 1.0
    cell: float = 1.0
    energy: float = 5.0
    force: float = 20.0
    prop: float = 1.0
    classify: float = 1.0


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr_max: float = 2e-4
    min_lr_factor: float = 0.01
    warmup_frac: float = 0.05
    warmup_factor: float = 0.2
    weight_decay: float = 1e-3
    clip_norm: float = 100.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    sigma_pos: float = 0.3
    sigma_cell: float = 0.3
    loss_weights: LossWeights = field(default_factory=LossWeights)
    divergence_threshold: float = 1e6
