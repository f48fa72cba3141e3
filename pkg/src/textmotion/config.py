"""Every hyperparameter in one place: model shapes, training and decoding."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Any, TypeVar

from .errors import ContractError

C = TypeVar("C")


@dataclass
class VqConfig:
    feature_dim: int = 263
    width: int = 128
    code_dim: int = 32
    n_codes: int = 512
    n_experts: int = 4
    down_stages: int = 2  # each halves the frame rate: l = 2 ** down_stages
    ema_decay: float = 0.99
    dead_threshold: float = 1.0
    reset_window: int = 256
    beta: float = 1.0

    @property
    def downsample(self) -> int:
        return 2 ** self.down_stages


@dataclass
class MmtConfig:
    n_codes: int = 512
    n_layers: int = 6
    first_half: int = 3
    n_heads: int = 4
    head_dim: int = 32
    experts_motion: int = 2
    experts_text: int = 2
    experts_cross: int = 2
    gating: str = "dense"  # "dense" | "sparse"
    top_k: int = 1
    use_text_path: bool = True
    use_cross_path: bool = True
    use_descriptor: bool = True
    max_positions: int = 256
    ffn_mult: int = 4
    activation: str = "relu"
    # text stub
    text_vocab: int = 4096
    text_layers: int = 2
    text_heads: int = 4

    @property
    def width(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def second_half(self) -> int:
        return self.n_layers - self.first_half

    @property
    def end_id(self) -> int:
        return self.n_codes

    @property
    def mask_id(self) -> int:
        return self.n_codes + 1

    @property
    def pad_id(self) -> int:
        return self.n_codes + 2

    @property
    def vocab(self) -> int:
        """Output classes: codes plus End."""
        return self.n_codes + 1

    def validate(self) -> None:
        if not 0 <= self.first_half <= self.n_layers:
            raise ContractError(f"first_half {self.first_half} outside [0, {self.n_layers}]")
        if self.gating not in ("dense", "sparse"):
            raise ContractError(f"gating must be dense or sparse, got {self.gating!r}")
        for name in ("experts_motion", "experts_text", "experts_cross"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.gating == "sparse" and self.top_k < 1:
            raise ContractError("top_k must be >= 1")


@dataclass
class TrainConfig:
    stage: int = 1
    seed: int = 0
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-4
    warmup: int = 100
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.99)
    window_frames: int = 64  # stage-1 crop length
    grad_clip: float = 1.0
    log_every: int = 50
    holdout: float = 0.1

    def validate(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ContractError(f"stage must be 1, 2 or 3, got {self.stage}")
        if not 0 <= self.warmup < self.steps:
            raise ContractError(f"warmup ({self.warmup}) must be smaller than steps ({self.steps})")


STAGE1_LR = 2e-3
STAGE1_STEPS = 5000


def stage_defaults(stage: int) -> TrainConfig:
    """Documented defaults per stage: the tokenizer trains faster and longer than the transformer."""
    if stage == 1:
        return TrainConfig(stage=1, lr=STAGE1_LR, steps=STAGE1_STEPS)
    return TrainConfig(stage=stage)


@dataclass
class DecodeSchedule:
    iterations: int = 10
    temperature: float = 1.0
    schedule: str = "cosine"  # "cosine" | "linear"
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 1:
            raise ContractError(f"iterations must be >= 1, got {self.iterations}")
        if self.schedule not in ("cosine", "linear"):
            raise ContractError(f"unknown schedule {self.schedule!r}")


def to_dict(cfg: Any) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def from_dict(cls: type[C], obj: dict) -> C:
    names = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = set(obj) - set(names)
    if unknown:
        raise ContractError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
    return cls(**kw)


def config_hash(*cfgs: Any) -> str:
    blob = json.dumps([to_dict(c) if dataclasses.is_dataclass(c) else c for c in cfgs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]

