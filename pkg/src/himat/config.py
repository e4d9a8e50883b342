"""Run configuration: a strict JSON document with defaults that mirror
the library's documented choices, so every knob is visible and
overridable. Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from himat.errors import ConfigError


@dataclass
class ModelSection:
    blocks: int = 4
    channels: int = 32
    maps: int = 3
    latent_h: int = 16
    latent_w: int = 16
    cond_vocab: int = 8
    pos_embed: bool = False
    emb_dim: int = 64


@dataclass
class LossSection:
    kind: str = "mse"  # mse | dwt | swt
    basis: str = "sym19"
    dwt_weight: float = 1.0
    swt_ll: float = 0.5
    swt_lh: float = 2.0
    swt_hl: float = 2.0
    swt_hh: float = 2.5
    levels: int = 1


@dataclass
class CodecSection:
    factor: int = 4
    channels: int = 32
    mode: str = "lossy"  # lossless | lossy
    train_steps: int = 250
    lr: float = 1e-2


@dataclass
class DatasetSection:
    seed: int = 1
    count: int = 16
    val_count: int = 4


@dataclass
class OptimizerSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class TrainSection:
    steps: int = 200
    batch: int = 3
    augment: bool = False  # doubles the set with random flip/rotation copies
    normalize_latents: bool = True
    instructions: int = 3  # decomposition task: how many instruction/target pairs


@dataclass
class StageSection:
    latent: int = 16
    steps: int = 200


@dataclass
class RunConfig:
    task: str = "generation"  # generation | decomposition
    schedule: str = "rectified_flow"
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    codec: CodecSection = field(default_factory=CodecSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    train: TrainSection = field(default_factory=TrainSection)
    progressive: list = field(default_factory=list)  # [StageSection]; empty = single stage

    def validate(self):
        if self.task not in ("generation", "decomposition"):
            raise ConfigError(f"task must be generation|decomposition, got {self.task!r}")
        if self.schedule != "rectified_flow":
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.loss.kind not in ("mse", "dwt", "swt"):
            raise ConfigError(f"loss.kind must be mse|dwt|swt, got {self.loss.kind!r}")
        if self.codec.mode not in ("lossless", "lossy"):
            raise ConfigError(f"codec.mode must be lossless|lossy, got {self.codec.mode!r}")
        want = 3 * self.codec.factor**2 if self.codec.mode == "lossless" else self.codec.channels
        if self.model.channels != want:
            raise ConfigError(
                f"model.channels ({self.model.channels}) must equal the codec's latent "
                f"channels ({want} for {self.codec.mode} mode, factor {self.codec.factor})"
            )
        if self.task == "decomposition" and self.model.maps != 1:
            raise ConfigError("decomposition runs on single-map stacks (model.maps = 1)")
        if self.progressive and self.model.pos_embed:
            raise ConfigError("progressive stages need pos_embed=false (resolution changes)")
        for name, val in (
            ("model.blocks", self.model.blocks),
            ("model.channels", self.model.channels),
            ("model.maps", self.model.maps),
            ("model.latent_h", self.model.latent_h),
            ("model.latent_w", self.model.latent_w),
            ("dataset.count", self.dataset.count),
            ("train.steps", self.train.steps),
            ("train.batch", self.train.batch),
            ("codec.factor", self.codec.factor),
        ):
            if val < 1:
                raise ConfigError(f"{name} must be positive, got {val}")
        for st in self.progressive:
            if st.latent < 1 or st.steps < 1:
                raise ConfigError("progressive stages need positive latent and steps")
        if not 1 <= self.train.instructions <= 3:
            raise ConfigError("train.instructions must be 1..3")
        return self

    def to_dict(self):
        return asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stages(self):
        if self.progressive:
            return [(st.latent, st.steps) for st in self.progressive]
        return [((self.model.latent_h, self.model.latent_w), self.train.steps)]


_SECTIONS = {
    "model": ModelSection,
    "loss": LossSection,
    "codec": CodecSection,
    "dataset": DatasetSection,
    "optimizer": OptimizerSection,
    "train": TrainSection,
}


def _fill(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}; allowed {sorted(known)}")
    return cls(**data)


def from_dict(data):
    """Build and validate a RunConfig; unknown keys anywhere are errors."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}; allowed {sorted(known)}")
    kwargs = {}
    for key, val in data.items():
        if key in _SECTIONS:
            kwargs[key] = _fill(_SECTIONS[key], val, key)
        elif key == "progressive":
            if not isinstance(val, list):
                raise ConfigError("progressive must be a list of stages")
            kwargs[key] = [_fill(StageSection, st, f"progressive[{i}]") for i, st in enumerate(val)]
        else:
            kwargs[key] = val
    try:
        cfg = RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load(path):
    try:
        data = json.loads(open(path).read())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(data)


def stage_dims(stage_latent):
    """A stage's latent spec is either an int (square) or (h, w)."""
    if isinstance(stage_latent, tuple):
        return stage_latent
    return (stage_latent, stage_latent)
