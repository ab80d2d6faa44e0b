"""
Model, aggregation and training configuration.

Configs are pydantic models. On disk they are a flat `key=value` file (read
with python-dotenv) whose keys are listed in FLAT_KEYS; list values are
comma-separated.
"""
import logging
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from hsvlt.core.errors import ConfigError

logger = logging.getLogger(__name__)

NUM_STAGES = 4
DOWNSAMPLE_FACTOR = 16


class EmbeddingKind(str, Enum):
    LEARNED_TABLE = "learned_table"
    ONE_HOT_PROJECTED = "one_hot_projected"
    EXTERNAL_FILE = "external_file"


class CsaVariant(str, Enum):
    CONCAT_HEAD_MLP = "concat_head_mlp"
    MLP_CONCAT_MLP = "mlp_concat_mlp"
    S4_HEAD_MLP = "s4_head_mlp"


class CsaFeatures(str, Enum):
    S = "S"
    L = "L"
    S_AND_L = "S_and_L"


class LrSchedule(str, Enum):
    POLY = "poly"
    PLATEAU = "plateau"


class Precision(str, Enum):
    FLOAT64 = "float64"
    FLOAT32 = "float32"


class IvlaConfig(BaseModel):
    channels: int = Field(..., ge=1)
    gconv_kernel: int = Field(7, ge=1)
    use_gconv: bool = True
    use_l_act: bool = True
    use_v_gate: bool = True
    use_l_gate: bool = True

    @field_validator("gconv_kernel")
    @classmethod
    def kernel_must_be_odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"gconv_kernel must be odd, got {value}")
        return value


class StageConfig(BaseModel):
    index: int = Field(..., ge=1, le=NUM_STAGES)
    num_blocks: int = Field(..., ge=1)
    channels: int = Field(..., ge=1)
    ivla: IvlaConfig

    @model_validator(mode="after")
    def ivla_matches_stage(self):
        if self.ivla.channels != self.channels:
            raise ValueError(f"stage {self.index}: ivla channels {self.ivla.channels} != {self.channels}")
        return self


class CsaConfig(BaseModel):
    variant: CsaVariant = CsaVariant.CONCAT_HEAD_MLP
    stages_used: List[int] = Field(default_factory=lambda: [1, 2, 3, 4])
    features: CsaFeatures = CsaFeatures.S
    ham_latent_rank: int = Field(8, ge=1)
    ham_updates: int = Field(6, ge=1)
    enabled: bool = True

    @field_validator("stages_used")
    @classmethod
    def stages_in_range(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("stages_used must not be empty")
        if any(s < 1 or s > NUM_STAGES for s in value) or len(set(value)) != len(value):
            raise ValueError(f"stages_used must be distinct values in 1..{NUM_STAGES}, got {value}")
        return sorted(value)

    @property
    def effective_variant(self) -> CsaVariant:
        """Disabling CSA falls back to the stage-4-only head."""
        return self.variant if self.enabled else CsaVariant.S4_HEAD_MLP


class ModelConfig(BaseModel):
    image_size: Tuple[int, int] = (32, 32)
    input_channels: int = Field(3, ge=1)
    num_labels: int = Field(5, ge=1)
    linguistic_channels: int = Field(16, ge=1)
    stages: List[StageConfig]
    embedding_kind: EmbeddingKind = EmbeddingKind.LEARNED_TABLE
    embedding_file: Optional[str] = None
    csa: CsaConfig = Field(default_factory=CsaConfig)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_geometry(self):
        height, width = self.image_size
        if height % DOWNSAMPLE_FACTOR or width % DOWNSAMPLE_FACTOR or height < 1 or width < 1:
            raise ValueError(f"image_size {self.image_size} must be divisible by {DOWNSAMPLE_FACTOR}")
        if len(self.stages) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} stages, got {len(self.stages)}")
        channels = [s.channels for s in self.stages]
        if any(b <= a for a, b in zip(channels, channels[1:])):
            raise ValueError(f"stage channels must strictly increase, got {channels}")
        if [s.index for s in self.stages] != list(range(1, NUM_STAGES + 1)):
            raise ValueError("stages must be indexed 1..4 in order")
        if self.embedding_kind == EmbeddingKind.EXTERNAL_FILE and not self.embedding_file:
            raise ValueError("embedding_kind=external_file needs embedding_file")
        return self

    @property
    def channels(self) -> List[int]:
        return [s.channels for s in self.stages]

    @property
    def depths(self) -> List[int]:
        return [s.num_blocks for s in self.stages]


class TrainConfig(BaseModel):
    epochs: int = Field(300, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    lr_schedule: LrSchedule = LrSchedule.POLY
    lr_power: float = Field(0.9, gt=0)
    plateau_patience: int = Field(5, ge=1)
    plateau_factor: float = Field(0.1, gt=0, lt=1)
    target_map: Optional[float] = Field(None, gt=0, le=1)
    precision: Precision = Precision.FLOAT64


class ExperimentConfig(BaseModel):
    model: ModelConfig
    train: TrainConfig = Field(default_factory=TrainConfig)


def build_stages(depths, channels, gconv_kernel: int = 7, use_gconv: bool = True, use_l_act: bool = True,
                 use_v_gate: bool = True, use_l_gate: bool = True) -> List[StageConfig]:
    if len(depths) != NUM_STAGES or len(channels) != NUM_STAGES:
        raise ConfigError(f"depths and channels need {NUM_STAGES} entries, got {list(depths)} / {list(channels)}")
    return [
        StageConfig(
            index=i + 1,
            num_blocks=int(depth),
            channels=int(width),
            ivla=IvlaConfig(channels=int(width), gconv_kernel=gconv_kernel, use_gconv=use_gconv,
                            use_l_act=use_l_act, use_v_gate=use_v_gate, use_l_gate=use_l_gate),
        )
        for i, (depth, width) in enumerate(zip(depths, channels))
    ]


# Presets

def desk_preset() -> ExperimentConfig:
    """Four-stage model small enough to train in seconds."""
    model = ModelConfig(
        image_size=(32, 32),
        num_labels=5,
        linguistic_channels=16,
        stages=build_stages((1, 1, 2, 1), (8, 16, 32, 64)),
    )
    return ExperimentConfig(model=model, train=TrainConfig(epochs=300, batch_size=8, lr=1e-3, target_map=0.99))


def full_preset() -> ExperimentConfig:
    """Stage settings of the full-size model at 448x448 with 80 labels."""
    model = ModelConfig(
        image_size=(448, 448),
        num_labels=80,
        linguistic_channels=768,
        stages=build_stages((3, 3, 27, 3), (96, 192, 384, 768)),
    )
    return ExperimentConfig(model=model, train=TrainConfig(lr=1e-5, batch_size=8))


PRESETS = {"desk": desk_preset, "full": full_preset}


def get_preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name.lower()]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None


# Flat key/value representation

FLAT_KEYS = (
    "image_size", "input_channels", "num_labels", "linguistic_channels", "depths", "channels",
    "embedding_kind", "embedding_file", "seed",
    "gconv_kernel", "use_gconv", "use_l_act", "use_v_gate", "use_l_gate",
    "csa_variant", "csa_stages", "csa_features", "ham_rank", "ham_updates", "csa_enabled",
    "epochs", "batch_size", "lr", "weight_decay", "beta1", "beta2", "adam_eps", "lr_schedule",
    "lr_power", "plateau_patience", "plateau_factor", "target_map", "precision",
)

_TRAIN_KEYS = ("epochs", "batch_size", "lr", "weight_decay", "beta1", "beta2", "adam_eps", "lr_schedule",
               "lr_power", "plateau_patience", "plateau_factor", "target_map", "precision")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, Enum):
        return value.value
    return "" if value is None else str(value)


def to_flat(cfg: ExperimentConfig) -> Dict[str, str]:
    model, train = cfg.model, cfg.train
    ivla = model.stages[0].ivla
    flat = {
        "image_size": model.image_size,
        "input_channels": model.input_channels,
        "num_labels": model.num_labels,
        "linguistic_channels": model.linguistic_channels,
        "depths": model.depths,
        "channels": model.channels,
        "embedding_kind": model.embedding_kind,
        "embedding_file": model.embedding_file,
        "seed": model.seed,
        "gconv_kernel": ivla.gconv_kernel,
        "use_gconv": ivla.use_gconv,
        "use_l_act": ivla.use_l_act,
        "use_v_gate": ivla.use_v_gate,
        "use_l_gate": ivla.use_l_gate,
        "csa_variant": model.csa.variant,
        "csa_stages": model.csa.stages_used,
        "csa_features": model.csa.features,
        "ham_rank": model.csa.ham_latent_rank,
        "ham_updates": model.csa.ham_updates,
        "csa_enabled": model.csa.enabled,
    }
    flat.update({key: getattr(train, key) for key in _TRAIN_KEYS})
    return {key: _format(value) for key, value in flat.items()}


def _ints(value: str) -> List[int]:
    return [int(part) for part in value.split(",") if part.strip()]


def _bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def from_flat(values: Dict[str, Optional[str]], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Build a config from flat string values layered over `base` (desk preset by default)."""
    unknown = sorted(set(values) - set(FLAT_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    merged = to_flat(base or desk_preset())
    merged.update({k: ("" if v is None else str(v)) for k, v in values.items()})
    try:
        size = _ints(merged["image_size"])
        if len(size) == 1:
            size = size * 2
        stages = build_stages(
            _ints(merged["depths"]),
            _ints(merged["channels"]),
            gconv_kernel=int(merged["gconv_kernel"]),
            use_gconv=_bool(merged["use_gconv"]),
            use_l_act=_bool(merged["use_l_act"]),
            use_v_gate=_bool(merged["use_v_gate"]),
            use_l_gate=_bool(merged["use_l_gate"]),
        )
        model = ModelConfig(
            image_size=tuple(size),
            input_channels=int(merged["input_channels"]),
            num_labels=int(merged["num_labels"]),
            linguistic_channels=int(merged["linguistic_channels"]),
            stages=stages,
            embedding_kind=merged["embedding_kind"],
            embedding_file=merged["embedding_file"] or None,
            seed=int(merged["seed"]),
            csa=CsaConfig(
                variant=merged["csa_variant"],
                stages_used=_ints(merged["csa_stages"]),
                features=merged["csa_features"],
                ham_latent_rank=int(merged["ham_rank"]),
                ham_updates=int(merged["ham_updates"]),
                enabled=_bool(merged["csa_enabled"]),
            ),
        )
        train = TrainConfig(**{k: (merged[k] or None) for k in _TRAIN_KEYS})
    except (ValidationError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return ExperimentConfig(model=model, train=train)


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Copy of `cfg` with flat keys replaced, e.g. with_overrides(cfg, gconv_kernel=3)."""
    return from_flat({key: _format(value) for key, value in overrides.items()}, base=cfg)


def load_config(path: Union[str, Path], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = dotenv_values(path)
    logger.debug(f"loaded {len(values)} config keys from {path}")
    return from_flat(values, base=base)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{key}={value}\n" for key, value in to_flat(cfg).items())


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
