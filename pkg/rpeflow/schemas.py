"""
Validated run configuration.

Every model forbids unknown keys so a typo in a config file fails loudly.
"""
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from rpeflow.config import settings


class ModelConfig(BaseModel):
    """Network structure. Channel lists are ordered finest level first."""

    model_config = ConfigDict(extra="forbid")

    levels: int = Field(default=5, ge=2, le=8)
    channels_2d: List[int] = Field(default_factory=lambda: [16, 32, 48, 64, 96])
    channels_3d: List[int] = Field(default_factory=lambda: [16, 32, 48, 64, 96])
    point_ratio: float = Field(default=0.5, gt=0.0, le=1.0)
    corr_radius: int = Field(default=4, ge=0, le=8)
    knn: int = Field(default=16, ge=1)
    warp_knn: int = Field(default=3, ge=1)
    event_bins: int = Field(default=10, ge=1)
    latent_dim: int = Field(default=32, ge=1)
    image_channels: int = Field(default=1, ge=1)
    fusion: Literal["attention", "concat"] = "attention"
    ii_reduce: Literal["sum", "min"] = "sum"

    @field_validator("channels_2d", "channels_3d")
    @classmethod
    def _channels_at_least_two(cls, value: List[int]) -> List[int]:
        if any(c < 2 for c in value):
            raise ValueError("every level needs at least 2 channels")
        return value

    @model_validator(mode="after")
    def _lists_match_levels(self) -> "ModelConfig":
        for name in ("channels_2d", "channels_3d"):
            if len(getattr(self, name)) != self.levels:
                raise ValueError(f"{name} must have {self.levels} entries, got {len(getattr(self, name))}")
        return self

    @classmethod
    def tiny(cls, levels: int = 2) -> "ModelConfig":
        """Small configuration used by gradient checks and toy runs."""
        return cls(
            levels=levels,
            channels_2d=[4 + 2 * i for i in range(levels)],
            channels_3d=[4 + 2 * i for i in range(levels)],
            corr_radius=1,
            knn=4,
            event_bins=4,
            latent_dim=4,
        )


class LossWeights(BaseModel):
    """Loss balance. ``lambdas`` are 2**(l-2) for l in [1, L]."""

    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(default=10.0, gt=0.0)
    beta: float = Field(default=0.01, ge=0.0)
    raw_sums: bool = False
    task: Literal["joint", "2d", "3d"] = "joint"

    @staticmethod
    def level_weight(level: int) -> float:
        return 2.0 ** (level - 2)

    def lambdas(self, levels: int) -> List[float]:
        return [self.level_weight(l) for l in range(1, levels + 1)]


class OptimizerSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=1e-3, gt=0.0)
    weight_decay: float = Field(default=1e-6, ge=0.0)
    iterations: int = Field(default=500, ge=1)
    batch_size: int = Field(default=1, ge=1)
    seed: int = Field(default_factory=lambda: settings.SEED)
    workers: int = Field(default_factory=lambda: settings.NUM_WORKERS, ge=1)


class AblationFlags(BaseModel):
    model_config = ConfigDict(extra="forbid")

    no_event: bool = False
    concat_fusion: bool = False
    no_mi: bool = False


class RunConfig(BaseModel):
    """
    Everything one command invocation needs.

    Precedence is defaults < config file < command-line flags; the merge happens
    in ``rpeflow.commands.common``.
    """

    model_config = ConfigDict(extra="forbid")

    command: Optional[str] = None
    data: str = Field(default_factory=lambda: settings.DATA_DIR)
    out: str = Field(default_factory=lambda: settings.RUNS_DIR)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    optim: OptimizerSettings = Field(default_factory=OptimizerSettings)
    ablation: AblationFlags = Field(default_factory=AblationFlags)
    f64: bool = False
    log_every: int = Field(default=10, ge=1)

    def effective_model(self) -> ModelConfig:
        """Model config with the fusion ablation applied."""
        if self.ablation.concat_fusion:
            return self.model.model_copy(update={"fusion": "concat"})
        return self.model

    def effective_loss(self) -> LossWeights:
        """Loss weights with the MI ablation applied (beta = 0)."""
        if self.ablation.no_mi:
            return self.loss.model_copy(update={"beta": 0.0})
        return self.loss
