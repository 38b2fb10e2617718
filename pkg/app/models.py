from datetime import datetime
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

BENCHMARK_KINDS = ("transformer", "rnn", "lstm", "gru", "cnn")
MODEL_KINDS = ("bdt",) + BENCHMARK_KINDS
DEFAULT_HORIZONS = [24, 48, 72, 96, 120]

# Hyperparameter values searched by grid_search by default
DEFAULT_GRID: Dict[str, List[int]] = {
    "num_layers": [1, 3, 6],
    "num_epochs": [10, 50, 100],
    "num_heads": [1, 8],
    "model_dim": [32, 64],
}

ModelKind = Literal["bdt", "transformer", "rnn", "lstm", "gru", "cnn"]
Activation = Literal["sigmoid", "tanh", "relu", "linear"]


class CorruptionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["zero_mask", "gaussian"] = "zero_mask"
    mask_probability: float = Field(default=0.1, ge=0, le=1)
    sigma: float = Field(default=0.01, ge=0)
    seed: Optional[int] = None


class Hyperparams(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_layers: int = Field(default=1, gt=0)
    num_epochs: int = Field(default=10, ge=0)
    num_heads: int = Field(default=1, gt=0)
    model_dim: int = Field(default=32, gt=0)
    lookback: int = Field(default=168, gt=0)      # hours
    horizon: int = Field(default=24, gt=0)        # hours
    hidden_dim: int = Field(default=16, gt=0)
    latent_dim: Optional[int] = Field(default=None, gt=0)
    corruption: CorruptionConfig = CorruptionConfig()
    dae_activation: Activation = "sigmoid"
    ff_multiplier: int = Field(default=4, gt=0)
    layer_norm_eps: float = Field(default=1e-5, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_dims(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.latent_dim is not None and self.latent_dim >= self.model_dim:
            raise ValueError(f"latent_dim {self.latent_dim} must be smaller than model_dim {self.model_dim}")
        return self

    @property
    def effective_latent_dim(self) -> int:
        return self.latent_dim if self.latent_dim is not None else max(1, self.model_dim // 2)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: Optional[int] = Field(default=None, ge=0)   # None: use Hyperparams.num_epochs
    batch_size: int = Field(default=32, gt=0)
    learning_rate: float = Field(default=1e-3, gt=0)
    pretrain_epochs: int = Field(default=10, ge=0)
    seed: int = 0
    patience: Optional[int] = Field(default=None, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)
    clip_norm: Optional[float] = Field(default=5.0, gt=0)
    joint_dae: bool = False               # single-phase: reconstruction loss added to forecasting loss
    joint_dae_weight: float = Field(default=1.0, ge=0)
    freeze_embedding: bool = False        # hold the Bi-LSTM fixed while pretraining the DAE


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: Optional[str] = None            # hourly CSV (timestamp,load_kwh)
    sessions: Optional[str] = None        # sessions CSV, aggregated on load
    model: ModelKind = "bdt"
    hyperparams: Hyperparams = Hyperparams()
    train: TrainConfig = TrainConfig()
    horizons: List[int] = Field(default_factory=lambda: list(DEFAULT_HORIZONS))
    runs: int = Field(default=5, ge=1)
    output_dir: str = "runs"
    scale: Literal["normalized", "kwh"] = "normalized"
    fit_scope: Literal["all_data", "train_only"] = "all_data"
    jobs: int = Field(default=1, ge=1)
    checkpoint: Optional[str] = None
    grid: Optional[Dict[str, List[int]]] = None   # grid subcommand; defaults to DEFAULT_GRID

    @field_validator("horizons")
    @classmethod
    def _positive_horizons(cls, v: List[int]) -> List[int]:
        if not v or any(h <= 0 for h in v):
            raise ValueError("horizons must be a non-empty list of positive hours")
        return v


class SessionRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    session_id: str
    start_time: datetime
    end_time: datetime
    energy_kwh: float = Field(ge=0)

    @model_validator(mode="after")
    def _check_interval(self):
        if self.start_time.tzinfo is None or self.end_time.tzinfo is None:
            raise ValueError("timestamps must carry an explicit UTC offset")
        if self.end_time <= self.start_time:
            raise ValueError("end_time must be after start_time")
        return self


class RowError(BaseModel):
    line: int
    reason: str


class IngestReport(BaseModel):
    accepted: int
    rejected: List[RowError] = []


class RunResult(BaseModel):
    model: str
    horizon: int
    seed: int
    rmse: float = Field(ge=0)
    mae: float = Field(ge=0)
    seconds: float = Field(default=0.0, ge=0)
    scale: Literal["normalized", "kwh"] = "normalized"

    @model_validator(mode="after")
    def _power_mean(self):
        # rounding can put rmse a few ulps under mae when all errors are equal
        if self.rmse + 1e-12 * max(1.0, self.mae) < self.mae:
            raise ValueError(f"rmse {self.rmse} below mae {self.mae}")
        return self


class HorizonMetrics(BaseModel):
    model: str
    horizon: int
    rmse_mean: float
    rmse_std: float = Field(ge=0)
    mae_mean: float
    mae_std: float = Field(ge=0)
    runs: int = Field(ge=1)
    low_confidence: bool = False


class ComparisonTable(BaseModel):
    horizons: List[int]
    models: List[str]
    cells: List[HorizonMetrics]
    winners: Dict[int, str]
    wins: Dict[str, int]
    # baselines shown for comparison only; never ranked
    references: List[HorizonMetrics] = []

    @property
    def reference_models(self) -> List[str]:
        return list(dict.fromkeys(c.model for c in self.references))

    def cell(self, model: str, horizon: int) -> HorizonMetrics:
        for c in self.cells + self.references:
            if c.model == model and c.horizon == horizon:
                return c
        raise KeyError((model, horizon))
