import math
import os
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from loadsynth.exceptions import ConfigurationError

MAX_GENERATION_COUNT = 10_000


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(80, ge=1)
    batch_size: int = Field(128, ge=8)
    learning_rate: float = Field(1e-3, gt=0)
    lambda_mmd: float = Field(1.0, ge=0)
    lambda_q: float = Field(1.0, ge=0)
    # scaled by sqrt(latent_dim)
    bandwidth_multipliers: Tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 8.0)
    seed: int = Field(0, ge=0)
    patience: int = Field(10, ge=1)
    latent_dim: int = Field(16, ge=1)
    encoder_hidden: Tuple[int, ...] = (128, 64)
    decoder_hidden: Tuple[int, ...] = (64, 128)
    activation: Literal["relu", "tanh"] = "relu"
    validation_fraction: float = Field(0.1, gt=0, lt=1)

    @field_validator("bandwidth_multipliers")
    @classmethod
    def _positive_bandwidths(cls, value):
        if not value or any(b <= 0 for b in value):
            raise ValueError("bandwidth multipliers must be a non-empty set of positive reals")
        return value

    def bandwidths(self) -> Tuple[float, ...]:
        scale = math.sqrt(self.latent_dim)
        return tuple(b * scale for b in self.bandwidth_multipliers)


class MixtureConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_components: int = Field(10, ge=1)
    max_iters: int = Field(200, ge=1)
    tol: float = Field(1e-6, gt=0)
    reg_covar: float = Field(1e-6, gt=0)
    select_by_bic: bool = False
    candidates: Tuple[int, ...] = (2, 5, 10, 20)


class GuardConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    min_fraction: float = Field(0.01, gt=0, le=1)
    min_households: int = Field(3, ge=1)


class EvalConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_synthetic: int = Field(2000, ge=50, le=MAX_GENERATION_COUNT)
    mmd_sample_size: int = Field(200, ge=50)
    n_permutations: int = Field(199, ge=1)
    pca_sample_size: int = Field(500, ge=10)
    quantiles: Tuple[float, ...] = (0.05, 0.25, 0.50, 0.75, 0.95)


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        case_sensitive=True,
        env_nested_delimiter="__",
        extra="ignore",
    )

    APP_NAME: str = "Synthetic Load Profiles"
    APP_VERSION: str = "1.0.0"
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"

    DATA_PATH: str = "data/profiles.csv"
    MODEL_PATH: str = "artifacts/model.fday"
    REPORTS_DIR: str = "reports"
    DATABASE_URL: str = "sqlite:///./generation_log.db"

    SEED: int = Field(0, ge=0)
    HOLDOUT_FRACTION: float = Field(0.2, gt=0, lt=1)

    MIN_FRACTION: float = Field(0.01, gt=0, le=1)
    MIN_HOUSEHOLDS: int = Field(3, gt=0)
    K_ANONYMITY: int = Field(3, ge=2)
    K_ANONYMITY_POLICY: Literal["drop", "coarsen_energy_rating"] = "coarsen_energy_rating"

    HOST: str = "127.0.0.1"
    PORT: int = Field(8000, gt=0, lt=65536)
    API_TOKENS: str = ""

    TRAIN: TrainConfig = TrainConfig()
    MIXTURE: MixtureConfig = MixtureConfig()
    EVAL: EvalConfig = EvalConfig()

    @property
    def api_token_list(self) -> List[str]:
        return [token.strip() for token in self.API_TOKENS.split(",") if token.strip()]

    @property
    def guard(self) -> GuardConfig:
        return GuardConfig(min_fraction=self.MIN_FRACTION, min_households=self.MIN_HOUSEHOLDS)


def load_settings(config_path: Optional[str] = None, **overrides) -> Settings:
    """
    Builds settings from the environment plus an optional env file, which must exist
    """
    if config_path is not None:
        if not os.path.isfile(config_path):
            raise ConfigurationError(f"config file not found: {config_path}")
        return Settings(_env_file=config_path, **overrides)
    return Settings(**overrides)


settings = Settings()
