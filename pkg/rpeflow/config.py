"""
12-factor process configuration using environment variables.
"""
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process settings loaded from environment variables."""

    # Logging level
    LOG_LEVEL: str = "INFO"

    # Default dataset directory for gen/train/eval when --data is omitted
    DATA_DIR: str = "data"

    # Default output directory for runs (checkpoints, logs, reports)
    RUNS_DIR: str = "runs"

    # Seed used when --seed is omitted
    SEED: int = 0

    # Threads used for per-sample forward/backward during training
    NUM_WORKERS: int = 1

    # File name of the Prometheus-style run metrics written next to outputs
    METRICS_FILE: str = "metrics.prom"

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore"
    )


# Global settings instance
settings = Settings()
