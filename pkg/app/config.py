"""Configuration management for the rollback particle simulator."""

from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False
    )

    # Service Configuration
    service_port: int = 8000
    service_host: str = "0.0.0.0"
    log_level: str = "INFO"
    debug: bool = False

    # Output Configuration
    output_dir: Path = Path("results")
    expectations_path: Optional[Path] = None  # Defaults to the packaged calibration file

    # Simulation Configuration
    default_threads: int = 1
    event_budget: int = 500_000_000  # Cap on events per simulate_until call
    rng_block_size: int = 65_536  # Random draws per refill; part of the reproducibility key

    # Numerical Configuration
    quad_abs_tol: float = 1e-10
    weak_residual_tol: float = 1e-8


# Global settings instance
settings = Settings()
