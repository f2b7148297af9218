import os
from pydantic_settings import BaseSettings
from functools import lru_cache
from typing import List


class Settings(BaseSettings):
    # Application Settings
    APP_NAME: str = "Beacon Game Lab"
    APP_VERSION: str = "1.0.0"
    DEBUG: bool = os.getenv("DEBUG", "False").lower() == "true"
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # Run registry (any SQLAlchemy URL; sqlite by default)
    DATABASE_URL: str = os.getenv("DATABASE_URL", "sqlite:///./beacon_lab.db")

    # Artifacts
    OUTPUT_DIR: str = os.getenv("OUTPUT_DIR", "runs")

    # Monte Carlo defaults
    DEFAULT_SEEDS: List[int] = [0, 1, 2, 3, 4]
    DEFAULT_MC_SAMPLES: int = 20000
    CALIBRATION_SAMPLES: int = 100000
    MAX_ENUMERATION_K: int = 20

    # Seeds evaluated in parallel processes (1 = serial)
    WORKERS: int = int(os.getenv("WORKERS", "1"))

    # CORS Settings
    CORS_ORIGINS: List[str] = ["*"]

    # Pagination
    DEFAULT_PAGE_SIZE: int = 20
    MAX_PAGE_SIZE: int = 100

    class Config:
        env_file = ".env"
        case_sensitive = True

    @property
    def is_sqlite(self) -> bool:
        return self.DATABASE_URL.startswith("sqlite")


@lru_cache()
def get_settings() -> Settings:
    return Settings()


settings = get_settings()
