from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Konfigurasi umum
    APP_NAME: str = "Mixed-Cohort Sleep Stager"
    APP_VERSION: str = "1.0.0"
    DEBUG: bool = False

    # Konfigurasi logging
    LOG_DIR: str = "logs"
    LOG_FILE: str = "sleep_stager.log"
    LOG_MAX_BYTES: int = 10485760
    LOG_BACKUP_COUNT: int = 5

    # Direktori data
    DATA_DIR: str = "data"
    CACHE_DIR: str = "data/cache"

    # Paralelisme per subjek (joblib)
    N_JOBS: int = 1

    # Semua randomness berasal dari satu seed
    DEFAULT_SEED: int = 0

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")


# Buat instance settings
settings = Settings()
