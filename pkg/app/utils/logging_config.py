import logging
import os
from logging.handlers import RotatingFileHandler
from typing import Optional

from app.config import settings


def setup_logging(level: Optional[int] = None, log_dir: Optional[str] = None):
    """
    Root logger for the CLI: rotating file under log_dir plus stderr.
    Level falls back to DEBUG or INFO from settings.
    """
    # --log-dir menimpa LOG_DIR
    log_dir = log_dir or settings.LOG_DIR
    os.makedirs(log_dir, exist_ok=True)

    log_file = os.path.join(log_dir, settings.LOG_FILE)

    # Format sama untuk file dan console
    log_format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    if level is None:
        level = logging.DEBUG if settings.DEBUG else logging.INFO

    # Konfigurasi root logger
    logging.basicConfig(
        level=level,
        format=log_format,
        handlers=[
            # Log ke file dengan rotasi
            RotatingFileHandler(
                log_file, maxBytes=settings.LOG_MAX_BYTES, backupCount=settings.LOG_BACKUP_COUNT
            ),
            # Log ke console (stderr, stdout tetap bersih untuk output command)
            logging.StreamHandler(),
        ],
        force=True,
    )

    # Library plotting dan paralel terlalu ramai di DEBUG
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("joblib").setLevel(logging.WARNING)

    logging.getLogger(__name__).debug("Logging initialized")
