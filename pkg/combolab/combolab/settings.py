"""Process-wide settings read from the environment (and an optional .env file)."""
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from pythonjsonlogger import jsonlogger

from .errors import UsageError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger("ComboLabSettings")


def load_env_files() -> Optional[Path]:
    """Load the first .env found next to the project or in the working directory."""
    try:
        from dotenv import load_dotenv
    except ImportError:
        logger.warning("python-dotenv not installed. Install it to use .env files: pip install python-dotenv")
        return None

    for env_path in (Path(__file__).parent.parent / '.env', Path.cwd() / '.env'):
        if env_path.exists():
            load_dotenv(dotenv_path=env_path)
            logger.info(f"Loaded environment variables from {env_path}")
            return env_path
    return None


@dataclass(frozen=True)
class Settings:
    threads: int = 1
    log_level: str = "INFO"
    log_format: str = "text"

    @classmethod
    def from_env(cls) -> "Settings":
        raw_threads = os.environ.get("COMBOLAB_THREADS", "1")
        try:
            threads = int(raw_threads)
        except ValueError:
            raise UsageError("COMBOLAB_THREADS must be an integer, got {0!r}".format(raw_threads))
        if threads < 1:
            raise UsageError("COMBOLAB_THREADS must be >= 1, got {0}".format(threads))

        log_format = os.environ.get("COMBOLAB_LOG_FORMAT", "text").lower()
        if log_format not in ("text", "json"):
            raise UsageError("COMBOLAB_LOG_FORMAT must be 'text' or 'json', got {0!r}".format(log_format))

        return cls(
            threads=threads,
            log_level=os.environ.get("COMBOLAB_LOG_LEVEL", "INFO").upper(),
            log_format=log_format,
        )


# Global settings instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get or create the process settings"""
    global _settings
    if _settings is None:
        load_env_files()
        _settings = Settings.from_env()
    return _settings


def reset_settings() -> None:
    """Forget the cached settings so the next call re-reads the environment."""
    global _settings
    _settings = None


def configure_logging(settings: Settings) -> None:
    """Install a single console handler on the root logger."""
    handler = logging.StreamHandler()
    if settings.log_format == "json":
        handler.setFormatter(jsonlogger.JsonFormatter('%(asctime)s %(name)s %(levelname)s %(message)s'))
    else:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))

    root = logging.getLogger()
    for existing in list(root.handlers):
        if getattr(existing, "_combolab", False):
            root.removeHandler(existing)
    handler._combolab = True
    root.addHandler(handler)
    root.setLevel(getattr(logging, settings.log_level, logging.INFO))
