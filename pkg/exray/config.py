import logging
import os

from dotenv import load_dotenv
from pydantic import BaseModel

# Load environment variables
load_dotenv()


class Settings(BaseModel):
    threads: int = 1
    log_level: str = "WARNING"
    device_label: str = "desk"
    jump_delta: float = 0.05
    jump_ratio: float = 3.0
    jump_floor: float = 0.01
    agreement_threshold: float = 0.99
    channel_threshold: float = 0.1
    straggler_factor: float = 5.0
    straggler_min_share: float = 0.05


def get_settings() -> Settings:
    env = {
        "threads": os.getenv("EXRAY_THREADS"),
        "log_level": os.getenv("EXRAY_LOG_LEVEL"),
        "device_label": os.getenv("EXRAY_DEVICE_LABEL"),
        "jump_delta": os.getenv("EXRAY_JUMP_DELTA"),
        "jump_ratio": os.getenv("EXRAY_JUMP_RATIO"),
        "jump_floor": os.getenv("EXRAY_JUMP_FLOOR"),
        "agreement_threshold": os.getenv("EXRAY_AGREEMENT_THRESHOLD"),
        "channel_threshold": os.getenv("EXRAY_CHANNEL_THRESHOLD"),
        "straggler_factor": os.getenv("EXRAY_STRAGGLER_FACTOR"),
        "straggler_min_share": os.getenv("EXRAY_STRAGGLER_MIN_SHARE"),
    }
    settings = Settings(**{key: value for key, value in env.items() if value})
    if settings.threads < 1:
        settings.threads = 1
    return settings


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
