import logging
from typing import Optional

from ..config import settings

_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging once for the CLI and the service"""
    logging.basicConfig(level=(level or settings.log_level).upper(), format=_FORMAT)
    # noisy third-party loggers
    logging.getLogger("httpx").setLevel(logging.WARNING)
