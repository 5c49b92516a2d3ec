"""
Configuração do loguru para CLI e servidor.
"""

import sys

from loguru import logger


def setup_logging(level: str = "INFO") -> None:
    """Substitui o sink padrão do loguru por um sink em stderr no nível dado."""
    logger.remove()
    logger.add(
        sys.stderr,
        level=level.upper(),
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {name}:{function} - {message}",
    )
