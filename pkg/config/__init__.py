"""
Módulo de configuración del proyecto
"""
from .settings import (
    OUT_DIR, LOG_LEVEL, TICK_MS, JOBS, FEED_HOST, FEED_PORT,
    CHANNEL_CAPACITY, API_KEY,
)

__all__ = [
    'OUT_DIR', 'LOG_LEVEL', 'TICK_MS', 'JOBS', 'FEED_HOST', 'FEED_PORT',
    'CHANNEL_CAPACITY', 'API_KEY',
]
