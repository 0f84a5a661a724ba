"""
Distribuciones históricas de spread y volumen del mejor bid.

Contiene los cortes publicados de las tablas de estados del agente RL y dos
muestras de 10000 observaciones que los reproducen exactamente con
build_spread_states / build_volume_states. El comando `quantiles` genera
tablas nuevas a partir de corridas del modelo calibrado.
"""
import numpy as np

PUBLISHED_SPREAD_BREAKPOINTS = {
    5: (1, 2, 3, 7),
    10: (1, 2, 3, 4, 5, 6, 8, 12, 19),
}

PUBLISHED_VOLUME_BREAKPOINTS = {
    5: (31, 266, 1453, 5209),
    10: (11, 31, 93, 266, 636, 1453, 2930, 5209, 12322),
}

SAMPLE_SIZE = 10000

# spread en ticks -> frecuencia en la muestra
_SPREAD_COUNTS = {
    1: 6000, 2: 1231, 3: 872, 4: 288, 5: 288, 6: 288, 7: 54,
    8: 288, 12: 288, 19: 202, 40: 201,
}

_VOLUME_TOP = 30000
# Cada decil ocupa 100 posiciones centradas en su índice de cuantil
_BAND = 50


def historical_spreads() -> np.ndarray:
    """Muestra ordenada de spreads históricos."""
    values = np.array(list(_SPREAD_COUNTS.keys()), dtype=np.int64)
    counts = np.array(list(_SPREAD_COUNTS.values()), dtype=np.int64)
    return np.repeat(values, counts)


def historical_best_bid_volumes() -> np.ndarray:
    """Muestra ordenada de volúmenes del mejor bid.

    Los deciles publicados ocupan las posiciones [1000k - 50, 1000k + 50) y
    el resto se completa con enteros estrictamente entre deciles vecinos.
    """
    deciles = PUBLISHED_VOLUME_BREAKPOINTS[10]
    bounds = (0,) + deciles + (_VOLUME_TOP,)
    out = np.empty(SAMPLE_SIZE, dtype=np.int64)
    pos = 0
    for k in range(len(deciles) + 1):
        band_start = 1000 * (k + 1) - _BAND if k < len(deciles) else SAMPLE_SIZE
        lo, hi = bounds[k] + 1, bounds[k + 1] - 1
        out[pos:band_start] = np.floor(np.linspace(lo, hi, band_start - pos))
        pos = band_start
        if k < len(deciles):
            out[pos:pos + 2 * _BAND] = deciles[k]
            pos += 2 * _BAND
    return out
