"""
Servicio de hechos estilizados.

Clasificación de trades con la regla de Lee-Ready, autocorrelaciones,
índice de cola por máxima verosimilitud, colas extremas, curvas de impacto de
precio y perfil promedio de profundidad. Todas las funciones son puras sobre
registros inmutables.
"""
import bisect
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errores import EstimationError
from app.models.libro_ordenes import DepthSnapshot, Side

logger = logging.getLogger(__name__)

IMPACT_BINS = 20
IMPACT_EDGES = np.logspace(-3, 0.5, IMPACT_BINS + 1)


@dataclass(frozen=True)
class TradeRecord:
    timestamp: int
    price: float
    volume: float


@dataclass(frozen=True)
class Quote:
    timestamp: int
    bid: Optional[float]
    ask: Optional[float]

    @property
    def mid(self) -> Optional[float]:
        if self.bid is None or self.ask is None:
            return None
        return (self.bid + self.ask) / 2


@dataclass(frozen=True)
class ClassifiedTrade:
    timestamp: int
    price: float
    volume: float
    sign: int


@dataclass
class ImpactCurve:
    """Curva de impacto en 20 intervalos logarítmicos de volumen normalizado.

    omega e impact son NaN en los intervalos vacíos.
    """
    edges: np.ndarray
    omega: np.ndarray
    impact: np.ndarray
    counts: np.ndarray

    @property
    def populated(self) -> np.ndarray:
        return self.counts > 0


@dataclass
class ExtremeTails:
    upper: np.ndarray
    lower: np.ndarray
    alpha_upper: float
    alpha_lower: float


@dataclass
class SessionFills:
    """Órdenes de mercado de una sesión con sus cotizaciones previas, el
    signo verdadero del agresor y el mid antes y después."""
    trades: List[TradeRecord]
    quotes: List[Quote]
    signs: np.ndarray
    mid_before: List[Optional[float]]
    mid_after: List[Optional[float]]


def fills_from_log(log) -> SessionFills:
    """Extrae los trades agresores de un SessionLog."""
    records = log.market_orders
    return SessionFills(
        trades=[TradeRecord(r.timestamp, r.vwap, r.volume) for r in records],
        quotes=[Quote(r.timestamp, r.best_bid_before, r.best_ask_before) for r in records],
        signs=np.array([1 if r.side is Side.BID else -1 for r in records], dtype=int),
        mid_before=[r.mid_before for r in records],
        mid_after=[r.mid_after for r in records],
    )


# ----------------------------------------------------------------------
# Lee-Ready
# ----------------------------------------------------------------------

def _prevailing(trades: Sequence[TradeRecord], quotes: Sequence[Quote]) -> List[Optional[Quote]]:
    times = [q.timestamp for q in quotes]
    result = []
    for trade in trades:
        i = bisect.bisect_right(times, trade.timestamp) - 1
        result.append(quotes[i] if i >= 0 else None)
    return result


def lee_ready_classify(trades: Sequence[TradeRecord], quotes: Sequence[Quote],
                       aligned: bool = False) -> Tuple[List[ClassifiedTrade], int]:
    """Clasifica cada trade como compra (+1) o venta (-1).

    Regla de cotización: por encima del mid es compra, por debajo es venta.
    En el mid se aplica la regla del tick contra el precio anterior y, si es
    igual, contra el último precio distinto.

    Args:
        trades: Trades ordenados por tiempo.
        quotes: Cotizaciones ordenadas por tiempo; se usa la vigente en o
            antes de cada trade. Con `aligned` la cotización i corresponde
            al trade i.
        aligned (bool): Cotizaciones ya emparejadas una a una.

    Returns:
        tuple: (trades clasificados, cantidad descartada sin contexto).
    """
    if aligned and len(quotes) != len(trades):
        raise ValueError("Con aligned=True se requiere una cotización por trade")
    prevailing = list(quotes) if aligned else _prevailing(trades, quotes)

    classified, dropped = [], 0
    last_price: Optional[float] = None
    last_tick = 0
    for trade, quote in zip(trades, prevailing):
        mid = quote.mid if quote is not None else None
        if last_price is not None and trade.price != last_price:
            last_tick = 1 if trade.price > last_price else -1

        if mid is not None and trade.price > mid:
            sign = 1
        elif mid is not None and trade.price < mid:
            sign = -1
        else:
            sign = last_tick
        last_price = trade.price

        if sign == 0:
            dropped += 1
            continue
        classified.append(ClassifiedTrade(trade.timestamp, trade.price, trade.volume, sign))

    if dropped:
        logger.info(f"Lee-Ready: {dropped} trades sin contexto descartados")
    return classified, dropped


# ----------------------------------------------------------------------
# Autocorrelación y colas
# ----------------------------------------------------------------------

def acf(series: Sequence[float], max_lag: int) -> np.ndarray:
    """Autocorrelación muestral sesgada para los rezagos 0..max_lag.

    Raises:
        EstimationError: Si la serie es constante o no supera max_lag.
    """
    x = np.asarray(series, dtype=float)
    if x.size <= max_lag:
        raise EstimationError(f"Serie de largo {x.size} para max_lag={max_lag}")
    d = x - x.mean()
    gamma0 = float(d @ d)
    if gamma0 == 0:
        raise EstimationError("Autocorrelación indefinida para una serie constante")
    return np.array([float(d[:x.size - k] @ d[k:]) / gamma0 for k in range(max_lag + 1)])


def acf_guide(n: int) -> float:
    """Banda de referencia 1.96/sqrt(n) para las autocorrelaciones."""
    return 1.96 / math.sqrt(n)


def tail_index_mle(samples: Sequence[float], x_min: float) -> float:
    """alpha = 1 + n / sum(ln(x / x_min)).

    Raises:
        EstimationError: Si no hay muestras, x_min <= 0, alguna muestra es
            menor que x_min o todas son iguales a x_min.
    """
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise EstimationError("Sin muestras para el índice de cola")
    if x_min <= 0 or np.any(x < x_min):
        raise EstimationError("Se requiere x >= x_min > 0")
    total = float(np.sum(np.log(x / x_min)))
    if total == 0:
        raise EstimationError("Todas las muestras coinciden con x_min")
    return 1.0 + x.size / total


def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    rank = max(1, math.ceil(q * sorted_values.size))
    return float(sorted_values[rank - 1])


def extreme_tails(returns: Sequence[float]) -> ExtremeTails:
    """Colas por encima del percentil 95 y por debajo del 5 (rango más
    cercano), con su índice de cola; la cola inferior en valor absoluto."""
    x = np.sort(np.asarray(returns, dtype=float))
    if x.size < 100:
        raise EstimationError("Se requieren al menos 100 retornos")
    p95, p5 = nearest_rank(x, 0.95), nearest_rank(x, 0.05)
    upper = x[x >= p95]
    lower = x[x <= p5]
    if p95 <= 0 or p5 >= 0:
        raise EstimationError("Las colas no tienen el signo esperado")
    abs_lower = np.abs(lower)
    return ExtremeTails(
        upper=upper,
        lower=lower,
        alpha_upper=tail_index_mle(upper, float(upper.min())),
        alpha_lower=tail_index_mle(abs_lower, float(abs_lower.min())),
    )


def trade_sign_acf_tail(signs: Sequence[int], max_lag: int = 100,
                        min_lag: int = 1) -> Tuple[np.ndarray, float]:
    """Exponente de decaimiento de la autocorrelación de los signos,
    estimado con tail_index_mle sobre los valores positivos en
    [min_lag, max_lag].

    Returns:
        tuple: (autocorrelaciones 0..max_lag, alpha estimado).
    """
    rho = acf(signs, max_lag)
    tail = rho[min_lag:]
    tail = tail[tail > 0]
    if tail.size == 0:
        raise EstimationError("Sin autocorrelaciones positivas en la cola")
    return rho, tail_index_mle(tail, float(tail.min()))


# ----------------------------------------------------------------------
# Impacto y profundidad
# ----------------------------------------------------------------------

def _empty_curve() -> ImpactCurve:
    nan = np.full(IMPACT_BINS, np.nan)
    return ImpactCurve(IMPACT_EDGES.copy(), nan.copy(), nan.copy(), np.zeros(IMPACT_BINS, dtype=int))


def _curve(omega: np.ndarray, impact: np.ndarray) -> ImpactCurve:
    curve = _empty_curve()
    if omega.size == 0:
        return curve
    bins = np.minimum(np.searchsorted(IMPACT_EDGES, omega, side='right') - 1, IMPACT_BINS - 1)
    for b in range(IMPACT_BINS):
        mask = bins == b
        n = int(mask.sum())
        curve.counts[b] = n
        if n:
            curve.omega[b] = float(omega[mask].mean())
            curve.impact[b] = float(impact[mask].mean())
    return curve


def price_impact_curves(trades: Sequence[ClassifiedTrade],
                        mid_before: Sequence[Optional[float]],
                        mid_after: Sequence[Optional[float]]) -> Tuple[Dict[str, ImpactCurve], int]:
    """Curvas de impacto de compradores y vendedores.

    omega = v / v_medio de la sesión y dp = ln(m_después) - ln(m_antes); la
    curva de vendedores usa -dp. Los trades sin mids o con omega fuera de
    [1e-3, 10^0.5] se descartan.

    Returns:
        tuple: ({'buyer': curva, 'seller': curva}, descartados).
    """
    if len(trades) == 0:
        return {'buyer': _empty_curve(), 'seller': _empty_curve()}, 0
    volumes = np.array([t.volume for t in trades], dtype=float)
    v_bar = float(volumes.mean())
    omega, impact, signs = [], [], []
    dropped = 0
    for trade, before, after in zip(trades, mid_before, mid_after):
        w = trade.volume / v_bar
        if before is None or after is None or before <= 0 or after <= 0 \
                or not IMPACT_EDGES[0] <= w <= IMPACT_EDGES[-1]:
            dropped += 1
            continue
        omega.append(w)
        impact.append(math.log(after) - math.log(before))
        signs.append(trade.sign)
    omega, impact, signs = np.array(omega), np.array(impact), np.array(signs, dtype=int)
    if dropped:
        logger.info(f"Impacto: {dropped} trades fuera del dominio descartados")
    buy, sell = signs == 1, signs == -1
    return {
        'buyer': _curve(omega[buy], impact[buy]),
        'seller': _curve(omega[sell], -impact[sell]),
    }, dropped


def impact_slope(curve: ImpactCurve) -> float:
    """Pendiente MCO de log(impacto) sobre log(omega) en los intervalos
    poblados con impacto positivo."""
    mask = curve.populated & (curve.impact > 0)
    if int(mask.sum()) < 2:
        raise EstimationError("Menos de dos intervalos con impacto positivo")
    return float(np.polyfit(np.log(curve.omega[mask]), np.log(curve.impact[mask]), 1)[0])


def depth_profile_average(snapshots: Sequence[DepthSnapshot]) -> Tuple[np.ndarray, np.ndarray]:
    """Volumen medio por nivel de cada lado.

    Returns:
        tuple: (bids, asks) como arreglos del largo de los snapshots.
    """
    if not snapshots:
        raise EstimationError("Se requiere al menos un snapshot de profundidad")
    bids = np.array([s.bids for s in snapshots], dtype=float).mean(axis=0)
    asks = np.array([s.asks for s in snapshots], dtype=float).mean(axis=0)
    return bids, asks


def classifier_agreement(classified_signs: Sequence[int], true_signs: Sequence[int]) -> float:
    """Fracción de signos clasificados que coinciden con el agresor real."""
    a, b = np.asarray(classified_signs), np.asarray(true_signs)
    if a.size == 0 or a.size != b.size:
        raise ValueError("Se requieren secuencias no vacías del mismo largo")
    return float(np.mean(a == b))
