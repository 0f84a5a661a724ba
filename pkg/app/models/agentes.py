"""
Agentes mínimamente inteligentes del modelo: fundamentalistas, chartistas y
proveedores de liquidez (LP).

Las reglas de decisión son funciones puras sobre el estado del agente y un
BookStats; toda la aleatoriedad entra por el numpy.random.Generator de la
sesión, de modo que (parámetros, semilla) determinan cada orden.
"""
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.errores import ConfigError
from app.models.libro_ordenes import BookStats, Order, OrderKind, Side

logger = logging.getLogger(__name__)

VOLUME_CAP = 10_000_000

# Volumen mínimo según la distancia al mid relativa a delta
LT_XM_NEAR = 20
LT_XM_FAR = 50
LP_XM = 5

# Cota de |rho/kappa| para que exp() no desborde cuando kappa -> 0
_MAX_EXPONENT = 30.0

FREE_PARAMS = ('n_c', 'n_f', 'delta', 'kappa', 'nu', 'sigma_f')


@dataclass
class AbmParams:
    """Vector completo de parámetros del modelo (fijos y libres).

    Los seis parámetros libres de calibración son n_c, n_f, delta, kappa, nu
    y sigma_f; el resto queda fijo. Los valores por defecto de los libres son
    los calibrados.
    """
    n_lp: int = 30
    n_c: int = 8
    n_f: int = 6
    delta: float = 0.125
    kappa: float = 3.289
    nu: float = 7.221
    sigma_f: float = 0.041
    lambda_min: float = 0.0005
    lambda_max: float = 0.05
    phi_ms: int = 1000
    t_ms: int = 25000
    m0: int = 10000
    s0: int = 40
    seed: int = 1
    ewma_printed_sign: bool = False

    @property
    def initial_bid(self) -> int:
        return self.m0 - self.s0 // 2

    @property
    def initial_ask(self) -> int:
        return self.m0 + self.s0 // 2

    def validate(self) -> 'AbmParams':
        """Verifica las cotas de los parámetros.

        Raises:
            ConfigError: Si algún parámetro está fuera de rango.
        """
        checks = [
            (1 <= self.n_c <= 20, "n_c debe estar en [1, 20]"),
            (1 <= self.n_f <= 20, "n_f debe estar en [1, 20]"),
            (0 <= self.delta <= 10, "delta debe estar en [0, 10]"),
            (self.kappa >= 0, "kappa debe ser >= 0"),
            (self.nu >= 1.5, "nu debe ser >= 1.5"),
            (0 <= self.sigma_f <= 0.05, "sigma_f debe estar en [0, 0.05]"),
            (self.n_lp >= 1, "n_lp debe ser >= 1"),
            (0 < self.lambda_min <= self.lambda_max, "se requiere 0 < lambda_min <= lambda_max"),
            (self.phi_ms > 0 and self.t_ms > 0, "phi_ms y t_ms deben ser positivos"),
            (self.m0 > self.s0 > 0, "se requiere m0 > s0 > 0"),
        ]
        for ok, mensaje in checks:
            if not ok:
                raise ConfigError(mensaje)
        return self

    def free_vector(self) -> np.ndarray:
        return np.array([float(getattr(self, name)) for name in FREE_PARAMS])

    def with_free_vector(self, theta: Sequence[float]) -> 'AbmParams':
        """Devuelve una copia con los parámetros libres reemplazados.

        n_c y n_f se optimizan como reales y se redondean aquí.
        """
        values = dict(zip(FREE_PARAMS, theta))
        values['n_c'] = int(round(values['n_c']))
        values['n_f'] = int(round(values['n_f']))
        return replace(self, **values)

    def to_dict(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_file(self, path: str) -> None:
        """Guarda los parámetros en formato clave=valor."""
        write_key_values(path, self.to_dict())

    @classmethod
    def from_file(cls, path: str) -> 'AbmParams':
        """Lee parámetros en formato clave=valor; las claves ausentes toman
        su valor por defecto.

        Raises:
            FileNotFoundError: Si el archivo no existe.
            ConfigError: Si hay claves desconocidas o valores inválidos.
        """
        return cls(**coerce_key_values(cls, read_key_values(path))).validate()


def read_key_values(path: str) -> Dict[str, str]:
    """Lee un archivo clave=valor ignorando líneas vacías y comentarios '#'."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    valores = {}
    with open(path, 'r', encoding='utf-8') as archivo:
        for numero, linea in enumerate(archivo, start=1):
            linea = linea.split('#', 1)[0].strip()
            if not linea:
                continue
            if '=' not in linea:
                raise ConfigError(f"{path}:{numero}: se esperaba clave=valor")
            clave, valor = linea.split('=', 1)
            valores[clave.strip()] = valor.strip()
    return valores


def write_key_values(path: str, valores: Dict[str, object]) -> None:
    with open(path, 'w', encoding='utf-8') as archivo:
        for clave, valor in valores.items():
            archivo.write(f"{clave}={valor}\n")


def coerce_key_values(cls, raw: Dict[str, str]) -> Dict[str, object]:
    """Convierte los valores de texto al tipo del valor por defecto del campo."""
    defaults = cls()
    known = {f.name for f in fields(cls)}
    result = {}
    for clave, valor in raw.items():
        if clave not in known:
            raise ConfigError(f"Parámetro desconocido: {clave}")
        tipo = type(getattr(defaults, clave))
        try:
            if tipo is bool:
                result[clave] = valor.lower() in ('1', 'true', 'si', 'sí', 'yes')
            elif tipo is int:
                result[clave] = int(float(valor))
            else:
                result[clave] = tipo(valor)
        except ValueError:
            raise ConfigError(f"Valor inválido para {clave}: {valor!r}") from None
    return result


# ----------------------------------------------------------------------
# Muestreo de volúmenes
# ----------------------------------------------------------------------

def sample_power_law(x_m: float, alpha: float, u: float) -> int:
    """Volumen por inversa de la CDF de Pareto 1 - (x_m/x)^alpha.

    Args:
        x_m (float): Volumen mínimo (>= 1).
        alpha (float): Índice de cola (> 0).
        u (float): Uniforme en (0, 1].

    Returns:
        int: floor(x_m * u^(-1/alpha)), acotado en VOLUME_CAP.
    """
    if not 0 < u <= 1:
        raise ValueError(f"u fuera de (0, 1]: {u}")
    if alpha <= 0 or x_m < 1:
        raise ValueError(f"Parámetros inválidos: x_m={x_m}, alpha={alpha}")
    if -math.log(u) / alpha >= math.log(VOLUME_CAP / x_m):
        return VOLUME_CAP
    return min(int(math.floor(x_m * u ** (-1.0 / alpha))), VOLUME_CAP)


def draw_power_law(rng: np.random.Generator, x_m: float, alpha: float) -> int:
    """Muestrea un volumen; un u == 0 se vuelve a sortear."""
    u = rng.random()
    while u == 0.0:
        u = rng.random()
    return sample_power_law(x_m, alpha, u)


def volume_alpha(side: Side, rho: float, nu: float) -> float:
    """alpha = 1 + rho/nu del lado comprador, 1 - rho/nu del vendedor."""
    return 1 + rho / nu if side is Side.BID else 1 - rho / nu


# ----------------------------------------------------------------------
# Tomadores de liquidez
# ----------------------------------------------------------------------

@dataclass
class FundamentalistState:
    agent_id: int
    fundamental: float

    @classmethod
    def draw(cls, agent_id: int, params: AbmParams, rng: np.random.Generator):
        """Precio fundamental m0 * e^x con x ~ N(0, sigma_f^2), fijo en la sesión."""
        return cls(agent_id, params.m0 * math.exp(rng.normal(0.0, params.sigma_f)))


@dataclass
class ChartistState:
    agent_id: int
    forgetting: float
    m_bar: float

    @classmethod
    def draw(cls, agent_id: int, params: AbmParams, rng: np.random.Generator):
        lam = rng.uniform(params.lambda_min, params.lambda_max)
        return cls(agent_id, lam, float(params.m0))


def _market_order(agent_id, side, volume, now, ids) -> Order:
    return Order(
        id=next(ids), agent_id=agent_id, side=side, kind=OrderKind.MARKET,
        volume=volume, placed_at=now,
    )


def _lt_volume(side, distance, stats, params, rng) -> int:
    x_m = LT_XM_NEAR if abs(distance) <= params.delta * stats.mid else LT_XM_FAR
    return draw_power_law(rng, x_m, volume_alpha(side, stats.imbalance, params.nu))


def fundamentalist_action(state: FundamentalistState, stats: BookStats,
                          params: AbmParams, rng: np.random.Generator,
                          now: int, ids: Iterator[int]) -> Optional[Order]:
    """Orden de mercado del fundamentalista, o None.

    Vende si f < m - s/2, compra si f > m + s/2.
    """
    if not stats.two_sided:
        return None
    f, m, half = state.fundamental, stats.mid, stats.spread / 2
    if f < m - half:
        side = Side.ASK
    elif f > m + half:
        side = Side.BID
    else:
        return None
    volume = _lt_volume(side, f - m, stats, params, rng)
    return _market_order(state.agent_id, side, volume, now, ids)


def update_ewma(state: ChartistState, mid: float, printed_sign: bool = False) -> float:
    """Actualiza la media móvil exponencial del chartista.

    La forma por defecto m_bar + lambda (m - m_bar) converge al mid;
    printed_sign usa m_bar + lambda (m_bar - m).
    """
    if printed_sign:
        state.m_bar = state.m_bar + state.forgetting * (state.m_bar - mid)
    else:
        state.m_bar = state.m_bar + state.forgetting * (mid - state.m_bar)
    return state.m_bar


def chartist_action(state: ChartistState, stats: BookStats, params: AbmParams,
                    rng: np.random.Generator, now: int,
                    ids: Iterator[int]) -> Optional[Order]:
    """Orden de mercado del chartista, o None.

    La EWMA se actualiza antes de decidir con cada mid observado; un libro de
    un solo lado no tiene mid y no aporta observación. Vende si
    m_bar > m + s/2 y compra si m_bar < m - s/2.
    """
    if stats.mid is not None:
        update_ewma(state, stats.mid, params.ewma_printed_sign)
    if not stats.two_sided:
        return None
    m_bar = state.m_bar
    m, half = stats.mid, stats.spread / 2
    if m_bar > m + half:
        side = Side.ASK
    elif m_bar < m - half:
        side = Side.BID
    else:
        return None
    volume = _lt_volume(side, m_bar - m, stats, params, rng)
    return _market_order(state.agent_id, side, volume, now, ids)


# ----------------------------------------------------------------------
# Proveedores de liquidez
# ----------------------------------------------------------------------

@dataclass
class LpState:
    agent_id: int
    open_orders: Dict[int, int] = field(default_factory=dict)


def lp_side(rho: float, u: float) -> Side:
    """Ask con probabilidad (rho + 1) / 2."""
    return Side.ASK if u < (rho + 1) / 2 else Side.BID


def lp_gamma_scale(side: Side, rho: float, kappa: float) -> float:
    """Escala de la Gamma de colocación: media s*e^{+rho/kappa} en bids y
    s*e^{-rho/kappa} en asks."""
    if rho == 0:
        return 1.0
    ratio = rho / kappa if kappa > 0 else math.copysign(_MAX_EXPONENT, rho)
    ratio = max(-_MAX_EXPONENT, min(_MAX_EXPONENT, ratio))
    return math.exp(ratio if side is Side.BID else -ratio)


def lp_price(side: Side, best_bid: int, best_ask: int, eta: float) -> int:
    """Precio b + 1 + floor(eta) para asks y a - 1 - floor(eta) para bids,
    con piso en 1 tick."""
    if side is Side.ASK:
        price = best_bid + 1 + math.floor(eta)
    else:
        price = best_ask - 1 - math.floor(eta)
    return max(1, price)


def lp_action(state: LpState, stats: BookStats, params: AbmParams,
              initializing: bool, rng: np.random.Generator, now: int,
              ids: Iterator[int],
              fallback: Optional[Tuple[int, int]] = None) -> Optional[Order]:
    """Orden límite del LP, o None si queda suprimida en la inicialización.

    Los lados vacíos del libro se reemplazan por `fallback` (últimas cotas
    conocidas, o las iniciales b0/a0). Durante la inicialización se suprimen
    los asks por debajo de a0 y los bids por encima de b0.

    Args:
        state (LpState): Estado del agente.
        stats (BookStats): Libro observado.
        params (AbmParams): Parámetros del modelo.
        initializing (bool): True durante la fase de inicialización.
        rng (np.random.Generator): Generador de la sesión.
        now (int): Milisegundos virtuales.
        ids (Iterator[int]): Fuente de ids de orden.
        fallback (tuple): (bid, ask) para lados vacíos.

    Returns:
        Order | None: Orden límite a enviar.
    """
    b0, a0 = params.initial_bid, params.initial_ask
    fb_bid, fb_ask = fallback if fallback is not None else (b0, a0)
    best_bid = stats.best_bid if stats.best_bid is not None else fb_bid
    best_ask = stats.best_ask if stats.best_ask is not None else fb_ask
    rho = stats.imbalance if stats.imbalance is not None else 0.0

    spread = best_ask - best_bid
    if spread <= 0:
        spread = 1

    side = lp_side(rho, rng.random())
    eta = rng.gamma(spread, lp_gamma_scale(side, rho, params.kappa))
    price = lp_price(side, best_bid, best_ask, eta)
    volume = draw_power_law(rng, LP_XM, volume_alpha(side, rho, params.nu))

    if initializing:
        if (side is Side.ASK and price < a0) or (side is Side.BID and price > b0):
            return None

    return Order(
        id=next(ids), agent_id=state.agent_id, side=side, kind=OrderKind.LIMIT,
        volume=volume, placed_at=now, price=price,
    )


def cancel_stale(state: LpState, now_ms: int, phi_ms: int) -> List[int]:
    """Retira del estado y devuelve las órdenes con antigüedad > phi."""
    stale = [oid for oid, placed in state.open_orders.items() if now_ms - placed > phi_ms]
    for oid in stale:
        del state.open_orders[oid]
    return stale
