"""
Servicio de momentos para la calibración por distancia mínima simulada.

Este módulo calcula los ocho momentos de una serie de log-retornos del
micro-precio, la covarianza de los momentos por bootstrap de bloques móviles,
la matriz de pesos, la función objetivo G'WG y los intervalos de confianza
indicativos de los parámetros.
"""
import logging
import math
from dataclasses import dataclass, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, signal, special, stats
from statsmodels.tsa.stattools import adfuller

from app.errores import AbmError, EstimationError

logger = logging.getLogger(__name__)

MIN_LENGTH = 100
MOMENT_NAMES = ('mean', 'std', 'ks', 'hurst', 'gph', 'adf', 'garch_sum', 'hill')
MOMENT_LABELS = ('Mean', 'Std', 'KS', 'Hurst', 'GPH', 'ADF', 'GARCH', 'Hill')

HILL_TAIL_FRACTION = 0.05
PINV_CONDITION = 1e15

_GARCH_STARTS = ((0.05, 0.90), (0.10, 0.80), (0.20, 0.60))
_GARCH_MAX_PERSISTENCE = 1.2


@dataclass(frozen=True)
class MomentOptions:
    plain_hill: bool = False
    garch_starts: int = 3


@dataclass(frozen=True)
class MomentVector:
    """Los ocho momentos de una serie; garch_sum es NaN si el ajuste no convergió."""
    mean: float
    std: float
    ks: float
    hurst: float
    gph: float
    adf: float
    garch_sum: float
    hill: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in MOMENT_NAMES], dtype=float)

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in MOMENT_NAMES}

    @classmethod
    def from_array(cls, values: Sequence[float]) -> 'MomentVector':
        return cls(*(float(v) for v in values))

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_array())))


@dataclass(frozen=True)
class WeightMatrix:
    W: np.ndarray
    condition_number: float
    pseudo_inverse: bool


@dataclass
class BootstrapResult:
    cov: np.ndarray
    weight: WeightMatrix
    replicates: np.ndarray
    starts: List[np.ndarray]


# ----------------------------------------------------------------------
# Serie de retornos
# ----------------------------------------------------------------------

def micro_log_returns(micro_prices: Sequence[float]) -> np.ndarray:
    """Log-retornos r_k = ln(m_k) - ln(m_{k-1}) de una serie de micro-precios.

    Raises:
        EstimationError: Si hay menos de dos precios o alguno no es positivo.
    """
    prices = np.asarray(micro_prices, dtype=float)
    if prices.size < 2:
        raise EstimationError("Se requieren al menos dos micro-precios")
    if np.any(prices <= 0):
        raise EstimationError("Micro-precio no positivo")
    return np.diff(np.log(prices))


# ----------------------------------------------------------------------
# Estimadores
# ----------------------------------------------------------------------

def _expected_rescaled_range(n: int) -> float:
    """Valor esperado de R/S para ruido i.i.d. con corrección de muestra finita."""
    i = np.arange(1, n)
    ratio = math.exp(special.gammaln((n - 1) / 2) - special.gammaln(n / 2)) / math.sqrt(math.pi)
    return (n - 0.5) / n * ratio * float(np.sum(np.sqrt((n - i) / i)))


def hurst_exponent(x: np.ndarray, min_window: int = 16) -> float:
    """Exponente de Hurst por rango reescalado corregido.

    Se regresa log(R/S) - log(E[R/S]) sobre log(n) y H = 0.5 + pendiente,
    acotado a [0, 1].
    """
    x = np.asarray(x, dtype=float)
    n_total = x.size
    windows = np.unique(np.floor(np.logspace(
        math.log10(min_window), math.log10(n_total // 4), 20)).astype(int))
    log_n, log_excess = [], []
    for n in windows:
        k = n_total // n
        chunks = x[:k * n].reshape(k, n)
        dev = np.cumsum(chunks - chunks.mean(axis=1, keepdims=True), axis=1)
        r = dev.max(axis=1) - dev.min(axis=1)
        s = chunks.std(axis=1)
        valid = s > 0
        if not np.any(valid):
            continue
        rs = float(np.mean(r[valid] / s[valid]))
        if rs <= 0:
            continue
        log_n.append(math.log(n))
        log_excess.append(math.log(rs) - math.log(_expected_rescaled_range(int(n))))
    if len(log_n) < 2:
        raise EstimationError("Serie insuficiente para el exponente de Hurst")
    slope = np.polyfit(log_n, log_excess, 1)[0]
    return float(min(1.0, max(0.0, 0.5 + slope)))


def gph_estimate(x: np.ndarray) -> float:
    """Parámetro de integración fraccional d por regresión del log-periodograma
    de |x| con floor(sqrt(n)) ordenadas."""
    y = np.abs(np.asarray(x, dtype=float))
    n = y.size
    m = int(math.floor(math.sqrt(n)))
    spectrum = np.fft.fft(y - y.mean())
    j = np.arange(1, m + 1)
    periodogram = np.abs(spectrum[j]) ** 2 / (2 * math.pi * n)
    if np.any(periodogram <= 0):
        raise EstimationError("Periodograma degenerado")
    freqs = 2 * math.pi * j / n
    regressor = np.log(4 * np.sin(freqs / 2) ** 2)
    slope = np.polyfit(regressor, np.log(periodogram), 1)[0]
    return float(-slope)


def adf_statistic(x: np.ndarray) -> float:
    """Estadístico t de Dickey-Fuller aumentado, con constante y rezago
    fijo floor((n-1)^(1/3))."""
    x = np.asarray(x, dtype=float)
    maxlag = int(math.floor((x.size - 1) ** (1 / 3)))
    return float(adfuller(x, maxlag=maxlag, regression='c', autolag=None)[0])


def garch_variance(params: Sequence[float], eps2: np.ndarray, var0: float) -> np.ndarray:
    """Varianza condicional de un GARCH(1,1) para los residuos al cuadrado."""
    omega, alpha, beta = params
    drive = omega + alpha * eps2[:-1]
    tail = signal.lfilter([1.0], [1.0, -beta], drive, zi=[beta * var0])[0]
    return np.concatenate(([var0], tail))


def _garch_nll(params, eps2, var0) -> float:
    sigma2 = garch_variance(params, eps2, var0)
    if np.any(sigma2 <= 0) or not np.all(np.isfinite(sigma2)):
        return 1e20
    return 0.5 * float(np.sum(np.log(sigma2) + eps2 / sigma2))


def garch_persistence(x: np.ndarray, starts: int = 3) -> float:
    """alpha + beta de un GARCH(1,1) por cuasi máxima verosimilitud gaussiana.

    Los retornos se centran y se escalan a varianza uno; el ajuste parte de
    puntos fijos con alpha, beta >= 0 y alpha + beta <= 1.2.

    Raises:
        EstimationError: Si ningún punto de partida converge.
    """
    eps = np.asarray(x, dtype=float)
    eps = eps - eps.mean()
    scale = eps.std()
    if scale == 0:
        raise EstimationError("Serie constante en el ajuste GARCH")
    eps2 = (eps / scale) ** 2
    var0 = float(eps2.mean())

    constraint = {'type': 'ineq', 'fun': lambda p: _GARCH_MAX_PERSISTENCE - p[1] - p[2]}
    bounds = [(1e-8, 10.0), (0.0, 1.0), (0.0, 1.0)]
    best = None
    for alpha0, beta0 in _GARCH_STARTS[:starts]:
        x0 = np.array([max(1e-4, 1 - alpha0 - beta0), alpha0, beta0])
        fit = optimize.minimize(
            _garch_nll, x0, args=(eps2, var0), method='SLSQP',
            bounds=bounds, constraints=[constraint],
            options={'maxiter': 200, 'ftol': 1e-9},
        )
        if fit.success and (best is None or fit.fun < best.fun):
            best = fit
    if best is None:
        raise EstimationError("El ajuste GARCH no convergió")
    return float(best.x[1] + best.x[2])


def hill_estimator(x: np.ndarray, tail_fraction: float = HILL_TAIL_FRACTION,
                   plain: bool = False) -> float:
    """Índice de cola de Hill sobre la cola derecha superior.

    Usa los k = floor(tail_fraction * n) mayores valores con umbral en el
    (k+1)-ésimo; salvo `plain`, multiplica por (k-1)/k para corregir el
    sesgo de muestra finita.
    """
    ordered = np.sort(np.asarray(x, dtype=float))[::-1]
    k = int(math.floor(tail_fraction * ordered.size))
    if k < 2:
        raise EstimationError("Cola insuficiente para el estimador de Hill")
    threshold = ordered[k]
    if threshold <= 0:
        raise EstimationError("Umbral de Hill no positivo")
    gamma = float(np.mean(np.log(ordered[:k] / threshold)))
    if gamma <= 0:
        raise EstimationError("Cola degenerada en el estimador de Hill")
    alpha = 1.0 / gamma
    return alpha if plain else alpha * (k - 1) / k


def ks_distance(sim: np.ndarray, empirical: np.ndarray) -> float:
    """Distancia de Kolmogorov-Smirnov entre las dos CDF empíricas."""
    return float(stats.ks_2samp(sim, empirical).statistic)


def estimate_moments(sim_returns: Sequence[float],
                     empirical_returns: Optional[Sequence[float]] = None,
                     options: MomentOptions = MomentOptions()) -> MomentVector:
    """Calcula el vector de ocho momentos.

    Args:
        sim_returns: Log-retornos simulados.
        empirical_returns: Log-retornos empíricos para KS (NaN si se omiten).
        options (MomentOptions): Variantes de los estimadores.

    Returns:
        MomentVector: Momentos; garch_sum es NaN si el ajuste no convergió.

    Raises:
        EstimationError: Si alguna serie tiene menos de 100 observaciones.
    """
    x = np.asarray(sim_returns, dtype=float)
    if x.size < MIN_LENGTH:
        raise EstimationError(f"Serie de {x.size} retornos, mínimo {MIN_LENGTH}")
    if empirical_returns is not None:
        e = np.asarray(empirical_returns, dtype=float)
        if e.size < MIN_LENGTH:
            raise EstimationError(f"Serie empírica de {e.size} retornos, mínimo {MIN_LENGTH}")
        ks = ks_distance(x, e)
    else:
        ks = float('nan')

    try:
        garch = garch_persistence(x, options.garch_starts)
    except EstimationError as err:
        logger.warning(f"GARCH marcado como NaN: {err}")
        garch = float('nan')

    return MomentVector(
        mean=float(np.mean(x)),
        std=float(np.std(x, ddof=1)),
        ks=ks,
        hurst=hurst_exponent(x),
        gph=gph_estimate(x),
        adf=adf_statistic(x),
        garch_sum=garch,
        hill=hill_estimator(x, plain=options.plain_hill),
    )


# ----------------------------------------------------------------------
# Bootstrap y matriz de pesos
# ----------------------------------------------------------------------

def block_bootstrap_sample(x: np.ndarray, window: int,
                           rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Concatena ventanas contiguas de largo `window` con inicio uniforme
    hasta el largo original.

    Returns:
        tuple: (réplica, índices de inicio de cada ventana).
    """
    n = x.size
    blocks = math.ceil(n / window)
    starts = rng.integers(0, n - window + 1, size=blocks)
    sample = np.concatenate([x[s:s + window] for s in starts])[:n]
    return sample, starts


def weight_matrix(cov: np.ndarray) -> WeightMatrix:
    """Inversa de la covarianza de momentos; pseudo-inversa si está mal
    condicionada (número de condición > 1e15)."""
    cov = (cov + cov.T) / 2
    cond = float(np.linalg.cond(cov)) if np.any(cov) else float('inf')
    pseudo = not np.isfinite(cond) or cond > PINV_CONDITION
    W = np.linalg.pinv(cov) if pseudo else np.linalg.inv(cov)
    return WeightMatrix(W=(W + W.T) / 2, condition_number=cond, pseudo_inverse=pseudo)


def moving_block_bootstrap_cov(returns: Sequence[float], window: int = 2000,
                               samples: int = 1000, seed: int = 1,
                               moment_fn: Callable[..., MomentVector] = estimate_moments,
                               options: MomentOptions = MomentOptions()) -> BootstrapResult:
    """Covarianza de los momentos por bootstrap de bloques móviles.

    Cada réplica se compara por KS contra la serie original. Las réplicas en
    las que algún estimador falla se descartan.

    Raises:
        EstimationError: Si la serie es más corta que la ventana o quedan
            menos de dos réplicas válidas.
    """
    x = np.asarray(returns, dtype=float)
    if x.size < window:
        raise EstimationError(f"Serie de {x.size} retornos menor que la ventana {window}")
    n_moments = len(MOMENT_NAMES)
    if np.all(x == x[0]):
        zeros = np.zeros((n_moments, n_moments))
        return BootstrapResult(zeros, weight_matrix(zeros), np.zeros((0, n_moments)), [])

    rng = np.random.default_rng(seed)
    replicates, all_starts = [], []
    for _ in range(samples):
        sample, starts = block_bootstrap_sample(x, window, rng)
        all_starts.append(starts)
        try:
            moments = moment_fn(sample, x, options).as_array()
        except EstimationError as err:
            logger.warning(f"Réplica bootstrap descartada: {err}")
            continue
        if np.all(np.isfinite(moments)):
            replicates.append(moments)

    if len(replicates) < 2:
        raise EstimationError("Menos de dos réplicas bootstrap válidas")
    reps = np.vstack(replicates)
    cov = np.cov(reps, rowvar=False)
    cov = (cov + cov.T) / 2
    weight = weight_matrix(cov)
    logger.info(
        f"Bootstrap: {len(replicates)} réplicas, condición {weight.condition_number:.3e}"
        + (" (pseudo-inversa)" if weight.pseudo_inverse else "")
    )
    return BootstrapResult(cov, weight, reps, all_starts)


# ----------------------------------------------------------------------
# Objetivo e intervalos
# ----------------------------------------------------------------------

def smd_objective(theta: Sequence[float], empirical_moments: MomentVector, W: np.ndarray,
                  simulate_fn: Callable[[Sequence[float], int], MomentVector],
                  replications: int = 5) -> float:
    """Distancia G'WG entre momentos simulados y empíricos.

    G es el promedio de m_i(theta) - m_e sobre las réplicas i = 1..I, cada
    una simulada con semilla i. Cualquier falla o momento no finito
    devuelve +inf.
    """
    target = empirical_moments.as_array()
    diffs = []
    for seed in range(1, replications + 1):
        try:
            moments = simulate_fn(theta, seed)
        except (AbmError, ValueError, FloatingPointError, np.linalg.LinAlgError) as err:
            logger.warning(f"Réplica {seed} fallida en theta={np.round(theta, 4).tolist()}: {err}")
            return float('inf')
        values = moments.as_array() if isinstance(moments, MomentVector) else np.asarray(moments, float)
        if not np.all(np.isfinite(values)):
            return float('inf')
        diffs.append(values - target)
    G = np.mean(diffs, axis=0)
    return max(0.0, float(G @ W @ G))


@dataclass
class ConfidenceResult:
    intervals: Dict[str, Tuple[float, float, float]]
    exposure: np.ndarray
    sigma_theta: np.ndarray
    undefined_moments: List[str]


def confidence_intervals(theta_samples: np.ndarray, moment_samples: np.ndarray,
                         moment_cov: np.ndarray, theta_hat: Sequence[float],
                         names: Sequence[str]) -> ConfidenceResult:
    """Intervalos indicativos theta +- 1.96 sqrt(diag(B S B')).

    B_ij = Cov(theta_i, m_j) / Var(m_j) se estima sobre la tabla de
    sensibilidad; S es la covarianza de los momentos empíricos. Los momentos
    sin varianza en la tabla quedan fuera de B y se reportan.

    Args:
        theta_samples: Matriz (celdas x parámetros) de la grilla.
        moment_samples: Matriz (celdas x momentos) de la grilla.
        moment_cov: Covarianza de los momentos empíricos.
        theta_hat: Parámetros estimados.
        names: Nombres de los parámetros.
    """
    theta_samples = np.asarray(theta_samples, dtype=float)
    moment_samples = np.asarray(moment_samples, dtype=float)
    n_params, n_moments = theta_samples.shape[1], moment_samples.shape[1]
    for j in range(n_params):
        if np.unique(theta_samples[:, j]).size < 2:
            raise EstimationError(f"El parámetro {names[j]} necesita al menos dos valores")

    tc = theta_samples - theta_samples.mean(axis=0)
    mc = moment_samples - moment_samples.mean(axis=0)
    denom = theta_samples.shape[0] - 1
    cross = tc.T @ mc / denom
    var_m = np.sum(mc ** 2, axis=0) / denom

    exposure = np.zeros((n_params, n_moments))
    undefined = []
    for j in range(n_moments):
        if var_m[j] > 0:
            exposure[:, j] = cross[:, j] / var_m[j]
        else:
            undefined.append(MOMENT_NAMES[j] if n_moments == len(MOMENT_NAMES) else str(j))

    sigma_theta = exposure @ np.asarray(moment_cov, dtype=float) @ exposure.T
    half = 1.96 * np.sqrt(np.clip(np.diag(sigma_theta), 0, None))
    intervals = {
        name: (float(hat - h), float(hat), float(hat + h))
        for name, hat, h in zip(names, theta_hat, half)
    }
    return ConfidenceResult(intervals, exposure, sigma_theta, undefined)


def table_to_arrays(rows: Sequence[Dict[str, object]],
                    param_names: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    """Separa las filas válidas de la grilla en matrices de parámetros y momentos."""
    valid = [
        r for r in rows
        if not r.get('error') and all(np.isfinite(float(r[m])) for m in MOMENT_NAMES if m != 'ks')
    ]
    thetas = np.array([[float(r[p]) for p in param_names] for r in valid])
    moments = np.array([[float(r[m]) for m in MOMENT_NAMES] for r in valid])
    return thetas, moments
