"""
Calibración de los seis parámetros libres con Nelder-Mead y aceptación por
umbral (NMTA).

El simplex usa coeficientes adaptativos a la dimensión y todas las
comparaciones de aceptación toleran un empeoramiento de hasta tau. Con
probabilidad xi se hace un paso de aceptación por umbral que perturba el peor
vértice; el resto son pasos Nelder-Mead. Los vértices siempre quedan dentro
de las cotas.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from app.errores import AbmError, ConfigError
from app.models.agentes import FREE_PARAMS, AbmParams
from app.services.momentos import (MomentOptions, MomentVector, estimate_moments,
                                   smd_objective)
from app.services.simulador import simulate_micro_returns
from config import TICK_MS

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], float]

PERTURBATION_SCALE = 0.1
INITIAL_STEP = 0.05


@dataclass(frozen=True)
class Bounds:
    """Cotas por coordenada; `span_*` reemplaza los extremos infinitos para
    construir el simplex inicial."""
    lower: np.ndarray
    upper: np.ndarray
    span_lower: np.ndarray
    span_upper: np.ndarray

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> 'Bounds':
        lo, hi = np.asarray(lower, float), np.asarray(upper, float)
        return cls(lo, hi, lo, hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def span(self) -> np.ndarray:
        return self.span_upper - self.span_lower

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)


def model_bounds() -> Bounds:
    """Cotas de (n_c, n_f, delta, kappa, nu, sigma_f); kappa y nu no tienen
    cota superior y usan los rangos [0, 10] y [1.5, 10] para el simplex."""
    return Bounds(
        lower=np.array([1, 1, 0, 0, 1.5, 0], dtype=float),
        upper=np.array([20, 20, 10, np.inf, np.inf, 0.05]),
        span_lower=np.array([1, 1, 0, 0, 1.5, 0], dtype=float),
        span_upper=np.array([20, 20, 10, 10, 10, 0.05]),
    )


@dataclass(frozen=True)
class NmCoefficients:
    reflect: float
    expand: float
    contract: float
    shrink: float

    @classmethod
    def adaptive(cls, n: int) -> 'NmCoefficients':
        return cls(1.0, 1 + 2 / n, 0.75 - 1 / (2 * n), 1 - 1 / n)


@dataclass
class Simplex:
    vertices: np.ndarray
    values: np.ndarray

    def order(self) -> None:
        idx = np.argsort(self.values, kind='stable')
        self.vertices = self.vertices[idx]
        self.values = self.values[idx]

    @property
    def best(self) -> Tuple[np.ndarray, float]:
        i = int(np.argmin(self.values))
        return self.vertices[i].copy(), float(self.values[i])

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def copy(self) -> 'Simplex':
        return Simplex(self.vertices.copy(), self.values.copy())


@dataclass(frozen=True)
class TaSchedule:
    thresholds: Tuple[float, ...]
    steps_per_threshold: int = 7
    xi: float = 0.1

    def __post_init__(self):
        t = self.thresholds
        if any(v < 0 for v in t) or any(b > a for a, b in zip(t, t[1:])):
            raise ConfigError("Los umbrales deben ser no negativos y no crecientes")
        if self.steps_per_threshold < 1:
            raise ConfigError("steps_per_threshold debe ser >= 1")
        if not 0 <= self.xi < 0.5:
            raise ConfigError("xi debe estar en [0, 0.5)")

    @classmethod
    def geometric(cls, initial_value: float, levels: int = 5, steps: int = 7,
                  ratio: float = 0.5, fraction: float = 0.1, xi: float = 0.1) -> 'TaSchedule':
        """Umbrales fraction*|f0|*ratio^k para k = 0..levels-1, luego cero."""
        if not math.isfinite(initial_value):
            logger.warning("Objetivo inicial no finito; se usan umbrales nulos")
            return cls((), steps, xi)
        start = fraction * abs(initial_value)
        return cls(tuple(start * ratio ** k for k in range(levels)), steps, xi)

    def tau_at(self, iteration: int) -> float:
        level = iteration // self.steps_per_threshold
        return self.thresholds[level] if level < len(self.thresholds) else 0.0


@dataclass
class TraceRow:
    iteration: int
    kind: str
    tau: float
    best_value: float
    spread: float
    vertices: np.ndarray


@dataclass
class NmtaResult:
    best_x: np.ndarray
    best_value: float
    simplex: Simplex
    trace: List[TraceRow] = field(default_factory=list)


def safe_evaluate(objective: Objective, x: np.ndarray) -> float:
    """Evalúa el objetivo; una falla penaliza el vértice con +inf."""
    try:
        value = float(objective(x))
    except (AbmError, ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
        logger.warning(f"Objetivo fallido en {np.round(x, 4).tolist()}: {e}")
        return float('inf')
    return value if not math.isnan(value) else float('inf')


def initial_simplex(bounds: Bounds, objective: Optional[Objective] = None) -> Simplex:
    """Vértice 0 en los puntos medios de los rangos; el vértice i desplaza la
    coordenada i-1 en +5% de su rango.

    Args:
        bounds (Bounds): Cotas del problema.
        objective: Si se indica, se evalúa en cada vértice; si no, los
            valores quedan en +inf.
    """
    center = (bounds.span_lower + bounds.span_upper) / 2
    vertices = [bounds.clamp(center)]
    for i in range(bounds.dim):
        v = center.copy()
        v[i] += INITIAL_STEP * bounds.span[i]
        vertices.append(bounds.clamp(v))
    vertices = np.vstack(vertices)
    if objective is None:
        values = np.full(len(vertices), np.inf)
    else:
        values = np.array([safe_evaluate(objective, v) for v in vertices])
    return Simplex(vertices, values)


def nm_step(simplex: Simplex, objective: Objective, tau: float, bounds: Bounds,
            coefficients: Optional[NmCoefficients] = None) -> Tuple[Simplex, str]:
    """Un movimiento Nelder-Mead con comparaciones relajadas en tau.

    Returns:
        tuple: (simplex actualizado, tipo de paso: reflect, expand,
            contract_out, contract_in o shrink).
    """
    s = simplex.copy()
    s.order()
    coef = coefficients or NmCoefficients.adaptive(bounds.dim)
    best_f, second_f, worst_f = s.values[0], s.values[-2], s.values[-1]
    worst = s.vertices[-1]
    c = s.vertices[:-1].mean(axis=0)

    xr = bounds.clamp(c + coef.reflect * (c - worst))
    fr = safe_evaluate(objective, xr)

    if fr < second_f + tau:
        if fr < best_f:
            xe = bounds.clamp(c + coef.expand * (xr - c))
            fe = safe_evaluate(objective, xe)
            if fe < fr + tau:
                s.vertices[-1], s.values[-1] = xe, fe
                return s, 'expand'
        s.vertices[-1], s.values[-1] = xr, fr
        return s, 'reflect'

    if fr < worst_f + tau:
        xc = bounds.clamp(c + coef.contract * (xr - c))
        fc = safe_evaluate(objective, xc)
        if fc <= fr + tau:
            s.vertices[-1], s.values[-1] = xc, fc
            return s, 'contract_out'
    else:
        xc = bounds.clamp(c + coef.contract * (worst - c))
        fc = safe_evaluate(objective, xc)
        if fc < worst_f + tau:
            s.vertices[-1], s.values[-1] = xc, fc
            return s, 'contract_in'

    anchor = s.vertices[0]
    for i in range(1, len(s.vertices)):
        s.vertices[i] = bounds.clamp(anchor + coef.shrink * (s.vertices[i] - anchor))
        s.values[i] = safe_evaluate(objective, s.vertices[i])
    return s, 'shrink'


def ta_step(simplex: Simplex, objective: Objective, tau: float, rng: np.random.Generator,
            bounds: Bounds, scale: float = PERTURBATION_SCALE) -> Tuple[Simplex, str]:
    """Perturba el peor vértice con ruido normal de desvío scale*|media|
    por coordenada y acepta si f_nuevo < f_viejo + tau."""
    s = simplex.copy()
    i = int(np.argmax(s.values))
    sd = scale * np.abs(s.centroid)
    candidate = bounds.clamp(s.vertices[i] + rng.normal(0.0, 1.0, size=bounds.dim) * sd)
    if np.array_equal(candidate, s.vertices[i]):
        return s, 'ta_reject'
    f_new = safe_evaluate(objective, candidate)
    if f_new < s.values[i] + tau:
        s.vertices[i], s.values[i] = candidate, f_new
        return s, 'ta_accept'
    return s, 'ta_reject'


def scaled_spread(values: Sequence[float]) -> float:
    """Desvío estándar de los valores del objetivo en el simplex dividido
    por su media; NaN si no hay al menos dos valores finitos."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size < 2:
        return float('nan')
    mean = abs(float(v.mean()))
    std = float(v.std(ddof=1))
    return std / mean if mean > 0 else std


def nmta_run(objective: Objective, bounds: Bounds, iterations: int = 100,
             schedule: Optional[TaSchedule] = None, seed: int = 1,
             simplex: Optional[Simplex] = None,
             coefficients: Optional[NmCoefficients] = None,
             on_iteration: Optional[Callable[[TraceRow], None]] = None) -> NmtaResult:
    """Ejecuta NMTA.

    Args:
        objective: Función a minimizar sobre vectores dentro de `bounds`.
        bounds (Bounds): Cotas.
        iterations (int): Cantidad de iteraciones.
        schedule (TaSchedule): Umbrales y xi; por defecto geométrico desde
            el 10% del mejor valor inicial.
        seed (int): Semilla de las decisiones NM/TA y de las perturbaciones.
        simplex (Simplex): Simplex inicial ya evaluado (para reanudar).
        on_iteration: Callback por iteración, usado para guardar progreso.

    Returns:
        NmtaResult: Mejor vértice, simplex final y traza por iteración.
    """
    rng = np.random.default_rng(seed)
    s = simplex.copy() if simplex is not None else initial_simplex(bounds, objective)
    if schedule is None:
        schedule = TaSchedule.geometric(s.best[1])
    trace = []
    for it in range(iterations):
        tau = schedule.tau_at(it)
        if rng.random() < schedule.xi:
            s, kind = ta_step(s, objective, tau, rng, bounds)
        else:
            s, kind = nm_step(s, objective, tau, bounds, coefficients)
        best_x, best_f = s.best
        row = TraceRow(it, kind, tau, best_f, scaled_spread(s.values), s.vertices.copy())
        trace.append(row)
        if on_iteration is not None:
            on_iteration(row)
        if it % 10 == 0 or it == iterations - 1:
            logger.info(f"NMTA iteración {it}: {kind}, mejor f={best_f:.6g}, tau={tau:.4g}")
    best_x, best_f = s.best
    return NmtaResult(best_x, best_f, s, trace)


# ----------------------------------------------------------------------
# Objetivo del modelo
# ----------------------------------------------------------------------

@dataclass
class ModelMoments:
    """Simula el modelo en theta con una semilla y devuelve sus momentos.

    Es una clase de nivel de módulo para poder enviarse a procesos.
    """
    base_params: AbmParams
    empirical_returns: np.ndarray
    tick_ms: int = TICK_MS
    options: MomentOptions = MomentOptions()

    def __call__(self, theta: Sequence[float], seed: int) -> MomentVector:
        params = self.base_params.with_free_vector(theta).validate()
        returns = simulate_micro_returns(params, seed, self.tick_ms)
        return estimate_moments(returns, self.empirical_returns, self.options)


def _replicate(args) -> Optional[MomentVector]:
    simulate_fn, theta, seed = args
    try:
        return simulate_fn(theta, seed)
    except (AbmError, ValueError, FloatingPointError) as e:
        logger.warning(f"Réplica {seed} fallida: {e}")
        return None


@dataclass
class SmdObjective:
    """f(theta) = G'WG con I réplicas; con jobs > 1 las réplicas de un
    vértice corren en procesos separados."""
    simulate_fn: ModelMoments
    empirical_moments: MomentVector
    W: np.ndarray
    replications: int = 5
    jobs: int = 1

    def __call__(self, theta: Sequence[float]) -> float:
        if self.jobs <= 1:
            return smd_objective(theta, self.empirical_moments, self.W,
                                 self.simulate_fn, self.replications)
        tasks = [(self.simulate_fn, np.asarray(theta), seed)
                 for seed in range(1, self.replications + 1)]
        with ProcessPoolExecutor(max_workers=self.jobs) as pool:
            moments = list(pool.map(_replicate, tasks))
        if any(m is None for m in moments):
            return float('inf')
        by_seed = dict(zip(range(1, self.replications + 1), moments))
        return smd_objective(theta, self.empirical_moments, self.W,
                             lambda _theta, seed: by_seed[seed], self.replications)


def calibrate(base_params: AbmParams, empirical_returns: np.ndarray, W: np.ndarray,
              iterations: int = 100, seed: int = 1, replications: int = 5,
              tick_ms: int = TICK_MS, jobs: int = 1, xi: float = 0.1,
              options: MomentOptions = MomentOptions(),
              on_iteration: Optional[Callable[[TraceRow], None]] = None) -> Tuple[AbmParams, NmtaResult]:
    """Calibra los parámetros libres contra una serie empírica de retornos.

    Returns:
        tuple: (parámetros calibrados, resultado NMTA).
    """
    empirical = estimate_moments(empirical_returns, empirical_returns, options)
    objective = SmdObjective(
        ModelMoments(base_params, np.asarray(empirical_returns), tick_ms, options),
        empirical, W, replications, jobs,
    )
    bounds = model_bounds()
    simplex = initial_simplex(bounds, objective)
    schedule = TaSchedule.geometric(simplex.best[1], xi=xi)
    logger.info(f"Calibración: {iterations} iteraciones, umbral inicial "
                f"{schedule.tau_at(0):.4g}, parámetros {', '.join(FREE_PARAMS)}")
    result = nmta_run(objective, bounds, iterations, schedule, seed, simplex,
                      on_iteration=on_iteration)
    return base_params.with_free_vector(result.best_x), result
