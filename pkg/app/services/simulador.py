"""
Servicio de simulación del modelo basado en agentes.

Este módulo implementa el loop de eventos determinístico: inicialización del
libro por los LP, reloj virtual, entrega de la réplica del libro a los agentes
en orden aleatorio, guarda de subasta de volatilidad, entrenamiento del agente
RL por episodios y la grilla de sensibilidad de parámetros.
"""
import itertools
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errores import AbmError, InitializationError, LiquidityCrash, OrderRejected
from app.models.agente_rl import (
    EpisodeResult, QTable, RlAgent, RlParams, StateTable, convergence_metrics,
    epsilon_schedule,
)
from app.models.agentes import (
    AbmParams, ChartistState, FREE_PARAMS, FundamentalistState, LpState,
    cancel_stale, chartist_action, fundamentalist_action, lp_action,
)
from app.models.feed_binario import DatagramPublisher, EventChannel, drain
from app.models.libro_ordenes import (
    Book, BookStats, DepthSnapshot, EventKind, MarketEvent, Order, Side,
)
from app.services.momentos import estimate_moments, micro_log_returns
from config import CHANNEL_CAPACITY, TICK_MS

logger = logging.getLogger(__name__)

DEPTH_LEVELS = 7
RETAIN_EVERY = 100


@dataclass
class Clock:
    """Reloj virtual: avanza tick_ms por iteración del loop de eventos."""
    tick_ms: int = 50
    now_ms: int = 0

    def advance(self) -> int:
        self.now_ms += self.tick_ms
        return self.now_ms


@dataclass
class SessionConfig:
    params: AbmParams
    rl: Optional[RlParams] = None
    init_order_count: int = 1001
    tick_ms: int = TICK_MS
    record_events: bool = True
    channel_capacity: int = CHANNEL_CAPACITY
    max_init_retries: int = 5
    feed_host: Optional[str] = None
    feed_port: int = 0


@dataclass(frozen=True)
class MarketOrderRecord:
    """Orden de mercado ejecutada, con el libro del motor antes y después."""
    timestamp: int
    order_id: int
    agent_id: int
    side: Side
    volume: int
    vwap: float
    best_bid_before: Optional[int]
    best_ask_before: Optional[int]
    mid_before: Optional[float]
    mid_after: Optional[float]
    micro_after: Optional[float]


@dataclass
class SessionLog:
    seed: int
    events: List[MarketEvent] = field(default_factory=list)
    init_events: int = 0
    init_suppressed: int = 0
    stats: List[Tuple[int, BookStats]] = field(default_factory=list)
    depth: List[DepthSnapshot] = field(default_factory=list)
    market_orders: List[MarketOrderRecord] = field(default_factory=list)
    orders_by_class: Counter = field(default_factory=Counter)
    suppressed: int = 0
    dropped: int = 0
    crashed: bool = False
    crash_ms: Optional[int] = None
    final_book: Optional[tuple] = None
    rl_result: Optional[EpisodeResult] = None

    def micro_prices(self) -> np.ndarray:
        """Micro-precio después de cada orden de mercado."""
        return np.array([r.micro_after for r in self.market_orders if r.micro_after is not None])

    def trade_signs(self) -> np.ndarray:
        """Signo del agresor de cada orden de mercado (+1 compra, -1 venta)."""
        return np.array([1 if r.side is Side.BID else -1 for r in self.market_orders])

    def event_counts(self) -> Dict[str, int]:
        counts = Counter(e.kind.name for e in self.events)
        return {kind.name: counts.get(kind.name, 0) for kind in EventKind}


def would_trigger_volatility_auction(book: Book, order: Order) -> bool:
    """True si el primer precio contrario cruzado se desvía más de un 10 %
    del precio de referencia dinámico (desigualdad estricta)."""
    price = book.best_price(order.side.contra)
    if price is None:
        return False
    reference = book.dynamic_reference_price
    return 10 * abs(price - reference) > reference


def market_order_allowed(book: Book, order: Order) -> bool:
    return book.best_price(order.side.contra) is not None and not would_trigger_volatility_auction(book, order)


def _new_agents(params: AbmParams, rng: np.random.Generator):
    lps = [LpState(agent_id) for agent_id in range(1, params.n_lp + 1)]
    next_id = params.n_lp + 1
    chartists = [ChartistState.draw(next_id + k, params, rng) for k in range(params.n_c)]
    next_id += params.n_c
    fundamentalists = [FundamentalistState.draw(next_id + k, params, rng) for k in range(params.n_f)]
    return lps, chartists, fundamentalists


def initialize_book(config: SessionConfig, rng: np.random.Generator,
                    lps: Sequence[LpState],
                    ids: Optional[itertools.count] = None) -> Tuple[Book, List[MarketEvent], int]:
    """Los LP envían init_order_count órdenes límite alrededor de m0.

    Las órdenes dentro del spread inicial se suprimen. Si al terminar algún
    lado está vacío se repite con un libro nuevo.

    Returns:
        tuple: (libro, eventos de inicialización, órdenes suprimidas).

    Raises:
        InitializationError: Si tras max_init_retries sigue habiendo un lado vacío.
    """
    params = config.params
    ids = ids if ids is not None else itertools.count(1)

    for intento in range(config.max_init_retries + 1):
        book = Book(params.m0)
        events: List[MarketEvent] = []
        suppressed = 0
        for n in range(config.init_order_count):
            lp = lps[n % len(lps)]
            order = lp_action(lp, book.book_stats(), params, True, rng, 0, ids)
            if order is None:
                suppressed += 1
                continue
            new_events = book.submit_limit(order)
            events.extend(new_events)
            if any(e.kind is EventKind.NEW_LIMIT for e in new_events):
                lp.open_orders[order.id] = 0
        if book.best_price(Side.BID) is not None and book.best_price(Side.ASK) is not None:
            return book, events, suppressed
        logger.warning(f"Inicialización con un lado vacío (intento {intento + 1}), reintentando")
        for lp in lps:
            lp.open_orders.clear()

    raise InitializationError(
        f"El libro quedó con un lado vacío tras {config.max_init_retries + 1} intentos"
    )


def _market_record(book: Book, order: Order, events: List[MarketEvent],
                   before: BookStats) -> MarketOrderRecord:
    volume = sum(e.volume for e in events)
    after = book.book_stats()
    return MarketOrderRecord(
        timestamp=order.placed_at, order_id=order.id, agent_id=order.agent_id,
        side=order.side, volume=volume,
        vwap=sum(e.price * e.volume for e in events) / volume,
        best_bid_before=before.best_bid, best_ask_before=before.best_ask,
        mid_before=before.mid, mid_after=after.mid, micro_after=after.micro,
    )


def run_session(config: SessionConfig, seed: int,
                rl_agent: Optional[RlAgent] = None) -> SessionLog:
    """Ejecuta una sesión completa del modelo.

    En cada iteración: drena el canal, aplica los eventos a la réplica,
    avanza el reloj, entrega la réplica a todos los agentes en una permutación
    aleatoria nueva y envía sus órdenes al motor. Los eventos de una iteración
    se aplican al comienzo de la siguiente.

    Args:
        config (SessionConfig): Configuración de la sesión.
        seed (int): Semilla del generador de la sesión.
        rl_agent (RlAgent): Agente de ejecución opcional.

    Returns:
        SessionLog: Registro de la sesión; `crashed` indica un crash de liquidez.
    """
    params = config.params
    rng = np.random.default_rng(seed)
    ids = itertools.count(1)
    log = SessionLog(seed=seed)

    lps, chartists, fundamentalists = _new_agents(params, rng)
    engine, init_events, log.init_suppressed = initialize_book(config, rng, lps, ids)
    log.init_events = len(init_events)
    log.orders_by_class['lp'] += config.init_order_count - log.init_suppressed

    channel = EventChannel(config.channel_capacity)
    publisher = DatagramPublisher(config.feed_host, config.feed_port) if config.feed_port else None

    def emit(events: List[MarketEvent]) -> None:
        channel.extend(events)
        if config.record_events:
            log.events.extend(events)
        if publisher is not None:
            for event in events:
                publisher.publish(event)

    emit(init_events)

    lp_owner: Dict[int, LpState] = {oid: lp for lp in lps for oid in lp.open_orders}
    agents: List[Tuple[str, object]] = (
        [('lp', a) for a in lps]
        + [('chartist', a) for a in chartists]
        + [('fundamentalist', a) for a in fundamentalists]
    )
    if rl_agent is not None:
        agents.append(('rl', rl_agent))

    shadow = Book(params.m0)
    clock = Clock(config.tick_ms)
    last_quotes = (params.initial_bid, params.initial_ask)
    rl_fills: List[MarketEvent] = []

    def prune_filled(events: List[MarketEvent]) -> None:
        for event in events:
            if event.kind is EventKind.TRADE and event.remaining_volume == 0:
                owner = lp_owner.pop(event.order_id, None)
                if owner is not None:
                    owner.open_orders.pop(event.order_id, None)

    def submit_market(order: Optional[Order], clase: str) -> List[MarketEvent]:
        if order is None:
            return []
        if not market_order_allowed(engine, order):
            log.suppressed += 1
            return []
        before = engine.book_stats()
        try:
            events = engine.submit_market(order)
        except OrderRejected as e:
            logger.debug(str(e))
            log.suppressed += 1
            return []
        log.orders_by_class[clase] += 1
        log.market_orders.append(_market_record(engine, order, events, before))
        prune_filled(events)
        return events

    def rl_allowed(order: Order) -> bool:
        ok = market_order_allowed(engine, order)
        if not ok:
            log.suppressed += 1
        return ok

    try:
        while clock.now_ms < params.t_ms:
            for event in drain(channel):
                shadow.apply_event(event)
                if rl_agent is not None and rl_agent.owns(event.aggressor_order_id):
                    rl_fills.append(event)

            now = clock.advance()
            if engine.is_empty():
                raise LiquidityCrash(now)

            stats = shadow.book_stats()
            log.stats.append((now, stats))
            log.depth.append(shadow.depth_snapshot(DEPTH_LEVELS))
            if stats.best_bid is not None and stats.best_ask is not None:
                last_quotes = (stats.best_bid, stats.best_ask)
            else:
                last_quotes = (
                    stats.best_bid if stats.best_bid is not None else last_quotes[0],
                    stats.best_ask if stats.best_ask is not None else last_quotes[1],
                )

            iteration_events: List[MarketEvent] = []
            for idx in rng.permutation(len(agents)):
                clase, agent = agents[idx]
                if clase == 'lp':
                    for oid in cancel_stale(agent, now, params.phi_ms):
                        lp_owner.pop(oid, None)
                        cancel_event = engine.cancel(oid, now)
                        if cancel_event is not None:
                            iteration_events.append(cancel_event)
                    order = lp_action(agent, stats, params, False, rng, now, ids, last_quotes)
                    new_events = engine.submit_limit(order)
                    log.orders_by_class['lp'] += 1
                    prune_filled(new_events)
                    if any(e.kind is EventKind.NEW_LIMIT for e in new_events):
                        agent.open_orders[order.id] = now
                        lp_owner[order.id] = agent
                    iteration_events.extend(new_events)
                elif clase == 'chartist':
                    order = chartist_action(agent, stats, params, rng, now, ids)
                    iteration_events.extend(submit_market(order, clase))
                elif clase == 'fundamentalist':
                    order = fundamentalist_action(agent, stats, params, rng, now, ids)
                    iteration_events.extend(submit_market(order, clase))
                else:
                    order = agent.rl_agent_action(stats, rl_fills, now, rng, ids, rl_allowed)
                    rl_fills = []
                    if order is not None:
                        before = engine.book_stats()
                        events = engine.submit_market(order)
                        log.orders_by_class['rl'] += 1
                        log.market_orders.append(_market_record(engine, order, events, before))
                        prune_filled(events)
                        iteration_events.extend(events)
            emit(iteration_events)
    except LiquidityCrash as e:
        logger.warning(f"Sesión seed={seed}: {e}")
        log.crashed = True
        log.crash_ms = e.now_ms
    finally:
        if publisher is not None:
            publisher.close()

    for event in drain(channel):
        if rl_agent is not None and rl_agent.owns(event.aggressor_order_id):
            rl_fills.append(event)
    log.dropped = channel.dropped
    log.final_book = engine.snapshot()
    if rl_agent is not None:
        log.rl_result = rl_agent.finish(rl_fills, 0, params.m0)

    logger.debug(
        f"Sesión seed={seed}: {len(log.market_orders)} órdenes de mercado, "
        f"{log.suppressed} suprimidas, crash={log.crashed}"
    )
    return log


# ----------------------------------------------------------------------
# Entrenamiento del agente RL
# ----------------------------------------------------------------------

@dataclass
class TrainingResult:
    results: List[EpisodeResult]
    q: QTable
    retained: Dict[int, SessionLog]
    aborted: bool = False


def retained_episodes(episodes: int) -> List[int]:
    """Episodios cuyo log completo se conserva: cada 100 y el último."""
    kept = list(range(0, episodes, RETAIN_EVERY))
    if episodes - 1 not in kept:
        kept.append(episodes - 1)
    return kept


def train_rl(config: SessionConfig, episodes: int, spread_table: StateTable,
             volume_table: StateTable, seed: int = 1, q: Optional[QTable] = None,
             on_episode: Optional[Callable[[EpisodeResult], None]] = None) -> TrainingResult:
    """Entrena el agente RL durante `episodes` sesiones.

    La QTable persiste entre episodios y epsilon sigue epsilon_schedule. El
    episodio e usa la semilla seed + e. Un error de sesión corta el
    entrenamiento y devuelve los resultados parciales.
    """
    if config.rl is None:
        raise AbmError("train_rl requiere RlParams")
    q = q if q is not None else QTable()
    keep = set(retained_episodes(episodes))
    results: List[EpisodeResult] = []
    retained: Dict[int, SessionLog] = {}
    agent_id = config.params.n_lp + config.params.n_c + config.params.n_f + 1

    for episode in range(episodes):
        epsilon = epsilon_schedule(episode, episodes)
        q_prev = q.copy()
        agent = RlAgent(agent_id, config.rl, q, spread_table, volume_table, epsilon)
        session = replace(config, record_events=episode in keep)
        try:
            log = run_session(session, seed + episode, agent)
        except AbmError as e:
            logger.error(f"Episodio {episode} abortado: {e}")
            return TrainingResult(results, q, retained, aborted=True)

        result = log.rl_result
        result.episode = episode
        result.q_delta, result.policy_delta = convergence_metrics(q_prev, q)
        results.append(result)
        if episode in keep:
            retained[episode] = log
            logger.info(
                f"Episodio {episode}: INTP={result.intp:.2f}, trades={result.trades}, "
                f"estados={result.states_discovered}, epsilon={epsilon:.3f}"
            )
        if on_episode is not None:
            on_episode(result)

    return TrainingResult(results, q, retained)


# ----------------------------------------------------------------------
# Réplicas y grilla de sensibilidad
# ----------------------------------------------------------------------

def simulate_micro_returns(params: AbmParams, seed: int, tick_ms: int = TICK_MS) -> np.ndarray:
    """Log-retornos del micro-precio de una sesión sin registro de eventos."""
    log = run_session(SessionConfig(params, tick_ms=tick_ms, record_events=False), seed)
    if log.crashed:
        raise LiquidityCrash(log.crash_ms)
    return micro_log_returns(log.micro_prices())


def _run_config(args) -> SessionLog:
    config, seed = args
    return run_session(config, seed)


def run_replications(config: SessionConfig, seeds: Sequence[int], jobs: int = 1) -> List[SessionLog]:
    """Ejecuta una sesión por semilla; con jobs > 1 en procesos separados.

    Los resultados se devuelven en el orden de `seeds`.
    """
    tasks = [(config, seed) for seed in seeds]
    if jobs <= 1:
        return [_run_config(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_config, tasks))


DEFAULT_GRID: Dict[str, Tuple[float, ...]] = {
    'n_c': (2, 6, 10, 14),
    'n_f': (2, 6, 10, 14),
    'delta': (0.0625, 0.125, 0.25, 0.5),
    'kappa': (1.0, 2.0, 3.289, 5.0),
    'nu': (2.0, 4.0, 7.221, 10.0),
    'sigma_f': (0.01, 0.02, 0.03, 0.041),
}


def grid_cells(grid: Dict[str, Sequence[float]]) -> List[Tuple[float, ...]]:
    """Producto cartesiano en el orden de FREE_PARAMS."""
    return list(itertools.product(*(grid[name] for name in FREE_PARAMS)))


def _grid_cell(args) -> Dict[str, object]:
    base, cell, seed, tick_ms, empirical = args
    row: Dict[str, object] = dict(zip(FREE_PARAMS, cell))
    try:
        params = base.with_free_vector(cell).validate()
        returns = simulate_micro_returns(params, seed, tick_ms)
        row.update(estimate_moments(returns, empirical).as_dict())
        row['error'] = ''
    except (AbmError, ValueError, FloatingPointError) as e:
        row['error'] = str(e) or type(e).__name__
    return row


def run_sensitivity_grid(base_params: AbmParams,
                         grid: Optional[Dict[str, Sequence[float]]] = None,
                         seed: int = 1, empirical_returns: Optional[np.ndarray] = None,
                         tick_ms: int = TICK_MS, jobs: int = 1) -> List[Dict[str, object]]:
    """Estima el vector de momentos en cada combinación de la grilla.

    Cada celda se simula una vez con la misma semilla. Las celdas que fallan
    quedan registradas con su error y la grilla continúa.

    Returns:
        list: Una fila por combinación con los parámetros, los momentos y
            la columna `error`.
    """
    grid = grid or DEFAULT_GRID
    missing = [name for name in FREE_PARAMS if name not in grid]
    if missing:
        raise AbmError(f"Faltan parámetros en la grilla: {', '.join(missing)}")

    tasks = [(base_params, cell, seed, tick_ms, empirical_returns) for cell in grid_cells(grid)]
    logger.info(f"Grilla de sensibilidad: {len(tasks)} combinaciones, jobs={jobs}")
    if jobs <= 1:
        rows = [_grid_cell(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_grid_cell, tasks, chunksize=8))

    failed = sum(1 for r in rows if r['error'])
    if failed:
        logger.warning(f"{failed} celdas de la grilla fallaron")
    return rows


def sensitivity_marginals(rows: Sequence[Dict[str, object]], param: str,
                          moment: str) -> Dict[float, Tuple[float, int]]:
    """Media de un momento por valor de un parámetro, sobre las celdas válidas.

    Returns:
        dict: valor -> (media, cantidad de celdas).
    """
    groups: Dict[float, List[float]] = {}
    for row in rows:
        if row.get('error'):
            continue
        groups.setdefault(row[param], []).append(float(row[moment]))
    return {value: (float(np.mean(vals)), len(vals)) for value, vals in sorted(groups.items())}


def sensitivity_surface(rows: Sequence[Dict[str, object]], param_x: str, param_y: str,
                        moment: str) -> Tuple[List[float], List[float], np.ndarray]:
    """Superficie de un momento sobre dos parámetros, promediando los demás.

    Returns:
        tuple: (valores de x, valores de y, matriz len(y) x len(x)).
    """
    xs = sorted({row[param_x] for row in rows})
    ys = sorted({row[param_y] for row in rows})
    sums = np.zeros((len(ys), len(xs)))
    counts = np.zeros((len(ys), len(xs)))
    for row in rows:
        if row.get('error'):
            continue
        j, i = ys.index(row[param_y]), xs.index(row[param_x])
        sums[j, i] += float(row[moment])
        counts[j, i] += 1
    with np.errstate(invalid='ignore', divide='ignore'):
        surface = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return xs, ys, surface
