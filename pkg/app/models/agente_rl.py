"""
Agente de ejecución óptima con Q-learning tabular.

El agente vende un inventario X0 modificando un TWAP en tiempo de eventos:
en cada evento elige un multiplicador a en {0, 0.25, ..., 2} del tamaño
hijo X0/N_dp. El estado es la tupla (tiempo, inventario, spread, volumen
del mejor bid) discretizada según tablas de cuantiles históricos.
"""
import bisect
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from app.errores import EstimationError
from app.models.agentes import coerce_key_values, read_key_values, write_key_values
from app.models.libro_ordenes import BookStats, EventKind, MarketEvent, Order, OrderKind, Side

logger = logging.getLogger(__name__)

ACTIONS: Tuple[float, ...] = tuple(0.25 * k for k in range(9))
FORCED_ACTION = ACTIONS.index(2.0)

# Cotas de p en la construcción de estados de spread
_SPREAD_P0 = 0.6
_MAX_SPLIT_FACTOR = 1000


@dataclass
class RlParams:
    """Configuración del agente y del entrenamiento."""
    x0: int = 43000
    n_dp: int = 430
    t0_ms: int = 24500
    n_t: int = 5
    n_i: int = 5
    n_s: int = 5
    n_v: int = 5
    gamma: float = 1.0
    learn_rate: float = 0.1
    episodes: int = 1000

    @property
    def child_volume(self) -> float:
        return self.x0 / self.n_dp

    def action_volume(self, action: int) -> int:
        """Acciones de a * X0/N_dp, truncadas a entero."""
        return int(math.floor(ACTIONS[action] * self.child_volume + 1e-9))

    def to_dict(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_file(self, path: str) -> None:
        write_key_values(path, self.to_dict())

    @classmethod
    def from_file(cls, path: str) -> 'RlParams':
        return cls(**coerce_key_values(cls, read_key_values(path)))


def rl_configurations(episodes: int = 1000) -> List[RlParams]:
    """Las seis configuraciones de entrenamiento: X0 x tamaño de estados."""
    return [
        RlParams(x0=x0, n_t=n, n_i=n, n_s=n, n_v=n, episodes=episodes)
        for x0 in (21500, 43000, 86000)
        for n in (5, 10)
    ]


class StateKey(NamedTuple):
    t: int
    i: int
    s: int
    v: int


@dataclass(frozen=True)
class StateTable:
    """Cortes de cuantiles y probabilidad empírica de cada estado.

    El estado k cumple breakpoints[k-2] < x <= breakpoints[k-1]; el último
    estado cubre todo lo que supera el último corte.
    """
    breakpoints: Tuple[float, ...]
    probabilities: Tuple[float, ...] = ()

    @property
    def n_states(self) -> int:
        return len(self.breakpoints) + 1

    def state_of(self, x: float) -> int:
        return bisect.bisect_left(self.breakpoints, x) + 1


def _as_numbers(values: Iterable[float]) -> Tuple[float, ...]:
    return tuple(int(v) if float(v).is_integer() else float(v) for v in values)


def _state_probabilities(data: np.ndarray, breakpoints: Sequence[float]) -> Tuple[float, ...]:
    states = np.searchsorted(np.asarray(breakpoints, dtype=float), data, side='left')
    counts = np.bincount(states, minlength=len(breakpoints) + 1)
    return tuple((counts / data.size).tolist())


def build_spread_states(historical_spreads: Sequence[float], n_s: int) -> StateTable:
    """Construye la tabla de estados de spread.

    El estado 1 corresponde a spread <= 1. La densidad restante se divide en
    probabilidades equiespaciadas entre 0.6 y 1, refinando el factor de
    división hasta obtener exactamente n_s cuantiles distintos.

    Args:
        historical_spreads: Spreads observados en ticks.
        n_s (int): Cantidad de estados (>= 2).

    Returns:
        StateTable: n_s - 1 cortes y las probabilidades de cada estado.

    Raises:
        EstimationError: Si los datos son degenerados o no se alcanzan n_s
            cuantiles distintos.
    """
    if n_s < 2:
        raise ValueError("n_s debe ser >= 2")
    data = np.sort(np.asarray(historical_spreads, dtype=float))
    if data.size == 0:
        raise EstimationError("Distribución de spreads vacía")
    if np.all(data <= 1):
        raise EstimationError("Todos los spreads son de un tick")

    for factor in range(n_s, _MAX_SPLIT_FACTOR + 1):
        ps = np.linspace(_SPREAD_P0, 1.0, factor)
        quantiles = np.quantile(data, ps[1:], method='inverted_cdf')
        unique = np.unique(np.concatenate(([1.0], quantiles)))
        if unique.size == n_s:
            breakpoints = _as_numbers(unique[:-1])
            return StateTable(breakpoints, _state_probabilities(data, breakpoints))
    raise EstimationError(f"No se obtuvieron {n_s} cuantiles de spread distintos")


def build_volume_states(historical_volumes: Sequence[float], n_v: int) -> StateTable:
    """Construye la tabla de estados de volumen con cortes en los cuantiles
    k/n_v, k = 1..n_v-1.

    Raises:
        EstimationError: Datos constantes o cortes no estrictamente crecientes.
    """
    if n_v < 2:
        raise ValueError("n_v debe ser >= 2")
    data = np.sort(np.asarray(historical_volumes, dtype=float))
    if data.size == 0 or np.all(data == data[0]):
        raise EstimationError("Distribución de volúmenes constante")
    ps = np.arange(1, n_v) / n_v
    quantiles = np.quantile(data, ps, method='inverted_cdf')
    if np.any(np.diff(quantiles) <= 0):
        raise EstimationError("Cortes de volumen no estrictamente crecientes")
    breakpoints = _as_numbers(quantiles)
    return StateTable(breakpoints, _state_probabilities(data, breakpoints))


def _bucket(n: int, remaining: float, total: float) -> int:
    return min(n, max(1, math.ceil(n * remaining / total)))


def get_state(remaining_ms: float, remaining_inventory: float, stats: BookStats,
              spread_table: StateTable, volume_table: StateTable,
              params: RlParams) -> StateKey:
    """Discretiza el estado observado.

    Un libro sin spread definido cae en el estado de spread más ancho.
    """
    t = _bucket(params.n_t, max(remaining_ms, 0), params.t0_ms)
    i = _bucket(params.n_i, max(remaining_inventory, 0), params.x0)
    s = spread_table.state_of(stats.spread) if stats.spread is not None else spread_table.n_states
    v = volume_table.state_of(stats.best_bid_volume)
    return StateKey(t, i, s, v)


def epsilon_schedule(episode: int, total_episodes: int = 1000) -> float:
    """Decaimiento lineal por tramos de epsilon.

    Sobre 1000 episodios: 1 -> 0.9 en [0, 200], 0.9 -> 0.1 en (200, 600],
    0.1 -> 0.01 en (600, 750] y 0.01 después. Con otra cantidad de episodios
    los tramos se escalan proporcionalmente.
    """
    if episode < 0:
        raise ValueError("episode debe ser >= 0")
    x = episode * 1000 / total_episodes
    if x <= 200:
        return 1.0 - 0.1 * x / 200
    if x <= 600:
        return 0.9 - 0.8 * (x - 200) / 400
    if x <= 750:
        return 0.1 - 0.09 * (x - 600) / 150
    return 0.01


class QTable:
    """Valores acción-estado por estado visitado y contador de visitas."""

    def __init__(self, n_actions: int = len(ACTIONS)):
        self.n_actions = n_actions
        self._values: Dict[StateKey, np.ndarray] = {}
        self._visits: Dict[StateKey, int] = {}

    def __contains__(self, state) -> bool:
        return state in self._values

    def __len__(self) -> int:
        return len(self._values)

    def states(self) -> List[StateKey]:
        return sorted(self._values)

    def values(self, state: StateKey) -> Optional[np.ndarray]:
        return self._values.get(state)

    def visits(self, state: StateKey) -> int:
        return self._visits.get(state, 0)

    def visit(self, state: StateKey) -> np.ndarray:
        """Registra una visita, creando el estado si no existía."""
        row = self._values.get(state)
        if row is None:
            row = np.zeros(self.n_actions)
            self._values[state] = row
        self._visits[state] = self._visits.get(state, 0) + 1
        return row

    def set_row(self, state: StateKey, row: Sequence[float], visits: int = 0) -> None:
        self._values[state] = np.asarray(row, dtype=float).copy()
        self._visits[state] = visits

    def copy(self) -> 'QTable':
        other = QTable(self.n_actions)
        other._values = {k: v.copy() for k, v in self._values.items()}
        other._visits = dict(self._visits)
        return other

    def greedy_action(self, state: StateKey) -> int:
        """Mejor acción; los empates van al menor índice, -1 si no se visitó."""
        row = self._values.get(state)
        return int(np.argmax(row)) if row is not None else -1

    def greedy_policy(self) -> Dict[StateKey, int]:
        return {state: self.greedy_action(state) for state in self.states()}


def epsilon_greedy(q: QTable, state: StateKey, epsilon: float, u: float) -> int:
    """Elige una acción con un único sorteo uniforme u.

    La mejor acción tiene probabilidad 1 - eps + eps/N y cada una de las demás
    eps/N; un estado no visitado se trata como uniforme.
    """
    n = q.n_actions
    row = q.values(state)
    if row is None:
        return min(int(u * n), n - 1)
    best = int(np.argmax(row))
    cumulative = 0.0
    for action in range(n):
        cumulative += epsilon / n + (1.0 - epsilon if action == best else 0.0)
        if u < cumulative:
            return action
    return n - 1


def q_update(q: QTable, state: StateKey, action: int, reward: float,
             next_state: Optional[StateKey], terminal: bool, params: RlParams,
             learn_rate: Optional[float] = None) -> float:
    """Actualización de Q-learning a un paso.

    Q(s,a) <- Q(s,a) + alpha [R + gamma max_a' Q(s',a') - Q(s,a)]; el término
    max es cero si el paso es terminal o s' no fue visitado.

    Returns:
        float: Nuevo valor de Q(s, a).
    """
    alpha = params.learn_rate if learn_rate is None else learn_rate
    row = q.values(state)
    if row is None:
        row = q.visit(state)
    next_row = None if terminal or next_state is None else q.values(next_state)
    target = reward + (params.gamma * float(np.max(next_row)) if next_row is not None else 0.0)
    row[action] += alpha * (target - row[action])
    return float(row[action])


def convergence_metrics(q_prev: QTable, q_curr: QTable) -> Tuple[float, float]:
    """Diferencia media absoluta de Q y fracción de políticas cambiadas,
    promediadas sobre los estados de q_prev.

    Returns:
        tuple: (q_delta, policy_delta); (0, 0) si q_prev está vacía.
    """
    states = q_prev.states()
    if not states:
        return 0.0, 0.0
    diffs = []
    changed = 0
    for state in states:
        prev = q_prev.values(state)
        curr = q_curr.values(state)
        if curr is None:
            curr = prev
        diffs.append(np.abs(curr - prev))
        if int(np.argmax(prev)) != int(np.argmax(curr)):
            changed += 1
    return float(np.mean(np.concatenate(diffs))), changed / len(states)


@dataclass
class EpisodeResult:
    episode: int
    total_profit: float
    intp: float
    trades: int
    states_discovered: int
    q_delta: float = 0.0
    policy_delta: float = 0.0
    epsilon: float = 0.0
    implementation_shortfall: float = 0.0
    inventory_left: int = 0


@dataclass
class RlAgent:
    """Agente vendedor que ejecuta la política epsilon-greedy sobre una QTable.

    Regularmente decide mientras no haya agotado N_dp decisiones ni el
    tiempo T0. Si agota las decisiones antes de T0 no opera hasta T0; desde
    T0 fuerza la acción 2 en cada evento hasta quedar sin inventario, con a
    lo sumo N_dp + 1 órdenes en total. La actualización de
    Q de cada decisión se hace al evento siguiente, con la recompensa en
    efectivo de las ejecuciones recibidas.
    """
    agent_id: int
    params: RlParams
    q: QTable
    spread_table: StateTable
    volume_table: StateTable
    epsilon: float
    learning: bool = True
    inventory: int = field(init=False)
    decisions: int = field(default=0, init=False)
    trades: int = field(default=0, init=False)
    total_profit: float = field(default=0.0, init=False)
    traded_volume: int = field(default=0, init=False)
    _pending: Optional[Tuple[StateKey, int]] = field(default=None, init=False)
    _order_ids: set = field(default_factory=set, init=False)

    def __post_init__(self):
        self.inventory = self.params.x0

    def owns(self, order_id: Optional[int]) -> bool:
        return order_id in self._order_ids

    def _process_fills(self, fills: Iterable[MarketEvent]) -> float:
        cash = 0.0
        for event in fills:
            if event.kind is EventKind.TRADE and self.owns(event.aggressor_order_id):
                self.inventory -= event.volume
                self.traded_volume += event.volume
                cash += event.price * event.volume
        self.total_profit += cash
        return cash

    def _learn(self, reward: float, next_state: Optional[StateKey], terminal: bool) -> None:
        if self._pending is None:
            return
        if self.learning:
            state, action = self._pending
            q_update(self.q, state, action, reward, next_state, terminal, self.params)
        self._pending = None

    def rl_agent_action(self, stats: BookStats, fills: Iterable[MarketEvent],
                        now_ms: int, rng: np.random.Generator, ids: Iterator[int],
                        allowed: Callable[[Order], bool]) -> Optional[Order]:
        """Procesa las ejecuciones previas y decide la próxima orden de venta.

        Args:
            stats (BookStats): Libro observado.
            fills: Eventos entregados desde la decisión anterior.
            now_ms (int): Reloj virtual.
            rng (np.random.Generator): Generador de la sesión.
            ids (Iterator[int]): Fuente de ids de orden.
            allowed (Callable): False si la orden quedaría suprimida (lado
                contrario vacío o subasta de volatilidad).

        Returns:
            Order | None: Orden de mercado de venta.
        """
        reward = self._process_fills(fills)

        if self.inventory <= 0:
            self._learn(reward, None, terminal=True)
            return None

        state = get_state(self.params.t0_ms - now_ms, self.inventory, stats,
                          self.spread_table, self.volume_table, self.params)
        self._learn(reward, state, terminal=False)

        time_up = now_ms >= self.params.t0_ms
        regular = self.decisions < self.params.n_dp and not time_up
        if regular:
            action = epsilon_greedy(self.q, state, self.epsilon, rng.random())
        elif time_up and self.trades <= self.params.n_dp:
            action = FORCED_ACTION
        else:
            # presupuesto agotado antes de T0: espera sin operar
            return None

        volume = min(self.params.action_volume(action), self.inventory)
        order = None
        if volume > 0:
            order = Order(id=next(ids), agent_id=self.agent_id, side=Side.ASK,
                          kind=OrderKind.MARKET, volume=volume, placed_at=now_ms)
            if not allowed(order):
                return None
            self._order_ids.add(order.id)
            self.trades += 1

        if regular:
            self.decisions += 1
        self.q.visit(state)
        self._pending = (state, action)
        return order

    def finish(self, fills: Iterable[MarketEvent], episode: int, m0: int) -> EpisodeResult:
        """Cierra el episodio con la actualización terminal."""
        reward = self._process_fills(fills)
        self._learn(reward, None, terminal=True)
        x0 = self.params.x0
        return EpisodeResult(
            episode=episode,
            total_profit=self.total_profit,
            intp=self.total_profit / x0,
            trades=self.trades,
            states_discovered=len(self.q),
            epsilon=self.epsilon,
            implementation_shortfall=m0 * x0 - self.total_profit,
            inventory_left=self.inventory,
        )
