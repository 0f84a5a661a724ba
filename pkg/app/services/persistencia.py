"""
Persistencia de resultados en CSV y JSON.

Cada comando escribe sus tablas en un directorio de salida y termina con un
manifiesto (manifiesto.json) que registra el comando, la configuración, las
semillas, la versión y el sha256 de cada archivo generado.
"""
import csv
import hashlib
import itertools
import json
import logging
import os
import subprocess
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import app
from app.errores import ConfigError
from app.models.agente_rl import ACTIONS, EpisodeResult, QTable, StateKey, StateTable
from app.models.libro_ordenes import BookStats, DepthSnapshot, EventKind, MarketEvent, Side
from app.services.hechos_estilizados import Quote, SessionFills, TradeRecord
from app.services.momentos import MOMENT_LABELS, MOMENT_NAMES, MomentVector
from app.services.simulador import MarketOrderRecord

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifiesto.json'

EVENT_COLUMNS = ('seq', 'timestamp_ms', 'kind', 'order_id', 'agent_id', 'side', 'price',
                 'volume', 'remaining_volume', 'aggressor_id')
QTABLE_COLUMNS = ('t', 'i', 's', 'v') + tuple(f'q_{a}' for a in range(len(ACTIONS))) + ('visits',)
EPISODE_COLUMNS = ('episode', 'intp', 'trades', 'states', 'q_delta', 'policy_delta', 'epsilon',
                   'total_profit', 'implementation_shortfall', 'inventory_left')


def write_table(path: str, header: Sequence[str], rows: Iterable[Sequence[object]]) -> int:
    """Escribe un CSV con encabezado.

    Returns:
        int: Cantidad de filas escritas.
    """
    n = 0
    with open(path, 'w', encoding='utf-8', newline='') as archivo:
        escritor = csv.writer(archivo)
        escritor.writerow(header)
        for row in rows:
            escritor.writerow(row)
            n += 1
    logger.info(f"{n} filas escritas en {os.path.basename(path)}")
    return n


def read_table(path: str) -> List[Dict[str, str]]:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, 'r', encoding='utf-8-sig', newline='') as archivo:
        return list(csv.DictReader(archivo))


# ----------------------------------------------------------------------
# Eventos
# ----------------------------------------------------------------------

def _event_row(e: MarketEvent) -> Tuple[object, ...]:
    return (e.seq, e.timestamp, e.kind.name, e.order_id, e.agent_id, e.side.name, e.price,
            e.volume, e.remaining_volume, '' if e.aggressor_order_id is None else e.aggressor_order_id)


def write_events_csv(path: str, events: Iterable[MarketEvent]) -> int:
    return write_table(path, EVENT_COLUMNS, (_event_row(e) for e in events))


def read_events_csv(path: str) -> List[MarketEvent]:
    """Lee un log de eventos escrito con write_events_csv.

    Raises:
        ConfigError: Si alguna fila no se puede interpretar.
    """
    events = []
    for n, row in enumerate(read_table(path), start=2):
        try:
            events.append(MarketEvent(
                seq=int(row['seq']), timestamp=int(row['timestamp_ms']),
                kind=EventKind[row['kind']], order_id=int(row['order_id']),
                agent_id=int(row['agent_id']), side=Side[row['side']], price=int(row['price']),
                volume=int(row['volume']), remaining_volume=int(row['remaining_volume']),
                aggressor_order_id=int(row['aggressor_id']) if row['aggressor_id'] else None,
            ))
        except (KeyError, ValueError) as e:
            raise ConfigError(f"{os.path.basename(path)}:{n}: fila de evento inválida ({e})") from None
    return events


# ----------------------------------------------------------------------
# Aprendizaje por refuerzo
# ----------------------------------------------------------------------

def write_qtable_csv(path: str, q: QTable) -> int:
    return write_table(path, QTABLE_COLUMNS, (
        tuple(state) + tuple(float(v) for v in q.values(state)) + (q.visits(state),)
        for state in q.states()
    ))


def read_qtable_csv(path: str) -> QTable:
    q = QTable()
    for row in read_table(path):
        state = StateKey(*(int(row[k]) for k in ('t', 'i', 's', 'v')))
        q.set_row(state, [float(row[f'q_{a}']) for a in range(len(ACTIONS))], int(row['visits']))
    return q


def write_policy_csv(path: str, q: QTable, dims: Tuple[int, int, int, int]) -> int:
    """Política greedy sobre todos los estados; -1 en los no visitados."""
    states = itertools.product(*(range(1, d + 1) for d in dims))
    return write_table(path, ('t', 'i', 's', 'v', 'action'), (
        state + (q.greedy_action(StateKey(*state)),) for state in states
    ))


def write_episodes_csv(path: str, results: Sequence[EpisodeResult]) -> int:
    return write_table(path, EPISODE_COLUMNS, (
        (r.episode, r.intp, r.trades, r.states_discovered, r.q_delta, r.policy_delta,
         r.epsilon, r.total_profit, r.implementation_shortfall, r.inventory_left)
        for r in results
    ))


def write_state_table_csv(path: str, table: StateTable) -> int:
    """Estados con su corte superior (vacío en el último) y su probabilidad."""
    uppers = list(table.breakpoints) + ['']
    probs = list(table.probabilities) or [''] * table.n_states
    return write_table(path, ('estado', 'corte', 'probabilidad'),
                       zip(range(1, table.n_states + 1), uppers, probs))


def read_state_table_csv(path: str) -> StateTable:
    rows = read_table(path)
    breakpoints = tuple(float(r['corte']) for r in rows if r['corte'] != '')
    probabilities = tuple(float(r['probabilidad']) for r in rows if r['probabilidad'] != '')
    return StateTable(breakpoints, probabilities)


# ----------------------------------------------------------------------
# Momentos y series
# ----------------------------------------------------------------------

def moments_to_row(label: str, moments: MomentVector) -> Tuple[object, ...]:
    return (label,) + tuple(moments.as_array().tolist())


def write_moments_csv(path: str, rows: Sequence[Tuple[str, MomentVector]]) -> int:
    return write_table(path, ('serie',) + MOMENT_LABELS, (moments_to_row(l, m) for l, m in rows))


def read_moments_csv(path: str) -> List[Dict[str, object]]:
    """Filas de momentos con claves internas (mean, std, ...)."""
    result = []
    for row in read_table(path):
        item: Dict[str, object] = {'serie': row['serie']}
        for name, label in zip(MOMENT_NAMES, MOMENT_LABELS):
            item[name] = float(row[label])
        result.append(item)
    return result


def write_series_csv(path: str, name: str, values: Sequence[float]) -> int:
    return write_table(path, (name,), ([float(v)] for v in values))


def read_series_csv(path: str, column: Optional[str] = None) -> np.ndarray:
    """Lee una columna numérica; por defecto la primera."""
    rows = read_table(path)
    if not rows:
        return np.array([])
    key = column or next(iter(rows[0]))
    if key not in rows[0]:
        raise ConfigError(f"Columna {key} ausente en {os.path.basename(path)}")
    return np.array([float(r[key]) for r in rows])


# ----------------------------------------------------------------------
# Manifiesto
# ----------------------------------------------------------------------

def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as archivo:
        for bloque in iter(lambda: archivo.read(1 << 16), b''):
            digest.update(bloque)
    return digest.hexdigest()


def git_describe() -> str:
    try:
        salida = subprocess.run(
            ['git', 'describe', '--always', '--dirty'], capture_output=True, text=True,
            cwd=os.path.dirname(os.path.abspath(__file__)), timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return 'desconocido'
    return salida.stdout.strip() if salida.returncode == 0 and salida.stdout.strip() else 'desconocido'


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Dict[str, object]
    seeds: List[int]
    tick_ms: int
    version: str = app.__version__
    git: str = field(default_factory=git_describe)
    created: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    files: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def output_checksums(out_dir: str) -> Dict[str, str]:
    """sha256 de cada archivo del directorio, salvo el manifiesto."""
    checksums = {}
    for root, _dirs, files in os.walk(out_dir):
        for name in sorted(files):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out_dir)
            if rel != MANIFEST_NAME:
                checksums[rel] = sha256_file(path)
    return dict(sorted(checksums.items()))


def write_manifest(out_dir: str, manifest: RunManifest) -> str:
    manifest.files = output_checksums(out_dir)
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, 'w', encoding='utf-8') as archivo:
        json.dump(manifest.to_dict(), archivo, indent=2, ensure_ascii=False, default=str)
    logger.info(f"Manifiesto escrito con {len(manifest.files)} archivos en {out_dir}")
    return path


def read_manifest(out_dir: str) -> Dict[str, object]:
    path = os.path.join(out_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, 'r', encoding='utf-8') as archivo:
        return json.load(archivo)


# ----------------------------------------------------------------------
# Sesiones
# ----------------------------------------------------------------------

MARKET_ORDER_COLUMNS = ('timestamp_ms', 'order_id', 'agent_id', 'side', 'volume', 'vwap',
                        'best_bid_before', 'best_ask_before', 'mid_before', 'mid_after',
                        'micro_after')
STATS_COLUMNS = ('timestamp_ms', 'best_bid', 'best_ask', 'mid', 'micro', 'spread', 'imbalance',
                 'bid_depth', 'ask_depth', 'best_bid_volume', 'best_ask_volume')


def _blank(value) -> object:
    return '' if value is None else value


def _optional(text: str) -> Optional[float]:
    return float(text) if text != '' else None


def write_market_orders_csv(path: str, records: Sequence[MarketOrderRecord]) -> int:
    return write_table(path, MARKET_ORDER_COLUMNS, (
        (r.timestamp, r.order_id, r.agent_id, r.side.name, r.volume, r.vwap,
         _blank(r.best_bid_before), _blank(r.best_ask_before), _blank(r.mid_before),
         _blank(r.mid_after), _blank(r.micro_after))
        for r in records
    ))


def read_session_fills(path: str) -> SessionFills:
    """Reconstruye los trades agresores de un ordenes_mercado.csv."""
    rows = read_table(path)
    return SessionFills(
        trades=[TradeRecord(int(r['timestamp_ms']), float(r['vwap']), float(r['volume'])) for r in rows],
        quotes=[Quote(int(r['timestamp_ms']), _optional(r['best_bid_before']),
                      _optional(r['best_ask_before'])) for r in rows],
        signs=np.array([1 if r['side'] == Side.BID.name else -1 for r in rows], dtype=int),
        mid_before=[_optional(r['mid_before']) for r in rows],
        mid_after=[_optional(r['mid_after']) for r in rows],
    )


def read_micro_prices(path: str) -> np.ndarray:
    """Micro-precios posteriores a cada orden de mercado de un ordenes_mercado.csv."""
    return np.array([float(r['micro_after']) for r in read_table(path) if r['micro_after'] != ''])


def write_stats_csv(path: str, stats: Sequence[Tuple[int, BookStats]]) -> int:
    return write_table(path, STATS_COLUMNS, (
        (now, _blank(s.best_bid), _blank(s.best_ask), _blank(s.mid), _blank(s.micro),
         _blank(s.spread), _blank(s.imbalance), s.bid_depth, s.ask_depth,
         s.best_bid_volume, s.best_ask_volume)
        for now, s in stats
    ))


def write_depth_csv(path: str, snapshots: Sequence[DepthSnapshot],
                    timestamps: Optional[Sequence[int]] = None) -> int:
    levels = len(snapshots[0].bids) if snapshots else 0
    header = (('timestamp_ms',) + tuple(f'bid_{k}' for k in range(1, levels + 1))
              + tuple(f'ask_{k}' for k in range(1, levels + 1)))
    stamps = timestamps if timestamps is not None else range(len(snapshots))
    return write_table(path, header, ((t,) + s.bids + s.asks for t, s in zip(stamps, snapshots)))


def read_depth_csv(path: str) -> List[DepthSnapshot]:
    rows = read_table(path)
    if not rows:
        return []
    bid_keys = sorted((k for k in rows[0] if k.startswith('bid_')), key=lambda k: int(k[4:]))
    ask_keys = sorted((k for k in rows[0] if k.startswith('ask_')), key=lambda k: int(k[4:]))
    return [DepthSnapshot(tuple(int(r[k]) for k in bid_keys), tuple(int(r[k]) for k in ask_keys))
            for r in rows]
