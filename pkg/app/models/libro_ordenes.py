"""
Libro de órdenes límite con prioridad precio-tiempo y motor de matching.

Este módulo contiene el libro del motor (autoritativo) y la réplica que se
reconstruye a partir del flujo de eventos. Los precios son enteros en ticks y
los volúmenes enteros en acciones; cada operación devuelve la lista ordenada
de MarketEvent que produjo.
"""
import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Deque, Dict, List, Optional, Set, Tuple

from sortedcontainers import SortedDict

from app.errores import OrderRejected

logger = logging.getLogger(__name__)


class Side(IntEnum):
    """Lado del libro. Los valores son los códigos del feed binario."""
    BID = 1
    ASK = 2

    @property
    def contra(self) -> 'Side':
        return Side.ASK if self is Side.BID else Side.BID


class OrderKind(Enum):
    LIMIT = 'limit'
    MARKET = 'market'


class EventKind(IntEnum):
    """Tipo de mensaje del motor. Los valores son los códigos del feed binario."""
    NEW_LIMIT = 1
    TRADE = 2
    CANCEL = 3


@dataclass(frozen=True)
class Order:
    """Orden enviada por un agente.

    Attributes:
        id: Identificador único dentro de la sesión.
        agent_id: Agente que envía la orden.
        side: BID para compra, ASK para venta.
        kind: LIMIT o MARKET.
        volume: Acciones solicitadas.
        placed_at: Milisegundos del reloj virtual.
        price: Precio en ticks (solo órdenes límite).
    """
    id: int
    agent_id: int
    side: Side
    kind: OrderKind
    volume: int
    placed_at: int
    price: Optional[int] = None


@dataclass
class RestingOrder:
    order_id: int
    agent_id: int
    side: Side
    price: int
    remaining: int
    placed_at: int


@dataclass(frozen=True)
class MarketEvent:
    """Mensaje emitido por el motor de matching.

    Para un Trade, order_id es la orden pasiva, side y agent_id son los del
    agresor y remaining_volume es lo que queda de la orden pasiva. Para un
    NewLimit, volume es el residuo que queda en el libro. Para un Cancel,
    volume y remaining_volume son el volumen retirado.
    """
    seq: int
    timestamp: int
    kind: EventKind
    order_id: int
    agent_id: int
    side: Side
    price: int
    volume: int
    remaining_volume: int
    aggressor_order_id: Optional[int] = None


@dataclass(frozen=True)
class BookStats:
    """Vista inmutable de las cantidades derivadas del libro.

    mid, micro y spread son None si falta algún lado; imbalance es None si el
    libro está vacío.
    """
    best_bid: Optional[int]
    best_ask: Optional[int]
    mid: Optional[float]
    micro: Optional[float]
    spread: Optional[int]
    imbalance: Optional[float]
    bid_depth: int
    ask_depth: int
    best_bid_volume: int = 0
    best_ask_volume: int = 0

    @property
    def two_sided(self) -> bool:
        return self.best_bid is not None and self.best_ask is not None


@dataclass(frozen=True)
class DepthSnapshot:
    """Volumen por nivel ocupado, del mejor precio hacia afuera."""
    bids: Tuple[int, ...]
    asks: Tuple[int, ...]


class Book:
    """Libro de órdenes de una sesión.

    Los bids se guardan en un SortedDict ascendente y se recorren desde el
    final; los asks desde el principio. Cada nivel es una cola FIFO.

    Args:
        reference_price: Precio de referencia dinámico inicial (m0).
    """

    def __init__(self, reference_price: int = 10000):
        self.bids: SortedDict = SortedDict()
        self.asks: SortedDict = SortedDict()
        self._index: Dict[int, RestingOrder] = {}
        self._seen_ids: Set[int] = set()
        self._side_volume = {Side.BID: 0, Side.ASK: 0}
        self.last_trade_price: Optional[int] = None
        self.dynamic_reference_price = reference_price
        self._seq = 0

    # ------------------------------------------------------------------
    # Consultas
    # ------------------------------------------------------------------

    def _ladder(self, side: Side) -> SortedDict:
        return self.bids if side is Side.BID else self.asks

    def best_price(self, side: Side) -> Optional[int]:
        """Mejor precio de un lado, o None si está vacío."""
        ladder = self._ladder(side)
        if not ladder:
            return None
        return ladder.peekitem(-1 if side is Side.BID else 0)[0]

    def side_volume(self, side: Side) -> int:
        return self._side_volume[side]

    def level_volume(self, side: Side, price: int) -> int:
        queue = self._ladder(side).get(price)
        return sum(o.remaining for o in queue) if queue else 0

    def is_resting(self, order_id: int) -> bool:
        return order_id in self._index

    def resting_order(self, order_id: int) -> Optional[RestingOrder]:
        return self._index.get(order_id)

    def is_empty(self) -> bool:
        return not self.bids and not self.asks

    def book_stats(self) -> BookStats:
        """Calcula mejores precios, mid, micro-precio, spread e imbalance.

        El micro-precio pondera con el volumen del mejor nivel de cada lado;
        el imbalance usa el volumen total en reposo de cada lado.

        Returns:
            BookStats: Instantánea inmutable del libro.
        """
        b = self.best_price(Side.BID)
        a = self.best_price(Side.ASK)
        vb_total = self._side_volume[Side.BID]
        va_total = self._side_volume[Side.ASK]
        vb = self.level_volume(Side.BID, b) if b is not None else 0
        va = self.level_volume(Side.ASK, a) if a is not None else 0

        mid = micro = spread = None
        if b is not None and a is not None:
            mid = (a + b) / 2
            spread = a - b
            micro = va / (va + vb) * a + vb / (va + vb) * b

        total = va_total + vb_total
        imbalance = (va_total - vb_total) / total if total > 0 else None

        return BookStats(
            best_bid=b, best_ask=a, mid=mid, micro=micro, spread=spread,
            imbalance=imbalance, bid_depth=vb_total, ask_depth=va_total,
            best_bid_volume=vb, best_ask_volume=va,
        )

    def depth_snapshot(self, levels: int) -> DepthSnapshot:
        """Volumen de los primeros `levels` niveles ocupados de cada lado.

        Args:
            levels (int): Cantidad de niveles a reportar (>= 1).

        Returns:
            DepthSnapshot: Volúmenes desde el mejor precio; los niveles
                faltantes se reportan como cero.
        """
        if levels < 1:
            raise ValueError("levels debe ser >= 1")

        def _side(ladder, prices):
            vols = []
            for price in prices:
                if len(vols) == levels:
                    break
                vols.append(sum(o.remaining for o in ladder[price]))
            return tuple(vols + [0] * (levels - len(vols)))

        return DepthSnapshot(
            bids=_side(self.bids, reversed(self.bids.keys())),
            asks=_side(self.asks, iter(self.asks.keys())),
        )

    def snapshot(self) -> Tuple[tuple, tuple]:
        """Estado completo del libro como tuplas comparables."""
        def _side(ladder):
            return tuple(
                (price, tuple((o.order_id, o.remaining) for o in queue))
                for price, queue in ladder.items()
            )
        return _side(self.bids), _side(self.asks)

    # ------------------------------------------------------------------
    # Mutación interna
    # ------------------------------------------------------------------

    def _emit(self, timestamp, kind, order_id, agent_id, side, price,
              volume, remaining, aggressor=None) -> MarketEvent:
        self._seq += 1
        return MarketEvent(
            seq=self._seq, timestamp=timestamp, kind=kind, order_id=order_id,
            agent_id=agent_id, side=side, price=price, volume=volume,
            remaining_volume=remaining, aggressor_order_id=aggressor,
        )

    def _rest(self, resting: RestingOrder) -> None:
        ladder = self._ladder(resting.side)
        queue: Deque[RestingOrder] = ladder.get(resting.price)
        if queue is None:
            queue = deque()
            ladder[resting.price] = queue
        queue.append(resting)
        self._index[resting.order_id] = resting
        self._side_volume[resting.side] += resting.remaining

    def _remove(self, resting: RestingOrder) -> None:
        ladder = self._ladder(resting.side)
        queue = ladder[resting.price]
        queue.remove(resting)
        if not queue:
            del ladder[resting.price]
        del self._index[resting.order_id]

    def _register_id(self, order: Order) -> None:
        if order.id in self._seen_ids:
            raise OrderRejected(order.id, "id duplicado")
        self._seen_ids.add(order.id)

    def _match(self, order: Order, limit_price: Optional[int]) -> Tuple[List[MarketEvent], int]:
        """Ejecuta contra el lado contrario en prioridad precio-tiempo.

        Returns:
            tuple: (eventos Trade, volumen sin ejecutar).
        """
        contra = order.side.contra
        ladder = self._ladder(contra)
        remaining = order.volume
        events = []

        while remaining > 0 and ladder:
            price = self.best_price(contra)
            if limit_price is not None:
                if order.side is Side.BID and price > limit_price:
                    break
                if order.side is Side.ASK and price < limit_price:
                    break
            queue = ladder[price]
            while remaining > 0 and queue:
                passive = queue[0]
                qty = min(remaining, passive.remaining)
                passive.remaining -= qty
                remaining -= qty
                self._side_volume[contra] -= qty
                events.append(self._emit(
                    order.placed_at, EventKind.TRADE, passive.order_id,
                    order.agent_id, order.side, price, qty,
                    passive.remaining, aggressor=order.id,
                ))
                if passive.remaining == 0:
                    queue.popleft()
                    del self._index[passive.order_id]
            if not queue:
                del ladder[price]

        if events:
            self.last_trade_price = events[-1].price
            self.dynamic_reference_price = events[-1].price
        return events, remaining

    # ------------------------------------------------------------------
    # Operaciones del motor
    # ------------------------------------------------------------------

    def submit_limit(self, order: Order) -> List[MarketEvent]:
        """Procesa una orden límite.

        Si cruza el mejor precio contrario se ejecuta en prioridad
        precio-tiempo y el residuo queda en el libro.

        Args:
            order (Order): Orden límite con precio y volumen válidos.

        Returns:
            List[MarketEvent]: Trades generados y, si hay residuo, un NewLimit.

        Raises:
            OrderRejected: Si la orden es inválida o el id ya se usó.
        """
        if order.kind is not OrderKind.LIMIT or order.price is None:
            raise OrderRejected(order.id, "no es una orden límite")
        if order.volume < 1 or order.price < 1:
            raise OrderRejected(order.id, "precio o volumen inválido")
        self._register_id(order)

        events, residue = self._match(order, order.price)
        if residue > 0:
            self._rest(RestingOrder(
                order.id, order.agent_id, order.side, order.price,
                residue, order.placed_at,
            ))
            events.append(self._emit(
                order.placed_at, EventKind.NEW_LIMIT, order.id, order.agent_id,
                order.side, order.price, residue, residue,
            ))
        return events

    def submit_market(self, order: Order) -> List[MarketEvent]:
        """Procesa una orden de mercado; el residuo sin ejecutar se descarta.

        Raises:
            OrderRejected: Volumen cero, lado contrario vacío o id duplicado.
        """
        if order.kind is not OrderKind.MARKET:
            raise OrderRejected(order.id, "no es una orden de mercado")
        if order.volume < 1:
            raise OrderRejected(order.id, "volumen cero")
        if not self._ladder(order.side.contra):
            raise OrderRejected(order.id, "lado contrario vacío")
        self._register_id(order)

        events, residue = self._match(order, None)
        if residue > 0:
            logger.debug(f"Orden {order.id}: residuo descartado {residue}")
        return events

    def cancel(self, order_id: int, now: int = 0) -> Optional[MarketEvent]:
        """Cancela una orden en reposo. Idempotente.

        Returns:
            MarketEvent | None: Evento Cancel, o None si la orden no está en
                el libro (desconocida o ya ejecutada).
        """
        resting = self._index.get(order_id)
        if resting is None:
            return None
        self._remove(resting)
        self._side_volume[resting.side] -= resting.remaining
        return self._emit(
            now, EventKind.CANCEL, order_id, resting.agent_id, resting.side,
            resting.price, resting.remaining, resting.remaining,
        )

    # ------------------------------------------------------------------
    # Réplica
    # ------------------------------------------------------------------

    def apply_event(self, event: MarketEvent) -> None:
        """Aplica un evento del feed a este libro (réplica del motor)."""
        if event.kind is EventKind.NEW_LIMIT:
            self._rest(RestingOrder(
                event.order_id, event.agent_id, event.side, event.price,
                event.volume, event.timestamp,
            ))
        elif event.kind is EventKind.TRADE:
            passive = self._index.get(event.order_id)
            if passive is not None:
                passive.remaining -= event.volume
                self._side_volume[passive.side] -= event.volume
                if passive.remaining <= 0:
                    self._remove(passive)
            self.last_trade_price = event.price
            self.dynamic_reference_price = event.price
        elif event.kind is EventKind.CANCEL:
            resting = self._index.get(event.order_id)
            if resting is not None:
                self._remove(resting)
                self._side_volume[resting.side] -= resting.remaining
        self._seq = max(self._seq, event.seq)
