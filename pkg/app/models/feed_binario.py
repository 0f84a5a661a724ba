"""
Feed binario de eventos de mercado.

Codifica cada MarketEvent en un registro little-endian de longitud fija,
provee el canal FIFO acotado que separa al motor de matching del procesador
de eventos, y un publicador UDP opcional con el mismo formato de registro.

Formato del registro (62 bytes):

    offset  campo       tipo
    0       seq         u64
    8       timestamp   u64
    16      kind        u8   (1=NewLimit, 2=Trade, 3=Cancel)
    17      side        u8   (1=Bid, 2=Ask)
    18      order_id    u64
    26      agent_id    u32
    30      price       i64
    38      volume      u64
    46      remaining   u64
    54      aggressor   u64  (0 = sin agresor)
"""
import logging
import socket
import struct
from collections import deque
from typing import Iterable, List, Optional

from app.errores import DecodeError, FramingError
from app.models.libro_ordenes import EventKind, MarketEvent, Side

logger = logging.getLogger(__name__)

_RECORD = struct.Struct('<QQBBQIqQQQ')
RECORD_SIZE = _RECORD.size


def encode(event: MarketEvent) -> bytes:
    """Codifica un evento en un registro binario de longitud fija."""
    return _RECORD.pack(
        event.seq, event.timestamp, int(event.kind), int(event.side),
        event.order_id, event.agent_id, event.price, event.volume,
        event.remaining_volume, event.aggressor_order_id or 0,
    )


def decode(buffer: bytes) -> MarketEvent:
    """Decodifica un registro binario.

    Raises:
        FramingError: Si el buffer no mide exactamente RECORD_SIZE bytes.
        DecodeError: Si el código de tipo o de lado es desconocido.
    """
    if len(buffer) != RECORD_SIZE:
        raise FramingError(
            f"Registro de {len(buffer)} bytes, se esperaban {RECORD_SIZE}"
        )
    (seq, timestamp, kind, side, order_id, agent_id, price, volume,
     remaining, aggressor) = _RECORD.unpack(buffer)
    try:
        kind = EventKind(kind)
    except ValueError:
        raise DecodeError(f"Código de evento desconocido: {kind:#04x}") from None
    try:
        side = Side(side)
    except ValueError:
        raise DecodeError(f"Código de lado desconocido: {side:#04x}") from None
    return MarketEvent(
        seq=seq, timestamp=timestamp, kind=kind, order_id=order_id,
        agent_id=agent_id, side=side, price=price, volume=volume,
        remaining_volume=remaining,
        aggressor_order_id=aggressor if aggressor else None,
    )


class EventChannel:
    """Canal FIFO acotado entre productor y consumidor.

    Cuando el canal está lleno el evento nuevo se descarta y se cuenta en
    `dropped`; los eventos ya encolados se conservan.

    Args:
        capacity (int): Cantidad máxima de eventos encolados.
    """

    def __init__(self, capacity: int = 65536):
        if capacity < 1:
            raise ValueError("capacity debe ser >= 1")
        self.capacity = capacity
        self.dropped = 0
        self._queue = deque()

    def __len__(self):
        return len(self._queue)

    def push(self, event: MarketEvent) -> bool:
        if len(self._queue) >= self.capacity:
            self.dropped += 1
            logger.warning(f"Canal lleno: evento seq={event.seq} descartado")
            return False
        self._queue.append(event)
        return True

    def extend(self, events: Iterable[MarketEvent]) -> None:
        for event in events:
            self.push(event)


def drain(channel: EventChannel) -> List[MarketEvent]:
    """Retira todos los eventos del canal en orden FIFO."""
    events = list(channel._queue)
    channel._queue.clear()
    return events


class DatagramPublisher:
    """Publica un registro codificado por datagrama UDP.

    Args:
        host (str): Host destino.
        port (int): Puerto destino.
    """

    def __init__(self, host: str, port: int):
        self.address = (host, port)
        self.sent = 0
        self._sock: Optional[socket.socket] = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    def publish(self, event: MarketEvent) -> None:
        if self._sock is None:
            return
        try:
            self._sock.sendto(encode(event), self.address)
            self.sent += 1
        except OSError as e:
            logger.warning(f"No se pudo publicar evento seq={event.seq}: {e}")

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


def write_binary_log(path: str, events: Iterable[MarketEvent]) -> int:
    """Escribe un log de eventos como registros binarios concatenados.

    Returns:
        int: Cantidad de registros escritos.
    """
    count = 0
    with open(path, 'wb') as archivo:
        for event in events:
            archivo.write(encode(event))
            count += 1
    return count


def read_binary_log(path: str) -> List[MarketEvent]:
    """Lee un log binario escrito con write_binary_log."""
    with open(path, 'rb') as archivo:
        data = archivo.read()
    if len(data) % RECORD_SIZE:
        raise FramingError(f"{path}: longitud {len(data)} no es múltiplo de {RECORD_SIZE}")
    return [decode(data[i:i + RECORD_SIZE]) for i in range(0, len(data), RECORD_SIZE)]
