"""
Jerarquía de excepciones del simulador.

Todas las excepciones propias derivan de AbmError para que los flujos de
trabajo (calibración, grilla de sensibilidad, CLI) puedan capturarlas en un
único punto y convertirlas en penalizaciones o códigos de salida.
"""


class AbmError(Exception):
    """Error base del simulador."""


class ConfigError(AbmError):
    """Parámetros o archivo de configuración inválidos."""


class OrderRejected(AbmError):
    """El motor de matching rechazó una orden.

    Attributes:
        order_id: Identificador de la orden rechazada.
        motivo: Descripción breve del rechazo.
    """

    def __init__(self, order_id, motivo):
        super().__init__(f"Orden {order_id} rechazada: {motivo}")
        self.order_id = order_id
        self.motivo = motivo


class FramingError(AbmError):
    """Buffer binario con longitud distinta a la del registro."""


class DecodeError(AbmError):
    """Código de tipo o lado desconocido en un registro binario."""


class InitializationError(AbmError):
    """El libro quedó con un lado vacío tras los reintentos de inicialización."""


class LiquidityCrash(AbmError):
    """Ambos lados del libro quedaron vacíos durante la sesión."""

    def __init__(self, now_ms):
        super().__init__(f"Crash de liquidez en t={now_ms} ms")
        self.now_ms = now_ms


class EstimationError(AbmError):
    """No se cumplen las precondiciones de un estimador."""
