"""
Modelos del simulador: libro de órdenes, feed binario y agentes
"""
from .libro_ordenes import Book, BookStats, MarketEvent, Order, OrderKind, Side
from .agentes import AbmParams
from .agente_rl import QTable, RlAgent, RlParams, StateTable

__all__ = [
    'Book', 'BookStats', 'MarketEvent', 'Order', 'OrderKind', 'Side',
    'AbmParams', 'QTable', 'RlAgent', 'RlParams', 'StateTable',
]
