"""
Fixtures compartidas de los tests.
"""
import itertools
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.models.agentes import AbmParams
from app.models.libro_ordenes import Book, Order, OrderKind, Side


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_params():
    """Sesión corta para tests rápidos del loop."""
    return AbmParams(n_lp=10, n_c=3, n_f=3, t_ms=2000).validate()


@pytest.fixture
def ids():
    return itertools.count(1000)


def limit(order_id, side, price, volume, placed_at=0, agent_id=1):
    return Order(order_id, agent_id, side, OrderKind.LIMIT, volume, placed_at, price)


def market(order_id, side, volume, placed_at=0, agent_id=2):
    return Order(order_id, agent_id, side, OrderKind.MARKET, volume, placed_at)


@pytest.fixture
def book_factory():
    """Construye un libro a partir de {precio: volumen} por lado."""
    def _build(bids=None, asks=None):
        book = Book(10000)
        counter = itertools.count(1)
        for price, volume in (bids or {}).items():
            book.submit_limit(limit(next(counter), Side.BID, price, volume))
        for price, volume in (asks or {}).items():
            book.submit_limit(limit(next(counter), Side.ASK, price, volume))
        return book
    return _build
