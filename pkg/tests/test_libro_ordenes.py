import itertools

import numpy as np
import pytest

from app.errores import OrderRejected
from app.models.libro_ordenes import Book, EventKind, Side

from tests.conftest import limit, market


def test_limit_en_libro_vacio_queda_en_reposo():
    book = Book()
    events = book.submit_limit(limit(1, Side.BID, 9980, 10))
    assert [e.kind for e in events] == [EventKind.NEW_LIMIT]
    assert book.best_price(Side.BID) == 9980
    assert book.best_price(Side.ASK) is None


def test_limit_que_cruza_recorre_niveles(book_factory):
    book = book_factory(asks={10020: 50, 10030: 50})
    events = book.submit_limit(limit(10, Side.BID, 10030, 80))
    trades = [(e.volume, e.price) for e in events if e.kind is EventKind.TRADE]
    assert trades == [(50, 10020), (30, 10030)]
    assert all(e.kind is EventKind.TRADE for e in events)
    assert book.best_price(Side.BID) is None
    assert book.level_volume(Side.ASK, 10030) == 20


def test_fifo_dentro_del_nivel():
    book = Book()
    book.submit_limit(limit(1, Side.ASK, 10020, 50))
    book.submit_limit(limit(2, Side.ASK, 10020, 50))
    events = book.submit_limit(limit(3, Side.BID, 10020, 30))
    assert events[0].kind is EventKind.TRADE
    assert events[0].order_id == 1
    assert events[0].remaining_volume == 20
    assert book.resting_order(2).remaining == 50


def test_residuo_de_limit_que_cruza_queda_en_reposo(book_factory):
    book = book_factory(asks={10020: 10})
    events = book.submit_limit(limit(10, Side.BID, 10025, 25))
    assert [e.kind for e in events] == [EventKind.TRADE, EventKind.NEW_LIMIT]
    assert events[-1].volume == 15
    assert book.best_price(Side.BID) == 10025


def test_market_con_lado_contrario_vacio_es_rechazada():
    book = Book()
    with pytest.raises(OrderRejected):
        book.submit_market(market(1, Side.ASK, 10))


def test_market_descarta_residuo(book_factory):
    book = book_factory(bids={10000: 100})
    events = book.submit_market(market(10, Side.ASK, 150))
    assert [(e.volume, e.price) for e in events] == [(100, 10000)]
    assert book.best_price(Side.BID) is None
    assert book.last_trade_price == 10000


def test_market_volumen_cero_es_rechazada(book_factory):
    book = book_factory(bids={10000: 100})
    with pytest.raises(OrderRejected):
        book.submit_market(market(10, Side.ASK, 0))


def test_id_duplicado_es_rechazado(book_factory):
    book = book_factory(bids={10000: 100})
    with pytest.raises(OrderRejected):
        book.submit_limit(limit(1, Side.BID, 9990, 5))


def test_cancel_desconocido_no_emite_evento():
    assert Book().cancel(99) is None


def test_cancel_retira_nivel(book_factory):
    book = book_factory(asks={10020: 50})
    event = book.cancel(1, now=5)
    assert event.kind is EventKind.CANCEL
    assert event.volume == 50
    assert book.best_price(Side.ASK) is None
    assert book.cancel(1) is None


def test_cancel_de_orden_parcialmente_ejecutada(book_factory):
    book = book_factory(asks={10020: 50})
    book.submit_market(market(10, Side.BID, 30))
    event = book.cancel(1)
    assert event.remaining_volume == 20


def test_book_stats_micro_e_imbalance(book_factory):
    book = book_factory(bids={10000: 100}, asks={10040: 300})
    stats = book.book_stats()
    assert stats.mid == 10020
    assert stats.spread == 40
    assert stats.micro == pytest.approx(10030)
    assert stats.imbalance == pytest.approx(0.5)


def test_book_stats_volumenes_iguales_micro_igual_mid(book_factory):
    stats = book_factory(bids={9990: 70}, asks={10010: 70}).book_stats()
    assert stats.imbalance == 0
    assert stats.micro == stats.mid


def test_book_stats_sin_bids(book_factory):
    stats = book_factory(asks={10010: 70}).book_stats()
    assert stats.imbalance == 1
    assert stats.mid is None and stats.micro is None and stats.spread is None


def test_depth_snapshot(book_factory):
    assert Book().depth_snapshot(7).bids == (0,) * 7
    book = book_factory(bids={9990: 1, 9980: 2, 9970: 3}, asks={10020: 50, 10021: 20})
    assert book.depth_snapshot(7).bids == (1, 2, 3, 0, 0, 0, 0)
    assert book.depth_snapshot(2).asks == (50, 20)
    with pytest.raises(ValueError):
        book.depth_snapshot(0)


def _reference_best(orders, side):
    prices = [o['price'] for o in orders.values() if o['side'] is side and o['remaining'] > 0]
    if not prices:
        return None
    return max(prices) if side is Side.BID else min(prices)


def test_operaciones_aleatorias_conservan_volumen_y_replican():
    rng = np.random.default_rng(7)
    engine, shadow = Book(), Book()
    ids = itertools.count(1)
    submitted = executed = cancelled = aggressive_limit = 0
    live = []
    limit_ids = set()
    for step in range(3000):
        op = rng.integers(0, 3)
        if op == 0 or not live:
            side = Side.BID if rng.random() < 0.5 else Side.ASK
            price = int(10000 + rng.integers(-10, 11))
            volume = int(rng.integers(1, 50))
            oid = next(ids)
            events = engine.submit_limit(limit(oid, side, price, volume, step))
            submitted += volume
            live.append(oid)
            limit_ids.add(oid)
        elif op == 1:
            side = Side.BID if rng.random() < 0.5 else Side.ASK
            if engine.best_price(side.contra) is None:
                continue
            events = engine.submit_market(market(next(ids), side, int(rng.integers(1, 80)), step))
        else:
            oid = live.pop(int(rng.integers(0, len(live))))
            event = engine.cancel(oid, step)
            events = [event] if event is not None else []
        for e in events:
            shadow.apply_event(e)
            if e.kind is EventKind.TRADE:
                executed += e.volume
                if e.aggressor_order_id in limit_ids:
                    aggressive_limit += e.volume
            elif e.kind is EventKind.CANCEL:
                cancelled += e.volume

        bb, ba = engine.best_price(Side.BID), engine.best_price(Side.ASK)
        assert bb is None or ba is None or bb < ba

    resting = engine.side_volume(Side.BID) + engine.side_volume(Side.ASK)
    assert resting + cancelled + executed + aggressive_limit == submitted
    assert shadow.snapshot() == engine.snapshot()
