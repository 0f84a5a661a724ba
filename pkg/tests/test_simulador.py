from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from scipy import stats as sps

from app.models.agente_rl import RlParams, StateTable
from app.models.agentes import FREE_PARAMS, AbmParams
from app.models.libro_ordenes import EventKind, Side
from app.models.tablas_historicas import PUBLISHED_SPREAD_BREAKPOINTS, PUBLISHED_VOLUME_BREAKPOINTS
from app.services import hechos_estilizados as hechos
from app.services.momentos import hurst_exponent, micro_log_returns
from app.services.simulador import (
    Clock, SessionConfig, _new_agents, grid_cells, initialize_book,
    market_order_allowed, retained_episodes, run_replications, run_sensitivity_grid,
    run_session, sensitivity_marginals, sensitivity_surface, train_rl,
    would_trigger_volatility_auction,
)
from tests.conftest import market


def test_reloj_virtual():
    clock = Clock(50)
    assert clock.advance() == 50
    assert clock.advance() == 100


# ----------------------------------------------------------------------
# Guarda de subasta de volatilidad
# ----------------------------------------------------------------------

def test_subasta_por_desvio_mayor_al_diez_por_ciento(book_factory):
    book = book_factory(bids={9000: 10}, asks={11001: 10})
    assert would_trigger_volatility_auction(book, market(50, Side.BID, 5))
    assert not market_order_allowed(book, market(50, Side.BID, 5))


def test_desvio_de_exactamente_diez_por_ciento_pasa(book_factory):
    book = book_factory(bids={9000: 10}, asks={11000: 10})
    assert not would_trigger_volatility_auction(book, market(50, Side.BID, 5))
    assert market_order_allowed(book, market(50, Side.BID, 5))


def test_lado_contrario_vacio(book_factory):
    book = book_factory(bids={9990: 10})
    assert not market_order_allowed(book, market(50, Side.BID, 5))
    assert not would_trigger_volatility_auction(book, market(50, Side.BID, 5))


# ----------------------------------------------------------------------
# Inicialización
# ----------------------------------------------------------------------

def test_inicializacion_respeta_el_spread_inicial(small_params):
    rng = np.random.default_rng(1)
    lps, _, _ = _new_agents(small_params, rng)
    book, events, suppressed = initialize_book(SessionConfig(small_params), rng, lps)
    assert book.best_price(Side.BID) <= small_params.initial_bid
    assert book.best_price(Side.ASK) >= small_params.initial_ask
    assert len(events) == 1001 - suppressed
    assert all(e.kind is EventKind.NEW_LIMIT for e in events)
    assert sum(len(lp.open_orders) for lp in lps) == len(events)


@pytest.mark.slow
def test_inicializacion_balanceada():
    params = AbmParams()
    balanced = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        lps, _, _ = _new_agents(params, rng)
        book, _, _ = initialize_book(SessionConfig(params), rng, lps)
        if abs(book.book_stats().imbalance) < 0.5:
            balanced += 1
    assert balanced >= 99


# ----------------------------------------------------------------------
# Sesión
# ----------------------------------------------------------------------

def test_sesion_determinista(small_params):
    config = SessionConfig(small_params)
    a = run_session(config, 7)
    b = run_session(config, 7)
    assert a.events == b.events
    assert a.final_book == b.final_book
    assert np.array_equal(a.micro_prices(), b.micro_prices())


def test_semillas_distintas_divergen(small_params):
    config = SessionConfig(small_params)
    assert run_session(config, 1).events != run_session(config, 2).events


def test_sesion_avanza_por_ticks(small_params):
    log = run_session(SessionConfig(small_params, tick_ms=100), 3)
    times = [now for now, _ in log.stats]
    if not log.crashed:
        assert times == list(range(100, small_params.t_ms + 1, 100))
    assert len(log.depth) == len(log.stats)


def test_registro_de_la_sesion(small_params):
    log = run_session(SessionConfig(small_params), 4)
    counts = log.event_counts()
    assert set(counts) == {'NEW_LIMIT', 'TRADE', 'CANCEL'}
    assert log.init_events + log.init_suppressed == 1001
    assert log.dropped == 0
    assert all(r.volume > 0 for r in log.market_orders)
    assert len(log.trade_signs()) == len(log.market_orders)
    seqs = [e.seq for e in log.events]
    assert seqs == sorted(seqs)


def test_sesion_sin_registro_de_eventos(small_params):
    log = run_session(SessionConfig(small_params, record_events=False), 4)
    assert log.events == []
    assert log.final_book == run_session(SessionConfig(small_params), 4).final_book


def test_replicas_en_orden(small_params):
    config = SessionConfig(small_params, record_events=False)
    logs = run_replications(config, [3, 1, 2])
    assert [log.seed for log in logs] == [3, 1, 2]


@pytest.mark.parametrize('seed', [1, 2, 3])
def test_ordenes_de_mercado_respetan_la_guarda(small_params, seed):
    log = run_session(SessionConfig(small_params), seed)
    market_ids = {r.order_id for r in log.market_orders}
    for r in log.market_orders:
        contra = r.best_ask_before if r.side is Side.BID else r.best_bid_before
        assert contra is not None

    # la referencia dinámica es el último precio operado, m0 al comienzo
    reference = small_params.m0
    checked = set()
    for event in log.events:
        if event.kind is not EventKind.TRADE:
            continue
        aggressor = event.aggressor_order_id
        if aggressor in market_ids and aggressor not in checked:
            checked.add(aggressor)
            assert 10 * abs(event.price - reference) <= reference
        reference = event.price
    assert checked == market_ids


def test_sesion_solo_con_lps_opera_solo_por_cruces():
    params = AbmParams(n_lp=10, n_c=0, n_f=0, t_ms=2000)
    log = run_session(SessionConfig(params), 5)
    assert not log.crashed
    assert log.market_orders == []
    assert set(log.orders_by_class) == {'lp'}
    trades = [e for e in log.events if e.kind is EventKind.TRADE]
    # todo trade viene de una orden límite de un LP que cruzó el libro
    assert all(1 <= e.agent_id <= params.n_lp for e in trades)
    assert all(e.aggressor_order_id is not None for e in trades)


# ----------------------------------------------------------------------
# Entrenamiento
# ----------------------------------------------------------------------

def test_episodios_retenidos():
    assert retained_episodes(250) == [0, 100, 200, 249]
    assert retained_episodes(1) == [0]


def test_entrenamiento_corto(small_params):
    rl = RlParams(x0=2000, n_dp=20, t0_ms=1500)
    config = SessionConfig(small_params, rl=rl)
    spreads = StateTable(PUBLISHED_SPREAD_BREAKPOINTS[5])
    volumes = StateTable(PUBLISHED_VOLUME_BREAKPOINTS[5])
    seen = []
    result = train_rl(config, 3, spreads, volumes, seed=1, on_episode=seen.append)
    assert not result.aborted
    assert [r.episode for r in result.results] == [0, 1, 2]
    assert seen == result.results
    assert set(result.retained) == {0, 2}
    assert len(result.q) > 0
    for r in result.results:
        assert r.trades <= rl.n_dp + 1
        assert r.inventory_left >= 0


def test_entrenamiento_determinista(small_params):
    rl = RlParams(x0=2000, n_dp=20, t0_ms=1500)
    config = SessionConfig(small_params, rl=rl)
    spreads = StateTable(PUBLISHED_SPREAD_BREAKPOINTS[5])
    volumes = StateTable(PUBLISHED_VOLUME_BREAKPOINTS[5])
    a = train_rl(config, 2, spreads, volumes, seed=5)
    b = train_rl(config, 2, spreads, volumes, seed=5)
    assert [r.total_profit for r in a.results] == [r.total_profit for r in b.results]


# ----------------------------------------------------------------------
# Grilla de sensibilidad
# ----------------------------------------------------------------------

def test_celdas_de_la_grilla():
    grid = {name: (1.0, 2.0) for name in FREE_PARAMS}
    grid['nu'] = (2.0, 3.0, 4.0)
    cells = grid_cells(grid)
    assert len(cells) == 2 ** 5 * 3
    assert cells[0] == (1.0, 1.0, 1.0, 1.0, 2.0, 1.0)


def _rows():
    return [
        {'n_c': 1, 'n_f': 1, 'hurst': 0.5, 'error': ''},
        {'n_c': 1, 'n_f': 2, 'hurst': 0.7, 'error': ''},
        {'n_c': 2, 'n_f': 1, 'hurst': 0.6, 'error': ''},
        {'n_c': 2, 'n_f': 2, 'hurst': 99.0, 'error': 'crash'},
    ]


def test_marginales_ignoran_celdas_fallidas():
    marginals = sensitivity_marginals(_rows(), 'n_c', 'hurst')
    assert marginals[1] == (pytest.approx(0.6), 2)
    assert marginals[2] == (pytest.approx(0.6), 1)


def test_superficie():
    xs, ys, surface = sensitivity_surface(_rows(), 'n_c', 'n_f', 'hurst')
    assert xs == [1, 2] and ys == [1, 2]
    assert surface[0, 0] == pytest.approx(0.5)
    assert surface[1, 0] == pytest.approx(0.7)
    assert np.isnan(surface[1, 1])


def test_grilla_igual_en_serie_y_en_procesos():
    base = AbmParams(n_lp=10, n_c=3, n_f=3, t_ms=10000)
    grid = {name: (getattr(base, name),) for name in FREE_PARAMS}
    grid['n_c'] = (3, 4)
    # sigma_f = 0.3 queda fuera de las cotas y la celda falla
    grid['sigma_f'] = (0.041, 0.3)

    serial = run_sensitivity_grid(base, grid, seed=2, jobs=1)
    parallel = run_sensitivity_grid(base, grid, seed=2, jobs=2)

    assert len(serial) == 4
    np.testing.assert_equal(serial, parallel)
    failed = [row for row in serial if row['sigma_f'] == 0.3]
    assert len(failed) == 2
    assert all(row['error'] for row in failed)
    assert all(row['error'] == '' and np.isfinite(row['hurst'])
               for row in serial if row['sigma_f'] == 0.041)


# ----------------------------------------------------------------------
# Reproducción a escala de los hechos estilizados
# ----------------------------------------------------------------------

CALIBRATED_SEEDS = list(range(1, 21))


@pytest.fixture(scope='module')
def calibrated_sessions():
    config = SessionConfig(AbmParams(), record_events=False)
    return run_replications(config, CALIBRATED_SEEDS, jobs=4)


def _returns(log):
    return micro_log_returns(log.micro_prices())


@pytest.mark.slow
def test_colas_pesadas_y_autocorrelaciones(calibrated_sessions):
    kurtosis = negative_lag1 = clustering = 0
    for log in calibrated_sessions:
        if log.crashed:
            continue
        r = _returns(log)
        kurtosis += sps.kurtosis(r) > 0
        negative_lag1 += hechos.acf(r, 1)[1] < 0
        clustering += hechos.acf(np.abs(r), 1)[1] > 0
    assert kurtosis >= 18
    assert negative_lag1 >= 18
    assert clustering >= 18


@pytest.mark.slow
def test_impacto_creciente_para_compradores_y_vendedores(calibrated_sessions):
    trades, before, after = [], [], []
    for log in calibrated_sessions:
        fills = hechos.fills_from_log(log)
        trades += [hechos.ClassifiedTrade(t.timestamp, t.price, t.volume, int(s))
                   for t, s in zip(fills.trades, fills.signs)]
        before += fills.mid_before
        after += fills.mid_after
    curves, _ = hechos.price_impact_curves(trades, before, after)
    assert hechos.impact_slope(curves['buyer']) > 0
    assert hechos.impact_slope(curves['seller']) > 0


@pytest.mark.slow
def test_profundidad_maxima_en_el_primer_nivel(calibrated_sessions):
    snapshots = [s for log in calibrated_sessions for s in log.depth]
    bids, asks = hechos.depth_profile_average(snapshots)
    assert int(np.argmax(bids)) == 0
    assert int(np.argmax(asks)) == 0


@pytest.mark.slow
def test_hurst_simulado_antipersistente(calibrated_sessions):
    values = [hurst_exponent(_returns(log)) for log in calibrated_sessions if not log.crashed]
    assert np.mean(values) < 0.5


def _learning_gap(seed):
    rl = RlParams(x0=21500, n_t=5, n_i=5, n_s=5, n_v=5, episodes=300)
    config = SessionConfig(AbmParams(), rl=rl, record_events=False)
    spreads = StateTable(PUBLISHED_SPREAD_BREAKPOINTS[5])
    volumes = StateTable(PUBLISHED_VOLUME_BREAKPOINTS[5])
    result = train_rl(config, rl.episodes, spreads, volumes, seed=1000 * seed)
    intp = np.array([r.intp for r in result.results])
    trades = np.array([r.trades for r in result.results])
    return intp[-50:].mean() - intp[:50].mean(), trades[:50].mean() - trades[-50:].mean()


@pytest.mark.slow
def test_agente_rl_mejora_con_el_entrenamiento():
    with ProcessPoolExecutor(max_workers=4) as pool:
        gaps = list(pool.map(_learning_gap, range(10)))
    intp_gain, fewer_trades = np.median(np.array(gaps), axis=0)
    assert intp_gain > 0
    assert fewer_trades > 0
