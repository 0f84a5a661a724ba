import itertools

import numpy as np
import pytest
from scipy.stats import chisquare

from app.errores import EstimationError
from app.models.agente_rl import (
    ACTIONS, FORCED_ACTION, QTable, RlAgent, RlParams, StateKey, StateTable,
    build_spread_states, build_volume_states, convergence_metrics,
    epsilon_greedy, epsilon_schedule, get_state, q_update, rl_configurations,
)
from app.models.libro_ordenes import BookStats, EventKind, MarketEvent, Side
from app.models.tablas_historicas import (
    PUBLISHED_SPREAD_BREAKPOINTS, PUBLISHED_VOLUME_BREAKPOINTS,
    historical_best_bid_volumes, historical_spreads,
)

S = StateKey(5, 5, 1, 2)
S2 = StateKey(4, 5, 1, 2)


def _stats(spread=2, bid_volume=100):
    return BookStats(
        best_bid=10000, best_ask=10000 + spread, mid=10000 + spread / 2,
        micro=10000.0, spread=spread, imbalance=0.0, bid_depth=500, ask_depth=500,
        best_bid_volume=bid_volume, best_ask_volume=100,
    )


# ----------------------------------------------------------------------
# Tablas de estados
# ----------------------------------------------------------------------

@pytest.mark.parametrize('n', [5, 10])
def test_cortes_de_spread_publicados(n):
    table = build_spread_states(historical_spreads(), n)
    assert table.breakpoints == PUBLISHED_SPREAD_BREAKPOINTS[n]
    assert table.n_states == n
    assert table.probabilities[0] == pytest.approx(0.6)
    assert sum(table.probabilities) == pytest.approx(1.0)


@pytest.mark.parametrize('n', [5, 10])
def test_cortes_de_volumen_publicados(n):
    table = build_volume_states(historical_best_bid_volumes(), n)
    assert table.breakpoints == PUBLISHED_VOLUME_BREAKPOINTS[n]


def test_spread_uniforme_con_masa_en_uno():
    rng = np.random.default_rng(11)
    data = np.concatenate([np.ones(6000), rng.integers(2, 101, size=4000)])
    table = build_spread_states(data, 5)
    assert table.breakpoints[0] == 1
    assert all(a < b for a, b in zip(table.breakpoints, table.breakpoints[1:]))
    assert table.breakpoints[-1] < data.max()


def test_spreads_degenerados():
    with pytest.raises(EstimationError):
        build_spread_states(np.ones(100), 5)


def test_volumenes_constantes():
    with pytest.raises(EstimationError):
        build_volume_states(np.full(100, 7), 5)


def test_estado_de_volumen():
    table = StateTable(PUBLISHED_VOLUME_BREAKPOINTS[5])
    assert table.state_of(100) == 2
    assert table.state_of(31) == 1
    assert table.state_of(10**6) == 5


def test_get_state_en_el_inicio():
    params = RlParams()
    spreads = StateTable(PUBLISHED_SPREAD_BREAKPOINTS[5])
    volumes = StateTable(PUBLISHED_VOLUME_BREAKPOINTS[5])
    state = get_state(params.t0_ms, params.x0, _stats(spread=1), spreads, volumes, params)
    assert state == StateKey(5, 5, 1, 2)


def test_get_state_techo_del_tiempo():
    params = RlParams()
    spreads = StateTable(PUBLISHED_SPREAD_BREAKPOINTS[10])
    volumes = StateTable(PUBLISHED_VOLUME_BREAKPOINTS[5])
    state = get_state(0.3 * params.t0_ms, 1, _stats(spread=1), spreads, volumes, params)
    assert state.t == 2
    assert state.i == 1
    assert state.s == 1


# ----------------------------------------------------------------------
# Exploración y aprendizaje
# ----------------------------------------------------------------------

@pytest.mark.parametrize('episode, esperado', [(0, 1.0), (200, 0.9), (600, 0.1), (750, 0.01), (999, 0.01)])
def test_decaimiento_de_epsilon(episode, esperado):
    assert epsilon_schedule(episode) == pytest.approx(esperado)


def test_decaimiento_escalado():
    assert epsilon_schedule(60, total_episodes=100) == pytest.approx(0.1)


def test_epsilon_cero_es_greedy():
    q = QTable()
    q.set_row(S, [0, 0, 0, 5, 0, 0, 0, 0, 0])
    assert all(epsilon_greedy(q, S, 0.0, u) == 3 for u in np.linspace(0, 0.999, 50))


def test_epsilon_uno_es_uniforme():
    q = QTable()
    q.set_row(S, [0, 0, 0, 5, 0, 0, 0, 0, 0])
    rng = np.random.default_rng(5)
    draws = [epsilon_greedy(q, S, 1.0, rng.random()) for _ in range(10_000)]
    counts = np.bincount(draws, minlength=len(ACTIONS))
    assert chisquare(counts).pvalue > 0.01


def test_epsilon_medio():
    q = QTable()
    q.set_row(S, [0, 1, 0, 0, 0, 0, 0, 0, 0])
    rng = np.random.default_rng(6)
    draws = np.array([epsilon_greedy(q, S, 0.5, rng.random()) for _ in range(10_000)])
    assert np.mean(draws == 1) == pytest.approx(0.5 + 0.5 / 9, abs=0.015)


def test_empate_va_al_menor_indice():
    q = QTable()
    q.set_row(S, [0, 2, 2, 0, 0, 0, 0, 0, 0])
    assert q.greedy_action(S) == 1
    assert q.greedy_action(S2) == -1


def test_q_update_a_mano():
    params = RlParams(learn_rate=0.1)
    q = QTable()
    q.visit(S)
    assert q_update(q, S, 0, 10.0, S2, False, params) == pytest.approx(1.0)

    q.set_row(S2, [5, 0, 0, 0, 0, 0, 0, 0, 0])
    assert q_update(q, S2, 0, 3.0, None, True, params) == pytest.approx(4.8)

    before = q.values(S).copy()
    q_update(q, S, 0, 100.0, S2, False, params, learn_rate=0.0)
    assert np.array_equal(q.values(S), before)


def test_q_update_usa_el_maximo_siguiente():
    params = RlParams(learn_rate=0.5, gamma=1.0)
    q = QTable()
    q.set_row(S, np.zeros(9))
    q.set_row(S2, [0, 4, 0, 0, 0, 0, 0, 0, 0])
    assert q_update(q, S, 2, 2.0, S2, False, params) == pytest.approx(3.0)


def test_metricas_de_convergencia():
    prev = QTable()
    prev.set_row(S, [1, 0, 0, 0, 0, 0, 0, 0, 0])
    curr = prev.copy()
    assert convergence_metrics(prev, curr) == (0.0, 0.0)

    curr.values(S)[2] = 9.0
    q_delta, policy_delta = convergence_metrics(prev, curr)
    assert q_delta == pytest.approx(1.0)
    assert policy_delta == 1.0
    assert convergence_metrics(QTable(), curr) == (0.0, 0.0)


def test_mdp_de_juguete_converge():
    """Dos estados en cadena; la acción 8 paga 1 y las demás 0."""
    params = RlParams(learn_rate=0.2, gamma=1.0)
    q = QTable()
    rng = np.random.default_rng(9)
    for _ in range(2000):
        a = epsilon_greedy(q, S, 0.3, rng.random())
        q.visit(S)
        q_update(q, S, a, 1.0 if a == 8 else 0.0, S2, False, params)
        b = epsilon_greedy(q, S2, 0.3, rng.random())
        q.visit(S2)
        q_update(q, S2, b, 1.0 if b == 8 else 0.0, None, True, params)
    assert q.greedy_action(S) == 8
    assert q.greedy_action(S2) == 8
    assert q.values(S)[8] == pytest.approx(2.0, abs=0.1)


# ----------------------------------------------------------------------
# Agente
# ----------------------------------------------------------------------

def _agent(params=None, q=None, epsilon=0.0):
    return RlAgent(
        agent_id=99, params=params or RlParams(), q=q or QTable(),
        spread_table=StateTable(PUBLISHED_SPREAD_BREAKPOINTS[5]),
        volume_table=StateTable(PUBLISHED_VOLUME_BREAKPOINTS[5]),
        epsilon=epsilon,
    )


def _fill(order, volume, price=10000):
    return MarketEvent(1, 0, EventKind.TRADE, 500, 1, Side.BID, price, volume, 0, order.id)


def test_volumen_por_accion():
    params = RlParams()
    assert params.action_volume(6) == 150
    assert params.action_volume(0) == 0
    assert ACTIONS[FORCED_ACTION] == 2.0


def test_configuraciones_de_entrenamiento():
    configs = rl_configurations(episodes=10)
    assert len(configs) == 6
    assert {c.x0 for c in configs} == {21500, 43000, 86000}


def test_agente_vende_segun_la_politica():
    params = RlParams()
    q = QTable()
    state = StateKey(5, 5, 2, 2)
    row = np.zeros(9)
    row[6] = 1.0
    q.set_row(state, row)
    agent = _agent(params, q)
    order = agent.rl_agent_action(_stats(), [], 0, np.random.default_rng(1), itertools.count(1), lambda o: True)
    assert order.side is Side.ASK
    assert order.volume == 150
    assert agent.owns(order.id)


def test_agente_procesa_ejecuciones_y_aprende():
    params = RlParams()
    agent = _agent(params, epsilon=0.0)
    ids = itertools.count(1)
    rng = np.random.default_rng(1)
    first = agent.rl_agent_action(_stats(), [], 0, rng, ids, lambda o: True)
    # en un estado sin visitar epsilon_greedy es uniforme; puede ser la acción 0
    fills = [_fill(first, first.volume, 10000)] if first is not None else []
    agent.rl_agent_action(_stats(), fills, 10, rng, ids, lambda o: True)
    filled = first.volume if first is not None else 0
    assert agent.inventory == params.x0 - filled
    assert agent.total_profit == 10000 * filled


def test_agente_sin_inventario_no_opera():
    agent = _agent()
    agent.inventory = 0
    assert agent.rl_agent_action(_stats(), [], 0, np.random.default_rng(1),
                                 itertools.count(1), lambda o: True) is None


def test_accion_forzada_al_final():
    params = RlParams(x0=43000, n_dp=430)
    agent = _agent(params)
    agent.inventory = 120
    order = agent.rl_agent_action(_stats(), [], params.t0_ms, np.random.default_rng(1),
                                  itertools.count(1), lambda o: True)
    assert order.volume == 120


def test_presupuesto_agotado_antes_de_t0_no_opera():
    params = RlParams(x0=1000, n_dp=10, t0_ms=10000)
    agent = _agent(params)
    ids = itertools.count(1)
    rng = np.random.default_rng(1)
    orders = [agent.rl_agent_action(_stats(), [], now, rng, ids, lambda o: True)
              for now in range(100, 1600, 100)]
    assert agent.decisions == params.n_dp
    # las cinco llamadas posteriores al presupuesto esperan a T0
    assert orders[10:] == [None] * 5
    assert all(o is None or o.volume <= params.child_volume * 2 for o in orders[:10])
    trades_before = agent.trades

    forced = agent.rl_agent_action(_stats(), [], params.t0_ms, rng, ids, lambda o: True)
    assert forced.volume == min(params.action_volume(FORCED_ACTION), agent.inventory)
    assert agent.trades == trades_before + 1
    assert agent.trades <= params.n_dp + 1


def test_orden_suprimida_no_cuenta():
    agent = _agent()
    agent.inventory = 120
    order = agent.rl_agent_action(_stats(), [], agent.params.t0_ms, np.random.default_rng(1),
                                  itertools.count(1), lambda o: False)
    assert order is None
    assert agent.trades == 0


def test_cierre_del_episodio():
    params = RlParams()
    agent = _agent(params)
    agent.inventory = 200
    ids = itertools.count(1)
    order = agent.rl_agent_action(_stats(), [], params.t0_ms, np.random.default_rng(1), ids, lambda o: True)
    result = agent.finish([_fill(order, 200, 9990)], episode=3, m0=10000)
    assert result.episode == 3
    assert result.inventory_left == 0
    assert result.total_profit == 200 * 9990
    assert result.intp == pytest.approx(200 * 9990 / params.x0)
    assert result.trades <= params.n_dp + 1


def test_archivo_de_configuracion(tmp_path):
    path = tmp_path / 'rl.txt'
    RlParams(x0=21500, n_t=10).to_file(str(path))
    params = RlParams.from_file(str(path))
    assert params.x0 == 21500 and params.n_t == 10
