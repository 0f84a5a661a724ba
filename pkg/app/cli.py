"""
Interfaz de línea de comandos del simulador.

Subcomandos: simulate, train-rl, calibrate, sensitivity, moments, facts,
ingest y quantiles. Cada corrida escribe sus tablas en un directorio de
salida y un manifiesto con la configuración y los sha256 de los archivos.

Códigos de salida: 0 éxito, 1 error del modelo, 2 configuración inválida o
archivo inexistente (también para argumentos inválidos).
"""
import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.errores import AbmError, ConfigError
from app.models.agente_rl import RlParams, build_spread_states, build_volume_states
from app.models.agentes import FREE_PARAMS, AbmParams, read_key_values
from app.models.feed_binario import write_binary_log
from app.models.tablas_historicas import historical_best_bid_volumes, historical_spreads
from app.services import calibrador, hechos_estilizados as hechos, importador, momentos
from app.services import persistencia as pers
from app.services.simulador import (
    DEFAULT_GRID, SessionConfig, run_replications, run_sensitivity_grid, run_session,
    sensitivity_marginals, sensitivity_surface, train_rl,
)
from config import FEED_HOST, FEED_PORT, JOBS, LOG_LEVEL, OUT_DIR, TICK_MS

logger = logging.getLogger(__name__)

ACF_LAGS = 20
SIGN_ACF_LAGS = 100


def configure_logging(level: str = LOG_LEVEL) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


def _out_dir(args, default_name: str) -> str:
    path = args.out or os.path.join(OUT_DIR, default_name)
    os.makedirs(path, exist_ok=True)
    return path


def _load_params(args) -> AbmParams:
    params = AbmParams.from_file(args.config) if args.config else AbmParams().validate()
    return params


def _finish(args, out: str, config: Dict[str, object], seeds: Sequence[int]) -> None:
    manifest = pers.RunManifest(
        command=args.command, argv=list(args.argv), config=config,
        seeds=[int(s) for s in seeds], tick_ms=args.tick_ms,
    )
    pers.write_manifest(out, manifest)


def _returns_from(path: str, column: Optional[str], are_returns: bool) -> np.ndarray:
    values = pers.read_series_csv(path, column)
    return values if are_returns else momentos.micro_log_returns(values)


# ----------------------------------------------------------------------
# Subcomandos
# ----------------------------------------------------------------------

def cmd_simulate(args) -> int:
    params = _load_params(args)
    out = _out_dir(args, 'simulate')
    config = SessionConfig(
        params, tick_ms=args.tick_ms,
        feed_host=args.feed_host, feed_port=args.feed_port,
    )
    log = run_session(config, args.seed)

    if args.binary_feed:
        write_binary_log(os.path.join(out, 'eventos.bin'), log.events)
    else:
        pers.write_events_csv(os.path.join(out, 'eventos.csv'), log.events)
    pers.write_market_orders_csv(os.path.join(out, 'ordenes_mercado.csv'), log.market_orders)
    pers.write_stats_csv(os.path.join(out, 'estadisticas.csv'), log.stats)
    pers.write_depth_csv(os.path.join(out, 'profundidad.csv'), log.depth,
                         [now for now, _ in log.stats])
    params.to_file(os.path.join(out, 'parametros.txt'))
    resumen = {
        'seed': args.seed,
        'eventos': log.event_counts(),
        'eventos_inicializacion': log.init_events,
        'inicializacion_suprimidas': log.init_suppressed,
        'ordenes_por_clase': dict(sorted(log.orders_by_class.items())),
        'ordenes_suprimidas': log.suppressed,
        'eventos_descartados': log.dropped,
        'crash': log.crashed,
        'crash_ms': log.crash_ms,
    }
    with open(os.path.join(out, 'resumen.json'), 'w', encoding='utf-8') as archivo:
        json.dump(resumen, archivo, indent=2, ensure_ascii=False)

    _finish(args, out, params.to_dict(), [args.seed])
    logger.info(f"Sesión simulada: {len(log.market_orders)} órdenes de mercado, crash={log.crashed}")
    return 0


def cmd_train_rl(args) -> int:
    params = _load_params(args)
    rl = RlParams.from_file(args.rl_config) if args.rl_config else RlParams()
    episodes = args.episodes or rl.episodes
    spread_table = (pers.read_state_table_csv(args.spread_table) if args.spread_table
                    else build_spread_states(historical_spreads(), rl.n_s))
    volume_table = (pers.read_state_table_csv(args.volume_table) if args.volume_table
                    else build_volume_states(historical_best_bid_volumes(), rl.n_v))
    out = _out_dir(args, 'train-rl')

    config = SessionConfig(params, rl=rl, tick_ms=args.tick_ms)
    result = train_rl(config, episodes, spread_table, volume_table, seed=args.seed)

    pers.write_episodes_csv(os.path.join(out, 'episodios.csv'), result.results)
    pers.write_qtable_csv(os.path.join(out, 'qtable.csv'), result.q)
    pers.write_policy_csv(os.path.join(out, 'politica.csv'), result.q,
                          (rl.n_t, rl.n_i, spread_table.n_states, volume_table.n_states))
    pers.write_state_table_csv(os.path.join(out, 'estados_spread.csv'), spread_table)
    pers.write_state_table_csv(os.path.join(out, 'estados_volumen.csv'), volume_table)
    for episode, log in sorted(result.retained.items()):
        pers.write_events_csv(os.path.join(out, f'eventos_ep{episode:04d}.csv'), log.events)

    _finish(args, out, {'abm': params.to_dict(), 'rl': rl.to_dict(), 'episodes': episodes},
            [args.seed + e for e in range(len(result.results))])
    if result.aborted:
        logger.error(f"Entrenamiento interrumpido tras {len(result.results)} episodios; progreso guardado")
        return 1
    return 0


def _trace_header(dim: int) -> List[str]:
    vertex_cols = [f'v{k}_{name}' for k in range(dim + 1) for name in FREE_PARAMS]
    return ['iteration', 'kind', 'tau', 'best_f', 'spread'] + vertex_cols


def cmd_calibrate(args) -> int:
    params = _load_params(args)
    returns = _returns_from(args.data, args.column, args.returns)
    out = _out_dir(args, 'calibrate')
    options = momentos.MomentOptions(plain_hill=args.plain_hill)

    boot = momentos.moving_block_bootstrap_cov(returns, args.window, args.samples, args.seed,
                                               options=options)
    np.savetxt(os.path.join(out, 'covarianza.csv'), boot.cov, delimiter=',')
    np.savetxt(os.path.join(out, 'pesos.csv'), boot.weight.W, delimiter=',')

    trace_path = os.path.join(out, 'traza.csv')
    pers.write_table(trace_path, _trace_header(len(FREE_PARAMS)), [])

    def guardar_iteracion(row: calibrador.TraceRow) -> None:
        with open(trace_path, 'a', encoding='utf-8', newline='') as archivo:
            fila = [row.iteration, row.kind, row.tau, row.best_value, row.spread]
            archivo.write(','.join(str(v) for v in fila + row.vertices.ravel().tolist()) + '\n')

    calibrated, result = calibrador.calibrate(
        params, returns, boot.weight.W, iterations=args.iters, seed=args.seed,
        replications=args.replications, tick_ms=args.tick_ms, jobs=args.jobs, xi=args.xi,
        options=options, on_iteration=guardar_iteracion,
    )
    calibrated.to_file(os.path.join(out, 'parametros_calibrados.txt'))

    empirical = momentos.estimate_moments(returns, returns, options)
    simulated = calibrador.ModelMoments(params, returns, args.tick_ms, options)(result.best_x, 1)
    pers.write_moments_csv(os.path.join(out, 'momentos.csv'),
                           [('empirico', empirical), ('simulado', simulated)])

    if args.sensitivity:
        rows = pers.read_table(args.sensitivity)
        thetas, moments = momentos.table_to_arrays(rows, FREE_PARAMS)
        ci = momentos.confidence_intervals(thetas, moments, boot.cov, result.best_x, FREE_PARAMS)
        pers.write_table(os.path.join(out, 'intervalos.csv'), ('parametro', 'inferior', 'estimado', 'superior'),
                         ((name,) + ci.intervals[name] for name in FREE_PARAMS))
        if ci.undefined_moments:
            logger.warning(f"Momentos sin varianza en la grilla: {', '.join(ci.undefined_moments)}")

    _finish(args, out, {'base': params.to_dict(), 'calibrado': calibrated.to_dict(),
                        'data': os.path.abspath(args.data)}, [args.seed])
    logger.info(f"Calibración terminada: f={result.best_value:.6g}")
    return 0


def _read_grid(path: Optional[str]) -> Dict[str, tuple]:
    if path is None:
        return DEFAULT_GRID
    raw = read_key_values(path)
    grid = dict(DEFAULT_GRID)
    for name, values in raw.items():
        if name not in FREE_PARAMS:
            raise ConfigError(f"Parámetro de grilla desconocido: {name}")
        try:
            grid[name] = tuple(float(v) for v in values.split(','))
        except ValueError:
            raise ConfigError(f"Valores inválidos para {name}: {values!r}") from None
    return grid


def cmd_sensitivity(args) -> int:
    params = _load_params(args)
    grid = _read_grid(args.grid)
    empirical = _returns_from(args.data, args.column, args.returns) if args.data else None
    out = _out_dir(args, 'sensitivity')
    rows = run_sensitivity_grid(params, grid, args.seed, empirical, args.tick_ms, args.jobs)

    columns = list(FREE_PARAMS) + list(momentos.MOMENT_NAMES) + ['error']
    pers.write_table(os.path.join(out, 'sensibilidad.csv'), columns,
                     ([row.get(c, '') for c in columns] for row in rows))
    marginal_rows = []
    for name in FREE_PARAMS:
        for moment in momentos.MOMENT_NAMES:
            for value, (mean, count) in sensitivity_marginals(rows, name, moment).items():
                marginal_rows.append((name, value, moment, mean, count))
    pers.write_table(os.path.join(out, 'marginales.csv'),
                     ('parametro', 'valor', 'momento', 'media', 'celdas'), marginal_rows)

    # superficies por par de parámetros, en formato largo; NaN sin celdas válidas
    surface_rows = []
    for i, param_x in enumerate(FREE_PARAMS):
        for param_y in FREE_PARAMS[i + 1:]:
            for moment in momentos.MOMENT_NAMES:
                xs, ys, surface = sensitivity_surface(rows, param_x, param_y, moment)
                for j, y in enumerate(ys):
                    for k, x in enumerate(xs):
                        surface_rows.append((param_x, param_y, moment, x, y, surface[j, k]))
    pers.write_table(os.path.join(out, 'superficies.csv'),
                     ('parametro_x', 'parametro_y', 'momento', 'x', 'y', 'media'), surface_rows)

    _finish(args, out, {'base': params.to_dict(), 'grid': {k: list(v) for k, v in grid.items()}},
            [args.seed])
    return 0


def cmd_moments(args) -> int:
    returns = _returns_from(args.data, args.column, args.returns)
    empirical = (_returns_from(args.empirical, args.column, args.returns)
                 if args.empirical else None)
    options = momentos.MomentOptions(plain_hill=args.plain_hill)
    out = _out_dir(args, 'moments')

    rows = [('serie', momentos.estimate_moments(returns, empirical, options))]
    if empirical is not None:
        rows.append(('empirico', momentos.estimate_moments(empirical, empirical, options)))
    pers.write_moments_csv(os.path.join(out, 'momentos.csv'), rows)

    if args.bootstrap:
        boot = momentos.moving_block_bootstrap_cov(returns, args.window, args.samples, args.seed,
                                                   options=options)
        np.savetxt(os.path.join(out, 'covarianza.csv'), boot.cov, delimiter=',')
        np.savetxt(os.path.join(out, 'pesos.csv'), boot.weight.W, delimiter=',')

    _finish(args, out, {'data': os.path.abspath(args.data), 'plain_hill': args.plain_hill,
                        'bootstrap': args.bootstrap}, [args.seed])
    return 0


def cmd_facts(args) -> int:
    session = args.session
    out = _out_dir(args, 'facts')
    orders_path = os.path.join(session, 'ordenes_mercado.csv')
    fills = pers.read_session_fills(orders_path)
    returns = momentos.micro_log_returns(pers.read_micro_prices(orders_path))

    lags = range(ACF_LAGS + 1)
    pers.write_table(os.path.join(out, 'acf_retornos.csv'), ('lag', 'acf'),
                     zip(lags, hechos.acf(returns, ACF_LAGS)))
    pers.write_table(os.path.join(out, 'acf_abs_retornos.csv'), ('lag', 'acf'),
                     zip(lags, hechos.acf(np.abs(returns), ACF_LAGS)))

    classified, dropped = hechos.lee_ready_classify(fills.trades, fills.quotes, aligned=True)
    signs = [t.sign for t in classified]
    max_lag = min(SIGN_ACF_LAGS, len(signs) - 1)
    rho, alpha_signs = hechos.trade_sign_acf_tail(signs, max_lag)
    pers.write_table(os.path.join(out, 'acf_signos.csv'), ('lag', 'acf'), enumerate(rho))

    # con descartes la clasificación deja de estar alineada con los mids
    if dropped == 0:
        curves, _ = hechos.price_impact_curves(classified, fills.mid_before, fills.mid_after)
    else:
        truth = [hechos.ClassifiedTrade(t.timestamp, t.price, t.volume, int(s))
                 for t, s in zip(fills.trades, fills.signs)]
        curves, _ = hechos.price_impact_curves(truth, fills.mid_before, fills.mid_after)
    impact_rows = []
    for name, curve in curves.items():
        for b in range(hechos.IMPACT_BINS):
            impact_rows.append((name, b, curve.omega[b], curve.impact[b], int(curve.counts[b])))
    pers.write_table(os.path.join(out, 'impacto.csv'), ('curva', 'bin', 'omega', 'impacto', 'trades'),
                     impact_rows)

    bids, asks = hechos.depth_profile_average(pers.read_depth_csv(os.path.join(session, 'profundidad.csv')))
    pers.write_table(os.path.join(out, 'profundidad_promedio.csv'), ('nivel', 'bid', 'ask'),
                     zip(range(1, len(bids) + 1), bids, asks))

    tails = hechos.extreme_tails(returns)
    pers.write_table(os.path.join(out, 'colas.csv'), ('cola', 'n', 'alpha'), [
        ('superior', tails.upper.size, tails.alpha_upper),
        ('inferior', tails.lower.size, tails.alpha_lower),
        ('signos_acf', len(rho) - 1, alpha_signs),
    ])

    agreement = hechos.classifier_agreement(signs, fills.signs) if dropped == 0 else float('nan')
    logger.info(f"Lee-Ready coincide con el agresor en {agreement:.3%} de los trades")
    _finish(args, out, {'session': os.path.abspath(session), 'lee_ready_descartados': dropped,
                        'lee_ready_coincidencia': agreement}, [])
    return 0


def cmd_ingest(args) -> int:
    column_map = importador.read_column_map(args.map)
    records = importador.read_taq(args.input, column_map, args.delimiter, args.tz)
    cleaned, report = importador.clean_taq(
        records, allowed_trade_types=tuple(args.trade_types.split(',')),
        drop_first_minutes=args.drop_minutes,
    )
    # --out es el archivo limpio; por defecto <OUT_DIR>/ingest/<nombre>_limpio.csv
    target = args.out or os.path.join(
        OUT_DIR, 'ingest', os.path.splitext(os.path.basename(args.input))[0] + '_limpio.csv')
    out_dir = os.path.dirname(os.path.abspath(target))
    os.makedirs(out_dir, exist_ok=True)
    cleaned.to_csv(target, index=False)
    stem, _ = os.path.splitext(target)
    micro = importador.micro_price_series(cleaned)
    pers.write_series_csv(f'{stem}_micro.csv', 'micro', micro)
    args.tick_ms = 0
    _finish(args, out_dir, {'input': os.path.abspath(args.input), 'map': args.map,
                            'reporte': vars(report)}, [])
    return 0


def cmd_quantiles(args) -> int:
    params = _load_params(args)
    out = _out_dir(args, 'quantiles')
    seeds = list(range(args.seed, args.seed + args.runs))
    config = SessionConfig(params, tick_ms=args.tick_ms, record_events=False)
    logs = run_replications(config, seeds, args.jobs)

    spreads, volumes = [], []
    for log in logs:
        for _now, stats in log.stats:
            if stats.spread is not None:
                spreads.append(stats.spread)
            if stats.best_bid is not None:
                volumes.append(stats.best_bid_volume)
    spread_table = build_spread_states(spreads, args.states)
    volume_table = build_volume_states(volumes, args.states)
    pers.write_state_table_csv(os.path.join(out, 'estados_spread.csv'), spread_table)
    pers.write_state_table_csv(os.path.join(out, 'estados_volumen.csv'), volume_table)
    _finish(args, out, {'abm': params.to_dict(), 'runs': args.runs, 'states': args.states}, seeds)
    return 0


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='abm', description='Simulador de mercado basado en agentes')
    sub = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='parámetros del modelo (clave=valor)')
    common.add_argument('--seed', type=int, default=1)
    common.add_argument('--out', help='directorio de salida')
    common.add_argument('--jobs', type=int, default=JOBS)
    common.add_argument('--tick-ms', type=int, default=TICK_MS)
    common.add_argument('--log-level', default=LOG_LEVEL)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument('--column', help='columna de la serie (por defecto la primera)')
    data.add_argument('--returns', action='store_true', help='la serie ya son log-retornos')
    data.add_argument('--plain-hill', action='store_true')

    boot = argparse.ArgumentParser(add_help=False)
    boot.add_argument('--window', type=int, default=2000)
    boot.add_argument('--samples', type=int, default=1000)

    p = sub.add_parser('simulate', parents=[common])
    p.add_argument('--feed-host', default=FEED_HOST)
    p.add_argument('--feed-port', type=int, default=FEED_PORT)
    p.add_argument('--binary-feed', action='store_true')
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('train-rl', parents=[common])
    p.add_argument('--rl-config')
    p.add_argument('--episodes', type=int)
    p.add_argument('--spread-table')
    p.add_argument('--volume-table')
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser('calibrate', parents=[common, data, boot])
    p.add_argument('--data', required=True, help='micro-precios o retornos empíricos (CSV)')
    p.add_argument('--iters', type=int, default=100)
    p.add_argument('--replications', type=int, default=5)
    p.add_argument('--xi', type=float, default=0.1)
    p.add_argument('--sensitivity', help='tabla de sensibilidad para los intervalos')
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser('sensitivity', parents=[common, data])
    p.add_argument('--grid', help='archivo parametro=v1,v2,...')
    p.add_argument('--data', help='serie empírica para KS')
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser('moments', parents=[common, data, boot])
    p.add_argument('--data', required=True)
    p.add_argument('--empirical')
    p.add_argument('--bootstrap', action='store_true')
    p.set_defaults(func=cmd_moments)

    p = sub.add_parser('facts', parents=[common])
    p.add_argument('--session', required=True, help='directorio de salida de simulate')
    p.set_defaults(func=cmd_facts)

    p = sub.add_parser('ingest', parents=[common])
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--map', help='mapeo de columnas (proveedor=canónica)')
    p.add_argument('--delimiter', default=',')
    p.add_argument('--tz', default=importador.EXCHANGE_TZ)
    p.add_argument('--trade-types', default='AT')
    p.add_argument('--drop-minutes', type=int, default=1)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser('quantiles', parents=[common])
    p.add_argument('--runs', type=int, default=365)
    p.add_argument('--states', type=int, default=5)
    p.set_defaults(func=cmd_quantiles)

    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Ejecuta un subcomando y devuelve el código de salida."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    configure_logging(args.log_level)

    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        logger.error(f"Configuración inválida: {e}")
        return 2
    except AbmError as e:
        logger.error(f"Error en {args.command}: {e}")
        return 1


def main() -> None:
    sys.exit(dispatch())
