"""
Servicio de importación de datos TAQ (trades and quotes).

Este módulo lee archivos de texto delimitado provistos por el usuario, traduce
las columnas del proveedor al esquema canónico, filtra la sesión continua y
compacta trades y cotizaciones con el mismo timestamp. El resultado alimenta
el cálculo de momentos y de hechos estilizados.
"""
import logging
import os
from dataclasses import dataclass
from datetime import date, datetime, time, timedelta
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import pandas as pd
import pytz

from app.errores import ConfigError, EstimationError
from app.models.agentes import read_key_values

logger = logging.getLogger(__name__)

EXCHANGE_TZ = 'Africa/Johannesburg'
CANONICAL_COLUMNS = ('timestamp', 'kind', 'trade_type', 'price', 'volume',
                     'bid', 'ask', 'bid_vol', 'ask_vol')
REQUIRED_COLUMNS = ('timestamp', 'kind')

TRADE = 'Trade'
QUOTE = 'Quote'


@dataclass
class CleaningReport:
    """Conteos de cada etapa de limpieza."""
    raw: int = 0
    after_window: int = 0
    after_quotes: int = 0
    after_trades: int = 0
    zero_volume_groups: int = 0


def read_column_map(path: Optional[str]) -> Dict[str, str]:
    """Lee un mapeo columna_proveedor=columna_canónica.

    Raises:
        ConfigError: Si algún destino no es una columna canónica.
    """
    if path is None:
        return {}
    mapping = read_key_values(path)
    unknown = [dest for dest in mapping.values() if dest not in CANONICAL_COLUMNS]
    if unknown:
        raise ConfigError(f"Columnas canónicas desconocidas en {path}: {', '.join(unknown)}")
    return mapping


def read_taq(path: str, column_map: Optional[Dict[str, str]] = None,
             delimiter: str = ',', tz: str = EXCHANGE_TZ) -> pd.DataFrame:
    """Lee un archivo TAQ y lo lleva al esquema canónico.

    Los timestamps sin zona horaria se localizan en la zona de la bolsa. Los
    registros se ordenan por tiempo conservando el orden de llegada en los
    empates.

    Args:
        path (str): Archivo de texto delimitado con encabezado.
        column_map (dict): Nombre del proveedor -> nombre canónico.
        delimiter (str): Separador de columnas.
        tz (str): Zona horaria de la bolsa.

    Returns:
        pandas.DataFrame: Columnas canónicas, `kind` en {'Trade', 'Quote'}.

    Raises:
        FileNotFoundError: Si el archivo no existe.
        ConfigError: Si faltan columnas obligatorias.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    df = pd.read_csv(path, sep=delimiter, encoding='utf-8-sig')
    df = df.rename(columns=column_map or {})
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise ConfigError(f"Faltan columnas en {os.path.basename(path)}: {', '.join(missing)}")
    for column in CANONICAL_COLUMNS:
        if column not in df.columns:
            df[column] = np.nan
    df = df[list(CANONICAL_COLUMNS)].copy()

    stamps = pd.to_datetime(df['timestamp'])
    if stamps.dt.tz is None:
        stamps = stamps.dt.tz_localize(pytz.timezone(tz))
    else:
        stamps = stamps.dt.tz_convert(pytz.timezone(tz))
    df['timestamp'] = stamps
    df['kind'] = df['kind'].astype(str).str.strip().str.capitalize()
    df['trade_type'] = df['trade_type'].where(df['trade_type'].isna(),
                                              df['trade_type'].astype(str).str.strip())

    unknown = ~df['kind'].isin([TRADE, QUOTE])
    if unknown.any():
        logger.warning(f"{int(unknown.sum())} registros con tipo desconocido descartados")
        df = df[~unknown]

    df = df.sort_values('timestamp', kind='stable').reset_index(drop=True)
    logger.info(f"{len(df)} registros TAQ leídos de {os.path.basename(path)}")
    return df


def filter_window(records: pd.DataFrame, session_start: time = time(9, 0),
                  session_end: time = time(16, 50), drop_first_minutes: int = 1,
                  allowed_trade_types: Iterable[str] = ('AT',)) -> pd.DataFrame:
    """Conserva la sesión continua y los tipos de trade permitidos.

    Se descartan los primeros `drop_first_minutes` minutos. Las cotizaciones
    no se filtran por tipo.
    """
    start = (datetime.combine(date.min, session_start) + timedelta(minutes=drop_first_minutes)).time()
    clock = records['timestamp'].dt.time
    in_window = (clock >= start) & (clock <= session_end)
    allowed = set(allowed_trade_types)
    type_ok = (records['kind'] == QUOTE) | records['trade_type'].isin(allowed)
    result = records[in_window & type_ok].reset_index(drop=True)
    if result.empty:
        logger.warning("Ningún registro TAQ dentro de la ventana de sesión")
    return result


def compact_quotes(records: pd.DataFrame) -> pd.DataFrame:
    """Deja una cotización por timestamp: la última de la secuencia."""
    quotes = records['kind'] == QUOTE
    repeated = quotes & records[quotes].duplicated('timestamp', keep='last').reindex(
        records.index, fill_value=False)
    return records[~repeated].reset_index(drop=True)


def compact_trades(records: pd.DataFrame) -> Tuple[pd.DataFrame, int]:
    """Agrupa los trades con igual timestamp y tipo en un trade con volumen
    total y precio VWAP, en la posición del primero del grupo.

    Returns:
        tuple: (registros compactados, grupos descartados por volumen cero).
    """
    is_trade = records['kind'] == TRADE
    trades = records[is_trade].copy()
    if trades.empty:
        return records.reset_index(drop=True), 0
    trades['_orden'] = trades.index
    trades['_pv'] = trades['price'] * trades['volume']
    grouped = trades.groupby(['timestamp', 'trade_type'], sort=False, dropna=False)
    merged = grouped.agg(
        _orden=('_orden', 'first'), volume=('volume', 'sum'), _pv=('_pv', 'sum'),
        kind=('kind', 'first'), bid=('bid', 'first'), ask=('ask', 'first'),
        bid_vol=('bid_vol', 'first'), ask_vol=('ask_vol', 'first'),
    ).reset_index()

    zero = merged['volume'] <= 0
    if zero.any():
        logger.warning(f"{int(zero.sum())} grupos de trades con volumen cero descartados")
    merged = merged[~zero].copy()
    merged['price'] = merged['_pv'] / merged['volume']

    others = records[~is_trade].copy()
    others['_orden'] = others.index
    combined = pd.concat([others, merged[list(CANONICAL_COLUMNS) + ['_orden']]])
    combined = combined.sort_values('_orden', kind='stable').drop(columns='_orden')
    return combined[list(CANONICAL_COLUMNS)].reset_index(drop=True), int(zero.sum())


def clean_taq(records: pd.DataFrame, **window) -> Tuple[pd.DataFrame, CleaningReport]:
    """Ventana de sesión, compactación de cotizaciones y de trades."""
    report = CleaningReport(raw=len(records))
    df = filter_window(records, **window)
    report.after_window = len(df)
    df = compact_quotes(df)
    report.after_quotes = len(df)
    df, report.zero_volume_groups = compact_trades(df)
    report.after_trades = len(df)
    logger.info(
        f"Limpieza TAQ: {report.raw} -> ventana {report.after_window} -> "
        f"cotizaciones {report.after_quotes} -> trades {report.after_trades}"
    )
    return df, report


def micro_price_series(records: pd.DataFrame) -> np.ndarray:
    """Micro-precio de cada cotización con ambos lados y volumen positivo.

    Raises:
        EstimationError: Si no queda ninguna cotización utilizable.
    """
    q = records[records['kind'] == QUOTE]
    q = q.dropna(subset=['bid', 'ask', 'bid_vol', 'ask_vol'])
    q = q[(q['bid_vol'] + q['ask_vol']) > 0]
    if q.empty:
        raise EstimationError("Sin cotizaciones completas para el micro-precio")
    total = q['bid_vol'] + q['ask_vol']
    micro = q['ask_vol'] / total * q['ask'] + q['bid_vol'] / total * q['bid']
    return micro.to_numpy(dtype=float)
