import numpy as np
import pandas as pd
import pytest

from app.errores import ConfigError, EstimationError
from app.services import importador

HEADER = "timestamp,kind,trade_type,price,volume,bid,ask,bid_vol,ask_vol\n"


@pytest.fixture
def taq_file(tmp_path):
    def _write(lines, name='taq.csv', header=HEADER):
        path = tmp_path / name
        path.write_text(header + ''.join(line + '\n' for line in lines), encoding='utf-8')
        return str(path)
    return _write


def test_lectura_localiza_la_zona_horaria(taq_file):
    df = importador.read_taq(taq_file(["2019-06-03 10:00:00,trade,AT,100,10,,,,"]))
    assert str(df['timestamp'].dt.tz) == importador.EXCHANGE_TZ
    assert df['kind'].tolist() == [importador.TRADE]


def test_tipos_desconocidos_se_descartan(taq_file):
    df = importador.read_taq(taq_file([
        "2019-06-03 10:00:00,Trade,AT,100,10,,,,",
        "2019-06-03 10:00:01,Auction,,100,10,,,,",
    ]))
    assert len(df) == 1


def test_orden_estable_por_tiempo(taq_file):
    df = importador.read_taq(taq_file([
        "2019-06-03 10:00:02,Trade,AT,102,1,,,,",
        "2019-06-03 10:00:01,Trade,AT,100,1,,,,",
        "2019-06-03 10:00:01,Trade,AT,101,1,,,,",
    ]))
    assert df['price'].tolist() == [100, 101, 102]


def test_mapeo_de_columnas(taq_file, tmp_path):
    path = taq_file(["2019-06-03 10:00:00,Quote,100,101"], header="hora,tipo,compra,venta\n")
    mapping = tmp_path / 'mapa.txt'
    mapping.write_text("hora=timestamp\ntipo=kind\ncompra=bid\nventa=ask\n", encoding='utf-8')
    df = importador.read_taq(path, importador.read_column_map(str(mapping)))
    assert list(df.columns) == list(importador.CANONICAL_COLUMNS)
    assert df.loc[0, 'bid'] == 100 and np.isnan(df.loc[0, 'price'])


def test_mapeo_a_columna_desconocida(tmp_path):
    mapping = tmp_path / 'mapa.txt'
    mapping.write_text("hora=momento\n", encoding='utf-8')
    with pytest.raises(ConfigError):
        importador.read_column_map(str(mapping))


def test_faltan_columnas(taq_file):
    with pytest.raises(ConfigError):
        importador.read_taq(taq_file(["1,2"], header="precio,volumen\n"))


def test_archivo_inexistente(tmp_path):
    with pytest.raises(FileNotFoundError):
        importador.read_taq(str(tmp_path / 'no.csv'))


def test_ventana_de_sesion_y_tipos(taq_file):
    df = importador.read_taq(taq_file([
        "2019-06-03 08:59:00,Trade,AT,100,10,,,,",
        "2019-06-03 09:00:30,Trade,AT,100,10,,,,",
        "2019-06-03 09:01:00,Trade,AT,101,10,,,,",
        "2019-06-03 09:02:00,Trade,LC,101,10,,,,",
        "2019-06-03 09:03:00,Quote,,,,100,102,5,5",
        "2019-06-03 16:50:00,Trade,AT,103,10,,,,",
        "2019-06-03 16:51:00,Trade,AT,104,10,,,,",
    ]))
    window = importador.filter_window(df)
    assert window['price'].dropna().tolist() == [101, 103]
    assert (window['kind'] == importador.QUOTE).sum() == 1


def test_cotizaciones_compactadas(taq_file):
    df = importador.read_taq(taq_file([
        "2019-06-03 10:00:00,Quote,,,,100,102,5,5",
        "2019-06-03 10:00:00,Quote,,,,100,103,5,5",
        "2019-06-03 10:00:01,Quote,,,,101,103,5,5",
    ]))
    compact = importador.compact_quotes(df)
    assert compact['ask'].tolist() == [103, 103]
    assert compact['bid'].tolist() == [100, 101]


def test_trades_compactados_por_vwap(taq_file):
    df = importador.read_taq(taq_file([
        "2019-06-03 10:00:00,Quote,,,,99,121,5,5",
        "2019-06-03 10:00:01,Trade,AT,100,10,,,,",
        "2019-06-03 10:00:01,Trade,AT,120,30,,,,",
        "2019-06-03 10:00:02,Trade,AT,110,0,,,,",
    ]))
    compact, zero = importador.compact_trades(df)
    trades = compact[compact['kind'] == importador.TRADE]
    assert zero == 1
    assert trades['volume'].tolist() == [40]
    assert trades['price'].tolist() == pytest.approx([115.0])
    assert compact['kind'].tolist() == [importador.QUOTE, importador.TRADE]


def test_limpieza_completa(taq_file):
    df = importador.read_taq(taq_file([
        "2019-06-03 08:59:00,Trade,AT,100,10,,,,",
        "2019-06-03 10:00:00,Quote,,,,100,102,10,30",
        "2019-06-03 10:00:00,Quote,,,,100,104,10,10",
        "2019-06-03 10:00:01,Trade,AT,100,10,,,,",
        "2019-06-03 10:00:01,Trade,AT,120,30,,,,",
    ]))
    cleaned, report = importador.clean_taq(df)
    assert (report.raw, report.after_window, report.after_quotes, report.after_trades) == (5, 4, 3, 2)
    assert importador.micro_price_series(cleaned).tolist() == pytest.approx([102.0])


def test_micro_precio_sin_cotizaciones():
    df = pd.DataFrame({c: [] for c in importador.CANONICAL_COLUMNS})
    with pytest.raises(EstimationError):
        importador.micro_price_series(df)
