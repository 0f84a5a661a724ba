import pytest

from app.api import app as flask_app
from app.services import persistencia
from app.services.momentos import MomentVector

TOKEN = 'clave-de-prueba'


@pytest.fixture
def out_dir(tmp_path):
    run = tmp_path / 'corrida1'
    run.mkdir()
    persistencia.write_moments_csv(str(run / 'momentos.csv'), [
        ('empirico', MomentVector.from_array([0.0, 1e-4, float('nan'), 0.5, 0.1, -30.0, 0.9, 3.1])),
    ])
    persistencia.write_manifest(str(run), persistencia.RunManifest('moments', ['moments'], {}, [1], 50))
    (tmp_path / 'sin_manifiesto').mkdir()
    return tmp_path


@pytest.fixture
def client(out_dir):
    flask_app.config.update(TESTING=True, OUT_DIR=str(out_dir), API_KEY=TOKEN)
    with flask_app.test_client() as client:
        yield client


def _auth():
    return {'Authorization': f'Bearer {TOKEN}'}


def test_health_es_publico(client):
    response = client.get('/api/v1/health')
    assert response.status_code == 200
    assert response.get_json() == {'status': 'ok'}


def test_sin_token(client):
    assert client.get('/api/v1/corridas').status_code == 401


def test_token_invalido(client):
    response = client.get('/api/v1/corridas', headers={'Authorization': 'Bearer otra'})
    assert response.status_code == 403


def test_sin_api_key_configurada(client):
    flask_app.config['API_KEY'] = None
    assert client.get('/api/v1/corridas', headers=_auth()).status_code == 403


def test_lista_solo_corridas_con_manifiesto(client):
    response = client.get('/api/v1/corridas', headers=_auth())
    assert response.status_code == 200
    corridas = response.get_json()['corridas']
    assert [c['nombre'] for c in corridas] == ['corrida1']
    assert corridas[0]['comando'] == 'moments'


def test_manifiesto_de_una_corrida(client):
    response = client.get('/api/v1/corridas/corrida1', headers=_auth())
    assert response.status_code == 200
    assert 'momentos.csv' in response.get_json()['files']


@pytest.mark.parametrize('nombre', ['no_existe', 'sin_manifiesto', '..'])
def test_corrida_inexistente(client, nombre):
    assert client.get(f'/api/v1/corridas/{nombre}', headers=_auth()).status_code == 404


def test_momentos_con_nan_como_null(client):
    response = client.get('/api/v1/corridas/corrida1/momentos', headers=_auth())
    assert response.status_code == 200
    fila = response.get_json()['momentos'][0]
    assert fila['serie'] == 'empirico'
    assert fila['ks'] is None
    assert fila['hill'] == pytest.approx(3.1)


def test_momentos_inexistentes(client):
    response = client.get('/api/v1/corridas/sin_manifiesto/momentos', headers=_auth())
    assert response.status_code == 404


def test_tabla_de_momentos_invalida(client, out_dir):
    (out_dir / 'corrida1' / 'momentos.csv').write_text('serie,Mean\nx,abc\n', encoding='utf-8')
    response = client.get('/api/v1/corridas/corrida1/momentos', headers=_auth())
    assert response.status_code == 500
