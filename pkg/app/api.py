"""
API REST de resultados del simulador.

Este módulo expone endpoints HTTP de solo lectura sobre el directorio de
resultados: lista de corridas, manifiesto de cada corrida y su tabla de
momentos.
"""
import sys
import os

# Agregar el directorio raíz al path para importar módulos
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from flask import Flask, Blueprint, current_app, jsonify, request
from flask_cors import CORS
from functools import wraps
from app.services import persistencia
from config import API_KEY, OUT_DIR

app = Flask(__name__)
app.config['OUT_DIR'] = OUT_DIR
app.config['API_KEY'] = API_KEY
CORS(app)

# Crear Blueprint con prefijo /api/v1
api_v1 = Blueprint('api_v1', __name__, url_prefix='/api/v1')


def requiere_api_key(f):
    """Decorador para proteger endpoints con autenticación por API Key.

    Valida que las solicitudes incluyan un token Bearer válido en el header
    Authorization. Sin API key configurada, todo token es rechazado.

    Raises:
        HTTP 401: Si no se proporciona token o el formato es inválido.
        HTTP 403: Si el token no coincide con la API key configurada.
    """
    @wraps(f)
    def decorador(*args, **kwargs):
        auth_header = request.headers.get('Authorization')

        if not auth_header:
            return jsonify({
                'error': 'No se proporcionó token de autenticación',
                'mensaje': 'Se requiere header Authorization con Bearer token'
            }), 401

        try:
            token = auth_header.split(' ')[1] if auth_header.startswith('Bearer ') else auth_header
        except IndexError:
            return jsonify({
                'error': 'Formato de token inválido',
                'mensaje': 'Formato esperado: Bearer <token>'
            }), 401

        api_key = current_app.config.get('API_KEY')
        if api_key is None or token != api_key:
            return jsonify({
                'error': 'Token inválido',
                'mensaje': 'La API key proporcionada no es válida'
            }), 403

        return f(*args, **kwargs)

    return decorador


def _run_dir(nombre):
    """Ruta de una corrida, o None si el nombre no es un directorio válido."""
    raiz = current_app.config['OUT_DIR']
    if nombre != os.path.basename(nombre) or nombre.startswith('.'):
        return None
    ruta = os.path.join(raiz, nombre)
    return ruta if os.path.isdir(ruta) else None


@api_v1.route('/corridas', methods=['GET'])
@requiere_api_key
def listar_corridas():
    """Lista las corridas con manifiesto del directorio de resultados.

    Returns:
        tuple: (JSON response, 200).

    Example:
        {"corridas": [{"nombre": "simulate", "comando": "simulate",
                       "creado": "2024-01-01T00:00:00+00:00"}]}
    """
    raiz = current_app.config['OUT_DIR']
    corridas = []
    if os.path.isdir(raiz):
        for nombre in sorted(os.listdir(raiz)):
            ruta = os.path.join(raiz, nombre)
            if not os.path.isfile(os.path.join(ruta, persistencia.MANIFEST_NAME)):
                continue
            manifiesto = persistencia.read_manifest(ruta)
            corridas.append({
                'nombre': nombre,
                'comando': manifiesto.get('command'),
                'creado': manifiesto.get('created'),
            })
    return jsonify({'corridas': corridas}), 200


@api_v1.route('/corridas/<nombre>', methods=['GET'])
@requiere_api_key
def obtener_corrida(nombre):
    """Manifiesto completo de una corrida.

    Returns:
        tuple: (JSON response, status_code).
            - 200: Manifiesto encontrado.
            - 404: La corrida no existe o no tiene manifiesto.
    """
    ruta = _run_dir(nombre)
    if ruta is None or not os.path.isfile(os.path.join(ruta, persistencia.MANIFEST_NAME)):
        return jsonify({'error': 'Corrida no encontrada', 'nombre': nombre}), 404
    return jsonify(persistencia.read_manifest(ruta)), 200


@api_v1.route('/corridas/<nombre>/momentos', methods=['GET'])
@requiere_api_key
def obtener_momentos(nombre):
    """Filas de momentos.csv de una corrida.

    Returns:
        tuple: (JSON response, status_code).
            - 200: {"nombre": ..., "momentos": [{"serie": ..., "mean": ...}]}
            - 404: La corrida no existe o no tiene momentos.
            - 500: La tabla no se pudo leer.
    """
    ruta = _run_dir(nombre)
    archivo = os.path.join(ruta, 'momentos.csv') if ruta else None
    if archivo is None or not os.path.isfile(archivo):
        return jsonify({'error': 'Momentos no encontrados', 'nombre': nombre}), 404
    try:
        filas = persistencia.read_moments_csv(archivo)
    except (KeyError, ValueError) as e:
        return jsonify({'error': 'Tabla de momentos inválida', 'mensaje': str(e)}), 500
    # NaN no es JSON válido
    filas = [{k: (None if isinstance(v, float) and v != v else v) for k, v in fila.items()}
             for fila in filas]
    return jsonify({'nombre': nombre, 'momentos': filas}), 200


@api_v1.route('/health', methods=['GET'])
def health_check():
    """Endpoint de verificación de salud del servicio.

    Returns:
        tuple: Tupla con (JSON response, status_code 200).
            {"status": "ok"}
    """
    return jsonify({'status': 'ok'}), 200


# Registrar el Blueprint en la aplicación
app.register_blueprint(api_v1)


if __name__ == '__main__':
    port = int(os.environ.get('PORT', 5000))
    host = os.environ.get('HOST', '0.0.0.0')
    debug = os.environ.get('FLASK_DEBUG', 'False').lower() == 'true'

    print(f"Iniciando servidor API en http://{host}:{port}")
    print(f"Corridas: GET http://{host}:{port}/api/v1/corridas")
    print(f"Health check: GET http://{host}:{port}/api/v1/health")

    app.run(host=host, port=port, debug=debug)
