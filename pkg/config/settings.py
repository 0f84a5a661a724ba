"""
Configuración centralizada del proyecto.

Este módulo carga y expone las variables de configuración del simulador:
directorio de resultados, nivel de logging, reloj virtual, feed binario
opcional y autenticación de la API de resultados.
"""
import os
from dotenv import load_dotenv

load_dotenv()

OUT_DIR = os.environ.get('ABM_OUT_DIR', 'resultados')

LOG_LEVEL = os.environ.get('ABM_LOG_LEVEL', 'INFO').upper()

TICK_MS = int(os.environ.get('ABM_TICK_MS', 50))

JOBS = int(os.environ.get('ABM_JOBS', 1))

FEED_HOST = os.environ.get('ABM_FEED_HOST', '127.0.0.1')
FEED_PORT = int(os.environ.get('ABM_FEED_PORT', 0))

CHANNEL_CAPACITY = int(os.environ.get('ABM_CHANNEL_CAPACITY', 65536))

api_key_raw = os.environ.get('API_KEY')
API_KEY = api_key_raw.strip("'\"") if api_key_raw else None
