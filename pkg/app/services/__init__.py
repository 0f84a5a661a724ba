"""
Servicios de simulación, estimación, calibración e importación de datos
"""
from .simulador import SessionConfig, run_session, train_rl
from .momentos import MomentVector, estimate_moments

__all__ = ['SessionConfig', 'run_session', 'train_rl', 'MomentVector', 'estimate_moments']
