"""
Simulador de mercado basado en agentes sobre un libro de órdenes límite
"""

__version__ = '1.0.0'
