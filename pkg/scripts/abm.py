#!/usr/bin/env python
"""
Punto de entrada de la línea de comandos del simulador.

Ejemplos:
    python scripts/abm.py simulate --seed 7 --out resultados/sim7
    python scripts/abm.py train-rl --episodes 300
    python scripts/abm.py calibrate --data micro.csv --iters 100
"""
import sys
import os

# Agregar el directorio raíz del proyecto al path
script_dir = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(script_dir)
sys.path.insert(0, project_root)

from app.cli import dispatch


if __name__ == '__main__':
    sys.exit(dispatch())
