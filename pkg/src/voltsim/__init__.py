"""Neural market simulator for spot prices and discrete local volatility surfaces."""
from . import compression, copula, dlv, evaluation, flow, io, nn, simulator, synth
from .dlv import StrikeGrid

__version__ = "0.1.0"

__all__ = ["compression", "copula", "dlv", "evaluation", "flow", "io", "nn", "simulator", "synth", "StrikeGrid"]
