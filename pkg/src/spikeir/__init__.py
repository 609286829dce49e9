"""Spiking image restoration trained with ANN-to-SNN feature distillation."""
from .errors import (ConfigError, ContractError, DimensionError, NumericError, ParseError,
                     SpikeIRError)
from .tensor import Tape, TensorRec, backward

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "NumericError", "ParseError",
    "SpikeIRError", "Tape", "TensorRec", "backward",
]
__version__ = "0.1.0"
