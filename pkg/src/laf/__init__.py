"""Learnable aggregation functions over multisets, plus the minimal
reverse-mode training stack used to fit them."""

from .ndcore import (
    DomainError,
    NonFiniteError,
    ParamStore,
    SetBatch,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    grad_check,
)
from .units import LafLayer, LafParams, Preset, format_unit, laf_forward, preset_params

__all__ = [
    "DomainError",
    "LafLayer",
    "LafParams",
    "NonFiniteError",
    "ParamStore",
    "Preset",
    "SetBatch",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "format_unit",
    "grad_check",
    "laf_forward",
    "preset_params",
]

__version__ = "0.1.0"
