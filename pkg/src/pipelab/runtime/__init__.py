"""Toy numeric runtime: executes schedules on a real (tiny) transformer.

float64 end to end with a fixed summation order, so any correctly formed
schedule reproduces the sequential reference bit for bit; see executor.py.
"""

from .executor import (
    ExecutionError,
    PayloadMismatch,
    RunResult,
    StalledSchedule,
    execute_schedule,
)
from .layers import LayerParams, payload_elements
from .model import (
    OracleResult,
    loss_and_grad,
    make_inputs,
    make_layer_params,
    make_model,
    sequential_oracle,
)
from .tensorio import read_tensors, write_tensors

__all__ = [
    "ExecutionError",
    "PayloadMismatch",
    "RunResult",
    "StalledSchedule",
    "execute_schedule",
    "LayerParams",
    "payload_elements",
    "OracleResult",
    "loss_and_grad",
    "make_inputs",
    "make_layer_params",
    "make_model",
    "sequential_oracle",
    "read_tensors",
    "write_tensors",
]
