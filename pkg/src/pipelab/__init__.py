"""pipelab: generate, simulate, validate and numerically execute pipeline
schedules for long-sequence transformer training."""

from .config import ConfigError, DeviceSpec, ModelConfig, device_preset
from .costs import DurationTable, component_flops
from .engine import CommModel
from .generators import (
    METHODS,
    apply_recomputation,
    gen_1f1b,
    gen_helix_naive,
    gen_helix_twofold,
    gen_zb1p,
    generate,
)
from .schedule import Schedule, Task, read_schedule, validate_schedule, write_schedule
from .simulate import simulate

__version__ = "0.1.0"

__all__ = [
    "CommModel", "ConfigError", "DeviceSpec", "DurationTable", "METHODS",
    "ModelConfig", "Schedule", "Task", "apply_recomputation", "component_flops",
    "device_preset", "gen_1f1b", "gen_helix_naive", "gen_helix_twofold",
    "gen_zb1p", "generate", "read_schedule", "simulate", "validate_schedule",
    "write_schedule",
]
