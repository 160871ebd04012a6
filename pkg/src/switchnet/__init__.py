"""Simulation and analysis of discrete-time switched queueing networks."""

from .network import (
    ArrivalStream,
    ConstraintRow,
    NetworkSpec,
    Schedule,
    ScheduleExplosionError,
    ScheduleSet,
    enumerate_maximal_schedules,
    scale_schedule_set,
    validate_spec,
)
from .policy import PolicyConfig, max_weight_schedule

__all__ = [
    "ArrivalStream",
    "ConstraintRow",
    "NetworkSpec",
    "PolicyConfig",
    "Schedule",
    "ScheduleExplosionError",
    "ScheduleSet",
    "enumerate_maximal_schedules",
    "max_weight_schedule",
    "scale_schedule_set",
    "validate_spec",
]

__version__ = "0.1.0"
