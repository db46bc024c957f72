"""Unified anatomy-aware cyclic adversarial translation between PET tracer domains."""

__version__ = "0.1.0"

from ucan.core import (  # noqa: E402
    TASKS,
    TRACERS,
    DomainLabel,
    NormRecord,
    Study,
    TrainConfig,
    TracerId,
    Volume,
    ordinal,
    tracer_from_ordinal,
)

__all__ = [
    "TASKS",
    "TRACERS",
    "DomainLabel",
    "NormRecord",
    "Study",
    "TrainConfig",
    "TracerId",
    "Volume",
    "ordinal",
    "tracer_from_ordinal",
]
