"""Failure attribution for multi-agent execution traces from prefill-stage signals."""

__version__ = "0.1.0"

from prism.model import Annotations, DiagnosisConfig, Step, Trace, validate_trace

__all__ = [
    "Annotations",
    "DiagnosisConfig",
    "Step",
    "Trace",
    "validate_trace",
    "__version__",
]
