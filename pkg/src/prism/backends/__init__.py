from prism.backends.base import (
    BackendCapabilities,
    BackendUnavailableError,
    ContextOverflowError,
    PrefillSignals,
    PromptPlan,
    Segment,
    ShapeMismatchError,
    SignalBackend,
    TruncationResult,
)
from prism.backends.http import HttpBackend
from prism.backends.scripted import ScriptedBackend, load_scripted
from prism.backends.surrogate import SurrogateBackend

__all__ = [
    "BackendCapabilities",
    "BackendUnavailableError",
    "ContextOverflowError",
    "HttpBackend",
    "PrefillSignals",
    "PromptPlan",
    "ScriptedBackend",
    "Segment",
    "ShapeMismatchError",
    "SignalBackend",
    "SurrogateBackend",
    "TruncationResult",
    "load_scripted",
]
