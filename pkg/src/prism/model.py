"""Shared domain types for traces, annotations, and pipeline configuration.

All types are immutable after construction and safe to share across
concurrent workers. Step indices are 0-based everywhere inside the engine;
human-facing renderings and report documents additionally carry 1-based
numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

SOURCE_FORMATS = ("whowhen", "openinference", "synthetic")

# "error" and "exception" are the canonical markers; the rest extend coverage
# to common agent/tool failure text. The active list is echoed in every report.
DEFAULT_FAILURE_KEYWORDS = (
    "error",
    "exception",
    "fail",
    "failed",
    "traceback",
    "invalid",
    "timeout",
)


@dataclass(frozen=True)
class Step:
    """One serialized agent operation (action, message, or tool observation)."""

    index: int
    agent: str
    role: str
    content: str
    span_id: str | None = None
    # Set when an oversized attribute payload was hard-capped at ingest.
    truncated_at_ingest: bool = False


@dataclass(frozen=True)
class Annotations:
    """Ground-truth failure annotations; step-level and span-level views."""

    root_cause_step: int | None = None
    error_spans: frozenset[str] | None = None
    root_cause_agent: str | None = None


@dataclass(frozen=True)
class Trace:
    """An ordered multi-agent execution trace plus the originating user query."""

    trace_id: str
    query: str
    steps: tuple[Step, ...]
    annotations: Annotations | None = None
    source_format: str = "synthetic"

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class DiagnosisConfig:
    """All pipeline hyperparameters.

    Defaults follow the fixed setting used throughout: candidate_k=5,
    consensus_lambda=0.3, layer_fraction=0.2, top_m_for_consensus=5,
    max_submissions=10. symptom_ratio is the only per-benchmark knob:
    0.2 for single-root-cause (whowhen-style) data, 0.5 for multi-span
    (trail-style) data.
    """

    symptom_ratio: float = 0.2
    candidate_k: int = 5
    consensus_lambda: float = 0.3
    filtering_budget_mode: str = "context_derived"
    filtering_budget_tokens: int = 64
    compressed_prefix_tokens: int = 16
    layer_fraction: float = 0.2
    failure_keywords: tuple[str, ...] = DEFAULT_FAILURE_KEYWORDS
    top_m_for_consensus: int = 5
    max_submissions: int = 10

    def __post_init__(self) -> None:
        if not 0.0 < self.symptom_ratio <= 1.0:
            raise ValueError(f"symptom_ratio must be in (0, 1], got {self.symptom_ratio}")
        if self.candidate_k < 1:
            raise ValueError("candidate_k must be positive")
        if self.consensus_lambda < 0:
            raise ValueError("consensus_lambda must be non-negative")
        if self.filtering_budget_mode not in ("fixed", "context_derived"):
            raise ValueError(f"unknown filtering_budget_mode {self.filtering_budget_mode!r}")
        if self.filtering_budget_tokens < 1:
            raise ValueError("filtering_budget_tokens must be positive")
        if self.compressed_prefix_tokens < 1:
            raise ValueError("compressed_prefix_tokens must be positive")
        if not 0.0 < self.layer_fraction <= 1.0:
            raise ValueError(f"layer_fraction must be in (0, 1], got {self.layer_fraction}")
        if self.top_m_for_consensus < 1:
            raise ValueError("top_m_for_consensus must be positive")
        if self.max_submissions < 1:
            raise ValueError("max_submissions must be positive")
        object.__setattr__(
            self, "failure_keywords", tuple(k.lower() for k in self.failure_keywords)
        )

    @classmethod
    def preset(cls, name: str, **overrides) -> "DiagnosisConfig":
        """Named presets differing only in symptom_ratio (0.2 vs 0.5)."""
        ratios = {"whowhen": 0.2, "trail": 0.5}
        if name not in ratios:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(ratios)}")
        overrides.setdefault("symptom_ratio", ratios[name])
        return cls(**overrides)

    def to_echo(self) -> dict:
        """Serializable snapshot of every hyperparameter, for report documents."""
        echo = {}
        for f in fields(self):
            value = getattr(self, f.name)
            echo[f.name] = list(value) if isinstance(value, tuple) else value
        return echo


def symptom_count(ratio: float, n_steps: int) -> int:
    """Number of symptom steps: max(1, ceil(ratio * N)).

    The small epsilon guards against float products landing a hair above an
    exact integer (e.g. 0.2 * 5), which would otherwise inflate the ceiling.
    """
    return max(1, math.ceil(ratio * n_steps - 1e-9))


def validate_trace(trace: Trace) -> list[str]:
    """Checks every Trace/Step/Annotations invariant.

    Returns an empty list iff the trace is well formed; otherwise one entry
    per violation naming the offending step index or field. Violations are
    data, not errors: this function never raises on bad content.
    """
    violations: list[str] = []
    if not trace.steps:
        violations.append("steps: trace has no steps")
        return violations

    seen: set[int] = set()
    for position, step in enumerate(trace.steps):
        if step.index in seen:
            violations.append(f"steps: duplicate step index {step.index} at position {position}")
        elif step.index != position:
            violations.append(
                f"steps: step index {step.index} at position {position}, expected {position}"
            )
        seen.add(step.index)
        if not isinstance(step.content, str):
            violations.append(f"steps[{step.index}].content: must be a string, may not be absent")

    if trace.source_format not in SOURCE_FORMATS:
        violations.append(f"source_format: unknown value {trace.source_format!r}")

    ann = trace.annotations
    if ann is not None:
        has_step = ann.root_cause_step is not None
        has_spans = bool(ann.error_spans)
        if not has_step and not has_spans:
            violations.append("annotations: neither root_cause_step nor error_spans present")
        if has_step and not 0 <= ann.root_cause_step < len(trace.steps):
            violations.append(
                f"annotations.root_cause_step: {ann.root_cause_step} outside "
                f"[0, {len(trace.steps) - 1}]"
            )
        if has_spans:
            known = {s.span_id for s in trace.steps if s.span_id is not None}
            for span in sorted(ann.error_spans):
                if span not in known:
                    violations.append(
                        f"annotations.error_spans: span {span!r} not present in any step"
                    )
    return violations
