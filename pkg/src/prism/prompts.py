"""Prompt construction for the two prefill passes.

The filtering prompt gives every step an equal token budget so the whole
trace fits in one context window; the diagnosis prompt restores the symptom
and candidate steps in full and compresses everything else to a brief
prefix. Both prompts open with a frozen system text and the user query;
signal values are text-sensitive, so these strings are the single source of
truth and must not drift.
"""

from __future__ import annotations

from dataclasses import dataclass

from prism.backends.base import (
    OMISSION_MARKER,
    ContextOverflowError,
    PromptPlan,
    Segment,
    SignalBackend,
)
from prism.ingest import render_step
from prism.model import DiagnosisConfig, Trace

FILTERING_SYSTEM_TEXT = (
    "[System] This trace has been truncated. Each step shows a bounded prefix "
    "of key content. [...] marks omitted text. Focus on error patterns and "
    "causal chains. Omissions are expected."
)

DIAGNOSIS_SYSTEM_TEXT = (
    "[System] This execution trace has been reconstructed. Key steps retain "
    "full content; other steps are compressed with [...] placeholders. Analyze "
    "which earlier step or location is most responsible for the observed failure."
)

NOTE_TEXT = (
    "[Note]: The next step shows anomalous behavior. Trace backward to "
    "identify which earlier step caused it."
)

QUERY_TEMPLATE = "User Query: {query}"

MIN_STEP_BUDGET = 8
MAX_STEP_BUDGET = 64
DEFAULT_CONTEXT_MARGIN = 0.9
# Cap applied to restored steps when full restoration overflows the context.
RESTORATION_CAP_TOKENS = 512


@dataclass(frozen=True)
class BudgetPlan:
    """Per-step token budget for the filtering prompt."""

    mode: str = "context_derived"
    per_step_budget: int = MAX_STEP_BUDGET
    context_margin: float = DEFAULT_CONTEXT_MARGIN

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "context_derived"):
            raise ValueError(f"unknown budget mode {self.mode!r}")
        if self.per_step_budget < 1:
            raise ValueError("per_step_budget must be positive")

    def resolve(self, context_limit: int, n_steps: int) -> int:
        if self.mode == "fixed":
            return self.per_step_budget
        derived = int(self.context_margin * context_limit / n_steps)
        return max(MIN_STEP_BUDGET, min(MAX_STEP_BUDGET, derived))

    @classmethod
    def from_config(cls, config: DiagnosisConfig) -> "BudgetPlan":
        if config.filtering_budget_mode == "fixed":
            return cls(mode="fixed", per_step_budget=config.filtering_budget_tokens)
        return cls(mode="context_derived")


def _step_segment(step, body: str) -> Segment:
    rendered = render_step(step)
    text = rendered.header if body == "" else f"{rendered.header}\n{body}"
    return Segment(kind="step_text", text=text, step_index=step.index)


def _preamble(system_text: str, trace: Trace) -> list[Segment]:
    return [
        Segment(kind="system", text=system_text),
        Segment(kind="system", text=QUERY_TEMPLATE.format(query=trace.query)),
    ]


def build_filtering_prompt(
    trace: Trace, budget: BudgetPlan, backend: SignalBackend
) -> PromptPlan:
    """Uniformly truncated prompt for the first prefill pass.

    Every step body is cut to the per-step budget at a token boundary, with
    an omission marker segment exactly when content was dropped. If the
    prompt still overflows the context, one retry at the minimum budget is
    attempted before reporting the overflow.
    """
    per_step = budget.resolve(backend.context_limit, len(trace.steps))

    def assemble(step_budget: int) -> PromptPlan:
        segments = _preamble(FILTERING_SYSTEM_TEXT, trace)
        for step in trace.steps:
            cut = backend.truncate_to_budget(step.content, step_budget)
            segments.append(_step_segment(step, cut.prefix))
            if cut.truncated:
                segments.append(Segment(kind="omission_marker", text=OMISSION_MARKER))
        return PromptPlan(segments=tuple(segments))

    plan = assemble(per_step)
    required = backend.count_tokens(plan.text)
    if required <= backend.context_limit:
        return plan
    if per_step > MIN_STEP_BUDGET:
        plan = assemble(MIN_STEP_BUDGET)
        required = backend.count_tokens(plan.text)
        if required <= backend.context_limit:
            return plan
    raise ContextOverflowError(
        required=required, available=backend.context_limit, stage="filtering prompt"
    )


def build_diagnosis_prompt(
    trace: Trace,
    symptoms,
    candidates,
    config: DiagnosisConfig,
    backend: SignalBackend,
) -> PromptPlan:
    """Selective-restoration prompt for the second prefill pass.

    Steps in symptoms | candidates keep their full content; every other step
    is reduced to a compressed_prefix_tokens prefix (marker when cut). An
    instructional note is inserted immediately before the earliest symptom's
    step text. When full restoration overflows the context, restored steps
    are capped at RESTORATION_CAP_TOKENS and the plan is flagged.
    """
    symptom_set = set(symptoms)
    candidate_set = set(candidates)
    if not symptom_set:
        raise ValueError("diagnosis prompt requires a non-empty symptom set")
    n = len(trace.steps)
    for k in symptom_set | candidate_set:
        if not 0 <= k < n:
            raise ValueError(f"step index {k} outside [0, {n - 1}]")
    restored = symptom_set | candidate_set
    note_before = min(symptom_set)

    def assemble(restored_cap: int | None) -> PromptPlan:
        segments = _preamble(DIAGNOSIS_SYSTEM_TEXT, trace)
        for step in trace.steps:
            if step.index == note_before:
                segments.append(Segment(kind="note", text=NOTE_TEXT))
            if step.index in restored:
                if restored_cap is None:
                    segments.append(_step_segment(step, step.content))
                    continue
                cut = backend.truncate_to_budget(step.content, restored_cap)
            else:
                cut = backend.truncate_to_budget(step.content, config.compressed_prefix_tokens)
            segments.append(_step_segment(step, cut.prefix))
            if cut.truncated:
                segments.append(Segment(kind="omission_marker", text=OMISSION_MARKER))
        return PromptPlan(segments=tuple(segments), restoration_capped=restored_cap is not None)

    plan = assemble(None)
    required = backend.count_tokens(plan.text)
    if required <= backend.context_limit:
        return plan
    plan = assemble(RESTORATION_CAP_TOKENS)
    required = backend.count_tokens(plan.text)
    if required <= backend.context_limit:
        return plan
    raise ContextOverflowError(
        required=required, available=backend.context_limit, stage="diagnosis prompt"
    )


def build_raw_prompt(trace: Trace, backend: SignalBackend) -> PromptPlan:
    """Untruncated single-pass prompt: the query plus every full step.

    Used by the no-filtering ablation and the signal-routing analysis; no
    system framing is added because nothing was truncated or reconstructed.
    """
    segments = [Segment(kind="system", text=QUERY_TEMPLATE.format(query=trace.query))]
    segments.extend(_step_segment(step, step.content) for step in trace.steps)
    plan = PromptPlan(segments=tuple(segments))
    required = backend.count_tokens(plan.text)
    if required > backend.context_limit:
        raise ContextOverflowError(
            required=required, available=backend.context_limit, stage="raw prompt"
        )
    return plan
