"""Backend contract: token services and prefill signals.

A backend supplies three things to the rest of the pipeline:

* token counting and token-boundary truncation (used by the prompt builder),
* a single prefill pass over a PromptPlan returning per-step mean NLL and
  a strictly lower-triangular step-to-step attention matrix,
* capability metadata (context limit, attention layers averaged).

Backends never generate tokens; only the prefill pass is modeled.
"""

from __future__ import annotations

import math
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

SEGMENT_KINDS = ("system", "note", "step_text", "omission_marker")
OMISSION_MARKER = "[...]"

_TOKEN_RE = re.compile(r"\S+")


class ContextOverflowError(Exception):
    """Prompt does not fit the backend context window."""

    def __init__(self, required: int, available: int, stage: str = ""):
        self.required = required
        self.available = available
        self.stage = stage
        where = f" during {stage}" if stage else ""
        super().__init__(
            f"prompt requires {required} tokens but context limit is {available}{where}"
        )


class BackendUnavailableError(Exception):
    """Backend could not be reached after retries."""


class ShapeMismatchError(Exception):
    """Scripted fixture does not match the submitted plan's step layout."""


@dataclass(frozen=True)
class Segment:
    """One contiguous piece of prompt text.

    step_text segments carry the trace step they render; system, note, and
    omission_marker segments contribute context tokens that belong to no step.
    """

    kind: str
    text: str
    step_index: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in SEGMENT_KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.kind == "step_text" and self.step_index is None:
            raise ValueError("step_text segment requires a step_index")
        if self.kind == "omission_marker" and self.text != OMISSION_MARKER:
            raise ValueError(f"omission_marker segment must contain exactly {OMISSION_MARKER!r}")


@dataclass(frozen=True)
class PromptPlan:
    """Ordered prompt segments; the prompt text is the single-newline join."""

    segments: tuple[Segment, ...]
    restoration_capped: bool = False

    @property
    def text(self) -> str:
        return "\n".join(seg.text for seg in self.segments)

    @property
    def step_indices(self) -> tuple[int, ...]:
        return tuple(s.step_index for s in self.segments if s.kind == "step_text")

    @property
    def n_steps(self) -> int:
        return len(self.step_indices)

    def step_texts(self) -> list[str]:
        """Step texts in step order, as they appear in the prompt."""
        return [s.text for s in self.segments if s.kind == "step_text"]

    def segment_char_ranges(self) -> list[tuple[int, int]]:
        """Cumulative [start, end) character offsets of each segment in text."""
        ranges = []
        cursor = 0
        for i, seg in enumerate(self.segments):
            if i > 0:
                cursor += 1  # joining newline
            ranges.append((cursor, cursor + len(seg.text)))
            cursor += len(seg.text)
        return ranges

    def to_document(self) -> dict:
        ranges = self.segment_char_ranges()
        return {
            "segments": [
                {
                    "kind": seg.kind,
                    "step_index": seg.step_index,
                    "text": seg.text,
                    "char_start": start,
                    "char_end": end,
                }
                for seg, (start, end) in zip(self.segments, ranges)
            ],
            "restoration_capped": self.restoration_capped,
        }


@dataclass
class PrefillSignals:
    """Per-step signals extracted from one prefill pass.

    step_nll[i] is the mean token NLL of step i (nats). step_attention[i, j]
    is defined for j < i only (strictly lower-triangular over steps);
    row i is the attending step.
    """

    step_nll: np.ndarray
    step_attention: np.ndarray
    token_counts: np.ndarray
    prompt_token_total: int

    @property
    def n_steps(self) -> int:
        return len(self.step_nll)

    def to_document(self) -> dict:
        return {
            "step_nll": [float(x) for x in self.step_nll],
            "step_attention": [[float(x) for x in row] for row in self.step_attention],
            "token_counts": [int(x) for x in self.token_counts],
            "prompt_token_total": int(self.prompt_token_total),
        }


@dataclass(frozen=True)
class BackendCapabilities:
    context_limit: int
    layer_count: int
    attention_layer_indices: tuple[int, ...]

    def to_document(self) -> dict:
        return {
            "context_limit": self.context_limit,
            "layer_count": self.layer_count,
            "attention_layer_indices": list(self.attention_layer_indices),
        }


@dataclass(frozen=True)
class TruncationResult:
    prefix: str
    truncated: bool


def select_attention_layers(layer_count: int, layer_fraction: float) -> tuple[int, ...]:
    """Indices of the last ceil(layer_fraction * layer_count) layers, min 1."""
    n = max(1, math.ceil(layer_fraction * layer_count - 1e-9))
    n = min(n, layer_count)
    return tuple(range(layer_count - n, layer_count))


def whitespace_tokens(text: str) -> list[str]:
    """Maximal whitespace-separated substrings."""
    return _TOKEN_RE.findall(text)


def whitespace_token_count(text: str) -> int:
    return len(whitespace_tokens(text))


def whitespace_truncate(text: str, budget: int) -> TruncationResult:
    """Prefix of text containing at most `budget` whitespace tokens.

    The cut lands on a token boundary, so the prefix is a literal prefix of
    the input ending at the last kept token.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    spans = list(_TOKEN_RE.finditer(text))
    if len(spans) <= budget:
        return TruncationResult(prefix=text, truncated=False)
    return TruncationResult(prefix=text[: spans[budget - 1].end()], truncated=True)


class SignalBackend(ABC):
    """Common contract for surrogate, scripted, and HTTP signal backends."""

    name: str = "backend"

    @abstractmethod
    def count_tokens(self, text: str) -> int: ...

    @abstractmethod
    def truncate_to_budget(self, text: str, budget: int) -> TruncationResult: ...

    @abstractmethod
    def prefill(self, plan: PromptPlan, layer_fraction: float) -> PrefillSignals: ...

    @property
    @abstractmethod
    def context_limit(self) -> int: ...

    @abstractmethod
    def capabilities(self, layer_fraction: float) -> BackendCapabilities: ...


class WhitespaceTokenServices:
    """Mixin providing the deterministic whitespace tokenizer."""

    def count_tokens(self, text: str) -> int:
        return whitespace_token_count(text)

    def truncate_to_budget(self, text: str, budget: int) -> TruncationResult:
        return whitespace_truncate(text, budget)
