"""Scripted backend: replays fixture-defined signals for matching plan shapes.

Two fixture forms are accepted (a document may also bundle several under
"cases"):

* step form: {"steps": N, "step_nll": [...], "step_attention": [[...]]}
  where step_attention is strictly lower-triangular, given either as a dense
  N x N matrix or as ragged rows (row i holding i entries).
* token form: {"tokens": [{"text", "nll", "step": int|null}, ...],
  "attention": [[...]]} with a causal token-level matrix; per-step signals
  are derived from it by the same aggregation rule real backends use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from prism.backends.base import (
    BackendCapabilities,
    ContextOverflowError,
    PrefillSignals,
    PromptPlan,
    ShapeMismatchError,
    SignalBackend,
    WhitespaceTokenServices,
    select_attention_layers,
)


@dataclass(frozen=True)
class _Case:
    n_steps: int
    step_nll: np.ndarray
    step_attention: np.ndarray
    token_counts: np.ndarray | None
    prompt_token_total: int | None


def _lower_triangular(rows, n: int, context: str) -> np.ndarray:
    matrix = np.zeros((n, n), dtype=np.float64)
    if len(rows) != n:
        raise ValueError(f"{context}: expected {n} attention rows, got {len(rows)}")
    for i, row in enumerate(rows):
        row = list(row)
        if len(row) == n:
            for j, value in enumerate(row):
                if j >= i and value != 0:
                    raise ValueError(f"{context}: entry [{i}][{j}] must be 0 (j >= i)")
            matrix[i, :] = row
        elif len(row) == i:
            matrix[i, :i] = row
        else:
            raise ValueError(f"{context}: row {i} must have {n} or {i} entries, got {len(row)}")
    if (matrix < 0).any():
        raise ValueError(f"{context}: attention entries must be non-negative")
    return matrix


def _case_from_step_form(doc: dict) -> _Case:
    n = int(doc["steps"])
    nll = np.asarray(doc["step_nll"], dtype=np.float64)
    if len(nll) != n:
        raise ValueError(f"step_nll has {len(nll)} entries for {n} steps")
    if (nll < 0).any() or not np.isfinite(nll).all():
        raise ValueError("step_nll entries must be finite and non-negative")
    attention = _lower_triangular(doc["step_attention"], n, "step_attention")
    return _Case(n, nll, attention, token_counts=None, prompt_token_total=None)


def _case_from_token_form(doc: dict) -> _Case:
    tokens = doc["tokens"]
    total = len(tokens)
    alpha = np.asarray(doc["attention"], dtype=np.float64)
    if alpha.shape != (total, total):
        raise ValueError(f"attention must be {total}x{total}, got {alpha.shape}")
    if (alpha < 0).any():
        raise ValueError("attention entries must be non-negative")
    upper = np.triu(alpha, k=1)
    if (upper != 0).any():
        raise ValueError("attention must be causal (zero above the diagonal)")

    steps = sorted({t["step"] for t in tokens if t.get("step") is not None})
    if steps != list(range(len(steps))):
        raise ValueError(f"token step labels must be contiguous from 0, got {steps}")
    n = len(steps)
    groups = [
        np.array([i for i, t in enumerate(tokens) if t.get("step") == s], dtype=np.int64)
        for s in range(n)
    ]
    nll_tokens = np.asarray([float(t["nll"]) for t in tokens], dtype=np.float64)

    step_nll = np.array([nll_tokens[g].mean() if len(g) else 0.0 for g in groups])
    step_attention = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        if not len(groups[i]):
            continue
        for j in range(i):
            if not len(groups[j]):
                continue
            step_attention[i, j] = alpha[np.ix_(groups[i], groups[j])].sum() / len(groups[i])
    token_counts = np.array([len(g) for g in groups], dtype=np.int64)
    return _Case(n, step_nll, step_attention, token_counts, total)


def _parse_case(doc: dict) -> _Case:
    if "tokens" in doc:
        return _case_from_token_form(doc)
    if "steps" in doc:
        return _case_from_step_form(doc)
    raise ValueError("fixture document must contain either 'steps' or 'tokens'")


class ScriptedBackend(WhitespaceTokenServices, SignalBackend):
    name = "scripted"

    def __init__(self, cases: list[_Case], context_limit: int = 1_000_000):
        if not cases:
            raise ValueError("scripted backend needs at least one fixture case")
        self._cases = {case.n_steps: case for case in cases}
        self._context_limit = context_limit

    @property
    def context_limit(self) -> int:
        return self._context_limit

    def capabilities(self, layer_fraction: float) -> BackendCapabilities:
        return BackendCapabilities(
            context_limit=self._context_limit,
            layer_count=1,
            attention_layer_indices=select_attention_layers(1, layer_fraction),
        )

    def prefill(self, plan: PromptPlan, layer_fraction: float) -> PrefillSignals:
        total = self.count_tokens(plan.text)
        if total > self._context_limit:
            raise ContextOverflowError(required=total, available=self._context_limit)
        case = self._cases.get(plan.n_steps)
        if case is None:
            raise ShapeMismatchError(
                f"no fixture case for a {plan.n_steps}-step plan "
                f"(available: {sorted(self._cases)})"
            )
        if case.token_counts is not None:
            token_counts = case.token_counts.copy()
            prompt_total = case.prompt_token_total
        else:
            token_counts = np.array(
                [self.count_tokens(t) for t in plan.step_texts()], dtype=np.int64
            )
            prompt_total = total
        return PrefillSignals(
            step_nll=case.step_nll.copy(),
            step_attention=case.step_attention.copy(),
            token_counts=token_counts,
            prompt_token_total=prompt_total,
        )


def load_scripted(fixture, context_limit: int = 1_000_000) -> ScriptedBackend:
    """Builds a ScriptedBackend from a fixture document, dict, or file path."""
    if isinstance(fixture, (str, Path)):
        fixture = json.loads(Path(fixture).read_text(encoding="utf-8"))
    docs = fixture["cases"] if isinstance(fixture, dict) and "cases" in fixture else [fixture]
    return ScriptedBackend([_parse_case(doc) for doc in docs], context_limit=context_limit)
