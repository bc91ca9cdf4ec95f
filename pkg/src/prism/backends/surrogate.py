"""Deterministic surrogate backend.

Produces model-free prefill signals that are bit-identical across runs and
platforms, so every downstream number in the pipeline is exactly testable.

Definition (tokens are maximal whitespace-separated substrings):

* token NLL: l_0 = 1.5 for the first prompt token; for t >= 1,
  l_t = 1 + (fnv1a64(prev_token || 0x1F || token) mod 1000) / 1000.
* raw attention from token t_i to earlier-or-equal token t_j:
  w = (1 / (i - j + 1)) * (1 + (fnv1a64(token_i || 0x1F || token_j) mod 97) / 97),
  row-normalized over j <= i. One synthetic layer and head, so head/layer
  averaging is a no-op.

Step-to-step attention aggregates the normalized token weights: row step i,
column step j < i, averaged over step i's tokens and summed over step j's
tokens. Tokens of system/note/marker segments (and the joining newlines)
contribute context but belong to no step.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from prism.backends.base import (
    BackendCapabilities,
    ContextOverflowError,
    PrefillSignals,
    PromptPlan,
    SignalBackend,
    WhitespaceTokenServices,
    select_attention_layers,
    whitespace_tokens,
)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 16)
def _pair_hash(left: str, right: str, modulus: int) -> int:
    return fnv1a64(left.encode("utf-8") + b"\x1f" + right.encode("utf-8")) % modulus


def token_nll(prev_token: str | None, token: str) -> float:
    if prev_token is None:
        return 1.5
    return 1.0 + _pair_hash(prev_token, token, 1000) / 1000.0


def raw_attention_weight(token_i: str, token_j: str, distance: int) -> float:
    """Unnormalized weight from an attending token to one `distance` back."""
    return (1.0 / (distance + 1)) * (1.0 + _pair_hash(token_i, token_j, 97) / 97.0)


class SurrogateBackend(WhitespaceTokenServices, SignalBackend):
    name = "surrogate"

    def __init__(self, context_limit: int = 8192):
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
        tokens: list[str] = []
        # step slot (position among step_text segments) per token; -1 = no step
        membership: list[int] = []
        for seg in plan.segments:
            slot = -1
            if seg.kind == "step_text":
                slot = plan.step_indices.index(seg.step_index)
            for tok in whitespace_tokens(seg.text):
                tokens.append(tok)
                membership.append(slot)

        total = len(tokens)
        if total > self._context_limit:
            raise ContextOverflowError(required=total, available=self._context_limit)

        n_steps = plan.n_steps
        nll = np.array(
            [
                token_nll(tokens[t - 1] if t > 0 else None, tokens[t])
                for t in range(total)
            ],
            dtype=np.float64,
        )

        alpha = np.zeros((total, total), dtype=np.float64)
        for i in range(total):
            row = alpha[i]
            for j in range(i + 1):
                row[j] = raw_attention_weight(tokens[i], tokens[j], i - j)
            row_sum = row[: i + 1].sum()
            if row_sum > 0:
                row[: i + 1] /= row_sum

        members = np.asarray(membership, dtype=np.int64)
        step_token_lists = [np.nonzero(members == s)[0] for s in range(n_steps)]

        step_nll = np.zeros(n_steps, dtype=np.float64)
        token_counts = np.zeros(n_steps, dtype=np.int64)
        for s, toks in enumerate(step_token_lists):
            token_counts[s] = len(toks)
            if len(toks):
                step_nll[s] = nll[toks].mean()

        step_attention = np.zeros((n_steps, n_steps), dtype=np.float64)
        for i in range(n_steps):
            t_i = step_token_lists[i]
            if not len(t_i):
                continue
            for j in range(i):
                t_j = step_token_lists[j]
                if not len(t_j):
                    continue
                step_attention[i, j] = alpha[np.ix_(t_i, t_j)].sum() / len(t_i)

        return PrefillSignals(
            step_nll=step_nll,
            step_attention=step_attention,
            token_counts=token_counts,
            prompt_token_total=total,
        )
