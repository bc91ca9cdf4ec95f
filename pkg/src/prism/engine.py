"""Two-stage attribution: symptom identification, candidate screening,
per-symptom scoring, and consensus fusion.

Stage 1 (filtering) runs one prefill pass over the uniformly truncated
trace, picks symptom steps by mean NLL with lexical failure markers moved
to the front, and screens earlier candidate sources by the attention they
receive from the symptoms. Stage 2 (diagnosis) restores those steps in a
second prompt, recomputes the signals, re-identifies symptoms, scores every
earlier step per symptom, and fuses the scores across symptoms with a
consensus bonus.

All tie-breaks favor the smaller step index; the whole pipeline is
deterministic for a fixed trace, config, and backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import prism
from prism.backends.base import SignalBackend
from prism.model import DiagnosisConfig, Trace, symptom_count, validate_trace
from prism.prompts import (
    BudgetPlan,
    build_diagnosis_prompt,
    build_filtering_prompt,
    build_raw_prompt,
)

VARIANTS = ("full", "no_filtering", "no_diagnosis", "no_restoration")


@dataclass(frozen=True)
class SymptomSet:
    """Symptom steps in rank order with their NLL scores and keyword flags."""

    members: tuple[int, ...]
    scores: tuple[float, ...]
    keyword_flags: tuple[bool, ...]

    def to_document(self) -> dict:
        return {
            "members": list(self.members),
            "scores": [float(s) for s in self.scores],
            "keyword_flags": list(self.keyword_flags),
        }


@dataclass(frozen=True)
class CandidateSet:
    """Earlier steps screened by summed attention from the symptom set."""

    members: tuple[int, ...]
    h_scores: tuple[float, ...]

    def to_document(self) -> dict:
        return {
            "members": list(self.members),
            "h_scores": [float(h) for h in self.h_scores],
        }


@dataclass
class ScoreTable:
    """Per-symptom scores s[(m, k)], their fusion, and consensus sets."""

    s: dict[tuple[int, int], float] = field(default_factory=dict)
    fuse: dict[int, float] = field(default_factory=dict)
    consensus_sets: dict[int, frozenset[int]] = field(default_factory=dict)
    final: dict[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SymptomLink:
    symptom_step: int
    s_value: float


@dataclass(frozen=True)
class RankedStep:
    step_index: int
    span_id: str | None
    final_score: float
    fuse_score: float
    consensus_count: int
    linked_symptoms: tuple[SymptomLink, ...]
    submitted: bool


@dataclass
class PassStats:
    tokens_pass1: int
    tokens_pass2: int


@dataclass
class AttributionReport:
    trace_id: str
    ranked: tuple[RankedStep, ...]
    symptoms_stage1: SymptomSet | None
    symptoms_stage2: SymptomSet | None
    config_echo: dict
    pass_stats: PassStats
    conditions: tuple[str, ...] = ()

    def to_document(self) -> dict:
        return {
            "trace_id": self.trace_id,
            "ranked": [
                {
                    "rank": position + 1,
                    "step_index": entry.step_index,
                    "step_number": entry.step_index + 1,
                    "span_id": entry.span_id,
                    "final_score": float(entry.final_score),
                    "fuse_score": float(entry.fuse_score),
                    "consensus_count": entry.consensus_count,
                    "submitted": entry.submitted,
                    "linked_symptoms": [
                        {
                            "symptom_step": link.symptom_step,
                            "symptom_number": link.symptom_step + 1,
                            "s_value": float(link.s_value),
                        }
                        for link in entry.linked_symptoms
                    ],
                }
                for position, entry in enumerate(self.ranked)
            ],
            "symptoms_stage1": self.symptoms_stage1.to_document()
            if self.symptoms_stage1
            else None,
            "symptoms_stage2": self.symptoms_stage2.to_document()
            if self.symptoms_stage2
            else None,
            "conditions": list(self.conditions),
            "pass_stats": {
                "tokens_pass1": self.pass_stats.tokens_pass1,
                "tokens_pass2": self.pass_stats.tokens_pass2,
            },
            "config_echo": self.config_echo,
        }


def identify_symptoms(
    step_nll, step_texts, ratio: float, keywords
) -> SymptomSet:
    """Ranks steps by (failure keyword present, mean NLL, earlier index).

    Keyword prioritization is a hard reorder: any step whose text contains a
    failure marker outranks every step without one. The set size is
    max(1, ceil(ratio * N)).
    """
    nll = [float(x) for x in step_nll]
    n = len(nll)
    if n == 0:
        raise ValueError("step_nll must be non-empty")
    if len(step_texts) != n:
        raise ValueError(f"{len(step_texts)} step texts for {n} NLL entries")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")

    flags = [
        any(keyword in text.lower() for keyword in keywords) for text in step_texts
    ]
    order = sorted(range(n), key=lambda i: (not flags[i], -nll[i], i))
    members = order[: symptom_count(ratio, n)]
    return SymptomSet(
        members=tuple(members),
        scores=tuple(nll[i] for i in members),
        keyword_flags=tuple(flags[i] for i in members),
    )


def select_candidates(attention: np.ndarray, symptoms, k: int) -> CandidateSet:
    """Top-k earlier steps by summed attention received from the symptoms.

    H_k = sum over symptoms m with k < m of A[m, k]. Symptom steps are not
    candidates themselves. With no earlier step available (single symptom at
    step 0) the set is empty.
    """
    members = getattr(symptoms, "members", symptoms)
    symptom_set = set(members)
    if not symptom_set:
        raise ValueError("symptom set must be non-empty")
    attention = np.asarray(attention, dtype=np.float64)
    eligible = [i for i in range(max(symptom_set)) if i not in symptom_set]
    if not eligible:
        return CandidateSet(members=(), h_scores=())
    h = {
        i: float(sum(attention[m, i] for m in symptom_set if i < m))
        for i in eligible
    }
    ordered = sorted(eligible, key=lambda i: (-h[i], i))[:k]
    return CandidateSet(
        members=tuple(ordered), h_scores=tuple(h[i] for i in ordered)
    )


def score_candidates(
    attention: np.ndarray, step_nll, symptoms
) -> ScoreTable:
    """Per-symptom score for every earlier step.

    s(k|m) = (A[m, k] / mean_{j<m} A[m, j]) * (1 + max(0, NLL_m - NLL_k)).
    The attention ratio normalizes away each symptom's overall attention
    scale; the clamped NLL contrast boosts links that run from a calmer
    earlier step to a more surprising symptom and never penalizes. A symptom
    whose mean received attention is zero contributes nothing.
    """
    members = getattr(symptoms, "members", symptoms)
    attention = np.asarray(attention, dtype=np.float64)
    nll = [float(x) for x in step_nll]
    table = ScoreTable()
    for m in members:
        if m == 0:
            continue
        mean_m = float(attention[m, :m].mean())
        for k in range(m):
            if mean_m == 0.0:
                table.s[(m, k)] = 0.0
            else:
                contrast = 1.0 + max(0.0, nll[m] - nll[k])
                table.s[(m, k)] = float(attention[m, k]) / mean_m * contrast
    return table


def fuse_and_rank(
    table: ScoreTable, consensus_lambda: float, top_m_for_consensus: int
) -> list[int]:
    """Fills fuse/consensus/final score maps and returns the ranked steps.

    Fuse(k) sums s(k|m) over symptoms; V_k is the set of symptoms ranking k
    among their top earlier steps by s; Score(k) = Fuse(k) * (1 + lambda *
    |V_k|). Ranking is by final score descending, earlier index on ties.
    """
    per_symptom: dict[int, list[tuple[int, float]]] = {}
    for (m, k), value in table.s.items():
        per_symptom.setdefault(m, []).append((k, value))
        table.fuse[k] = table.fuse.get(k, 0.0) + value

    votes: dict[int, set[int]] = {k: set() for k in table.fuse}
    for m, entries in per_symptom.items():
        entries.sort(key=lambda item: (-item[1], item[0]))
        for k, _ in entries[:top_m_for_consensus]:
            votes[k].add(m)

    for k, fused in table.fuse.items():
        table.consensus_sets[k] = frozenset(votes[k])
        table.final[k] = fused * (1.0 + consensus_lambda * len(votes[k]))

    return sorted(table.final, key=lambda k: (-table.final[k], k))


def _ranked_entries(
    trace: Trace,
    table: ScoreTable,
    ranking: list[int],
    max_submissions: int,
) -> tuple[RankedStep, ...]:
    entries = []
    for position, k in enumerate(ranking):
        links = sorted(
            ((m, table.s[(m, k)]) for m in table.consensus_sets[k]),
            key=lambda item: (-item[1], item[0]),
        )
        entries.append(
            RankedStep(
                step_index=k,
                span_id=trace.steps[k].span_id,
                final_score=table.final[k],
                fuse_score=table.fuse[k],
                consensus_count=len(table.consensus_sets[k]),
                linked_symptoms=tuple(SymptomLink(m, v) for m, v in links),
                submitted=position < max_submissions,
            )
        )
    return tuple(entries)


def _echo(config: DiagnosisConfig, backend: SignalBackend, variant: str) -> dict:
    echo = config.to_echo()
    echo["variant"] = variant
    echo["backend"] = backend.name
    echo["engine_version"] = prism.__version__
    return echo


def run_pipeline(
    trace: Trace,
    config: DiagnosisConfig,
    backend: SignalBackend,
    variant: str = "full",
) -> AttributionReport:
    """Runs the two-pass pipeline (or one of its ablation variants).

    Variants alter exactly the stage they name: no_diagnosis ranks by the
    stage-1 candidate scores alone; no_restoration runs the second pass on
    the unmodified stage-1 prompt; no_filtering scores a single pass over
    the raw, untruncated trace.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    violations = validate_trace(trace)
    if violations:
        raise ValueError(f"invalid trace {trace.trace_id!r}: {violations}")

    if variant == "no_filtering":
        return _run_single_pass(trace, config, backend)

    plan1 = build_filtering_prompt(trace, BudgetPlan.from_config(config), backend)
    signals1 = backend.prefill(plan1, config.layer_fraction)
    symptoms1 = identify_symptoms(
        signals1.step_nll, plan1.step_texts(), config.symptom_ratio, config.failure_keywords
    )
    candidates = select_candidates(
        signals1.step_attention, symptoms1, config.candidate_k
    )
    conditions: list[str] = []
    if not candidates.members:
        conditions.append("no-earlier-steps")

    if variant == "no_diagnosis":
        entries = tuple(
            RankedStep(
                step_index=k,
                span_id=trace.steps[k].span_id,
                final_score=h,
                fuse_score=h,
                consensus_count=0,
                linked_symptoms=(),
                submitted=position < config.max_submissions,
            )
            for position, (k, h) in enumerate(
                zip(candidates.members, candidates.h_scores)
            )
        )
        return AttributionReport(
            trace_id=trace.trace_id,
            ranked=entries,
            symptoms_stage1=symptoms1,
            symptoms_stage2=None,
            config_echo=_echo(config, backend, variant),
            pass_stats=PassStats(signals1.prompt_token_total, 0),
            conditions=tuple(conditions),
        )

    if variant == "no_restoration":
        plan2 = plan1
    else:
        plan2 = build_diagnosis_prompt(
            trace, symptoms1.members, candidates.members, config, backend
        )
    signals2 = backend.prefill(plan2, config.layer_fraction)
    symptoms2 = identify_symptoms(
        signals2.step_nll, plan2.step_texts(), config.symptom_ratio, config.failure_keywords
    )
    table = score_candidates(signals2.step_attention, signals2.step_nll, symptoms2)
    ranking = fuse_and_rank(table, config.consensus_lambda, config.top_m_for_consensus)
    if not ranking and "no-earlier-steps" not in conditions:
        conditions.append("no-earlier-steps")

    return AttributionReport(
        trace_id=trace.trace_id,
        ranked=_ranked_entries(trace, table, ranking, config.max_submissions),
        symptoms_stage1=symptoms1,
        symptoms_stage2=symptoms2,
        config_echo=_echo(config, backend, variant),
        pass_stats=PassStats(
            signals1.prompt_token_total, signals2.prompt_token_total
        ),
        conditions=tuple(conditions),
    )


def _run_single_pass(
    trace: Trace, config: DiagnosisConfig, backend: SignalBackend
) -> AttributionReport:
    plan = build_raw_prompt(trace, backend)
    signals = backend.prefill(plan, config.layer_fraction)
    symptoms = identify_symptoms(
        signals.step_nll, plan.step_texts(), config.symptom_ratio, config.failure_keywords
    )
    table = score_candidates(signals.step_attention, signals.step_nll, symptoms)
    ranking = fuse_and_rank(table, config.consensus_lambda, config.top_m_for_consensus)
    conditions = ("no-earlier-steps",) if not ranking else ()
    return AttributionReport(
        trace_id=trace.trace_id,
        ranked=_ranked_entries(trace, table, ranking, config.max_submissions),
        symptoms_stage1=symptoms,
        symptoms_stage2=None,
        config_echo=_echo(config, backend, "no_filtering"),
        pass_stats=PassStats(signals.prompt_token_total, 0),
        conditions=conditions,
    )
