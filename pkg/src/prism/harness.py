"""Benchmark metrics, signal-routing analyses, attention-validity statistics,
and pipeline ablations.

Metric semantics: Top-1 accuracy scores an exact match between the
top-ranked step and the annotated root-cause step; Location Accuracy is
recall over unique annotated error span IDs among up to max_submissions
submitted locations (deduplicated before the cutoff). Dataset-level
Location Accuracy is the mean of per-trace recalls.
"""

from __future__ import annotations

import hashlib
import random
import statistics
from dataclasses import dataclass, field

from prism.backends.base import (
    BackendUnavailableError,
    ContextOverflowError,
    SignalBackend,
)
from prism.engine import (
    AttributionReport,
    identify_symptoms,
    run_pipeline,
    select_candidates,
)
from prism.model import DiagnosisConfig, Trace
from prism.prompts import BudgetPlan, build_filtering_prompt, build_raw_prompt
from prism.stats import ecdf_points, wilcoxon_signed_rank_greater

DEFAULT_SEED = 42
MIN_RELIABLE_PAIRS = 5


class MetricInapplicableError(Exception):
    """The requested metric cannot be computed on this input."""


@dataclass
class MetricResult:
    metric_name: str
    value: float
    numerator: float
    denominator: int
    per_trace: list[dict] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def to_document(self) -> dict:
        return {
            "metric_name": self.metric_name,
            "value": self.value,
            "numerator": self.numerator,
            "denominator": self.denominator,
            "per_trace": self.per_trace,
            "skipped": self.skipped,
            "flags": self.flags,
        }


@dataclass
class ValidityResult:
    comparison_name: str
    n: int
    mean_delta: float
    median_delta: float
    win_rate: float
    p_value: float
    ecdf_points: list[tuple[float, float]]
    flags: list[str] = field(default_factory=list)

    def to_document(self) -> dict:
        return {
            "comparison_name": self.comparison_name,
            "n": self.n,
            "mean_delta": self.mean_delta,
            "median_delta": self.median_delta,
            "win_rate": self.win_rate,
            "p_value": self.p_value,
            "ecdf_points": [[x, y] for x, y in self.ecdf_points],
            "flags": self.flags,
        }


def top1_accuracy(reports, traces) -> MetricResult:
    """Fraction of annotated traces whose top-ranked step is the root cause."""
    by_id = {trace.trace_id: trace for trace in traces}
    per_trace: list[dict] = []
    skipped: list[str] = []
    hits = 0
    for report in reports:
        trace = by_id.get(report.trace_id)
        annotations = trace.annotations if trace else None
        if annotations is None or annotations.root_cause_step is None:
            skipped.append(report.trace_id)
            continue
        predicted = report.ranked[0].step_index if report.ranked else None
        hit = predicted == annotations.root_cause_step
        hits += hit
        per_trace.append(
            {
                "trace_id": report.trace_id,
                "predicted": predicted,
                "expected": annotations.root_cause_step,
                "hit": hit,
            }
        )
    denominator = len(per_trace)
    return MetricResult(
        metric_name="top1_accuracy",
        value=hits / denominator if denominator else 0.0,
        numerator=hits,
        denominator=denominator,
        per_trace=per_trace,
        skipped=skipped,
    )


def submitted_spans(report: AttributionReport, max_submissions: int) -> list[str]:
    """Unique span IDs in rank order, cut to max_submissions after dedup."""
    seen: set[str] = set()
    unique: list[str] = []
    for entry in report.ranked:
        if entry.span_id is None or entry.span_id in seen:
            continue
        seen.add(entry.span_id)
        unique.append(entry.span_id)
    return unique[:max_submissions]


def location_accuracy(
    report: AttributionReport, gt_spans, max_submissions: int = 10
) -> MetricResult:
    """Recall over unique annotated error spans among the submitted locations."""
    gt = set(gt_spans)
    if not gt:
        raise ValueError("location accuracy requires a non-empty ground-truth span set")
    if report.ranked and all(entry.span_id is None for entry in report.ranked):
        raise MetricInapplicableError(
            f"trace {report.trace_id!r} carries no span identifiers"
        )
    submitted = submitted_spans(report, max_submissions)
    hits = len(set(submitted) & gt)
    value = hits / len(gt)
    return MetricResult(
        metric_name="location_accuracy",
        value=value,
        numerator=hits,
        denominator=len(gt),
        per_trace=[
            {"trace_id": report.trace_id, "score": value, "submitted": submitted}
        ],
    )


def dataset_location_accuracy(reports, traces, max_submissions: int = 10) -> MetricResult:
    """Mean per-trace Location Accuracy over span-annotated traces."""
    by_id = {trace.trace_id: trace for trace in traces}
    per_trace: list[dict] = []
    skipped: list[str] = []
    total = 0.0
    for report in reports:
        trace = by_id.get(report.trace_id)
        annotations = trace.annotations if trace else None
        if annotations is None or not annotations.error_spans:
            skipped.append(report.trace_id)
            continue
        single = location_accuracy(report, annotations.error_spans, max_submissions)
        total += single.value
        per_trace.append(single.per_trace[0])
    denominator = len(per_trace)
    return MetricResult(
        metric_name="location_accuracy",
        value=total / denominator if denominator else 0.0,
        numerator=total,
        denominator=denominator,
        per_trace=per_trace,
        skipped=skipped,
    )


def _gt_steps(trace: Trace) -> set[int]:
    annotations = trace.annotations
    if annotations is None:
        return set()
    if annotations.root_cause_step is not None:
        return {annotations.root_cause_step}
    if annotations.error_spans:
        return {
            step.index
            for step in trace.steps
            if step.span_id is not None and step.span_id in annotations.error_spans
        }
    return set()


def _analysis_signals(trace, backend, config):
    """Signals over the full trace, falling back to the filtering budget."""
    try:
        plan = build_raw_prompt(trace, backend)
        fallback = False
    except ContextOverflowError:
        plan = build_filtering_prompt(trace, BudgetPlan.from_config(config), backend)
        fallback = True
    return backend.prefill(plan, config.layer_fraction), fallback


def nll_routing_study(
    traces, backend: SignalBackend, config: DiagnosisConfig
) -> tuple[MetricResult, MetricResult]:
    """Top-5 hit rates for direct NLL ranking vs attention-based routing.

    Metric 1 counts traces whose annotated step (or any annotated span's
    step) ranks in the top 5 by step-level NLL. Metric 2 ranks earlier steps
    by the attention they receive from those top-5 high-NLL steps and counts
    top-5 hits of that ranking.
    """
    nll_rows: list[dict] = []
    routed_rows: list[dict] = []
    skipped: list[str] = []
    nll_hits = 0
    routed_hits = 0
    for trace in traces:
        gt = _gt_steps(trace)
        if not gt:
            skipped.append(trace.trace_id)
            continue
        signals, fallback = _analysis_signals(trace, backend, config)
        n = signals.n_steps
        by_nll = sorted(range(n), key=lambda i: (-float(signals.step_nll[i]), i))
        top5 = by_nll[:5]
        hit1 = bool(gt & set(top5))
        candidates = select_candidates(signals.step_attention, top5, 5)
        hit2 = bool(gt & set(candidates.members))
        nll_hits += hit1
        routed_hits += hit2
        nll_rows.append(
            {"trace_id": trace.trace_id, "hit": hit1, "fallback_truncated": fallback}
        )
        routed_rows.append(
            {"trace_id": trace.trace_id, "hit": hit2, "fallback_truncated": fallback}
        )
    denominator = len(nll_rows)
    return (
        MetricResult(
            metric_name="nll_top5_hit_rate",
            value=nll_hits / denominator if denominator else 0.0,
            numerator=nll_hits,
            denominator=denominator,
            per_trace=nll_rows,
            skipped=skipped,
        ),
        MetricResult(
            metric_name="attention_routing_top5_hit_rate",
            value=routed_hits / denominator if denominator else 0.0,
            numerator=routed_hits,
            denominator=denominator,
            per_trace=routed_rows,
            skipped=skipped,
        ),
    )


def _trace_rng(seed: int, trace_id: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{trace_id}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def attention_validity_study(
    traces,
    backend: SignalBackend,
    config: DiagnosisConfig,
    rng_seed: int = DEFAULT_SEED,
) -> list[ValidityResult]:
    """Does the annotated source receive more symptom attention than controls?

    For each annotated trace with at least 3 steps, the attention mass each
    step receives from the symptom set is compared between the ground-truth
    source, its adjacent earlier step (adjacent later non-symptom step when
    the source is step 0), and one seeded random earlier step. Per-trace
    differences feed a paired one-sided Wilcoxon signed-rank test, and the
    normalized rank of the source among earlier steps yields an ECDF.
    """
    deltas_neighbor: list[float] = []
    deltas_random: list[float] = []
    normalized_ranks: list[float] = []
    for trace in traces:
        annotations = trace.annotations
        gt = annotations.root_cause_step if annotations else None
        if gt is None or len(trace.steps) < 3:
            continue
        plan = build_filtering_prompt(trace, BudgetPlan.from_config(config), backend)
        signals = backend.prefill(plan, config.layer_fraction)
        symptoms = identify_symptoms(
            signals.step_nll,
            plan.step_texts(),
            config.symptom_ratio,
            config.failure_keywords,
        )
        members = symptoms.members
        attention = signals.step_attention

        def mass(step: int) -> float:
            return float(sum(attention[m, step] for m in members if step < m))

        gt_mass = mass(gt)
        if gt > 0:
            neighbor = gt - 1
        else:
            neighbor = next(
                (j for j in range(1, len(trace.steps)) if j not in members), None
            )
        if neighbor is not None:
            deltas_neighbor.append(gt_mass - mass(neighbor))

        horizon = max(members)
        pool = [k for k in range(horizon) if k != gt]
        if pool:
            choice = _trace_rng(rng_seed, trace.trace_id).choice(pool)
            deltas_random.append(gt_mass - mass(choice))

        if gt < horizon:
            earlier = list(range(horizon))
            order = sorted(earlier, key=lambda k: (-mass(k), k))
            normalized_ranks.append((order.index(gt) + 1) / len(earlier))

    ecdf = ecdf_points(normalized_ranks) if normalized_ranks else []
    results = []
    for name, deltas in (
        ("gt_source_vs_gt_neighbor", deltas_neighbor),
        ("gt_source_vs_random_earlier", deltas_random),
    ):
        test = wilcoxon_signed_rank_greater(deltas)
        flags = []
        if len(deltas) < MIN_RELIABLE_PAIRS:
            flags.append("unreliable: fewer than 5 pairs")
        if test.degenerate:
            flags.append("degenerate: all differences zero")
        results.append(
            ValidityResult(
                comparison_name=name,
                n=len(deltas),
                mean_delta=statistics.fmean(deltas) if deltas else 0.0,
                median_delta=statistics.median(deltas) if deltas else 0.0,
                win_rate=sum(d > 0 for d in deltas) / len(deltas) if deltas else 0.0,
                p_value=test.p_value,
                ecdf_points=ecdf,
                flags=flags,
            )
        )
    return results


def run_ablation(
    traces, backend: SignalBackend, config: DiagnosisConfig, variant: str = "full"
) -> MetricResult:
    """Evaluates one pipeline variant over a trace set.

    Per-trace resource failures (context overflow, unavailable backend) are
    recorded and scored as misses rather than aborting the run. The metric
    view follows the dataset's annotation style: step-annotated traces score
    Top-1 accuracy, span-annotated traces score Location Accuracy.
    """
    reports: list[AttributionReport] = []
    failures: list[dict] = []
    scored_traces: list[Trace] = []
    for trace in traces:
        try:
            reports.append(run_pipeline(trace, config, backend, variant))
            scored_traces.append(trace)
        except (ContextOverflowError, BackendUnavailableError) as exc:
            failures.append({"trace_id": trace.trace_id, "error": str(exc)})

    span_style = any(
        t.annotations is not None and t.annotations.error_spans for t in traces
    )
    if span_style:
        result = dataset_location_accuracy(reports, scored_traces, config.max_submissions)
    else:
        result = top1_accuracy(reports, scored_traces)

    for failure in failures:
        trace = next(t for t in traces if t.trace_id == failure["trace_id"])
        if trace.annotations is None:
            result.skipped.append(failure["trace_id"])
            continue
        row = {"trace_id": failure["trace_id"], "failed": failure["error"]}
        if span_style:
            row["score"] = 0.0
        else:
            row["hit"] = False
        result.per_trace.append(row)
        result.denominator += 1
    result.value = result.numerator / result.denominator if result.denominator else 0.0
    result.metric_name = f"{result.metric_name}[variant={variant}]"
    if failures:
        result.flags.append(f"{len(failures)} trace(s) failed and scored as misses")
    return result
