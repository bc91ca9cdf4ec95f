"""Parsers turning external trace documents into Trace, plus step rendering.

Supported inputs:

* whowhen: one record per trace with a question, an ordered history of
  agent turns, and optional 1-based mistake_step / mistake_agent labels.
* openinference: a list of spans (span_id, optional parent_id, RFC3339
  start_time, name, attributes) ordered here by start timestamp with
  document order breaking ties; an optional annotation sidecar
  {trace_id, error_span_ids} supplies ground-truth error spans.
* canonical: the engine's own export format, used for round-tripping.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import datetime

from prism.model import Annotations, Step, Trace

logger = logging.getLogger(__name__)

# Hard cap applied to any single attribute payload before it enters step
# content; bounds memory ahead of the budget-based truncation stage.
MAX_PAYLOAD_CHARS = 20_000


class IngestError(Exception):
    """Base class for unrecoverable ingest failures."""


class MalformedDocumentError(IngestError):
    pass


class MissingSpanIdError(IngestError):
    pass


@dataclass(frozen=True)
class RenderedStep:
    step_index: int
    header: str
    body: str


def render_step(step: Step) -> RenderedStep:
    """Canonical human-facing rendering; headers count steps from 1."""
    return RenderedStep(
        step_index=step.index,
        header=f"Step {step.index + 1} [{step.agent}/{step.role}]:",
        body=step.content,
    )


def _as_text(value) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value, sort_keys=True, ensure_ascii=False)


def _capped(text: str) -> tuple[str, bool]:
    if len(text) > MAX_PAYLOAD_CHARS:
        return text[:MAX_PAYLOAD_CHARS], True
    return text, False


def parse_whowhen(document: dict, trace_id: str | None = None) -> Trace:
    """Parses a whowhen-style record.

    mistake_step labels are 1-based in the source and converted to 0-based
    indices; out-of-range or unparseable labels are reported via logging and
    the annotation is dropped rather than failing the whole trace.
    """
    if not isinstance(document, dict):
        raise MalformedDocumentError("whowhen document must be an object")
    history = document.get("history")
    if not isinstance(history, list) or not history:
        raise MalformedDocumentError("whowhen document has no step list ('history')")

    steps = []
    for position, entry in enumerate(history):
        if not isinstance(entry, dict):
            raise MalformedDocumentError(f"history entry {position} is not an object")
        role = _as_text(entry.get("role", "message")) if entry.get("role") is not None else "message"
        agent = entry.get("name") or entry.get("role") or "agent"
        content, capped = _capped(_as_text(entry.get("content", "")))
        steps.append(
            Step(
                index=position,
                agent=_as_text(agent),
                role=role,
                content=content,
                truncated_at_ingest=capped,
            )
        )

    annotations = None
    root_cause_step = None
    label = document.get("mistake_step")
    if label is not None:
        try:
            one_based = int(str(label).strip())
        except ValueError:
            one_based = None
        if one_based is None or not 1 <= one_based <= len(steps):
            logger.warning(
                "mistake_step label %r out of range for %d steps; annotation dropped",
                label,
                len(steps),
            )
        else:
            root_cause_step = one_based - 1
    agent_label = document.get("mistake_agent")
    if root_cause_step is not None:
        annotations = Annotations(
            root_cause_step=root_cause_step,
            root_cause_agent=_as_text(agent_label) if agent_label is not None else None,
        )

    resolved_id = document.get("trace_id") or trace_id or "trace"
    return Trace(
        trace_id=str(resolved_id),
        query=_as_text(document.get("question", "")),
        steps=tuple(steps),
        annotations=annotations,
        source_format="whowhen",
    )


def _parse_rfc3339(value, span_id: str):
    if not isinstance(value, str) or not value:
        raise MalformedDocumentError(f"span {span_id!r} has no start_time")
    try:
        return datetime.fromisoformat(value.replace("Z", "+00:00"))
    except ValueError as exc:
        raise MalformedDocumentError(f"span {span_id!r} start_time {value!r}: {exc}") from exc


def _span_content(span: dict) -> tuple[str, bool]:
    """Flattens a span to text: name, input, output, status, in that order."""
    attributes = span.get("attributes") or {}
    if not isinstance(attributes, dict):
        raise MalformedDocumentError(f"span {span.get('span_id')!r} attributes must be a map")

    def payload(key: str):
        if key in attributes:
            return attributes[key]
        nested = attributes.get(key.split(".")[0])
        if isinstance(nested, dict):
            return nested.get("value")
        return None

    lines = [_as_text(span.get("name", ""))]
    capped_any = False
    for label, value in (
        ("Input", payload("input.value")),
        ("Output", payload("output.value")),
        ("Status", span.get("status", attributes.get("status"))),
    ):
        if value is None:
            continue
        text, capped = _capped(_as_text(value))
        capped_any = capped_any or capped
        lines.append(f"{label}: {text}")
    return "\n".join(lines), capped_any


def parse_openinference(
    document, annotations_document: dict | None = None, trace_id: str | None = None
) -> Trace:
    """Parses an OpenInference span list into a step-sequence trace.

    Steps are spans ordered by start timestamp (document order on ties).
    The trace query is taken from the input payload of the earliest root
    span. Every span must carry a span_id; a missing one rejects the
    document.
    """
    if isinstance(document, dict):
        spans = document.get("spans")
        trace_id = document.get("trace_id") or trace_id
    else:
        spans = document
    if not isinstance(spans, list) or not spans:
        raise MalformedDocumentError("openinference document has no spans")

    ordered = []
    for position, span in enumerate(spans):
        if not isinstance(span, dict):
            raise MalformedDocumentError(f"span at position {position} is not an object")
        span_id = span.get("span_id")
        if not span_id:
            raise MissingSpanIdError(f"span at position {position} has no span_id")
        start = _parse_rfc3339(span.get("start_time"), span_id)
        ordered.append((start, position, span))
    ordered.sort(key=lambda item: (item[0], item[1]))

    query = ""
    for _, _, span in ordered:
        if span.get("parent_id") is None:
            attributes = span.get("attributes") or {}
            value = attributes.get("input.value") if isinstance(attributes, dict) else None
            if value is not None:
                query = _as_text(value)
            break

    steps = []
    for index, (_, _, span) in enumerate(ordered):
        attributes = span.get("attributes") or {}
        kind = attributes.get("openinference.span.kind", "span") if isinstance(attributes, dict) else "span"
        content, capped = _span_content(span)
        steps.append(
            Step(
                index=index,
                agent=_as_text(span.get("name", "span")),
                role=_as_text(kind).lower(),
                content=content,
                span_id=str(span["span_id"]),
                truncated_at_ingest=capped,
            )
        )

    annotations = None
    if annotations_document is not None:
        gt_trace = annotations_document.get("trace_id")
        if gt_trace is not None and trace_id is not None and str(gt_trace) != str(trace_id):
            logger.warning(
                "annotation sidecar is for trace %r, not %r; ignored", gt_trace, trace_id
            )
        else:
            span_ids = annotations_document.get("error_span_ids") or []
            if span_ids:
                annotations = Annotations(error_spans=frozenset(str(s) for s in span_ids))

    return Trace(
        trace_id=str(trace_id or "trace"),
        query=query,
        steps=tuple(steps),
        annotations=annotations,
        source_format="openinference",
    )


def trace_to_document(trace: Trace) -> dict:
    """Canonical serialization; parse -> export -> parse is the identity."""
    doc = {
        "format": "prism-trace",
        "trace_id": trace.trace_id,
        "source_format": trace.source_format,
        "query": trace.query,
        "steps": [
            {
                "index": s.index,
                "agent": s.agent,
                "role": s.role,
                "content": s.content,
                "span_id": s.span_id,
                "truncated_at_ingest": s.truncated_at_ingest,
            }
            for s in trace.steps
        ],
    }
    if trace.annotations is not None:
        ann = trace.annotations
        doc["annotations"] = {
            "root_cause_step": ann.root_cause_step,
            "error_spans": sorted(ann.error_spans) if ann.error_spans else None,
            "root_cause_agent": ann.root_cause_agent,
        }
    else:
        doc["annotations"] = None
    return doc


def trace_from_document(document: dict) -> Trace:
    if not isinstance(document, dict) or document.get("format") != "prism-trace":
        raise MalformedDocumentError("not a canonical trace document")
    steps = tuple(
        Step(
            index=int(s["index"]),
            agent=s["agent"],
            role=s["role"],
            content=s["content"],
            span_id=s.get("span_id"),
            truncated_at_ingest=bool(s.get("truncated_at_ingest", False)),
        )
        for s in document["steps"]
    )
    annotations = None
    ann = document.get("annotations")
    if ann is not None:
        spans = ann.get("error_spans")
        annotations = Annotations(
            root_cause_step=ann.get("root_cause_step"),
            error_spans=frozenset(spans) if spans else None,
            root_cause_agent=ann.get("root_cause_agent"),
        )
    return Trace(
        trace_id=document["trace_id"],
        query=document["query"],
        steps=steps,
        annotations=annotations,
        source_format=document.get("source_format", "synthetic"),
    )
