import json
from pathlib import Path

import pytest

from prism.model import Annotations, DiagnosisConfig, Step, Trace

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


def mk_trace(
    contents,
    query="do the task",
    agents=None,
    roles=None,
    span_ids=None,
    annotations=None,
    trace_id="t",
    source_format="synthetic",
):
    steps = tuple(
        Step(
            index=i,
            agent=agents[i] if agents else f"Agent{i}",
            role=roles[i] if roles else "action",
            content=content,
            span_id=span_ids[i] if span_ids else None,
        )
        for i, content in enumerate(contents)
    )
    return Trace(
        trace_id=trace_id,
        query=query,
        steps=steps,
        annotations=annotations,
        source_format=source_format,
    )


def mk_annotated(contents, root_cause_step, **kwargs):
    return mk_trace(
        contents,
        annotations=Annotations(root_cause_step=root_cause_step),
        **kwargs,
    )


def load_fixture(name):
    return json.loads((FIXTURES / name).read_text(encoding="utf-8"))


@pytest.fixture
def config():
    return DiagnosisConfig()
