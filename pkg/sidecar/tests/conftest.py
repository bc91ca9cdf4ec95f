import pytest
from fastapi.testclient import TestClient

from prism_sidecar.app import create_app
from prism_sidecar.runner import PrefillRunner


@pytest.fixture(scope="session")
def runner():
    return PrefillRunner()


@pytest.fixture(scope="session")
def client():
    with TestClient(create_app()) as test_client:
        yield test_client


def demo_segments():
    return [
        {"kind": "system", "step_index": None, "text": "trace context header"},
        {
            "kind": "step_text",
            "step_index": 0,
            "text": "Step 1 [Planner/action]:\nsearch the web for the answer",
        },
        {
            "kind": "step_text",
            "step_index": 1,
            "text": "Step 2 [Tool/observation]:\nError: request timed out",
        },
        {"kind": "omission_marker", "step_index": None, "text": "[...]"},
        {
            "kind": "step_text",
            "step_index": 2,
            "text": "Step 3 [Planner/action]:\nreport the failure upstream",
        },
    ]
