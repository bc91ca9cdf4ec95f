"""HTTP client backend speaking the sidecar wire protocol.

POST /v1/prefill receives the serialized PromptPlan plus layer_fraction and
returns step-aggregated signals; GET /v1/model_info supplies capabilities.
Transient failures are retried 3 times with exponential backoff starting at
500 ms before raising BackendUnavailableError.

Token counting happens server-side only at prefill time, so budgeting uses
the deterministic whitespace approximation shared with the other backends;
real context overflows surface as HTTP 413 and map to ContextOverflowError.
"""

from __future__ import annotations

import time

import numpy as np
import requests

from prism.backends.base import (
    BackendCapabilities,
    BackendUnavailableError,
    ContextOverflowError,
    PrefillSignals,
    PromptPlan,
    SignalBackend,
    WhitespaceTokenServices,
    select_attention_layers,
)

MAX_ATTEMPTS = 3
BACKOFF_INITIAL_SECONDS = 0.5


class HttpBackend(WhitespaceTokenServices, SignalBackend):
    name = "http"

    def __init__(self, base_url: str, timeout: float = 120.0, sleep=time.sleep):
        self._base_url = base_url.rstrip("/")
        self._timeout = timeout
        self._sleep = sleep
        self._session = requests.Session()
        self._model_info: dict | None = None

    def _request(self, method: str, path: str, payload: dict | None = None):
        url = f"{self._base_url}{path}"
        delay = BACKOFF_INITIAL_SECONDS
        last_error: Exception | None = None
        for attempt in range(MAX_ATTEMPTS):
            if attempt:
                self._sleep(delay)
                delay *= 2
            try:
                response = self._session.request(
                    method, url, json=payload, timeout=self._timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code == 413:
                detail = _detail(response)
                raise ContextOverflowError(
                    required=int(detail.get("required", 0)),
                    available=int(detail.get("available", 0)),
                )
            if response.status_code in (502, 503, 504):
                last_error = BackendUnavailableError(
                    f"{url} returned {response.status_code}"
                )
                continue
            if response.status_code >= 400:
                raise BackendUnavailableError(
                    f"{url} returned {response.status_code}: {response.text[:200]}"
                )
            return response.json()
        raise BackendUnavailableError(
            f"backend at {self._base_url} unreachable after {MAX_ATTEMPTS} attempts: {last_error}"
        )

    def _info(self) -> dict:
        if self._model_info is None:
            self._model_info = self._request("GET", "/v1/model_info")
        return self._model_info

    @property
    def context_limit(self) -> int:
        return int(self._info()["context_limit"])

    @property
    def model_id(self) -> str:
        return str(self._info().get("model_id", "unknown"))

    def capabilities(self, layer_fraction: float) -> BackendCapabilities:
        info = self._info()
        layer_count = int(info["layer_count"])
        return BackendCapabilities(
            context_limit=int(info["context_limit"]),
            layer_count=layer_count,
            attention_layer_indices=select_attention_layers(layer_count, layer_fraction),
        )

    def prefill(self, plan: PromptPlan, layer_fraction: float) -> PrefillSignals:
        payload = {
            "segments": [
                {"kind": seg.kind, "step_index": seg.step_index, "text": seg.text}
                for seg in plan.segments
            ],
            "layer_fraction": layer_fraction,
            "return_token_detail": False,
        }
        body = self._request("POST", "/v1/prefill", payload)
        return PrefillSignals(
            step_nll=np.asarray(body["step_nll"], dtype=np.float64),
            step_attention=np.asarray(body["step_attention"], dtype=np.float64),
            token_counts=np.asarray(body["token_counts"], dtype=np.int64),
            prompt_token_total=int(body["prompt_token_total"]),
        )


def _detail(response) -> dict:
    try:
        body = response.json()
    except ValueError:
        return {}
    detail = body.get("detail", body)
    return detail if isinstance(detail, dict) else {}
