"""FastAPI application exposing the prefill wire protocol.

Endpoints (paths are a fixed contract):
  POST /v1/prefill    -> step-aggregated NLL and attention signals
  GET  /v1/model_info -> model identity and capability metadata

Errors: 400 malformed request, 413 context overflow (with required and
available token counts), 503 while the model is not loaded.
"""

from __future__ import annotations

from contextlib import asynccontextmanager
from typing import Literal, Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from prism_sidecar.runner import ContextOverflow, PrefillRunner


class SegmentIn(BaseModel):
    kind: Literal["system", "note", "step_text", "omission_marker"]
    step_index: Optional[int] = None
    text: str


class PrefillRequest(BaseModel):
    segments: list[SegmentIn]
    layer_fraction: float = Field(default=0.2, gt=0.0, le=1.0)
    return_token_detail: bool = False


def _validate(request: PrefillRequest) -> None:
    if not request.segments:
        raise HTTPException(status_code=400, detail="segments must be non-empty")
    step_indices = [
        seg.step_index for seg in request.segments if seg.kind == "step_text"
    ]
    if any(index is None for index in step_indices):
        raise HTTPException(
            status_code=400, detail="step_text segments require a step_index"
        )
    if any(b <= a for a, b in zip(step_indices, step_indices[1:])):
        raise HTTPException(
            status_code=400,
            detail="step_index values must be strictly increasing across step_text segments",
        )


def create_app(model_path: str | None = None, preload: bool = False) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if app.state.runner is None:
            app.state.runner = PrefillRunner(model_path)
        yield

    app = FastAPI(title="prism-sidecar", lifespan=lifespan)
    app.state.runner = PrefillRunner(model_path) if preload else None

    @app.exception_handler(RequestValidationError)
    async def malformed_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    def runner() -> PrefillRunner:
        if app.state.runner is None:
            raise HTTPException(status_code=503, detail="model is not loaded yet")
        return app.state.runner

    @app.get("/v1/model_info")
    async def model_info():
        return runner().model_info()

    @app.post("/v1/prefill")
    async def prefill(request: PrefillRequest):
        _validate(request)
        active = runner()
        segments = [
            {"kind": seg.kind, "step_index": seg.step_index, "text": seg.text}
            for seg in request.segments
        ]
        try:
            output = active.prefill(
                segments, request.layer_fraction, request.return_token_detail
            )
        except ContextOverflow as exc:
            raise HTTPException(
                status_code=413,
                detail={"required": exc.required, "available": exc.available},
            ) from exc
        body = {
            "step_nll": output.step_nll,
            "step_attention": output.step_attention,
            "token_counts": output.token_counts,
            "prompt_token_total": output.prompt_token_total,
            "model_id": active.model_id,
            "layer_indices_used": output.layer_indices_used,
        }
        if output.token_detail is not None:
            body["token_detail"] = output.token_detail
        return body

    return app
