"""FastAPI application wrapping a noise-residual model.

Stub mode (no model configured) answers every request with a residual of
the correct shape so engine integration can be exercised end to end:
"zero" echoes zeros, "echo" returns the decoded image itself (useful for
transport bit-exactness checks). A configured model identifier is loaded
at startup; in this build no model backend ships, so any identifier marks
the service unavailable (503) while the protocol surface stays testable.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .protocol import PayloadError, build_response, parse_request


@dataclass
class BridgeConfig:
    model: str = None            # None: stub mode
    device: str = "cpu"
    cfg_default: float = 50.0
    port: int = 8085
    seed: int = 0
    residual_mode: str = "zero"  # stub behavior: "zero" | "echo"

    def validate(self) -> None:
        if not 0 < self.port < 65536:
            raise ValueError(f"port out of range: {self.port}")
        if self.residual_mode not in ("zero", "echo"):
            raise ValueError(f"residual_mode must be 'zero' or 'echo', "
                             f"got {self.residual_mode!r}")


def _deterministic_t(seed: int, request) -> float:
    """Same request -> same t draw, independent of call order."""
    key = json.dumps([seed, request.prompt, request.step, request.stage,
                      request.t_min, request.t_max], sort_keys=True)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    unit = int.from_bytes(digest[:8], "little") / float(2 ** 64)
    return request.t_min + unit * (request.t_max - request.t_min)


class StubModel:
    """Shape-correct residuals without any model weights."""

    def __init__(self, config: BridgeConfig):
        self.config = config

    def residual(self, request) -> tuple:
        t = _deterministic_t(self.config.seed, request)
        if self.config.residual_mode == "echo":
            return request.image.astype("<f4"), t, 1.0
        return np.zeros(request.shape, dtype="<f4"), t, 1.0


def load_model(config: BridgeConfig):
    """Resolve the configured model identifier to a residual backend.

    No diffusion backend ships with this package; a non-None identifier
    therefore fails, which the service reports as 503 on every request.
    """
    if config.model is None:
        return StubModel(config)
    raise RuntimeError(f"model {config.model!r} is not available "
                       f"(no diffusion backend installed)")


def create_app(config: BridgeConfig = None) -> FastAPI:
    config = config or BridgeConfig()
    config.validate()
    app = FastAPI(title="sdfbridge", version="0.1.0")
    app.state.config = config
    try:
        app.state.model = load_model(config)
        app.state.load_error = None
    except RuntimeError as exc:
        app.state.model = None
        app.state.load_error = str(exc)

    @app.get("/health")
    def health():
        status = "stub" if isinstance(app.state.model, StubModel) else "model"
        if app.state.model is None:
            return JSONResponse(status_code=503,
                                content={"status": "unavailable",
                                         "error": app.state.load_error})
        return {"status": status, "mode": config.residual_mode}

    @app.post("/guidance")
    async def guidance(raw: Request):
        if app.state.model is None:
            return JSONResponse(status_code=503,
                                content={"error": app.state.load_error})
        try:
            body = await raw.json()
        except Exception:
            return JSONResponse(status_code=400,
                                content={"error": "body is not valid JSON"})
        try:
            request = parse_request(body)
            residual, t_used, weight = app.state.model.residual(request)
            payload = build_response(request, residual, t_used, weight)
        except PayloadError as exc:
            return JSONResponse(status_code=400, content={"error": str(exc)})
        return JSONResponse(status_code=200, content=payload)

    return app
