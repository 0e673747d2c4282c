"""HTTP inference service backing the explorer UI.

JSON-over-HTTP with base64 PNG payloads.  The checkpoint is loaded once at
startup and never mutated: request handling is read-only over the parameters,
so concurrent identical requests return identical bodies.
"""

from __future__ import annotations

import base64
import io
import time
from dataclasses import asdict

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel

from .stage2 import TranslationNets, translate


class TranslateRequest(BaseModel):
    content_image: str
    style_image: str | None = None
    style_code: list[float] | None = None
    sample_seed: int | None = None
    ell: float | None = None


class InterpolateRequest(BaseModel):
    content: str
    style_a: str
    style_b: str
    steps: int = 2
    ell: float | None = None


def _error(status: int, field: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {field: message}})


class _BadRequest(Exception):
    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message


def _decode_image(b64: str, size: int, field: str) -> torch.Tensor:
    from PIL import Image as PILImage
    try:
        raw = base64.b64decode(b64, validate=True)
        img = PILImage.open(io.BytesIO(raw)).convert("RGB")
    except Exception:
        raise _BadRequest(field, "not a base64-encoded PNG image")
    if img.size != (size, size):
        raise _BadRequest(field, f"expected a {size}x{size} image, got {img.size[0]}x{img.size[1]}")
    arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
    return torch.from_numpy(arr)


def _encode_image(t: torch.Tensor) -> str:
    from PIL import Image as PILImage
    arr = np.round(np.clip(t.detach().numpy(), 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(arr.transpose(1, 2, 0)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(nets: TranslationNets) -> FastAPI:
    app = FastAPI(title="gpunit inference service")
    size = nets.model_cfg.image_size

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        loc = ".".join(str(p) for p in first.get("loc", ())) or "body"
        return _error(400, loc, first.get("msg", "invalid request"))

    @app.exception_handler(_BadRequest)
    async def on_bad_request(request: Request, exc: _BadRequest):
        return _error(400, exc.field, exc.message)

    def resolve_style(req: TranslateRequest) -> torch.Tensor:
        sources = [s for s in ("style_image", "style_code", "sample_seed")
                   if getattr(req, s) is not None]
        if len(sources) != 1:
            raise _BadRequest("style", "exactly one of style_image / style_code / "
                                       f"sample_seed required, got {sources or 'none'}")
        if req.style_image is not None:
            with torch.no_grad():
                return nets.style_encoder(_decode_image(req.style_image, size, "style_image"))
        if req.style_code is not None:
            if len(req.style_code) != nets.model_cfg.style_dim:
                raise _BadRequest("style_code",
                                  f"expected {nets.model_cfg.style_dim} values")
            return torch.tensor(req.style_code, dtype=torch.float32)
        g = torch.Generator().manual_seed(int(req.sample_seed))
        z = torch.randn(1, nets.mapping.style_dim, generator=g)
        with torch.no_grad():
            return nets.mapping(z)[0]

    def resolve_ell(ell: float | None) -> float | None:
        if not nets.controllable:
            return None
        if ell is None:
            raise _BadRequest("ell", "this model is consistency-conditioned: ell required")
        if not 0.0 <= ell <= 1.0:
            raise _BadRequest("ell", "ell must lie in [0, 1]")
        return ell

    def run_translate(content: torch.Tensor, style: torch.Tensor, ell: float | None):
        with torch.no_grad():
            return translate(content, style, nets, ell=ell)

    @app.get("/healthz")
    async def healthz():
        return PlainTextResponse("ok")

    @app.get("/model")
    async def model():
        return {"model": asdict(nets.model_cfg), "controllable": nets.controllable,
                "prior_channels": nets.prior_channels, "version": "gpunit-ckpt-v1"}

    @app.post("/translate")
    async def do_translate(req: TranslateRequest):
        t0 = time.perf_counter()
        content = _decode_image(req.content_image, size, "content_image")
        style = resolve_style(req)
        y_hat, masks = run_translate(content, style, resolve_ell(req.ell))
        return {"image": _encode_image(y_hat),
                "masks_summary": {f"layer_{l}": float(m.mean()) for l, m in
                                  zip(nets.model_cfg.dsc_layers, masks)},
                "latency_ms": (time.perf_counter() - t0) * 1000.0}

    @app.post("/interpolate")
    async def do_interpolate(req: InterpolateRequest):
        if req.steps < 2:
            raise _BadRequest("steps", "steps must be >= 2")
        content = _decode_image(req.content, size, "content")
        ell = resolve_ell(req.ell)
        with torch.no_grad():
            s_a = nets.style_encoder(_decode_image(req.style_a, size, "style_a"))
            s_b = nets.style_encoder(_decode_image(req.style_b, size, "style_b"))
        frames = []
        for k in range(req.steps):
            alpha = k / (req.steps - 1)
            style = (1.0 - alpha) * s_a + alpha * s_b
            y_hat, _ = run_translate(content, style, ell)
            frames.append({"alpha": alpha, "image": _encode_image(y_hat)})
        return {"frames": frames}

    return app
