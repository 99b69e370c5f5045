"""HTTP service exposing the scorer/segmenter wire protocol.

Endpoints::

    POST /v1/embed_image   {"image_png_b64": "..."}    -> {"embedding": [...], "dim": E, "model": tag}
    POST /v1/embed_text    {"text": "..."}             -> same shape
    POST /v1/segment       {"image_png_b64": "...", "boxes": [[x,y,w,h], ...] | "points": [[x,y], ...]}
                           -> {"masks": [{"size": [H,W], "counts": [...], "quality": q}, ...]}
    GET  /v1/health        -> {"ok": true, "models": {"scorer": tag, "segmenter": tag}}

A response middleware re-validates every /v1 payload against the protocol
before it leaves the process, so a broken adapter turns into a 500 instead
of poisoning clients.
"""

from __future__ import annotations

import base64
import io
import json
import sys
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response
from PIL import Image
from starlette.middleware.base import BaseHTTPMiddleware

from . import rle
from .models import ModelLoadError, build_scorer, build_segmenter


@dataclass
class ServerConfig:
    scorer: str = "builtin"
    segmenter: str = "builtin"
    host: str = "127.0.0.1"
    port: int = 8731
    device: str = "cpu"


def _decode_image(payload: dict) -> Image.Image:
    data = payload.get("image_png_b64")
    if not isinstance(data, str) or not data:
        raise HTTPException(status_code=422, detail="missing image_png_b64")
    try:
        raw = base64.b64decode(data, validate=True)
        img = Image.open(io.BytesIO(raw))
        img.load()
        return img
    except Exception as exc:
        raise HTTPException(status_code=422, detail=f"bad image payload: {exc}")


def validate_embedding_payload(payload: dict) -> None:
    embedding = payload.get("embedding")
    dim = payload.get("dim")
    if not isinstance(embedding, list) or not isinstance(dim, int):
        raise ValueError("embedding payload needs 'embedding' list and integer 'dim'")
    if len(embedding) != dim:
        raise ValueError(f"embedding length {len(embedding)} != dim {dim}")
    norm = float(np.linalg.norm(np.asarray(embedding, dtype=np.float64)))
    if abs(norm - 1.0) > 1e-3:
        raise ValueError(f"embedding norm {norm} not within 1e-3 of 1")
    if not isinstance(payload.get("model"), str):
        raise ValueError("embedding payload needs a 'model' tag")


def validate_segment_payload(payload: dict) -> None:
    masks = payload.get("masks")
    if not isinstance(masks, list):
        raise ValueError("segment payload needs a 'masks' list")
    for i, entry in enumerate(masks):
        size = entry.get("size")
        counts = entry.get("counts")
        if (not isinstance(size, list)) or len(size) != 2:
            raise ValueError(f"mask {i}: bad size {size}")
        if not isinstance(counts, list) or any((not isinstance(c, int)) or c < 0 for c in counts):
            raise ValueError(f"mask {i}: counts must be nonnegative integers")
        if sum(counts) != size[0] * size[1]:
            raise ValueError(f"mask {i}: counts sum {sum(counts)} != {size[0] * size[1]}")
        quality = entry.get("quality")
        if not isinstance(quality, (int, float)) or not 0.0 <= float(quality) <= 1.0:
            raise ValueError(f"mask {i}: quality {quality} outside [0, 1]")


def validate_health_payload(payload: dict) -> None:
    models = payload.get("models")
    if payload.get("ok") is not True or not isinstance(models, dict):
        raise ValueError("health payload needs ok=true and a models map")
    for role in ("scorer", "segmenter"):
        if not isinstance(models.get(role), str) or not models[role]:
            raise ValueError(f"health payload missing model tag {role!r}")


_VALIDATORS = {
    "/v1/embed_image": validate_embedding_payload,
    "/v1/embed_text": validate_embedding_payload,
    "/v1/segment": validate_segment_payload,
    "/v1/health": validate_health_payload,
}


class ProtocolSelfCheck(BaseHTTPMiddleware):
    """Validate every successful /v1 response against the wire protocol."""

    async def dispatch(self, request: Request, call_next):
        response = await call_next(request)
        validator = _VALIDATORS.get(request.url.path)
        if validator is None or response.status_code != 200:
            return response
        body = b""
        async for chunk in response.body_iterator:
            body += chunk
        try:
            validator(json.loads(body))
        except ValueError as exc:
            return JSONResponse(status_code=500,
                                content={"error": f"protocol self-check failed: {exc}"})
        return Response(content=body, status_code=response.status_code,
                        headers=dict(response.headers), media_type="application/json")


def create_app(scorer, segmenter, self_check: bool = True) -> FastAPI:
    app = FastAPI(title="modelbridge")
    if self_check:
        app.add_middleware(ProtocolSelfCheck)

    def embedding_response(vector: np.ndarray) -> dict:
        vec = np.asarray(vector, dtype=np.float32)
        return {"embedding": [float(v) for v in vec], "dim": int(vec.size),
                "model": scorer.tag}

    @app.get("/v1/health")
    def health():
        return {"ok": True, "models": {"scorer": scorer.tag, "segmenter": segmenter.tag}}

    @app.post("/v1/embed_image")
    async def embed_image(request: Request):
        payload = await request.json()
        img = _decode_image(payload)
        try:
            return embedding_response(scorer.embed_image(img))
        except Exception as exc:
            raise HTTPException(status_code=500, detail=f"image embedding failed: {exc}")

    @app.post("/v1/embed_text")
    async def embed_text(request: Request):
        payload = await request.json()
        text = payload.get("text")
        if not isinstance(text, str) or not text.strip():
            raise HTTPException(status_code=422, detail="missing or empty text")
        try:
            return embedding_response(scorer.embed_text(text))
        except Exception as exc:
            raise HTTPException(status_code=500, detail=f"text embedding failed: {exc}")

    @app.post("/v1/segment")
    async def segment(request: Request):
        payload = await request.json()
        img = _decode_image(payload)
        boxes = payload.get("boxes")
        points = payload.get("points")
        if (boxes is None) == (points is None):
            raise HTTPException(status_code=422,
                                detail="provide exactly one of 'boxes' or 'points'")
        try:
            if boxes is not None:
                queries = [[float(v) for v in box] for box in boxes]
                if any(len(q) != 4 for q in queries):
                    raise HTTPException(status_code=422, detail="boxes must be [x,y,w,h]")
                results = segmenter.segment_boxes(img, queries)
            else:
                queries = [[float(v) for v in pt] for pt in points]
                if any(len(q) != 2 for q in queries):
                    raise HTTPException(status_code=422, detail="points must be [x,y]")
                results = segmenter.segment_points(img, queries)
        except HTTPException:
            raise
        except (TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"bad query list: {exc}")
        except Exception as exc:
            raise HTTPException(status_code=500, detail=f"segmentation failed: {exc}")
        masks = []
        for mask, quality in results:
            entry = rle.encode(mask)
            entry["quality"] = max(0.0, min(1.0, float(quality)))
            masks.append(entry)
        return {"masks": masks}

    return app


def build_app(config: ServerConfig) -> FastAPI:
    scorer = build_scorer(config.scorer, device=config.device)
    segmenter = build_segmenter(config.segmenter, device=config.device)
    return create_app(scorer, segmenter)


def serve(config: ServerConfig) -> None:
    """Run the service; exits nonzero when a checkpoint fails to load."""
    import uvicorn

    try:
        app = build_app(config)
    except ModelLoadError as exc:
        print(f"model load failed: {exc}", file=sys.stderr)
        raise SystemExit(1)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
