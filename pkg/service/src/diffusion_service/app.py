"""HTTP surface of the guidance service.

Routes follow the fixed wire protocol: JSON bodies, images as base64 PNG,
float arrays as base64 little-endian float32 with explicit shapes. Every
rejection is a structured ``{"error": ...}`` body: 400 for malformed
requests, 503 while the model backend is unavailable, 500 for a model
error on an otherwise valid request.

Requests whose prompt contains a personalized token are routed through the
matching adapter; responses carry the adapter id used (``null`` for the
base model) so routing is observable without log access.
"""

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .backends import (
    BACKENDS,
    ENCODER_DIMS,
    MULTI_VIEW,
    MULTI_VIEW_ARITY,
    MockBackend,
    SINGLE_VIEW,
    WeightsBackend,
)
from .codecs import CodecError
from .registry import AdapterRegistry

DEFAULT_WEIGHTS_DIR = "weights"


class ViewPose(BaseModel):
    azimuth: float
    elevation: float
    radius: float


class ResidualRequest(BaseModel):
    backend: str
    prompt: str
    negative_prompt: str = ""
    images: list[str] = Field(min_length=1)
    timestep: float
    cfg_scale: float = 7.5
    seed: int = 0
    views: list[ViewPose] | None = None


class Img2ImgRequest(BaseModel):
    prompt: str
    image: str
    strength: float
    seed: int = 0


class EmbedRequest(BaseModel):
    kind: str
    text: str | None = None
    image: str | None = None


class PersonalizeRequest(BaseModel):
    images: list[str]
    category: str
    steps: int = 250


def _bad_request(message: str) -> HTTPException:
    return HTTPException(status_code=400, detail=message)


def create_app(mock: bool = False,
               weights_dir: str = DEFAULT_WEIGHTS_DIR) -> FastAPI:
    app = FastAPI(title="guidance service", docs_url=None, redoc_url=None)
    backend = MockBackend() if mock else WeightsBackend(weights_dir)
    registry = AdapterRegistry(weights_dir)

    @app.exception_handler(RequestValidationError)
    async def on_invalid(request: Request, exc: RequestValidationError):
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"] if p != "body")
        return JSONResponse(status_code=400,
                            content={"error": f"{where}: {first['msg']}"})

    @app.exception_handler(HTTPException)
    async def on_http_error(request: Request, exc: HTTPException):
        return JSONResponse(status_code=exc.status_code,
                            content={"error": str(exc.detail)})

    def require_model():
        if not backend.available:
            raise HTTPException(status_code=503, detail=backend.reason)

    @app.get("/healthz")
    def healthz():
        body = {
            "status": "ok" if backend.available else "degraded",
            "mode": backend.mode,
            "backends": list(BACKENDS),
            "encoders": dict(ENCODER_DIMS),
            "adapters": registry.list(),
        }
        if backend.reason:
            body["reason"] = backend.reason
        return body

    @app.post("/v1/residual")
    def residual(req: ResidualRequest):
        if req.backend not in BACKENDS:
            raise _bad_request(
                f"unknown backend {req.backend!r}; expected one of {BACKENDS}")
        arity = MULTI_VIEW_ARITY if req.backend == MULTI_VIEW else 1
        if len(req.images) != arity:
            raise _bad_request(
                f"backend {req.backend!r} takes exactly {arity} images, "
                f"got {len(req.images)}")
        if not 0.0 < req.timestep < 1.0:
            raise _bad_request(
                f"timestep must lie strictly in (0, 1), got {req.timestep}")
        if req.views is not None and len(req.views) != len(req.images):
            raise _bad_request(
                f"{len(req.views)} view poses for {len(req.images)} images")
        require_model()
        adapter = registry.match_token(req.prompt)
        try:
            residuals = backend.residual(req.images, req.prompt, req.timestep,
                                         req.cfg_scale, req.seed)
        except CodecError as exc:
            raise _bad_request(str(exc)) from exc
        return {
            "residuals": residuals,
            "adapter_id": adapter["adapter_id"] if adapter else None,
        }

    @app.post("/v1/img2img")
    def img2img(req: Img2ImgRequest):
        if not 0.0 <= req.strength <= 1.0:
            raise _bad_request(
                f"strength must lie in [0, 1], got {req.strength}")
        require_model()
        adapter = registry.match_token(req.prompt)
        try:
            image = backend.img2img(req.image, req.prompt, req.strength,
                                    req.seed)
        except CodecError as exc:
            raise _bad_request(str(exc)) from exc
        return {
            "image": image,
            "adapter_id": adapter["adapter_id"] if adapter else None,
        }

    @app.post("/v1/embed")
    def embed(req: EmbedRequest):
        if req.kind not in ENCODER_DIMS:
            raise _bad_request(
                f"unknown embedding kind {req.kind!r}; "
                f"expected one of {sorted(ENCODER_DIMS)}")
        if req.kind == "clip_text":
            if req.text is None:
                raise _bad_request("kind 'clip_text' requires a text field")
            payload = req.text.encode("utf-8")
        else:
            if req.image is None:
                raise _bad_request(
                    f"kind {req.kind!r} requires an image field")
            payload = req.image.encode("ascii")
        require_model()
        vector = backend.embed(req.kind, payload)
        return {"embedding": vector, "dim": len(vector)}

    @app.post("/v1/personalize")
    def personalize(req: PersonalizeRequest):
        if len(req.images) < 1:
            raise _bad_request("personalization needs at least one image")
        if req.steps < 1:
            raise _bad_request(f"steps must be positive, got {req.steps}")
        require_model()
        record = registry.register(req.images, req.category, req.steps)
        return {"token": record["token"], "adapter_id": record["adapter_id"]}

    return app
