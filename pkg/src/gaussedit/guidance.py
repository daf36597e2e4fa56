"""Guidance providers: the uniform contract for turning (image, prompt,
timestep) into a score residual or a denoised image.

Three pieces live here: prompt templating with the OBJECT placeholder and its
object-term/category-term substitution, the deterministic two-backend
alternation schedule, and the providers themselves. The analytic mock makes
the whole pipeline runnable and testable offline; the remote client speaks
the JSON/HTTP wire protocol to a diffusion service.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import requests

from .errors import FormatError, InvalidParameterError, ProtocolError, ServiceError
from .pngio import decode_f32_b64, decode_png_b64, encode_png_b64, to_uint8

PLACEHOLDER = "OBJECT"

OBJECT_TERM = "object_term"
CATEGORY_TERM = "category_term"

SINGLE_VIEW = "sv"
MULTI_VIEW = "mv"

# The multi-view backend always works on 4 views at orthogonal azimuths.
MULTI_VIEW_ARITY = 4
MULTI_VIEW_AZIMUTHS = (0.0, 90.0, 180.0, 270.0)

EMBED_KINDS = ("clip_text", "clip_image", "dino_image")


@dataclass(frozen=True)
class Prompt:
    """Editing prompt template with a single OBJECT placeholder.

    object_term is the personalized phrasing (e.g. a learned token plus the
    category); category_term is the plain category used when the backend has
    no personalized weights.
    """

    template: str
    object_term: str
    category_term: str
    negative: str = ""

    def __post_init__(self):
        if self.template.count(PLACEHOLDER) != 1:
            raise InvalidParameterError(
                f"template must contain {PLACEHOLDER!r} exactly once: {self.template!r}"
            )
        for name in ("object_term", "category_term"):
            if not getattr(self, name).strip():
                raise InvalidParameterError(f"{name} must be non-empty")


def substitute(prompt: Prompt, mode: str) -> str:
    """Fill the placeholder with the selected term; nothing else changes."""
    if mode == OBJECT_TERM:
        term = prompt.object_term
    elif mode == CATEGORY_TERM:
        term = prompt.category_term
    else:
        raise InvalidParameterError(f"unknown substitution mode {mode!r}")
    return prompt.template.replace(PLACEHOLDER, term)


@dataclass(frozen=True)
class AlternationSchedule:
    """m:n backend cycle: each window of m+n iterations runs m single-view
    steps then n multi-view steps."""

    single_view: int = 1
    multi_view: int = 1

    def __post_init__(self):
        if self.single_view < 0 or self.multi_view < 0:
            raise InvalidParameterError("schedule counts must be non-negative")
        if self.single_view + self.multi_view == 0:
            raise InvalidParameterError("schedule cannot be 0:0")


def select_backend(iteration: int, schedule: AlternationSchedule) -> str:
    """Deterministic backend for an iteration under the m:n schedule."""
    if iteration < 0:
        raise InvalidParameterError("iteration must be >= 0")
    phase = iteration % (schedule.single_view + schedule.multi_view)
    return SINGLE_VIEW if phase < schedule.single_view else MULTI_VIEW


@dataclass
class GuidanceRequest:
    """One residual query: the rendered view(s) plus conditioning."""

    images: list  # of HxWx3 float arrays; 1 for sv, 4 for mv
    prompt_text: str
    timestep: float
    cfg_scale: float = 7.5
    seed: int = 0
    view_poses: list | None = None  # [{azimuth, elevation, radius}] for mv

    def __post_init__(self):
        if not 0.0 < self.timestep < 1.0:
            raise InvalidParameterError("timestep must be in (0,1)")
        if not self.images:
            raise InvalidParameterError("request needs at least one image")
        shapes = {np.asarray(im).shape for im in self.images}
        if len(shapes) != 1:
            raise InvalidParameterError("all request images must share one shape")


@dataclass
class GuidanceResponse:
    residuals: list | None = None  # HxWx3 float arrays, one per request image
    denoised: list | None = None


class GuidanceProvider:
    """Interface every guidance backend implements."""

    def residual(self, req: GuidanceRequest, backend: str) -> GuidanceResponse:
        raise NotImplementedError

    def img2img(self, image: np.ndarray, prompt_text: str, strength: float, seed: int) -> np.ndarray:
        raise NotImplementedError

    def embed(self, kind: str, payload) -> np.ndarray:
        raise NotImplementedError

    def personalize(self, images, category: str) -> tuple[str, str]:
        raise NotImplementedError


# --- analytic mock --------------------------------------------------------------


def mock_residual(req: GuidanceRequest, target: np.ndarray, gain: float) -> GuidanceResponse:
    """Residual pointing from the target to the image: gain * (image - target).

    Gradient descent on this residual pulls renders toward the target, giving
    the score-distillation loop a verifiable offline objective. Zero exactly
    when image == target.
    """
    target = np.asarray(target, dtype=np.float64)
    residuals = []
    for im in req.images:
        im = np.asarray(im, dtype=np.float64)
        if im.shape != target.shape:
            raise InvalidParameterError(
                f"image shape {im.shape} does not match target {target.shape}"
            )
        residuals.append(gain * (im - target))
    return GuidanceResponse(residuals=residuals)


def _digest_seed(*parts) -> int:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, str):
            h.update(p.encode("utf-8"))
        elif isinstance(p, bytes):
            h.update(p)
        else:
            h.update(np.ascontiguousarray(p).tobytes())
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")


class MockGuidance(GuidanceProvider):
    """Deterministic in-process stand-in for the diffusion service.

    residual pulls toward a fixed target image; img2img blends toward the
    target by strength (pure echo when no target is set or strength is 0);
    embeddings are unit vectors seeded from a content hash of the payload.
    """

    def __init__(self, target: np.ndarray | None = None, gain: float = 1.0, embed_dim: int = 512):
        self.target = None if target is None else np.asarray(target, dtype=np.float64)
        self.gain = float(gain)
        self.embed_dim = int(embed_dim)

    def residual(self, req: GuidanceRequest, backend: str) -> GuidanceResponse:
        if self.target is None:
            return GuidanceResponse(
                residuals=[np.zeros_like(np.asarray(im, dtype=np.float64)) for im in req.images]
            )
        return mock_residual(req, self.target, self.gain)

    def img2img(self, image, prompt_text, strength, seed) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if not 0.0 <= strength <= 1.0:
            raise InvalidParameterError("strength must be in [0,1]")
        if self.target is None or strength == 0.0:
            return image.copy()
        if self.target.shape != image.shape:
            raise InvalidParameterError(
                f"image shape {image.shape} does not match target {self.target.shape}"
            )
        return (1.0 - strength) * image + strength * self.target

    def embed(self, kind: str, payload) -> np.ndarray:
        if kind not in EMBED_KINDS:
            raise InvalidParameterError(f"unknown embedding kind {kind!r}")
        if kind == "clip_text":
            seed = _digest_seed(kind, str(payload))
        else:
            seed = _digest_seed(kind, to_uint8(np.asarray(payload)))
        rng = np.random.default_rng(seed)
        v = rng.normal(size=self.embed_dim)
        return v / np.linalg.norm(v)

    def personalize(self, images, category) -> tuple[str, str]:
        if not images:
            raise InvalidParameterError("personalize needs at least one reference image")
        digest = hashlib.sha256()
        for im in images:
            digest.update(to_uint8(np.asarray(im)).tobytes())
        digest.update(str(category).encode("utf-8"))
        return "V*", digest.hexdigest()[:12]


# --- remote client --------------------------------------------------------------


class RemoteGuidance(GuidanceProvider):
    """Client for the diffusion service wire protocol (JSON over HTTP).

    Transport failures are retried a bounded number of times and then raised
    as retryable service errors; malformed responses raise protocol errors;
    errors reported by the service are surfaced verbatim.
    """

    def __init__(self, base_url: str, timeout: float = 120.0, max_retries: int = 3):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_retries = max(1, int(max_retries))
        self.session = requests.Session()

    def _request(self, method: str, path: str, payload=None) -> dict:
        url = f"{self.base_url}{path}"
        last_exc = None
        for _ in range(self.max_retries):
            try:
                resp = self.session.request(method, url, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code >= 400:
                try:
                    detail = resp.json().get("error", resp.text)
                except ValueError:
                    detail = resp.text
                raise ServiceError(
                    f"service error {resp.status_code}: {detail}",
                    retryable=resp.status_code >= 500,
                )
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"non-JSON response from {path}") from exc
        raise ServiceError(f"cannot reach guidance service at {url}: {last_exc}", retryable=True)

    def residual(self, req: GuidanceRequest, backend: str) -> GuidanceResponse:
        if backend not in (SINGLE_VIEW, MULTI_VIEW):
            raise InvalidParameterError(f"unknown backend {backend!r}")
        if backend == MULTI_VIEW and len(req.images) != MULTI_VIEW_ARITY:
            raise InvalidParameterError(
                f"multi-view backend needs {MULTI_VIEW_ARITY} images, got {len(req.images)}"
            )
        if backend == SINGLE_VIEW and len(req.images) != 1:
            raise InvalidParameterError("single-view backend needs exactly one image")
        payload = {
            "backend": backend,
            "prompt": req.prompt_text,
            "negative_prompt": "",
            "images": [encode_png_b64(im) for im in req.images],
            "timestep": float(req.timestep),
            "cfg_scale": float(req.cfg_scale),
            "seed": int(req.seed),
        }
        if req.view_poses is not None:
            payload["views"] = req.view_poses
        body = self._request("POST", "/v1/residual", payload)
        entries = body.get("residuals")
        if not isinstance(entries, list) or len(entries) != len(req.images):
            raise ProtocolError("residual count does not match request images")
        residuals = []
        for entry, im in zip(entries, req.images):
            try:
                arr = decode_f32_b64(entry["data_b64"], entry["shape"])
            except (KeyError, TypeError, FormatError) as exc:
                raise ProtocolError(f"malformed residual entry: {exc}") from exc
            expected = np.asarray(im).shape
            if arr.shape != expected:
                raise ProtocolError(
                    f"residual shape {arr.shape} does not match image {expected}"
                )
            if not np.all(np.isfinite(arr)):
                raise ProtocolError("non-finite residual from service")
            residuals.append(arr)
        return GuidanceResponse(residuals=residuals)

    def img2img(self, image, prompt_text, strength, seed) -> np.ndarray:
        payload = {
            "prompt": prompt_text,
            "image": encode_png_b64(image),
            "strength": float(strength),
            "seed": int(seed),
        }
        body = self._request("POST", "/v1/img2img", payload)
        if "image" not in body:
            raise ProtocolError("img2img response missing image")
        out = decode_png_b64(body["image"])
        if out.shape != np.asarray(image).shape:
            raise ProtocolError(
                f"img2img returned shape {out.shape}, expected {np.asarray(image).shape}"
            )
        return out

    def embed(self, kind: str, payload) -> np.ndarray:
        if kind not in EMBED_KINDS:
            raise InvalidParameterError(f"unknown embedding kind {kind!r}")
        body = {"kind": kind}
        if kind == "clip_text":
            body["text"] = str(payload)
        else:
            body["image"] = encode_png_b64(payload)
        resp = self._request("POST", "/v1/embed", body)
        values = resp.get("embedding")
        dim = resp.get("dim")
        if not isinstance(values, list) or dim != len(values):
            raise ProtocolError("embed response dim does not match vector length")
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ProtocolError("non-finite embedding from service")
        return arr

    def personalize(self, images, category) -> tuple[str, str]:
        payload = {
            "images": [encode_png_b64(im) for im in images],
            "category": str(category),
            "steps": 250,
        }
        body = self._request("POST", "/v1/personalize", payload)
        if "token" not in body or "adapter_id" not in body:
            raise ProtocolError("personalize response missing token or adapter_id")
        return str(body["token"]), str(body["adapter_id"])

    def health(self) -> dict:
        return self._request("GET", "/healthz")
