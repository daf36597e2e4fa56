"""Edit-quality metrics over rendered view sets.

Two scores: a directional text-image agreement (how well the image change
tracks the caption change, via CLIP-style embeddings) and a [0,1]-mapped
cosine similarity between DINO-style embeddings of edited views and a
reference image. Embeddings come through a guidance provider, so the same
code runs against the mock or a real service.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import (
    InvalidParameterError,
    NumericalDegeneracyError,
    ServiceError,
)
from .guidance import GuidanceProvider
from .render import SUBSET_ALL, render
from .scene import GaussianScene

logger = logging.getLogger(__name__)


def _as_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise InvalidParameterError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{name} has non-finite entries")
    return arr


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise NumericalDegeneracyError("degenerate direction: zero-norm vector")
    c = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, c))


def clip_directional(e_po, e_pe, e_io, e_ie) -> dict:
    """Directional agreement between a caption change and an image change.

    Returns both conventions: eq9_value = 1 - cos (lower is better) and
    reported_score = 100 * cos (higher is better); the two always satisfy
    reported_score == 100 - 100 * eq9_value.
    """
    e_po = _as_vector(e_po, "e_po")
    e_pe = _as_vector(e_pe, "e_pe")
    e_io = _as_vector(e_io, "e_io")
    e_ie = _as_vector(e_ie, "e_ie")
    if e_po.shape != e_pe.shape:
        raise InvalidParameterError("text embedding dims differ")
    if e_io.shape != e_ie.shape:
        raise InvalidParameterError("image embedding dims differ")
    dp = e_pe - e_po
    di = e_ie - e_io
    if not np.any(dp):
        raise NumericalDegeneracyError("degenerate direction: caption change is zero")
    if not np.any(di):
        raise NumericalDegeneracyError("degenerate direction: image change is zero")
    c = _cosine(dp, di)
    return {"eq9_value": 1.0 - c, "reported_score": 100.0 * c}


def dino_similarity(e_a, e_b) -> float:
    """Cosine similarity mapped to [0,1]: identical 1, orthogonal 0.5,
    opposite 0."""
    a = _as_vector(e_a, "e_a")
    b = _as_vector(e_b, "e_b")
    if a.shape != b.shape:
        raise InvalidParameterError("embedding dims differ")
    return (_cosine(a, b) + 1.0) / 2.0


def evaluate_scene(
    scene_before: GaussianScene,
    scene_after: GaussianScene,
    cameras,
    provider: GuidanceProvider,
    caption_before: str | None = None,
    caption_after: str | None = None,
    reference_image=None,
    background=(0.0, 0.0, 0.0),
) -> dict:
    """Render both scenes per camera and score the edit.

    Text mode (both captions given) computes the directional score per view;
    image mode (reference image given) computes DINO similarity of each
    edited view against the reference. A provider failure on one view drops
    that view with a log line; if every view fails, the whole evaluation
    errors out.
    """
    cameras = list(cameras)
    if not cameras:
        raise InvalidParameterError("need at least one camera")
    if (caption_before is None) != (caption_after is None):
        raise InvalidParameterError(
            "text mode needs both captions, got only one")
    text_mode = caption_before is not None
    image_mode = reference_image is not None
    if not text_mode and not image_mode:
        raise InvalidParameterError(
            "need captions (text mode) and/or a reference image (image mode)")

    e_po = e_pe = None
    if text_mode:
        e_po = provider.embed("clip_text", caption_before)
        e_pe = provider.embed("clip_text", caption_after)
        if not np.any(np.asarray(e_pe) - np.asarray(e_po)):
            raise NumericalDegeneracyError(
                "degenerate direction: captions embed identically")
    e_ref = None
    if image_mode:
        e_ref = provider.embed("dino_image", np.asarray(reference_image, dtype=np.float64))

    views = []
    dropped = []
    for idx, cam in enumerate(cameras):
        img_before = render(scene_before, cam, subset=SUBSET_ALL,
                            background=background).pixels
        img_after = render(scene_after, cam, subset=SUBSET_ALL,
                           background=background).pixels
        row = {"index": idx}
        try:
            if text_mode:
                e_io = provider.embed("clip_image", img_before)
                e_ie = provider.embed("clip_image", img_after)
                row.update(clip_directional(e_po, e_pe, e_io, e_ie))
            if image_mode:
                e_view = provider.embed("dino_image", img_after)
                row["dino"] = dino_similarity(e_view, e_ref)
        except ServiceError as exc:
            logger.warning("view %d dropped: %s", idx, exc)
            dropped.append({"index": idx, "error": str(exc)})
            continue
        views.append(row)

    if not views:
        raise ServiceError("embedding failed for every view", retryable=False)

    mean = {}
    for key in ("eq9_value", "reported_score", "dino"):
        vals = [row[key] for row in views if key in row]
        if vals:
            mean[key] = float(np.mean(vals))

    report = {
        "views": views,
        "mean": mean,
        "counts": {
            "cameras": len(cameras),
            "evaluated": len(views),
            "dropped": len(dropped),
        },
        "dropped": dropped,
    }
    if text_mode:
        report["captions"] = {"before": caption_before, "after": caption_after}
    report["modes"] = {"text": text_mode, "image": image_mode}
    return report
