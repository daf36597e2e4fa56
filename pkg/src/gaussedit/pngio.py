"""PNG export/import and the byte-level codecs of the guidance wire protocol:
8-bit PNGs as base64 strings, float arrays as little-endian float32 base64
with an explicit shape."""

from __future__ import annotations

import base64
import io
import os

import numpy as np
from PIL import Image as PilImage

from .errors import FormatError, InvalidParameterError


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Float image in [0,1] to 8-bit, with a defensive clamp."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if not np.all(np.isfinite(pixels)):
        raise InvalidParameterError("non-finite pixel values")
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(data: np.ndarray) -> np.ndarray:
    return np.asarray(data, dtype=np.float64) / 255.0


def save_png(pixels: np.ndarray, path: str | os.PathLike) -> None:
    arr = to_uint8(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidParameterError(f"expected HxWx3 image, got shape {arr.shape}")
    PilImage.fromarray(arr, mode="RGB").save(os.fspath(path), format="PNG")


def load_png(path: str | os.PathLike) -> np.ndarray:
    try:
        with PilImage.open(os.fspath(path)) as im:
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise FormatError(f"cannot read PNG {os.fspath(path)!r}: {exc}") from exc
    return from_uint8(arr)


def encode_png_b64(pixels: np.ndarray) -> str:
    arr = to_uint8(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidParameterError(f"expected HxWx3 image, got shape {arr.shape}")
    buf = io.BytesIO()
    PilImage.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(data: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
        with PilImage.open(io.BytesIO(raw)) as im:
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise FormatError(f"invalid PNG payload: {exc}") from exc
    return from_uint8(arr)


def encode_f32_b64(arr: np.ndarray) -> tuple[str, list[int]]:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError("non-finite values in float payload")
    data = arr.astype("<f4").tobytes()
    return base64.b64encode(data).decode("ascii"), list(arr.shape)


def decode_f32_b64(data: str, shape) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except Exception as exc:
        raise FormatError(f"invalid base64 float payload: {exc}") from exc
    shape = tuple(int(s) for s in shape)
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise FormatError(
            f"float payload holds {len(raw)} bytes, shape {shape} needs {expected}"
        )
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
