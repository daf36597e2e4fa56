"""Wire-format codecs: PNG base64 images and float32 base64 arrays.

The protocol exchanges images as base64 PNG and float arrays as base64
little-endian float32 with an explicit shape, so both sides can check
payloads without trusting each other's numerics.
"""

import base64
import binascii
import io

import numpy as np
from PIL import Image


class CodecError(ValueError):
    """Payload bytes do not decode as the advertised format."""


def decode_png_b64(data: str) -> np.ndarray:
    """Base64 PNG -> float64 HxWx3 array in [0, 1]."""
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, TypeError) as exc:
        raise CodecError(f"invalid base64 image payload: {exc}") from exc
    try:
        with Image.open(io.BytesIO(raw)) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as exc:  # Pillow raises several unrelated types
        raise CodecError(f"payload is not a decodable image: {exc}") from exc
    return rgb / 255.0


def encode_png_b64(image: np.ndarray) -> str:
    """Float HxWx3 array in [0, 1] -> base64 PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise CodecError(f"expected HxWx3 image, got shape {arr.shape}")
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def encode_f32_b64(arr: np.ndarray) -> dict:
    """Array -> {"data_b64", "shape"} with little-endian float32 payload."""
    a = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "data_b64": base64.b64encode(a.tobytes()).decode("ascii"),
        "shape": list(a.shape),
    }
