"""Model backends behind the wire protocol.

Two implementations ship today. The mock backend answers every request
without any model: zero residuals shaped like the inputs, byte-identical
img2img echoes, and hash-seeded pseudo-embeddings (deterministic per
payload). The weights backend is the mount point for real single-view /
multi-view diffusion and CLIP/DINO encoders; until weights exist in the
configured directory it reports itself unavailable, which surfaces as a
degraded /healthz and 503s on inference routes.
"""

import hashlib

import numpy as np

from .codecs import decode_png_b64, encode_f32_b64

SINGLE_VIEW = "sv"
MULTI_VIEW = "mv"
BACKENDS = (SINGLE_VIEW, MULTI_VIEW)
MULTI_VIEW_ARITY = 4

ENCODER_DIMS = {"clip_text": 512, "clip_image": 512, "dino_image": 384}


def _seed_from(*parts: bytes) -> int:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


class MockBackend:
    """Protocol-complete stand-in used for conformance testing."""

    mode = "mock"
    available = True
    reason = None

    def residual(self, images_b64, prompt, timestep, cfg_scale, seed):
        out = []
        for payload in images_b64:
            img = decode_png_b64(payload)
            out.append(encode_f32_b64(np.zeros(img.shape, dtype=np.float32)))
        return out

    def img2img(self, image_b64, prompt, strength, seed):
        # byte-identical echo: the strongest possible strength-0 contract
        return image_b64

    def embed(self, kind, payload: bytes):
        dim = ENCODER_DIMS[kind]
        rng = np.random.default_rng(_seed_from(kind.encode("ascii"), payload))
        vec = rng.normal(size=dim)
        vec /= np.linalg.norm(vec)
        return [float(v) for v in vec]


class WeightsBackend:
    """Real-model path: requires diffusion and encoder weights on disk.

    Loading and inference for the actual models live outside this artifact;
    with no weights present every request is refused and health reports
    degraded rather than lying about capacity.
    """

    mode = "weights"
    available = False

    def __init__(self, weights_dir: str):
        self.weights_dir = weights_dir
        self.reason = (
            f"no model weights loaded from {weights_dir!r}; "
            "run with --mock for the model-free protocol backend"
        )
