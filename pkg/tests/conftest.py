"""Shared scene/camera generators for renderer and optimizer tests."""

import numpy as np
import pytest

from gaussedit import GaussianScene
from gaussedit.cameras import look_at
from gaussedit.render import SIGMA_MAX, TRANSMITTANCE_MIN, project


def front_camera(width=32, height=32, distance=4.0, fov_y_deg=50.0, znear=0.01):
    """Camera on +z looking at the origin."""
    return look_at(
        eye=(0.0, 0.0, distance),
        target=(0.0, 0.0, 0.0),
        width=width,
        height=height,
        fov_y_deg=fov_y_deg,
        znear=znear,
    )


def random_render_scene(
    rng,
    n,
    spread=0.8,
    scale_range=(-2.5, -1.0),
    opacity_range=(-2.0, 1.5),
    sh_range=1.2,
    editable_start=0,
):
    """A well-conditioned random scene near the origin.

    Splats sit well inside the camera frustum with moderate opacity, so the
    composited transmittance stays clear of the early-exit floor and the
    density clamp: the regime where the tiled renderer and the naive
    per-pixel oracle agree to float64 rounding.
    """
    mu = rng.uniform(-spread, spread, size=(n, 3))
    log_scale = rng.uniform(*scale_range, size=(n, 3))
    rot = rng.normal(size=(n, 4))
    sh0 = rng.uniform(-sh_range, sh_range, size=(n, 3))
    opacity_logit = rng.uniform(*opacity_range, size=n)
    return GaussianScene(
        mu=mu,
        log_scale=log_scale,
        rot=rot,
        sh0=sh0,
        opacity_logit=opacity_logit,
        editable_start=editable_start,
    )


def oracle_render(scene, cam, subset="all", background=None):
    """Direct compositing at every pixel: no footprint rectangles, no early
    termination, no tiling. Shares only the projection with the renderer."""
    if subset == "editable":
        indices = range(scene.editable_start, len(scene))
    else:
        indices = range(len(scene))
    splats = []
    for i in indices:
        s = project(scene[i], cam)
        if s is not None:
            splats.append((s.depth, i, s))
    splats.sort(key=lambda t: (t[0], t[1]))

    bg = np.zeros(3) if background is None else np.asarray(background, dtype=float)
    H, W = cam.height, cam.width
    img = np.zeros((H, W, 3))
    for i in range(H):
        for j in range(W):
            px = np.array([j + 0.5, i + 0.5])
            color = np.zeros(3)
            T = 1.0
            for _, _, s in splats:
                d = px - s.mean2d
                A, B, C = s.cov2d[0, 0], s.cov2d[0, 1], s.cov2d[1, 1]
                det = A * C - B * B
                q = (C * d[0] ** 2 - 2 * B * d[0] * d[1] + A * d[1] ** 2) / det
                sigma = min(s.opacity * np.exp(-0.5 * q), SIGMA_MAX)
                color += s.color * (sigma * T)
                T *= 1.0 - sigma
            img[i, j] = color + bg * T
    return img


def oracle_min_transmittance(scene, cam, subset="all"):
    """Smallest per-pixel transmittance under the oracle (no early exit)."""
    if subset == "editable":
        indices = range(scene.editable_start, len(scene))
    else:
        indices = range(len(scene))
    splats = [project(scene[i], cam) for i in indices]
    splats = [s for s in splats if s is not None]
    H, W = cam.height, cam.width
    tmin = 1.0
    for i in range(H):
        for j in range(W):
            px = np.array([j + 0.5, i + 0.5])
            T = 1.0
            for s in splats:
                d = px - s.mean2d
                A, B, C = s.cov2d[0, 0], s.cov2d[0, 1], s.cov2d[1, 1]
                det = A * C - B * B
                q = (C * d[0] ** 2 - 2 * B * d[0] * d[1] + A * d[1] ** 2) / det
                sigma = min(s.opacity * np.exp(-0.5 * q), SIGMA_MAX)
                T *= 1.0 - sigma
            tmin = min(tmin, T)
    return tmin


@pytest.fixture
def rng():
    return np.random.default_rng(0)
