"""Differentiable CPU splatting: EWA projection, front-to-back alpha
compositing, and an analytic backward pass for every Gaussian parameter.

Forward path: 3D Gaussians are activated (exp / sigmoid / SH-to-color),
projected to 2D splats with first-order EWA covariance plus a fixed pixel
dilation, depth-sorted (stable, so equal depths resolve by Gaussian index),
and composited front to back with per-pixel transmittance tracking.

Backward path: a back-to-front replay reconstructs each pixel's transmittance
just before every splat and propagates image gradients through compositing,
the 2D footprint, the projection Jacobian, covariance construction, and the
activations. No autodiff framework is involved; the derivation is checked
against central finite differences in the test suite.

Speed is a secondary concern: correctness and differentiability are the
contract here, and everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cameras import Camera
from .errors import (
    ContractViolationError,
    GradientPropagationError,
    InvalidParameterError,
    NumericalDegeneracyError,
)
from .scene import SH_C0, Gaussian, GaussianScene, sigmoid

# Per-splat density clamp and per-pixel transmittance floor (standard splatting
# practice; both are part of the rendering function, not tunables).
SIGMA_MAX = 0.99
TRANSMITTANCE_MIN = 1e-4
# Isotropic screen-space dilation added to every 2D covariance, in pixels^2.
DILATION = 0.3
# Splats are culled when their 3-sigma footprint misses the viewport entirely.
CULL_SIGMA = 3.0
# Pixels are evaluated inside the bounding rectangle of the Mahalanobis ellipse
# q <= RECT_Q; exp(-RECT_Q/2) = 1e-16, so the truncated tail is at the
# float64 rounding floor and cannot disturb oracle comparisons.
RECT_Q = 2.0 * math.log(1e16)

SUBSET_ALL = "all"
SUBSET_EDITABLE = "editable"

PARAM_KEYS = ("mu", "log_scale", "rot", "sh0", "opacity_logit")


@dataclass
class Image:
    """Rendered RGB in [0,1] with optional accumulated opacity."""

    pixels: np.ndarray
    alpha: np.ndarray | None = None


@dataclass
class Splat2D:
    """A projected Gaussian: screen-space mean and covariance, camera depth,
    activated color and opacity."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


def _subset_indices(scene: GaussianScene, subset: str) -> np.ndarray:
    if subset == SUBSET_ALL:
        return np.arange(len(scene))
    if subset == SUBSET_EDITABLE:
        return np.arange(scene.editable_start, len(scene))
    raise InvalidParameterError(f"unknown render subset {subset!r}")


def _background(background) -> np.ndarray:
    if background is None:
        return np.zeros(3)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(bg)):
        raise InvalidParameterError("non-finite background color")
    return bg


class _Prepared:
    """Activated, projected, culled and depth-sorted splats plus every
    intermediate the backward pass needs, all ordered front to back."""

    __slots__ = (
        "indices",
        "qn",
        "q_norm",
        "scale",
        "alpha",
        "color",
        "color_gate",
        "rot_mat",
        "p_cam",
        "mean2d",
        "cov2d",
        "conic",
        "rect",
        "depth",
        "sigma3",
    )


def _quat_normalize_batch(rot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(rot, axis=1)
    if np.any(norm == 0.0):
        raise InvalidParameterError("zero-norm quaternion in scene")
    return rot / norm[:, None], norm


def _rotation_matrices(qn: np.ndarray) -> np.ndarray:
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    R = np.empty((qn.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _prepare(scene: GaussianScene, cam: Camera, subset: str) -> _Prepared:
    idx = _subset_indices(scene, subset)
    prep = _Prepared()
    if idx.size == 0:
        prep.indices = idx
        prep.depth = np.zeros(0)
        prep.rect = np.zeros((0, 4), dtype=np.intp)
        return prep

    mu = scene.mu[idx]
    log_scale = scene.log_scale[idx]
    rot = scene.rot[idx]
    sh0 = scene.sh0[idx]
    opacity_logit = scene.opacity_logit[idx]

    qn, q_norm = _quat_normalize_batch(rot)
    scale = np.exp(log_scale)
    alpha = sigmoid(opacity_logit)
    pre_color = 0.5 + SH_C0 * sh0
    color = np.clip(pre_color, 0.0, 1.0)
    color_gate = (pre_color > 0.0) & (pre_color < 1.0)
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(color))):
        raise NumericalDegeneracyError("activation produced non-finite values")

    R3 = _rotation_matrices(qn)
    W = cam.rotation
    p_cam = mu @ W.T + cam.translation
    z = p_cam[:, 2]

    visible = z > cam.znear
    vz = np.where(visible, z, 1.0)  # placeholder depth so culled rows never divide by ~0
    u = cam.fx * p_cam[:, 0] / vz + cam.cx
    v = cam.fy * p_cam[:, 1] / vz + cam.cy

    # First-order EWA: cov2d = (J W) Sigma (J W)^T + dilation.
    V = R3 * scale[:, None, :]
    Sigma = V @ np.swapaxes(V, 1, 2)
    J = np.zeros((idx.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx / vz
    J[:, 0, 2] = -cam.fx * p_cam[:, 0] / vz**2
    J[:, 1, 1] = cam.fy / vz
    J[:, 1, 2] = -cam.fy * p_cam[:, 1] / vz**2
    M = J @ W
    cov2d = M @ Sigma @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION

    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (A + C)
    disc = np.sqrt(np.maximum(0.25 * (A - C) ** 2 + B * B, 0.0))
    lam_max = mid + disc
    radius = CULL_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))
    on_screen = (
        (u + radius >= 0.0)
        & (u - radius <= cam.width)
        & (v + radius >= 0.0)
        & (v - radius <= cam.height)
    )
    keep = visible & on_screen
    if not np.all(np.isfinite(cov2d[keep])):
        raise NumericalDegeneracyError("non-finite projected covariance")

    order = np.argsort(z[keep], kind="stable")

    def take(arr):
        return arr[keep][order]

    prep.indices = take(idx)
    prep.qn = take(qn)
    prep.q_norm = take(q_norm)
    prep.scale = take(scale)
    prep.alpha = take(alpha)
    prep.color = take(color)
    prep.color_gate = take(color_gate)
    prep.rot_mat = take(R3)
    prep.p_cam = take(p_cam)
    prep.mean2d = np.stack([take(u), take(v)], axis=1)
    prep.cov2d = take(cov2d)
    prep.depth = take(z)
    prep.sigma3 = take(radius)

    # Analytic 2x2 inverse; dilation bounds both eigenvalues away from zero.
    A, B, C = prep.cov2d[:, 0, 0], prep.cov2d[:, 0, 1], prep.cov2d[:, 1, 1]
    det = A * C - B * B
    prep.conic = np.stack([C / det, -B / det, A / det], axis=1)

    # Inclusive pixel-index rectangle bounding the ellipse q <= RECT_Q.
    half_x = np.sqrt(RECT_Q * A)
    half_y = np.sqrt(RECT_Q * C)
    ux, vy = prep.mean2d[:, 0], prep.mean2d[:, 1]
    j0 = np.maximum(np.ceil(ux - half_x - 0.5), 0.0).astype(np.intp)
    j1 = np.minimum(np.floor(ux + half_x - 0.5), cam.width - 1).astype(np.intp)
    i0 = np.maximum(np.ceil(vy - half_y - 0.5), 0.0).astype(np.intp)
    i1 = np.minimum(np.floor(vy + half_y - 0.5), cam.height - 1).astype(np.intp)
    prep.rect = np.stack([j0, j1, i0, i1], axis=1)
    return prep


def _footprint(prep: _Prepared, r: int, xs: np.ndarray, ys: np.ndarray):
    """Per-pixel offsets and Mahalanobis form of splat r over its rectangle.

    Returns None when the rectangle is empty. Used by both forward and
    backward so the replayed densities are bit-identical.
    """
    j0, j1, i0, i1 = prep.rect[r]
    if j0 > j1 or i0 > i1:
        return None
    dx = xs[j0 : j1 + 1] - prep.mean2d[r, 0]
    dy = ys[i0 : i1 + 1] - prep.mean2d[r, 1]
    a, b, c = prep.conic[r]
    q = (
        a * dx[None, :] ** 2
        + 2.0 * b * dy[:, None] * dx[None, :]
        + c * dy[:, None] ** 2
    )
    return (slice(i0, i1 + 1), slice(j0, j1 + 1)), dx, dy, q


def _composite(prep: _Prepared, cam: Camera, background: np.ndarray):
    """Front-to-back compositing over the whole image.

    Returns (image without clamping, final transmittance, last composited
    splat rank per pixel, -1 where none).
    """
    H, W = cam.height, cam.width
    img = np.zeros((H, W, 3))
    T = np.ones((H, W))
    last_rank = np.full((H, W), -1, dtype=np.int64)
    xs, ys = cam.pixel_centers()

    for r in range(prep.depth.shape[0]):
        hit = _footprint(prep, r, xs, ys)
        if hit is None:
            continue
        (rows, cols), _, _, q = hit
        Tsub = T[rows, cols]
        active = Tsub >= TRANSMITTANCE_MIN
        if not active.any():
            continue
        sigma = np.minimum(prep.alpha[r] * np.exp(-0.5 * q), SIGMA_MAX)
        w = np.where(active, sigma * Tsub, 0.0)
        img[rows, cols, :] += w[:, :, None] * prep.color[r][None, None, :]
        T[rows, cols] = np.where(active, Tsub * (1.0 - sigma), Tsub)
        lr = last_rank[rows, cols]
        last_rank[rows, cols] = np.where(active, r, lr)

    img += background[None, None, :] * T[:, :, None]
    return img, T, last_rank


def render(
    scene: GaussianScene,
    cam: Camera,
    subset: str = SUBSET_ALL,
    background=None,
) -> Image:
    """Render the chosen subset of the scene from one camera.

    Deterministic: equal inputs give bit-identical images. An empty subset
    yields the plain background.
    """
    bg = _background(background)
    prep = _prepare(scene, cam, subset)
    img, T, _ = _composite(prep, cam, bg)
    return Image(pixels=np.clip(img, 0.0, 1.0), alpha=1.0 - T)


# Partial derivatives of the rotation matrix w.r.t. unit quaternion components,
# as functions of (w, x, y, z); each returns a 3x3 matrix scaled by 2.
def _dR_dq(qn: np.ndarray) -> np.ndarray:
    w, x, y, z = qn
    return 2.0 * np.array(
        [
            [[0, -z, y], [z, 0, -x], [-y, x, 0]],
            [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
            [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
            [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
        ]
    )


def render_backward(
    scene: GaussianScene,
    cam: Camera,
    subset: str,
    dL_dimage: np.ndarray,
    background=None,
) -> dict[str, np.ndarray]:
    """Gradients of L = sum(dL_dimage * rendered_image) for every parameter.

    Returns full-length arrays keyed by parameter name; rows outside the
    editable range (and splats that were culled) are zero. The compositing
    order is replayed back to front, reconstructing per-pixel transmittance
    exactly as the forward pass produced it.
    """
    dL_dimage = np.asarray(dL_dimage, dtype=np.float64)
    if dL_dimage.shape != (cam.height, cam.width, 3):
        raise InvalidParameterError(
            f"dL_dimage shape {dL_dimage.shape} does not match {cam.height}x{cam.width}x3"
        )
    if not np.all(np.isfinite(dL_dimage)):
        raise GradientPropagationError("non-finite upstream image gradient")

    n = len(scene)
    grads = {
        "mu": np.zeros((n, 3)),
        "log_scale": np.zeros((n, 3)),
        "rot": np.zeros((n, 4)),
        "sh0": np.zeros((n, 3)),
        "opacity_logit": np.zeros(n),
    }

    bg = _background(background)
    prep = _prepare(scene, cam, subset)
    K = prep.depth.shape[0]
    if K == 0:
        return grads

    _, T_final, last_rank = _composite(prep, cam, bg)
    xs, ys = cam.pixel_centers()

    # Replay state: S is the contribution of everything behind the current
    # splat (later splats plus background), T_run the transmittance after it.
    S = bg[None, None, :] * T_final[:, :, None]
    T_run = T_final.copy()
    W = cam.rotation

    for r in range(K - 1, -1, -1):
        hit = _footprint(prep, r, xs, ys)
        if hit is None:
            continue
        (rows, cols), dx, dy, q = hit
        m = last_rank[rows, cols] >= r  # pixels where splat r was composited
        if not m.any():
            continue

        G2 = np.exp(-0.5 * q)
        sigma_raw = prep.alpha[r] * G2
        clamped = sigma_raw >= SIGMA_MAX
        sigma = np.minimum(sigma_raw, SIGMA_MAX)
        one_minus = 1.0 - sigma

        T_sub = T_run[rows, cols]
        T_before = np.where(m, T_sub / one_minus, T_sub)
        S_sub = S[rows, cols]
        dL_sub = dL_dimage[rows, cols]

        # d pixel / d sigma_r holding everything else fixed: this splat's own
        # term plus the attenuation of everything behind it.
        dI_dsigma = (
            prep.color[r][None, None, :] * T_before[:, :, None]
            - S_sub / one_minus[:, :, None]
        )
        dsigma = np.where(m, np.einsum("ijc,ijc->ij", dL_sub, dI_dsigma), 0.0)

        w = np.where(m, sigma * T_before, 0.0)
        dcolor = np.einsum("ijc,ij->c", dL_sub, w)

        open_gate = np.where(clamped, 0.0, dsigma)
        dalpha = float(np.sum(open_gate * G2))
        dG2 = open_gate * prep.alpha[r]
        dLdq = -0.5 * (dG2 * G2)

        a, b, c = prep.conic[r]
        DX = dx[None, :]
        DY = dy[:, None]
        dCa = float(np.sum(dLdq * DX**2))
        dCb = float(np.sum(dLdq * 2.0 * DX * DY))
        dCc = float(np.sum(dLdq * DY**2))
        du = -float(np.sum(dLdq * 2.0 * (a * DX + b * DY)))
        dv = -float(np.sum(dLdq * 2.0 * (b * DX + c * DY)))

        # Advance replay state to "before splat r".
        S[rows, cols] = S_sub + w[:, :, None] * prep.color[r][None, None, :]
        T_run[rows, cols] = T_before

        # --- chain through projection and activations for this splat -------
        conic_mat = np.array([[a, b], [b, c]])
        dC_full = np.array([[dCa, 0.5 * dCb], [0.5 * dCb, dCc]])
        G = -conic_mat @ dC_full @ conic_mat  # dL/dcov2d (symmetric)

        px, py, pz = prep.p_cam[r]
        fx, fy = cam.fx, cam.fy
        J = np.array(
            [[fx / pz, 0.0, -fx * px / pz**2], [0.0, fy / pz, -fy * py / pz**2]]
        )
        Mr = J @ W
        scale = prep.scale[r]
        R3 = prep.rot_mat[r]
        V = R3 * scale[None, :]
        Sigma = V @ V.T

        dSigma = Mr.T @ G @ Mr
        dM = 2.0 * G @ Mr @ Sigma
        dJ = dM @ W.T

        dp = J.T @ np.array([du, dv])
        inv_z2 = 1.0 / pz**2
        dp[0] += dJ[0, 2] * (-fx * inv_z2)
        dp[1] += dJ[1, 2] * (-fy * inv_z2)
        dp[2] += (
            dJ[0, 0] * (-fx * inv_z2)
            + dJ[0, 2] * (2.0 * fx * px / pz**3)
            + dJ[1, 1] * (-fy * inv_z2)
            + dJ[1, 2] * (2.0 * fy * py / pz**3)
        )
        dmu = W.T @ dp

        dV = 2.0 * dSigma @ V
        ds = np.einsum("ik,ik->k", R3, dV)
        dlog_scale = scale * ds
        dR3 = dV * scale[None, :]

        qn = prep.qn[r]
        dqn = np.einsum("kij,ij->k", _dR_dq(qn), dR3)
        dq = (dqn - qn * float(qn @ dqn)) / prep.q_norm[r]

        dsh0 = SH_C0 * dcolor * prep.color_gate[r]
        a_act = prep.alpha[r]
        dopacity = dalpha * a_act * (1.0 - a_act)

        gi = prep.indices[r]
        grads["mu"][gi] += dmu
        grads["log_scale"][gi] += dlog_scale
        grads["rot"][gi] += dq
        grads["sh0"][gi] += dsh0
        grads["opacity_logit"][gi] += dopacity

    # Frozen Gaussians contribute to the image but never receive gradients.
    if scene.editable_start > 0:
        for key in grads:
            grads[key][: scene.editable_start] = 0.0

    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientPropagationError(f"non-finite gradient in {key}")
    return grads


# --- single-splat reference path ---------------------------------------------


def project(g: Gaussian, cam: Camera) -> Splat2D | None:
    """Project one Gaussian; None means culled (behind znear or fully
    off-screen at 3 sigma). Shares all arithmetic with the batch path."""
    scene = GaussianScene.from_gaussians([g])
    prep = _prepare(scene, cam, SUBSET_ALL)
    if prep.depth.shape[0] == 0:
        return None
    return Splat2D(
        mean2d=prep.mean2d[0].copy(),
        cov2d=prep.cov2d[0].copy(),
        depth=float(prep.depth[0]),
        color=prep.color[0].copy(),
        opacity=float(prep.alpha[0]),
    )


def composite_pixel(splats, pixel, background=None) -> np.ndarray:
    """Front-to-back compositing of depth-sorted splats at one pixel location.

    Exact evaluation (no footprint truncation); early-exits once transmittance
    falls below the floor. Input must be sorted ascending by depth; in debug
    runs an unsorted list raises ContractViolationError.
    """
    if __debug__:
        depths = [s.depth for s in splats]
        if any(d2 < d1 for d1, d2 in zip(depths, depths[1:])):
            raise ContractViolationError("splats not sorted ascending by depth")
    bg = _background(background)
    pixel = np.asarray(pixel, dtype=np.float64).reshape(2)
    out = np.zeros(3)
    T = 1.0
    for s in splats:
        if T < TRANSMITTANCE_MIN:
            break
        d = pixel - s.mean2d
        A, B, C = s.cov2d[0, 0], s.cov2d[0, 1], s.cov2d[1, 1]
        det = A * C - B * B
        if det <= 0 or not np.isfinite(det):
            raise NumericalDegeneracyError("non-PSD 2D covariance in compositing")
        q = (C * d[0] ** 2 - 2.0 * B * d[0] * d[1] + A * d[1] ** 2) / det
        sigma = min(s.opacity * math.exp(-0.5 * q), SIGMA_MAX)
        out += s.color * (sigma * T)
        T *= 1.0 - sigma
    return out + bg * T
