"""Stage 3: image-space texture refinement.

Alternates between pulling rendered views through the guidance img2img path
(producing per-view targets) and gradient steps on the Gaussian parameters
against those cached targets. The bulk of the steps minimize plain MSE; a
final phase minimizes a reconstruction loss mixing L1 with DSSIM. By default
only color and opacity move, so geometry stays bit-identical.

The SSIM here uses the standard 11x11 Gaussian window (sigma 1.5, C1=0.01^2,
C2=0.03^2 at unit data range) with weighted means, per channel, averaged over
channels, scored on the interior crop that excludes the window radius. The
gradient is analytic; because the crop margin equals the window radius, the
adjoint of the windowed filtering is a plain zero-padded correlation.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .cameras import Camera, OrbitSpec
from .errors import (
    GradientPropagationError,
    InvalidParameterError,
    ProtocolError,
    ServiceError,
)
from .guidance import GuidanceProvider
from .ply import save_ply
from .render import SUBSET_EDITABLE, render, render_backward
from .scene import GaussianScene

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_RADIUS = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)  # 5 -> 11x11 window
SSIM_WIN = 2 * SSIM_RADIUS + 1
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

PHASE_MSE = "mse"
PHASE_REC = "rec"

_COLOR_KEYS = ("sh0", "opacity_logit")
_GEOMETRY_KEYS = ("mu", "log_scale", "rot")


@dataclass
class RefineConfig:
    iterations: int = 100
    strength_t: float = 0.5
    lambda_rec: float = 0.2
    views_per_round: int = 4
    color_only: bool = True
    refresh_every: int = 10
    lr_sh0: float = 5e-2
    lr_opacity: float = 5e-2
    lr_mu: float = 1e-3
    lr_scale: float = 5e-3
    lr_rot: float = 1e-3
    seed: int = 0
    orbit: OrbitSpec = field(default_factory=OrbitSpec)

    def __post_init__(self):
        if not 0 <= self.iterations <= 200:
            raise InvalidParameterError("iterations must be in [0,200]")
        if not 0.0 < self.strength_t < 1.0:
            raise InvalidParameterError("strength_t must be in (0,1)")
        if not 0.0 <= self.lambda_rec <= 1.0:
            raise InvalidParameterError("lambda_rec must be in [0,1]")
        if self.views_per_round < 1:
            raise InvalidParameterError("views_per_round must be >= 1")
        if self.refresh_every < 1:
            raise InvalidParameterError("refresh_every must be >= 1")
        for name in ("lr_sh0", "lr_opacity", "lr_mu", "lr_scale", "lr_rot"):
            if getattr(self, name) <= 0:
                raise InvalidParameterError(f"{name} must be positive")


@dataclass
class RoundReport:
    index: int
    phase: str
    steps: int
    refreshed: bool
    loss_before: float
    loss_after: float
    grad_norm: float
    note: str = ""


# --- losses ---------------------------------------------------------------

def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise InvalidParameterError(f"expected (H,W,3) images, got {a.shape}")
    return a, b


def mse_loss(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def mse_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d mse / da."""
    a, b = _check_pair(a, b)
    return 2.0 * (a - b) / a.size


def mae_loss(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def _ssim_filter(x: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(x, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE,
                                   mode="reflect")


def _ssim_adjoint(x: np.ndarray) -> np.ndarray:
    # Zero-padded correlation; valid as the adjoint because the scored crop
    # keeps every window fully interior.
    return ndimage.gaussian_filter(x, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE,
                                   mode="constant", cval=0.0)


def _ssim_channel(a: np.ndarray, b: np.ndarray, want_grad: bool):
    ux = _ssim_filter(a)
    uy = _ssim_filter(b)
    uxx = _ssim_filter(a * a)
    uyy = _ssim_filter(b * b)
    uxy = _ssim_filter(a * b)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    a1 = 2.0 * ux * uy + SSIM_C1
    a2 = 2.0 * vxy + SSIM_C2
    b1 = ux * ux + uy * uy + SSIM_C1
    b2 = vx + vy + SSIM_C2
    den = b1 * b2
    s = (a1 * a2) / den
    r = SSIM_RADIUS
    crop = s[r:-r, r:-r]
    value = float(crop.mean())
    if not want_grad:
        return value, None

    w = np.zeros_like(s)
    w[r:-r, r:-r] = 1.0 / crop.size
    d_ux = w * 2.0 * (uy * (a2 - a1) / den - ux * s / b1 + ux * s / b2)
    d_uxx = w * (-s / b2)
    d_uxy = w * (2.0 * a1 / den)
    grad = _ssim_adjoint(d_ux) + 2.0 * a * _ssim_adjoint(d_uxx) \
        + b * _ssim_adjoint(d_uxy)
    return value, grad


def _ssim_mean(a: np.ndarray, b: np.ndarray, want_grad: bool):
    a, b = _check_pair(a, b)
    h, w = a.shape[:2]
    if min(h, w) < SSIM_WIN:
        raise InvalidParameterError(
            f"images must be at least {SSIM_WIN}x{SSIM_WIN} for SSIM, got {h}x{w}")
    values = []
    grads = [] if want_grad else None
    for c in range(3):
        value, grad = _ssim_channel(a[..., c], b[..., c], want_grad)
        values.append(value)
        if want_grad:
            grads.append(grad)
    mean = sum(values) / 3.0
    if not want_grad:
        return mean, None
    return mean, np.stack(grads, axis=-1) / 3.0


def dssim(a: np.ndarray, b: np.ndarray) -> float:
    """(1 - SSIM) / 2, averaged over channels."""
    mean, _ = _ssim_mean(a, b, want_grad=False)
    return (1.0 - mean) / 2.0


def dssim_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """DSSIM value and its gradient with respect to the first image."""
    mean, grad = _ssim_mean(a, b, want_grad=True)
    return (1.0 - mean) / 2.0, -0.5 * grad


def combine_rec(mae: float, dssim_value: float, lambda_rec: float) -> float:
    if not 0.0 <= lambda_rec <= 1.0:
        raise InvalidParameterError("lambda_rec must be in [0,1]")
    return (1.0 - lambda_rec) * mae + lambda_rec * dssim_value


def rec_loss(a: np.ndarray, b: np.ndarray, lambda_rec: float = 0.2) -> float:
    """(1-lambda) * L1 + lambda * DSSIM."""
    if not 0.0 <= lambda_rec <= 1.0:
        raise InvalidParameterError("lambda_rec must be in [0,1]")
    if lambda_rec == 0.0:
        return mae_loss(a, b)
    if lambda_rec == 1.0:
        return dssim(a, b)
    return combine_rec(mae_loss(a, b), dssim(a, b), lambda_rec)


def rec_loss_with_grad(a, b, lambda_rec: float = 0.2):
    if not 0.0 <= lambda_rec <= 1.0:
        raise InvalidParameterError("lambda_rec must be in [0,1]")
    a, b = _check_pair(a, b)
    mae = mae_loss(a, b)
    mae_g = np.sign(a - b) / a.size
    if lambda_rec == 0.0:
        return mae, mae_g
    ds, ds_g = dssim_with_grad(a, b)
    if lambda_rec == 1.0:
        return ds, ds_g
    value = combine_rec(mae, ds, lambda_rec)
    return value, (1.0 - lambda_rec) * mae_g + lambda_rec * ds_g


# --- refinement loop ------------------------------------------------------

def refine_views(
    scene: GaussianScene,
    cameras: list[Camera],
    prompt: str,
    guidance: GuidanceProvider,
    cfg: RefineConfig,
    seed: int = 0,
) -> list[tuple[Camera, np.ndarray]]:
    """Render the editable Gaussians per camera and pull each render through
    img2img at the configured strength. Raises ServiceError on failure."""
    pairs = []
    for idx, cam in enumerate(cameras):
        img = render(scene, cam, subset=SUBSET_EDITABLE).pixels
        out = guidance.img2img(img, prompt, cfg.strength_t, seed=seed + idx)
        out = np.asarray(out, dtype=np.float64)
        if out.shape != img.shape:
            raise ProtocolError(
                f"img2img shape {out.shape} does not match render {img.shape}")
        pairs.append((cam, out))
    return pairs


def _loss_and_grads(scene, targets, phase, cfg):
    """Mean loss over cached (camera, target) pairs plus parameter grads."""
    total = None
    loss = 0.0
    inv = 1.0 / len(targets)
    for cam, target in targets:
        img = render(scene, cam, subset=SUBSET_EDITABLE).pixels
        if phase == PHASE_MSE:
            loss += mse_loss(img, target)
            d_img = mse_grad(img, target)
        else:
            value, d_img = rec_loss_with_grad(img, target, cfg.lambda_rec)
            loss += value
        grads = render_backward(scene, cam, SUBSET_EDITABLE, inv * d_img)
        if total is None:
            total = grads
        else:
            for key in total:
                total[key] += grads[key]
    return loss * inv, total


def _apply_update(scene, grads, cfg):
    sl = scene.editable_slice
    scene.sh0[sl] -= cfg.lr_sh0 * grads["sh0"][sl]
    scene.opacity_logit[sl] -= cfg.lr_opacity * grads["opacity_logit"][sl]
    if cfg.color_only:
        return
    scene.mu[sl] -= cfg.lr_mu * grads["mu"][sl]
    scene.log_scale[sl] -= cfg.lr_scale * grads["log_scale"][sl]
    scene.rot[sl] -= cfg.lr_rot * grads["rot"][sl]
    moved = np.any(grads["rot"][sl] != 0.0, axis=1)
    if np.any(moved):
        rows = scene.rot[sl][moved]
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise GradientPropagationError("rotation collapsed to zero quaternion")
        scene.rot[sl][moved] = rows / norms


def _grad_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def _measure(scene, targets, phase, cfg) -> float:
    loss = 0.0
    for cam, target in targets:
        img = render(scene, cam, subset=SUBSET_EDITABLE).pixels
        if phase == PHASE_MSE:
            loss += mse_loss(img, target)
        else:
            loss += rec_loss(img, target, cfg.lambda_rec)
    return loss / len(targets)


def run_refinement(
    scene: GaussianScene,
    cfg: RefineConfig,
    prompt: str,
    guidance: GuidanceProvider,
    out_dir: str | os.PathLike | None = None,
) -> tuple[GaussianScene, list[RoundReport]]:
    """Run the stage-3 loop on a copy of the scene.

    Three quarters of the iterations minimize MSE against targets refreshed
    every cfg.refresh_every steps; the final quarter minimizes the L1+DSSIM
    reconstruction loss. A failed img2img refresh skips that round (keeping
    previous targets if any); geometry never moves when color_only is set.
    """
    if scene.n_editable == 0:
        raise InvalidParameterError("scene has no editable Gaussians")
    scene = scene.copy()
    rng = np.random.default_rng(cfg.seed)
    reports: list[RoundReport] = []
    targets: list = []

    n_rec = cfg.iterations // 4
    n_mse = cfg.iterations - n_rec

    def one_round(index, phase, steps):
        cams = [cfg.orbit.sample(rng) for _ in range(cfg.views_per_round)]
        refreshed = True
        note = ""
        nonlocal targets
        try:
            targets = refine_views(scene, cams, prompt, guidance, cfg,
                                   seed=cfg.seed + index)
        except ServiceError as exc:
            refreshed = False
            note = str(exc)
            logger.warning("img2img refresh failed, round %d skipped: %s",
                           index, exc)
        if not targets:
            return RoundReport(index, phase, 0, False, float("nan"),
                               float("nan"), 0.0, note or "no targets yet")
        if not refreshed:
            return RoundReport(index, phase, 0, False, float("nan"),
                               float("nan"), 0.0, note)
        loss_before = _measure(scene, targets, phase, cfg)
        grad_norm = 0.0
        done = 0
        for _ in range(steps):
            try:
                _, grads = _loss_and_grads(scene, targets, phase, cfg)
            except GradientPropagationError as exc:
                note = f"step skipped: {exc}"
                logger.warning("non-finite gradient in round %d: %s", index, exc)
                continue
            _apply_update(scene, grads, cfg)
            grad_norm = _grad_norm(grads)
            done += 1
        loss_after = _measure(scene, targets, phase, cfg)
        return RoundReport(index, phase, done, refreshed, loss_before,
                           loss_after, grad_norm, note)

    index = 0
    remaining = n_mse
    while remaining > 0:
        steps = min(cfg.refresh_every, remaining)
        reports.append(one_round(index, PHASE_MSE, steps))
        remaining -= steps
        index += 1
    if n_rec > 0:
        reports.append(one_round(index, PHASE_REC, n_rec))

    if out_dir is not None:
        out_dir = os.fspath(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        save_ply(scene, os.path.join(out_dir, "refined.ply"))
        entries = []
        for rep in reports:
            entry = asdict(rep)
            for key in ("loss_before", "loss_after"):
                if math.isnan(entry[key]):
                    entry[key] = None
            entries.append(entry)
        with open(os.path.join(out_dir, "refine_trace.json"), "w") as f:
            json.dump(entries, f, indent=1, sort_keys=True)
            f.write("\n")
    return scene, reports
