"""Stage 2: adaptive global-local score-distillation optimization.

Each iteration renders either the editable Gaussians alone (local mode, drawn
with probability p) or the whole scene (global mode), queries the guidance
backend chosen by the alternation schedule for a score residual, and applies
w(t) * residual through the renderer's backward pass with per-attribute
learning rates. Multi-view steps swap the personalized object term for the
plain category term, render four orthogonal azimuths, and average their
gradients.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .cameras import OrbitSpec
from .errors import (
    GradientPropagationError,
    InvalidParameterError,
    ServiceError,
)
from .guidance import (
    CATEGORY_TERM,
    MULTI_VIEW,
    MULTI_VIEW_AZIMUTHS,
    OBJECT_TERM,
    SINGLE_VIEW,
    AlternationSchedule,
    GuidanceProvider,
    GuidanceRequest,
    Prompt,
    select_backend,
    substitute,
)
from .ply import save_ply
from .render import PARAM_KEYS, SUBSET_ALL, SUBSET_EDITABLE, render, render_backward
from .scene import GaussianScene

MODE_LOCAL = "local"
MODE_GLOBAL = "global"

WEIGHT_CONSTANT = "Constant1"
WEIGHT_SIGMA = "SigmaWeighted"


@dataclass(frozen=True)
class TimestepSchedule:
    """Uniform timestep ranges with a hard switch at one iteration."""

    early: tuple[float, float] = (0.02, 0.98)
    late: tuple[float, float] = (0.02, 0.55)
    switch_at: int = 600

    def __post_init__(self):
        for lo, hi in (self.early, self.late):
            if not (0.0 < lo <= hi < 1.0):
                raise InvalidParameterError("timestep bounds must satisfy 0 < lo <= hi < 1")
        if self.switch_at < 0:
            raise InvalidParameterError("switch_at must be >= 0")

    def range_for(self, iteration: int) -> tuple[float, float]:
        return self.early if iteration < self.switch_at else self.late


@dataclass
class EditConfig:
    """Everything the optimization loop needs besides scene and prompts."""

    p: float = 0.5
    iterations: int = 1400
    lr_mu: float = 1e-3
    lr_scale: float = 5e-3
    lr_rot: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh0: float = 5e-2
    t_schedule: TimestepSchedule = field(default_factory=TimestepSchedule)
    w_t: str = WEIGHT_CONSTANT
    cfg_scale: float = 7.5
    seed: int = 0
    alternation: AlternationSchedule = field(default_factory=AlternationSchedule)
    orbit: OrbitSpec = field(default_factory=OrbitSpec)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints
    max_consecutive_failures: int = 10

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise InvalidParameterError("p must be in [0,1]")
        if self.iterations < 0:
            raise InvalidParameterError("iterations must be >= 0")
        for name in ("lr_mu", "lr_scale", "lr_rot", "lr_opacity", "lr_sh0"):
            if getattr(self, name) <= 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.w_t not in (WEIGHT_CONSTANT, WEIGHT_SIGMA):
            raise InvalidParameterError(f"unknown w_t {self.w_t!r}")
        if self.max_consecutive_failures < 1:
            raise InvalidParameterError("max_consecutive_failures must be >= 1")

    @property
    def learning_rates(self) -> dict[str, float]:
        return {
            "mu": self.lr_mu,
            "log_scale": self.lr_scale,
            "rot": self.lr_rot,
            "sh0": self.lr_sh0,
            "opacity_logit": self.lr_opacity,
        }


@dataclass
class PromptPair:
    """Local prompt describes the edited object alone; global describes the
    whole scene. Both carry the OBJECT placeholder."""

    local: Prompt
    global_: Prompt


@dataclass
class StepReport:
    iteration: int
    mode: str
    backend: str
    timestep: float
    weight: float
    grad_norms: dict
    residual_norm: float
    status: str = "ok"
    note: str = ""


def select_render_mode(r: float, p: float) -> str:
    """Local rendering iff the uniform draw lands below p."""
    if not 0.0 <= r < 1.0:
        raise InvalidParameterError("r must be in [0,1)")
    if not 0.0 <= p <= 1.0:
        raise InvalidParameterError("p must be in [0,1]")
    return MODE_LOCAL if r < p else MODE_GLOBAL


def sample_timestep(iteration: int, cfg: EditConfig, rng: np.random.Generator) -> float:
    if iteration < 0:
        raise InvalidParameterError("iteration must be >= 0")
    lo, hi = cfg.t_schedule.range_for(iteration)
    return float(rng.uniform(lo, hi))


def timestep_weight(t: float, kind: str) -> float:
    """w(t) of the score-distillation gradient.

    SigmaWeighted uses sigma_t^2 = 1 - alpha_bar(t) under the standard linear
    beta schedule (beta 0.0001..0.02 over 1000 steps in continuous form), the
    common choice when a weighting is wanted; Constant1 is the neutral default.
    """
    if kind == WEIGHT_CONSTANT:
        return 1.0
    if kind == WEIGHT_SIGMA:
        return 1.0 - math.exp(-(0.1 * t + 9.95 * t * t))
    raise InvalidParameterError(f"unknown w_t {kind!r}")


def sds_step(
    scene: GaussianScene,
    cameras,
    prompts: PromptPair,
    guidance: GuidanceProvider,
    cfg: EditConfig,
    iteration: int,
    rng: np.random.Generator,
    pose: tuple[float, float, float] | None = None,
) -> StepReport:
    """One optimization step; mutates the scene's editable suffix in place.

    The scene is only touched after guidance and the backward pass have both
    succeeded, so a raised error leaves it bit-identical.
    """
    if scene.n_editable == 0:
        raise InvalidParameterError("scene has no editable Gaussians")

    r = float(rng.uniform(0.0, 1.0))
    t = sample_timestep(iteration, cfg, rng)
    mode = select_render_mode(r, cfg.p)
    backend = select_backend(iteration, cfg.alternation)

    prompt = prompts.local if mode == MODE_LOCAL else prompts.global_
    term = CATEGORY_TERM if backend == MULTI_VIEW else OBJECT_TERM
    prompt_text = substitute(prompt, term)

    subset = SUBSET_EDITABLE if mode == MODE_LOCAL else SUBSET_ALL
    background = (0.0, 0.0, 0.0) if mode == MODE_LOCAL else cfg.background

    arity = 4 if backend == MULTI_VIEW else 1
    cameras = list(cameras)
    if len(cameras) != arity:
        raise InvalidParameterError(
            f"{backend} backend needs {arity} cameras, got {len(cameras)}"
        )

    images = [render(scene, cam, subset=subset, background=background).pixels for cam in cameras]
    view_poses = None
    if backend == MULTI_VIEW and pose is not None:
        azimuth, elevation, radius = pose
        view_poses = [
            {
                "azimuth": float((azimuth + offset) % 360.0),
                "elevation": float(elevation),
                "radius": float(radius),
            }
            for offset in MULTI_VIEW_AZIMUTHS
        ]

    req = GuidanceRequest(
        images=images,
        prompt_text=prompt_text,
        timestep=t,
        cfg_scale=cfg.cfg_scale,
        seed=cfg.seed + iteration,
        view_poses=view_poses,
    )
    resp = guidance.residual(req, backend)
    if resp.residuals is None or len(resp.residuals) != len(images):
        raise ServiceError("guidance returned wrong residual count", retryable=False)

    weight = timestep_weight(t, cfg.w_t)
    total = {key: None for key in PARAM_KEYS}
    residual_norm = 0.0
    for cam, res in zip(cameras, resp.residuals):
        res = np.asarray(res, dtype=np.float64)
        residual_norm += float(np.linalg.norm(res))
        grads = render_backward(scene, cam, subset, weight * res, background=background)
        for key in PARAM_KEYS:
            total[key] = grads[key] if total[key] is None else total[key] + grads[key]
    inv_views = 1.0 / len(cameras)
    for key in PARAM_KEYS:
        total[key] *= inv_views

    # All fallible work is done; apply the update.
    lrs = cfg.learning_rates
    sl = scene.editable_slice
    scene.mu[sl] -= lrs["mu"] * total["mu"][sl]
    scene.log_scale[sl] -= lrs["log_scale"] * total["log_scale"][sl]
    scene.rot[sl] -= lrs["rot"] * total["rot"][sl]
    scene.sh0[sl] -= lrs["sh0"] * total["sh0"][sl]
    scene.opacity_logit[sl] -= lrs["opacity_logit"] * total["opacity_logit"][sl]

    # Renormalize only quaternions that moved, so a zero residual leaves every
    # parameter bit-identical.
    moved = np.any(total["rot"][sl] != 0.0, axis=1)
    if np.any(moved):
        rows = scene.rot[sl][moved]
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise GradientPropagationError("rotation collapsed to zero quaternion")
        scene.rot[sl][moved] = rows / norms

    grad_norms = {key: float(np.linalg.norm(total[key])) for key in PARAM_KEYS}
    return StepReport(
        iteration=iteration,
        mode=mode,
        backend=backend,
        timestep=t,
        weight=weight,
        grad_norms=grad_norms,
        residual_norm=residual_norm,
    )


def run_edit(
    scene: GaussianScene,
    cfg: EditConfig,
    prompts: PromptPair,
    guidance: GuidanceProvider,
    out_dir: str | os.PathLike | None = None,
) -> tuple[GaussianScene, list[StepReport]]:
    """Run the full stage-2 loop on a copy of the scene.

    Per-step cameras come from the configured orbit (uniform azimuth, banded
    elevation and radius); multi-view steps reuse the drawn pose at four
    orthogonal azimuths. Guidance failures abort the step and count toward a
    consecutive-failure limit; non-finite gradients skip the step. Everything
    is reproducible from cfg.seed.
    """
    scene = scene.copy()
    rng = np.random.default_rng(cfg.seed)
    trace: list[StepReport] = []
    consecutive_failures = 0

    for i in range(cfg.iterations):
        azimuth = float(rng.uniform(0.0, 360.0))
        elevation = float(rng.uniform(*cfg.orbit.elevation_range_deg))
        radius = float(rng.uniform(*cfg.orbit.radius_range))
        backend = select_backend(i, cfg.alternation)
        if backend == MULTI_VIEW:
            cameras = cfg.orbit.ring(azimuth, elevation, radius)
        else:
            cameras = [cfg.orbit.at(azimuth, elevation, radius)]

        try:
            report = sds_step(scene, cameras, prompts, guidance, cfg, i, rng,
                              pose=(azimuth, elevation, radius))
            consecutive_failures = 0
        except ServiceError as exc:
            consecutive_failures += 1
            report = StepReport(
                iteration=i,
                mode="-",
                backend=backend,
                timestep=float("nan"),
                weight=0.0,
                grad_norms={},
                residual_norm=0.0,
                status="aborted",
                note=str(exc),
            )
            if consecutive_failures >= cfg.max_consecutive_failures:
                trace.append(report)
                _write_artifacts(scene, trace, cfg, out_dir, final=False)
                raise ServiceError(
                    f"aborting edit after {consecutive_failures} consecutive guidance failures",
                    retryable=False,
                ) from exc
        except GradientPropagationError as exc:
            report = StepReport(
                iteration=i,
                mode="-",
                backend=backend,
                timestep=float("nan"),
                weight=0.0,
                grad_norms={},
                residual_norm=0.0,
                status="skipped",
                note=str(exc),
            )
        trace.append(report)

        if (
            out_dir is not None
            and cfg.checkpoint_every > 0
            and (i + 1) % cfg.checkpoint_every == 0
        ):
            save_ply(scene, os.path.join(os.fspath(out_dir), f"checkpoint_{i + 1:06d}.ply"))

    _write_artifacts(scene, trace, cfg, out_dir, final=True)
    return scene, trace


def _write_artifacts(scene, trace, cfg, out_dir, final: bool):
    if out_dir is None:
        return
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    if final:
        save_ply(scene, os.path.join(out_dir, "edited.ply"))
    entries = []
    for rep in trace:
        entry = asdict(rep)
        if math.isnan(entry["timestep"]):
            entry["timestep"] = None
        entries.append(entry)
    with open(os.path.join(out_dir, "edit_trace.json"), "w") as f:
        json.dump(entries, f, indent=1, sort_keys=True)
        f.write("\n")
