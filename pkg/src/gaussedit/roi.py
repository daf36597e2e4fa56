"""Region-of-interest stage: box partition, farthest point sampling, and
re-initialization of the editable Gaussians.

The editing pipeline replaces everything inside a user-supplied axis-aligned
box with freshly initialized Gaussians: uniform random color, fixed low
opacity, identity rotation, and either unit or nearest-neighbor scale. The new
Gaussians are appended after the surviving (frozen) ones so the editable set is
always a contiguous suffix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParameterError
from .scene import SH_C0, GaussianScene

logger = logging.getLogger(__name__)

# Pre-sigmoid opacity for new Gaussians: sigmoid(ln(0.1/0.9)) = 0.1.
DEFAULT_OPACITY_LOGIT = math.log(0.1 / 0.9)
DEFAULT_N_SAMPLES = 50_000


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box in world units, closed on both ends."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=np.float64).reshape(3))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=np.float64).reshape(3))
        if not (np.all(np.isfinite(self.min)) and np.all(np.isfinite(self.max))):
            raise InvalidParameterError("non-finite box bounds")
        if np.any(self.min > self.max):
            raise InvalidParameterError("box min exceeds max componentwise")

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((points >= self.min) & (points <= self.max), axis=1)

    def sample_uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.min, self.max, size=(n, 3))


@dataclass(frozen=True)
class InitPolicy:
    """How new editable Gaussians are initialized inside the box."""

    n_samples: int = DEFAULT_N_SAMPLES
    scale_mode: str = "UnitScale"  # or "NearestNeighbor"
    color_seed: int = 0
    opacity_logit_init: float = DEFAULT_OPACITY_LOGIT

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidParameterError("n_samples must be >= 1")
        if self.scale_mode not in ("UnitScale", "NearestNeighbor"):
            raise InvalidParameterError(f"unknown scale_mode {self.scale_mode!r}")


def partition(scene: GaussianScene, box: Aabb) -> tuple[np.ndarray, np.ndarray]:
    """Split scene indices by center containment: (outside/frozen, inside).

    Every index lands in exactly one output. An empty inside set is legal (the
    edit then builds content from scratch); callers may warn on it.
    """
    if len(scene) == 0:
        raise InvalidParameterError("cannot partition an empty scene")
    inside_mask = box.contains(scene.mu)
    indices = np.arange(len(scene))
    return indices[~inside_mask], indices[inside_mask]


def farthest_point_sample(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; returns k selected indices in pick order.

    Each pick maximizes the minimum distance to the already-picked set, with
    ties resolved to the lowest index. Deterministic for fixed inputs.
    Brute-force O(n*k): one distance pass per pick.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise InvalidParameterError(f"k={k} outside [1, {n}]")
    if not 0 <= start < n:
        raise InvalidParameterError(f"start index {start} outside [0, {n})")

    selected = np.empty(k, dtype=np.intp)
    selected[0] = start
    # Squared distances preserve the argmax and avoid n*k square roots.
    min_sq = np.sum((points - points[start]) ** 2, axis=1)
    for i in range(1, k):
        pick = int(np.argmax(min_sq))  # argmax returns the first (lowest) index on ties
        selected[i] = pick
        np.minimum(min_sq, np.sum((points - points[pick]) ** 2, axis=1), out=min_sq)
    return selected


def initialize_editable(positions: np.ndarray, policy: InitPolicy) -> GaussianScene:
    """Build new Gaussians at the given positions under the init policy.

    Identity rotation, fixed low opacity, per-channel uniform random color in
    [0,1] (seeded), and scale per policy: UnitScale sets log_scale = 0;
    NearestNeighbor sets isotropic scale to each point's nearest-neighbor
    distance.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = positions.shape[0]
    if n == 0:
        raise InvalidParameterError("no positions to initialize")

    rng = np.random.default_rng(policy.color_seed)
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    sh0 = (colors - 0.5) / SH_C0

    if policy.scale_mode == "UnitScale":
        log_scale = np.zeros((n, 3))
    else:
        if n < 2:
            raise InvalidParameterError("NearestNeighbor scale needs at least 2 points")
        tree = cKDTree(positions)
        dist, _ = tree.query(positions, k=2)
        nn = dist[:, 1]
        if np.any(nn <= 0.0):
            raise InvalidParameterError("duplicate positions give zero nearest-neighbor scale")
        log_scale = np.repeat(np.log(nn)[:, None], 3, axis=1)

    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianScene(
        mu=positions.copy(),
        log_scale=log_scale,
        rot=rot,
        sh0=sh0,
        opacity_logit=np.full(n, policy.opacity_logit_init),
        editable_start=0,
    )


def concat(frozen: GaussianScene, editable: GaussianScene) -> GaussianScene:
    """Frozen Gaussians followed by editable ones; the suffix is the editable range."""
    return GaussianScene(
        mu=np.concatenate([frozen.mu, editable.mu]),
        log_scale=np.concatenate([frozen.log_scale, editable.log_scale]),
        rot=np.concatenate([frozen.rot, editable.rot]),
        sh0=np.concatenate([frozen.sh0, editable.sh0]),
        opacity_logit=np.concatenate([frozen.opacity_logit, editable.opacity_logit]),
        editable_start=len(frozen),
    )


def empty_scene() -> GaussianScene:
    return GaussianScene(
        mu=np.zeros((0, 3)),
        log_scale=np.zeros((0, 3)),
        rot=np.zeros((0, 4)),
        sh0=np.zeros((0, 3)),
        opacity_logit=np.zeros(0),
        editable_start=0,
    )


def reinitialize_region(
    scene: GaussianScene,
    box: Aabb,
    policy: InitPolicy,
    fps_start: int = 0,
    clamp_samples: bool = False,
) -> GaussianScene:
    """Full stage-1 pipeline: partition, FPS on inside centers, init, concat.

    The original Gaussians inside the box are removed; their center positions
    are thinned to n_samples by farthest point sampling and re-initialized per
    policy. An empty box selection yields a warning and zero editable
    Gaussians. When the box holds fewer centers than n_samples, clamp_samples
    decides between clamping and an argument error.
    """
    frozen_idx, inside_idx = partition(scene, box)
    frozen = scene.subset(frozen_idx)

    n_inside = len(inside_idx)
    if n_inside == 0:
        logger.warning("box selected no Gaussians; edit will start from empty region")
        return concat(frozen, empty_scene())

    k = policy.n_samples
    if k > n_inside:
        if not clamp_samples:
            raise InvalidParameterError(
                f"n_samples={k} exceeds the {n_inside} centers inside the box "
                "(set clamp_samples to thin to what is available)"
            )
        k = n_inside

    centers = scene.mu[inside_idx]
    picks = farthest_point_sample(centers, k, start=fps_start)
    editable = initialize_editable(centers[picks], policy)
    return concat(frozen, editable)
