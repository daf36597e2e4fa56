"""Gaussian scene representation: storage, activations, covariance construction.

A scene stores N anisotropic Gaussians as packed float64 arrays (struct-of-arrays)
plus an editable suffix marker. Parameters live in unconstrained form (log-scale,
logit-opacity, raw quaternion) so plain gradient steps cannot leave the valid
domain; activations are applied at use time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, NumericalDegeneracyError

# Degree-0 spherical harmonic basis constant: rendered color = 0.5 + SH_C0 * sh0.
SH_C0 = 0.28209479177387814


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def color_from_sh0(sh0: np.ndarray) -> np.ndarray:
    """Degree-0 SH to RGB in [0,1]: clamp(0.5 + C0 * sh0)."""
    return np.clip(0.5 + SH_C0 * np.asarray(sh0, dtype=np.float64), 0.0, 1.0)


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise InvalidParameterError("zero-norm quaternion")
    return q / norm


def rotation_matrix_from_quaternion(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w,x,y,z) to rotation matrix/matrices.

    Accepts shape (4,) -> (3,3) or (N,4) -> (N,3,3). Input is normalized first.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qn = normalize_quaternion(np.atleast_2d(q))
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    R = np.empty((qn.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def covariance_from(rot: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """3D covariance R diag(scale)^2 R^T from a unit quaternion and positive scales.

    Result is symmetric positive semi-definite by construction.
    """
    rot = np.asarray(rot, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(scale))):
        raise InvalidParameterError("non-finite rotation or scale")
    if np.any(scale <= 0.0):
        raise InvalidParameterError("scale components must be positive")
    R = rotation_matrix_from_quaternion(rot)
    V = R * scale[..., None, :]  # R @ diag(scale)
    return V @ np.swapaxes(V, -1, -2)


@dataclass
class Gaussian:
    """One Gaussian: center, log-scales, rotation quaternion (w,x,y,z),
    degree-0 SH color coefficients, and pre-sigmoid opacity."""

    mu: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    sh0: np.ndarray
    opacity_logit: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(4)
        self.sh0 = np.asarray(self.sh0, dtype=np.float64).reshape(3)
        self.opacity_logit = float(self.opacity_logit)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(np.array([self.opacity_logit]))[0])

    def covariance(self) -> np.ndarray:
        return covariance_from(self.rot, self.scale)


def eval_gaussian(g: Gaussian, x: np.ndarray) -> float:
    """Unnormalized Gaussian density exp(-0.5 x^T Sigma^-1 x) at offset x from mu.

    The covariance is regularized by eps*I, eps = 1e-9 * trace(Sigma)/3, before
    inversion; a matrix that is still singular raises NumericalDegeneracyError.
    """
    x = np.asarray(x, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError("non-finite query offset")
    cov = g.covariance()
    eps = 1e-9 * np.trace(cov) / 3.0
    cov = cov + eps * np.eye(3)
    try:
        sol = np.linalg.solve(cov, x)
    except np.linalg.LinAlgError as exc:
        raise NumericalDegeneracyError("covariance singular after regularization") from exc
    quad = float(x @ sol)
    if not np.isfinite(quad):
        raise NumericalDegeneracyError("degenerate covariance produced non-finite form")
    return float(np.exp(-0.5 * quad))


@dataclass
class GaussianScene:
    """Packed scene storage with an editable suffix.

    The editable range is always the contiguous suffix [editable_start, n); all
    indices before it are frozen and must never be mutated by editing code.
    Rendering treats the scene as immutable, so concurrent reads are safe;
    mutation is single-writer.
    """

    mu: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rot: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    sh0: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    opacity_logit: np.ndarray = field(default_factory=lambda: np.zeros((0,)))
    editable_start: int = 0

    def __post_init__(self):
        n = len(self)
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(n, 3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, 3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(n, 4)
        self.sh0 = np.asarray(self.sh0, dtype=np.float64).reshape(n, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        if not 0 <= self.editable_start <= n:
            raise InvalidParameterError("editable_start outside [0, n]")

    def __len__(self) -> int:
        return int(np.asarray(self.mu).reshape(-1, 3).shape[0])

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mu=self.mu[i].copy(),
            log_scale=self.log_scale[i].copy(),
            rot=self.rot[i].copy(),
            sh0=self.sh0[i].copy(),
            opacity_logit=float(self.opacity_logit[i]),
        )

    @property
    def editable_range(self) -> tuple[int, int]:
        return (self.editable_start, len(self))

    @property
    def n_editable(self) -> int:
        return len(self) - self.editable_start

    @property
    def editable_slice(self) -> slice:
        return slice(self.editable_start, len(self))

    def editable_mask(self) -> np.ndarray:
        mask = np.zeros(len(self), dtype=bool)
        mask[self.editable_start :] = True
        return mask

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            mu=self.mu.copy(),
            log_scale=self.log_scale.copy(),
            rot=self.rot.copy(),
            sh0=self.sh0.copy(),
            opacity_logit=self.opacity_logit.copy(),
            editable_start=self.editable_start,
        )

    def subset(self, indices) -> "GaussianScene":
        """New scene from selected indices; the result has no editable range."""
        indices = np.asarray(indices, dtype=np.intp)
        return GaussianScene(
            mu=self.mu[indices],
            log_scale=self.log_scale[indices],
            rot=self.rot[indices],
            sh0=self.sh0[indices],
            opacity_logit=self.opacity_logit[indices],
            editable_start=len(indices),
        )

    @staticmethod
    def from_gaussians(gaussians, editable_start: int | None = None) -> "GaussianScene":
        gaussians = list(gaussians)
        n = len(gaussians)
        scene = GaussianScene(
            mu=np.array([g.mu for g in gaussians]).reshape(n, 3),
            log_scale=np.array([g.log_scale for g in gaussians]).reshape(n, 3),
            rot=np.array([g.rot for g in gaussians]).reshape(n, 4),
            sh0=np.array([g.sh0 for g in gaussians]).reshape(n, 3),
            opacity_logit=np.array([g.opacity_logit for g in gaussians]).reshape(n),
            editable_start=n if editable_start is None else editable_start,
        )
        return scene

    def validate(self):
        """Check stored invariants; raises InvalidParameterError on violation."""
        for name in ("mu", "log_scale", "rot", "sh0", "opacity_logit"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParameterError(f"non-finite values in {name}")
        norms = np.linalg.norm(self.rot, axis=1)
        if len(self) and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise InvalidParameterError("rotation quaternions not unit-norm within 1e-6")
