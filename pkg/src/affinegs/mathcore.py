"""Vector, quaternion and covariance helpers shared by every other module.

Quaternions are scalar-first ``(w, x, y, z)`` with the Hamilton product.
Everything here works on plain numpy arrays and broadcasts over leading
axes unless a docstring says otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

# Hamilton structure constants: (q ⊗ p)_k = sum_ij HAMILTON[k, i, j] q_i p_j
HAMILTON = np.zeros((4, 4, 4))
for _k, _i, _j, _s in [
    (0, 0, 0, 1), (0, 1, 1, -1), (0, 2, 2, -1), (0, 3, 3, -1),
    (1, 0, 1, 1), (1, 1, 0, 1), (1, 2, 3, 1), (1, 3, 2, -1),
    (2, 0, 2, 1), (2, 2, 0, 1), (2, 3, 1, 1), (2, 1, 3, -1),
    (3, 0, 3, 1), (3, 3, 0, 1), (3, 1, 2, 1), (3, 2, 1, -1),
]:
    HAMILTON[_k, _i, _j] = _s


class PreconditionError(ValueError):
    """An input violated a documented precondition."""


def quat_mul(q, p):
    """Hamilton product ``q ⊗ p``."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(q, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(p, -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 + y1 * w2 + z1 * x2 - x1 * z2,
        w1 * z2 + z1 * w2 + x1 * y2 - y1 * x2,
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def quat_to_rotmat(q):
    """Rotation matrix of a unit quaternion; shape ``(..., 3, 3)``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def rotmat_to_quat(R):
    """Unit quaternion (w >= 0) of a single rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q if q[0] >= 0 else -q


def skew(v):
    """Cross-product matrix: ``skew(v) @ u == cross(v, u)``."""
    x, y, z = np.moveaxis(np.asarray(v, dtype=float), -1, 0)
    zero = np.zeros_like(x)
    return np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1),
    ], axis=-2)


def covariance_from(q, s, tol=1e-6):
    """World-space covariance ``R S S^T R^T`` of a Gaussian.

    Parameters
    ----------
    q : array_like, shape (..., 4)
        Unit rotation quaternion.
    s : array_like, shape (..., 3)
        Per-axis standard deviations (not log-scales).

    The result is symmetrised by mirroring the upper triangle so that the
    output is bitwise symmetric.
    """
    q = np.asarray(q, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > tol):
        raise PreconditionError("covariance_from: quaternion is not unit-norm")
    if np.any(s <= 0):
        raise PreconditionError("covariance_from: scales must be strictly positive")
    M = quat_to_rotmat(q) * s[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    upper = np.triu(np.ones((3, 3), dtype=bool), 1)
    cov = np.where(upper.T, np.swapaxes(cov, -1, -2), cov)
    return cov


def quat_from_angular_velocity_step(q, omega, dt):
    """Advance ``dq/dt = 0.5 (0, omega) ⊗ q`` by one explicit step and renormalise.

    ``omega`` is a world-frame angular velocity; broadcasting over leading
    axes is supported.
    """
    q = np.asarray(q, dtype=float)
    omega = np.asarray(omega, dtype=float)
    pure = np.concatenate([np.zeros(omega.shape[:-1] + (1,)), omega], axis=-1)
    return quat_normalize(q + 0.5 * dt * quat_mul(pure, q))


def positional_encoding(v, num_freqs):
    """Sinusoidal encoding ``[sin(2^k pi v), cos(2^k pi v)]`` per component.

    For input shape ``(..., d)`` the output has shape ``(..., 2 * num_freqs * d)``,
    laid out component-major: component 0's ``sin k=0, cos k=0, sin k=1, ...``
    first, then component 1, and so on.
    """
    if num_freqs < 0:
        raise PreconditionError("num_freqs must be >= 0")
    v = np.asarray(v, dtype=float)
    freqs = (2.0 ** np.arange(num_freqs)) * np.pi
    ang = v[..., :, None] * freqs  # (..., d, F)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., d, F, 2)
    return out.reshape(v.shape[:-1] + (2 * num_freqs * v.shape[-1],))


@dataclass
class GaussianPrimitive:
    """One canonical Gaussian. Scale is kept as log-scale."""

    mu: np.ndarray
    log_s: np.ndarray
    q: np.ndarray = field(default_factory=lambda: QUAT_IDENTITY.copy())
    alpha: float = 1.0
    color: np.ndarray = field(default_factory=lambda: np.ones(3))

    @property
    def s(self):
        return np.exp(self.log_s)

    def covariance(self):
        return covariance_from(self.q, self.s)


@dataclass
class GaussianCloud:
    """Struct-of-arrays view of ``N`` Gaussians."""

    mu: np.ndarray      # (N, 3)
    log_s: np.ndarray   # (N, 3)
    q: np.ndarray       # (N, 4)
    alpha: np.ndarray   # (N,)
    color: np.ndarray   # (N, 3)

    def __len__(self):
        return len(self.mu)

    def __getitem__(self, i) -> GaussianPrimitive:
        return GaussianPrimitive(self.mu[i], self.log_s[i], self.q[i], float(self.alpha[i]), self.color[i])

    @classmethod
    def from_primitives(cls, prims):
        prims = list(prims)
        return cls(
            mu=np.array([p.mu for p in prims], dtype=float).reshape(-1, 3),
            log_s=np.array([p.log_s for p in prims], dtype=float).reshape(-1, 3),
            q=np.array([p.q for p in prims], dtype=float).reshape(-1, 4),
            alpha=np.array([p.alpha for p in prims], dtype=float),
            color=np.array([p.color for p in prims], dtype=float).reshape(-1, 3),
        )
