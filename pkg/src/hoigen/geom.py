"""Rotation representations, rigid transforms, and Fourier positional encodings.

All geometry runs in float64. Rotations use the continuous 6D representation
(first two columns of the rotation matrix, concatenated column-wise) and are
materialized as orthonormal matrices via Gram-Schmidt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRotation, NotARotation, WrongDimension

_EPS_DEGENERATE = 1e-12
_EPS_ORTHO = 1e-6

IDENTITY_ROT6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def rot6d_to_matrix(r: np.ndarray) -> np.ndarray:
    """Orthonormalize a 6D rotation into a proper rotation matrix.

    Layout is column-major: r[:3] is the first column, r[3:] the second.
    The first column is normalized, the second orthogonalized against it,
    and the third is their cross product, so det is always +1.

    Raises:
        DegenerateRotation: first column has near-zero norm or the two
            columns are parallel.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (6,):
        raise WrongDimension(f"expected 6 components, got shape {r.shape}")
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    if n1 < _EPS_DEGENERATE:
        raise DegenerateRotation("first column has near-zero norm")
    b1 = a1 / n1
    a2p = a2 - np.dot(b1, a2) * b1
    n2 = np.linalg.norm(a2p)
    if n2 < _EPS_DEGENERATE:
        raise DegenerateRotation("columns are parallel")
    b2 = a2p / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def matrix_to_rot6d(m: np.ndarray) -> np.ndarray:
    """Extract the 6D representation (first two columns) of a rotation matrix.

    Raises:
        NotARotation: m is not orthonormal with det +1 within 1e-6.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise WrongDimension(f"expected 3x3 matrix, got shape {m.shape}")
    if np.max(np.abs(m.T @ m - np.eye(3))) > _EPS_ORTHO:
        raise NotARotation("matrix is not orthonormal")
    if np.linalg.det(m) < 0.0:
        raise NotARotation("matrix has negative determinant (reflection)")
    return np.concatenate([m[:, 0], m[:, 1]])


@dataclass(frozen=True)
class RigidPose:
    """Rigid pose: translation in meters, rotation as 6D."""

    translation: np.ndarray
    rotation6d: np.ndarray

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.zeros(3), IDENTITY_ROT6D.copy())

    def matrix(self) -> np.ndarray:
        return rot6d_to_matrix(self.rotation6d)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points (3,) or (N,3) into the world frame."""
        return np.asarray(points) @ self.matrix().T + self.translation

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        """Transform world points into the local frame."""
        return (np.asarray(points) - self.translation) @ self.matrix()


@dataclass(frozen=True)
class FourierPE:
    """Sin/cos encoding with geometrically spaced frequencies in [1, max_freq].

    Output dim is input_dim * 2 * num_bands, plus input_dim when passthrough
    is enabled.
    """

    num_bands: int
    max_freq: float
    passthrough: bool = False

    def __post_init__(self):
        if self.num_bands < 1:
            raise ValueError("num_bands must be positive")
        if self.max_freq <= 0:
            raise ValueError("max_freq must be positive")

    def frequencies(self) -> np.ndarray:
        if self.num_bands == 1:
            return np.array([1.0])
        return np.geomspace(1.0, self.max_freq, self.num_bands)

    def output_dim(self, input_dim: int) -> int:
        return input_dim * 2 * self.num_bands + (input_dim if self.passthrough else 0)


def fourier_encode(x: np.ndarray, pe: FourierPE) -> np.ndarray:
    """Encode x as [sin(2 pi f_k x_i), cos(2 pi f_k x_i)] over bands and dims.

    Accepts a (d,) vector or an (N, d) batch; the band axis varies fastest
    within each sin/cos block: output layout per row is
    [sin(f_1 x), ..., sin(f_B x), cos(f_1 x), ..., cos(f_B x)] with each
    block of width d, followed by x itself when passthrough is set.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    freqs = pe.frequencies()
    # (N, B, d)
    phase = 2.0 * np.pi * freqs[None, :, None] * x[:, None, :]
    n = x.shape[0]
    parts = [np.sin(phase).reshape(n, -1), np.cos(phase).reshape(n, -1)]
    if pe.passthrough:
        parts.append(x)
    out = np.concatenate(parts, axis=1)
    return out[0] if squeeze else out


# Quaternion and axis-angle helpers. Quaternions are scalar-first (w, x, y, z)
# and assumed unit-norm unless stated otherwise.


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly random rotation matrix via a random unit quaternion."""
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


def matrix_from_axis_angle(v: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map; v is axis * angle (radians)."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.eye(3)
    k = v / angle
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def axis_angle_from_matrix(m: np.ndarray) -> np.ndarray:
    """Log map of a rotation matrix to axis * angle, angle in [0, pi]."""
    m = np.asarray(m, dtype=np.float64)
    cos_a = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_a)
    if angle < 1e-12:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # near pi the off-diagonal extraction degenerates; use (R + I)/2 = k k^T
        a = (m + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(a)))
        axis = a[:, i] / np.sqrt(max(a[i, i], 1e-18))
        axis = axis / np.linalg.norm(axis)
        return axis * angle
    axis = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    axis = axis / (2.0 * np.sin(angle))
    return axis * angle


def rotation_angle_between(ra: np.ndarray, rb: np.ndarray) -> float:
    """Geodesic angle in radians between two rotation matrices."""
    cos_a = np.clip((np.trace(ra.T @ rb) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_a))
