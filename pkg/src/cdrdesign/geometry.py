"""Geometry kernels: radial bases, backbone frames, angles, quaternions, RMSD.

Every function accepts array-likes of shape ``(3,)`` for single points; the
``*_batch`` variants take ``(n, 3)`` stacks and are what the featurizers use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateGeometryError, EmptySetError, InvalidInputError, ShapeError

# Triangle-area threshold (Å^2) below which three points count as collinear.
DEGENERATE_AREA = 1e-9


@dataclass(frozen=True)
class RbfSpec:
    """Gaussian radial basis with uniformly spaced centers."""

    centers: tuple[float, ...]
    width: float

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        if c.ndim != 1 or c.size == 0:
            raise InvalidInputError("RbfSpec needs at least one center")
        if not self.width > 0:
            raise InvalidInputError("RbfSpec width must be positive")
        if c.size > 1:
            steps = np.diff(c)
            if np.any(steps <= 0):
                raise InvalidInputError("RbfSpec centers must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
                raise InvalidInputError("RbfSpec centers must be uniformly spaced")

    @classmethod
    def uniform(cls, start: float, stop: float, count: int, width: float | None = None) -> RbfSpec:
        """``count`` centers from ``start`` to ``stop`` inclusive; width defaults to the spacing."""
        centers = np.linspace(start, stop, count)
        if width is None:
            width = float(centers[1] - centers[0]) if count > 1 else 1.0
        return cls(tuple(float(x) for x in centers), float(width))

    @property
    def count(self) -> int:
        return len(self.centers)


def rbf_expand(d, spec: RbfSpec) -> np.ndarray:
    """Expand distance(s) ``d`` into ``spec.count`` Gaussian components.

    Works on scalars or arrays; output shape is ``np.shape(d) + (M,)``.
    """
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("rbf_expand received a non-finite distance")
    mu = np.asarray(spec.centers)
    return np.exp(-((d[..., None] - mu) ** 2) / (2.0 * spec.width**2))


@dataclass(frozen=True)
class LocalFrame:
    """Orthonormal residue frame; rows of ``rotation`` are the local axes."""

    rotation: np.ndarray
    origin: np.ndarray

    def to_local(self, point) -> np.ndarray:
        return self.rotation @ (np.asarray(point, dtype=float) - self.origin)


def _as_points(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.shape[-1:] != (3,):
        raise ShapeError(f"{name} must have trailing dimension 3, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite coordinates")
    return a


def backbone_frames_batch(n, ca, c) -> tuple[np.ndarray, np.ndarray]:
    """Frames for stacked N/CA/C atoms.

    Returns ``(rotations (n,3,3), valid (n,))``. Degenerate rows get the
    identity rotation and ``valid = False``; callers decide whether to warn.
    """
    n, ca, c = (np.atleast_2d(_as_points(v, name)) for v, name in ((n, "N"), (ca, "CA"), (c, "C")))
    u = c - ca
    v = n - ca
    normal = np.cross(u, v)
    area2 = np.linalg.norm(normal, axis=-1)  # twice the triangle area
    u_len = np.linalg.norm(u, axis=-1)
    valid = (0.5 * area2 > DEGENERATE_AREA) & (u_len > 0)
    safe_u = np.where(valid[:, None], u, [1.0, 0.0, 0.0])
    safe_n = np.where(valid[:, None], normal, [0.0, 0.0, 1.0])
    e1 = safe_u / np.linalg.norm(safe_u, axis=-1, keepdims=True)
    e3 = safe_n / np.linalg.norm(safe_n, axis=-1, keepdims=True)
    e2 = np.cross(e3, e1)
    rot = np.stack([e1, e2, e3], axis=-2)
    return rot, valid


def backbone_frame(N, CA, C) -> LocalFrame:
    """Local frame with axis 1 along CA->C and axis 3 normal to the N-CA-C plane."""
    rot, valid = backbone_frames_batch(N, CA, C)
    if not valid[0]:
        raise DegenerateGeometryError("N, CA and C are collinear or coincident")
    return LocalFrame(rotation=rot[0], origin=np.asarray(CA, dtype=float).copy())


def bond_angles_batch(p1, p2, p3) -> tuple[np.ndarray, np.ndarray]:
    """Angle at vertex ``p2`` for stacked triples; returns ``(angles, valid)``."""
    p1, p2, p3 = (np.atleast_2d(np.asarray(p, dtype=float)) for p in (p1, p2, p3))
    a = p1 - p2
    b = p3 - p2
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    valid = (na > 0) & (nb > 0)
    denom = np.where(valid, na * nb, 1.0)
    cos = np.clip(np.sum(a * b, axis=-1) / denom, -1.0, 1.0)
    # atan2 form keeps precision near 0 and pi
    sin = np.linalg.norm(np.cross(a, b), axis=-1) / denom
    ang = np.arctan2(sin, cos)
    return np.where(valid, ang, 0.0), valid


def bond_angle(p1, p2, p3) -> float:
    """Angle (radians, in [0, pi]) at vertex ``p2``."""
    for p, name in ((p1, "p1"), (p2, "p2"), (p3, "p3")):
        _as_points(p, name)
    ang, valid = bond_angles_batch(p1, p2, p3)
    if not valid[0]:
        raise DegenerateGeometryError("bond_angle: coincident points")
    return float(ang[0])


def dihedrals_batch(p1, p2, p3, p4) -> tuple[np.ndarray, np.ndarray]:
    """Signed torsions about p2-p3 for stacked quadruples; returns ``(angles, valid)``."""
    p1, p2, p3, p4 = (np.atleast_2d(np.asarray(p, dtype=float)) for p in (p1, p2, p3, p4))
    b0 = p2 - p1
    b1 = p3 - p2
    b2 = p4 - p3
    n1 = np.cross(b0, b1)
    n2 = np.cross(b1, b2)
    b1_len = np.linalg.norm(b1, axis=-1)
    valid = (
        (0.5 * np.linalg.norm(n1, axis=-1) > DEGENERATE_AREA)
        & (0.5 * np.linalg.norm(n2, axis=-1) > DEGENERATE_AREA)
        & (b1_len > 0)
    )
    b1_hat = b1 / np.where(b1_len > 0, b1_len, 1.0)[:, None]
    x = np.sum(n1 * n2, axis=-1)
    y = np.sum(np.cross(n1, n2) * b1_hat, axis=-1)
    ang = np.arctan2(y, x)
    ang = np.where(ang <= -math.pi, math.pi, ang)
    return np.where(valid, ang, 0.0), valid


def dihedral(p1, p2, p3, p4) -> float:
    """IUPAC torsion angle in (-pi, pi]; cis = 0, trans = pi."""
    for p, name in ((p1, "p1"), (p2, "p2"), (p3, "p3"), (p4, "p4")):
        _as_points(p, name)
    ang, valid = dihedrals_batch(p1, p2, p3, p4)
    if not valid[0]:
        raise DegenerateGeometryError("dihedral: degenerate bounding triple")
    return float(ang[0])


def rotation_to_quaternion(R) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for one or many rotations."""
    R = np.asarray(R, dtype=float)
    single = R.ndim == 2
    Rs = R[None] if single else R
    if Rs.shape[-2:] != (3, 3):
        raise ShapeError(f"expected (...,3,3) rotation, got {R.shape}")
    eye = np.eye(3)
    ortho_err = np.abs(Rs @ np.swapaxes(Rs, -1, -2) - eye).max(axis=(-1, -2))
    det = np.linalg.det(Rs)
    if np.any(ortho_err > 1e-6) or np.any(np.abs(det - 1.0) > 1e-6):
        raise InvalidInputError("rotation_to_quaternion: matrix is not a proper rotation")
    xyzw = Rotation.from_matrix(Rs).as_quat()
    q = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q = np.where(q[:, :1] < 0, -q, q)
    return q[0] if single else q


def quaternion_to_rotation(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def pairwise_distances(A, B) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def min_pairwise_distance(A, B) -> float:
    """Exact minimum distance over all pairs of ``A`` x ``B``."""
    A = np.asarray(A, dtype=float).reshape(-1, 3)
    B = np.asarray(B, dtype=float).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise EmptySetError("min_pairwise_distance over an empty point set")
    return float(pairwise_distances(A, B).min())


def kabsch(P, Q) -> tuple[np.ndarray, np.ndarray]:
    """Proper rotation ``R`` and translation ``t`` minimising ``|P @ R.T + t - Q|``."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    pc, qc = P.mean(axis=0), Q.mean(axis=0)
    H = (P - pc).T @ (Q - qc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return R, qc - pc @ R.T


def superpose_rmsd(P, Q, superpose: bool = False) -> float:
    """Cα RMSD between matched point lists, optionally after optimal rigid superposition."""
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    Q = np.asarray(Q, dtype=float).reshape(-1, 3)
    if len(P) != len(Q):
        raise ShapeError(f"superpose_rmsd: length mismatch {len(P)} vs {len(Q)}")
    if len(P) == 0:
        raise EmptySetError("superpose_rmsd over an empty point set")
    if superpose:
        R, t = kabsch(P, Q)
        P = P @ R.T + t
    return float(np.sqrt(np.mean(np.sum((P - Q) ** 2, axis=1))))


# Distances closer than this count as tied when ranking neighbours, so that
# rounding noise under rigid motion cannot reorder exact geometric ties.
TIE_RESOLUTION = 1e-6


def neighbour_order(dist: np.ndarray) -> np.ndarray:
    """Row-wise argsort by distance quantised to ``TIE_RESOLUTION``; ties go to the lower index."""
    d = np.asarray(dist, dtype=float)
    key = np.where(np.isfinite(d), np.round(d / TIE_RESOLUTION), np.inf)
    return np.argsort(key, axis=-1, kind="stable")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed proper rotation."""
    return Rotation.random(random_state=rng).as_matrix()
