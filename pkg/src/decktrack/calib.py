"""Camera calibration from surveyed 3D/2D correspondences.

The projection matrix is estimated with the normalized direct linear
transform: both point sets are translated to their centroid and scaled
isotropically (mean distance sqrt(3) in 3D, sqrt(2) in 2D), the homogeneous
2n x 12 system is solved via SVD, and the result is denormalized.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import rq
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import DegenerateConfiguration, EmptyInput, SingularCamera, TooFewPoints
from .geom import CameraModel, Rotation, as_vector

# ratio s[-1] / s[-2] of the design matrix above which the null space is not 1-D
DEGENERACY_RATIO = 0.99
# relative thickness of the world point cloud below which it counts as planar
PLANARITY_TOL = 1e-6


@dataclass(frozen=True)
class Correspondence:
    world: np.ndarray
    pixel: np.ndarray
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "world", as_vector(self.world, 3, "world"))
        object.__setattr__(self, "pixel", as_vector(self.pixel, 2, "pixel"))


def _split(points) -> tuple[np.ndarray, np.ndarray]:
    points = list(points)
    if not points:
        return np.empty((0, 3)), np.empty((0, 2))
    return np.array([c.world for c in points]), np.array([c.pixel for c in points])


def normalization_transform(points: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(dim)."""
    dim = points.shape[1]
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    if mean_dist <= 0:
        raise DegenerateConfiguration("all points coincide")
    s = math.sqrt(dim) / mean_dist
    T = np.eye(dim + 1)
    T[:dim, :dim] *= s
    T[:dim, dim] = -s * centroid
    return T


def _design_matrix(X: np.ndarray, uv: np.ndarray) -> np.ndarray:
    n = len(X)
    Xh = np.hstack([X, np.ones((n, 1))])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -uv[:, [0]] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -uv[:, [1]] * Xh
    return A


def normalize_projection(P: np.ndarray) -> np.ndarray:
    """Scale P so the bottom-left 1x3 block has unit norm and det(P[:, :3]) > 0."""
    P = np.asarray(P, dtype=float)
    n = np.linalg.norm(P[2, :3])
    if n == 0:
        raise SingularCamera("projection matrix has a zero third row")
    P = P / n
    if np.linalg.det(P[:, :3]) < 0:
        P = -P
    return P


def solve_dlt_arrays(X: np.ndarray, uv: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Array form of :func:`estimate_projection_dlt`."""
    X = np.asarray(X, dtype=float)
    uv = np.asarray(uv, dtype=float)
    n = len(X)
    if n < 6:
        raise TooFewPoints(f"DLT needs at least 6 correspondences, got {n}")
    first_world = {}
    for w, p in zip(X, uv):
        w0 = first_world.setdefault((p[0], p[1]), w)
        if w0 is not w and np.any(w0 != w):
            raise DegenerateConfiguration("distinct world points share an identical pixel")

    if normalize:
        T3 = normalization_transform(X)
        T2 = normalization_transform(uv)
        Xn = X @ T3[:3, :3].T + T3[:3, 3]
        uvn = uv @ T2[:2, :2].T + T2[:2, 2]
    else:
        T3, T2, Xn, uvn = np.eye(4), np.eye(3), X, uv

    centered = Xn - Xn.mean(axis=0)
    sv_world = np.linalg.svd(centered, compute_uv=False)
    if sv_world[-1] <= PLANARITY_TOL * sv_world[0]:
        raise DegenerateConfiguration("world points are coplanar or collinear")

    A = _design_matrix(Xn, uvn)
    _, s, vt = np.linalg.svd(A)
    if s[-2] <= 1e-14 * s[0] or s[-1] / s[-2] > DEGENERACY_RATIO:
        raise DegenerateConfiguration("design matrix has no unique null direction")
    Pn = vt[-1].reshape(3, 4)
    P = np.linalg.solve(T2, Pn @ T3)
    return normalize_projection(P)


def estimate_projection_dlt(points, normalize: bool = True) -> np.ndarray:
    """Least-squares 3x4 projection matrix from correspondences.

    Parameters
    ----------
    points : iterable of Correspondence
        At least six, with world points not all coplanar.
    normalize : bool
        Apply isotropic conditioning to both point sets. Turning this off is
        only useful for demonstrating why it is on.

    Returns
    -------
    ndarray, shape (3, 4)
        Normalized so ``||P[2, :3]|| == 1`` and ``det(P[:, :3]) > 0``.
    """
    X, uv = _split(points)
    return solve_dlt_arrays(X, uv, normalize=normalize)


def compose_projection(K, R, t) -> np.ndarray:
    R = R.matrix if isinstance(R, Rotation) else np.asarray(R, dtype=float)
    return np.asarray(K, dtype=float) @ np.hstack([R, np.asarray(t, dtype=float).reshape(3, 1)])


def decompose_projection(P) -> tuple[np.ndarray, Rotation, np.ndarray]:
    """Split ``P ~ K [R | t]`` into upper-triangular K (K[2,2] = 1), R and t.

    The overall sign and scale of ``P`` are irrelevant.
    """
    P = np.asarray(P, dtype=float)
    if P.shape != (3, 4) or not np.all(np.isfinite(P)):
        raise SingularCamera("P must be a finite 3x4 matrix")
    M = P[:, :3]
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise SingularCamera("leading 3x3 block is singular")
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    K, R = rq(M)
    D = np.diag(np.sign(np.diag(K)))
    K = K @ D
    R = D @ R
    t = np.linalg.solve(K, P[:, 3])
    K = K / K[2, 2]
    return K, Rotation(R), t


def camera_from_projection(P, width: float, height: float) -> CameraModel:
    """Decompose ``P`` into a :class:`CameraModel`; skew is dropped."""
    K, R, t = decompose_projection(P)
    return CameraModel(K[0, 0], K[1, 1], K[0, 2], K[1, 2], width, height, R, t)


def project_with_matrix(P, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    h = np.hstack([X, np.ones((len(X), 1))]) @ np.asarray(P).T
    return h[:, :2] / h[:, 2:3]


def reprojection_rmse(P, points) -> float:
    """Root-mean-square pixel residual of ``points`` under ``P``."""
    X, uv = _split(points)
    if len(X) == 0:
        raise EmptyInput("no correspondences")
    residual = project_with_matrix(P, X) - uv
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


def read_correspondences(path) -> list[Correspondence]:
    """Read a ``name,X,Y,Z,u,v`` CSV file."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = ["name", "X", "Y", "Z", "u", "v"]
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in required):
            raise ValueError(f"{path}: header must be {','.join(required)}")
        for row in reader:
            out.append(
                Correspondence(
                    world=[float(row["X"]), float(row["Y"]), float(row["Z"])],
                    pixel=[float(row["u"]), float(row["v"])],
                    name=row["name"],
                )
            )
    return out


def write_correspondences(path, points) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "X", "Y", "Z", "u", "v"])
        for i, c in enumerate(points):
            w.writerow([c.name or f"p{i}", *(repr(float(v)) for v in c.world), *(repr(float(v)) for v in c.pixel)])


class DLTCalibrator(BaseEstimator):
    """Estimator wrapper: ``fit(world_xyz, pixels)`` then ``predict(world_xyz)``.

    Parameters
    ----------
    width, height : float
        Image size, needed to build :attr:`camera_`.
    normalize : bool
        Isotropic conditioning before the SVD solve.
    """

    def __init__(self, width=1920, height=1080, normalize=True):
        self.width = width
        self.height = height
        self.normalize = normalize

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if X.shape[1] != 3 or y.ndim != 2 or y.shape[1] != 2:
            raise ValueError("X must be (n, 3) world points and y (n, 2) pixels")
        self.projection_matrix_ = solve_dlt_arrays(X, y, normalize=self.normalize)
        self.camera_ = camera_from_projection(self.projection_matrix_, self.width, self.height)
        self.rmse_ = float(np.sqrt(np.mean(np.sum((project_with_matrix(self.projection_matrix_, X) - y) ** 2, axis=1))))
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "projection_matrix_")
        X = check_array(X)
        return project_with_matrix(self.projection_matrix_, X)

    def score(self, X, y):
        """Negative reprojection RMSE (higher is better)."""
        y = check_array(y)
        return -float(np.sqrt(np.mean(np.sum((self.predict(X) - y) ** 2, axis=1))))
