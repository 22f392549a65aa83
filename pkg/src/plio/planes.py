"""Plane fitting, point-to-plane distances, and plane thickness.

A plane is the set of points with ``n.p + d = 0`` for a unit normal n.  The
thickness of a point set relative to a plane is the mean squared
point-to-plane distance; for independent zero-mean Gaussian point-to-plane
noise with standard deviation sigma the thickness has variance
``2 * (sigma^2)^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, NonPositiveInput

# Reject fits where the two smallest scatter eigenvalues are this close.
DEGENERACY_RATIO = 0.9
_TINY = 1e-15


@dataclass(frozen=True)
class Plane:
    """Fitted plane with diagnostics.

    n: unit normal, d: offset (n.p + d = 0 on the plane),
    thickness: mean squared distance of the fitting points,
    point_count: number of fitting points.
    """

    n: np.ndarray
    d: float
    thickness: float
    point_count: int


def fit_plane(points: np.ndarray) -> Plane:
    """Total-least-squares plane through >= 3 non-collinear points.

    The normal is the eigenvector of the centered scatter matrix with the
    smallest eigenvalue, so planes through the origin are handled without a
    special case.  The normal sign is canonicalized so its largest-magnitude
    component is positive.

    Raises DegenerateGeometry when the points are (near-)collinear, i.e. the
    two smallest scatter eigenvalues are within DEGENERACY_RATIO of each other.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
        raise DegenerateGeometry("need at least 3 points of dimension 3")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scatter = centered.T @ centered
    evals, evecs = np.linalg.eigh(scatter)
    if evals[1] < _TINY or evals[0] / evals[1] > DEGENERACY_RATIO:
        raise DegenerateGeometry(
            f"near-collinear point set (eigenvalues {evals[0]:.3e}, {evals[1]:.3e})"
        )
    n = evecs[:, 0]
    k = int(np.argmax(np.abs(n)))
    if n[k] < 0.0:
        n = -n
    d = -float(n @ centroid)
    gamma = plane_thickness((n, d), pts)
    return Plane(n=n, d=d, thickness=gamma, point_count=pts.shape[0])


def point_to_plane(plane: Plane, p: np.ndarray) -> float:
    """Signed distance n.p + d."""
    return float(plane.n @ np.asarray(p, dtype=float) + plane.d)


def plane_thickness(plane_params: tuple[np.ndarray, float], points: np.ndarray) -> float:
    """Mean squared point-to-plane distance of a point set."""
    n, d = plane_params
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[0] < 1:
        raise DegenerateGeometry("thickness of an empty point set")
    eps = pts @ np.asarray(n, dtype=float) + d
    return float(np.mean(eps * eps))


def thickness_variance(sigma_eps: float) -> float:
    """Variance of the plane thickness for point-to-plane noise std sigma_eps."""
    if sigma_eps <= 0.0:
        raise NonPositiveInput(f"sigma_eps must be > 0, got {sigma_eps}")
    var = sigma_eps * sigma_eps
    return 2.0 * var * var


# ---------------------------------------------------------------------------
# Batch fitting used by the association pipeline and the estimator.
# ---------------------------------------------------------------------------


def fit_planes_batch(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Fit one plane per row group of a (M, K, 3) stack.

    Returns (normals (M, 3), offsets (M,), thicknesses (M,), ok (M,) bool).
    Degenerate groups get ok=False instead of raising.
    """
    pts = np.asarray(points, dtype=float)
    m, k, _ = pts.shape
    centroid = pts.mean(axis=1)
    centered = pts - centroid[:, None, :]
    scatter = np.einsum("mki,mkj->mij", centered, centered)
    evals, evecs = np.linalg.eigh(scatter)
    ok = (evals[:, 1] >= _TINY) & (evals[:, 0] <= DEGENERACY_RATIO * evals[:, 1])
    n = evecs[:, :, 0]
    # canonical sign: largest-magnitude component positive
    idx = np.argmax(np.abs(n), axis=1)
    sign = np.sign(n[np.arange(m), idx])
    sign[sign == 0.0] = 1.0
    n = n * sign[:, None]
    d = -np.einsum("mi,mi->m", n, centroid)
    gamma = evals[:, 0] / k
    return n, d, np.maximum(gamma, 0.0), ok
