"""Lorentz-model primitives.

Points live on the upper sheet of the hyperboloid
``-x0**2 + |x~|**2 = -1/kappa`` and are stored as a time coordinate plus an
``n``-vector of spatial coordinates.  Every function here is vectorised over
leading axes: a ``LorentzPoint`` may hold a single point (scalar time, 1-D
spatial) or a stack of them (``time.shape == spatial.shape[:-1]``).

All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Curvature",
    "LorentzPoint",
    "lorentz_inner",
    "lift_spatial",
    "origin",
    "exp_map_origin",
    "lorentz_distance",
    "exterior_angle",
    "half_aperture",
    "membership_residual",
    "sinhc",
    "GeometryError",
]

# Series cut-over for sinh(x)/x; below it the truncated Taylor series is exact
# to double precision and avoids the 0/0 at the origin.
_SINHC_SERIES_BELOW = 1e-2
DEGENERATE_NORM = 1e-8
OFF_MANIFOLD_TOL = 1e-6
NEAR_ACOSH = 2.0


class GeometryError(ValueError):
    """Raised for inputs where a hyperbolic quantity is undefined."""


@dataclass(frozen=True)
class Curvature:
    """Curvature magnitude; the space has sectional curvature ``-kappa``."""

    kappa: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.kappa) or self.kappa <= 0:
            raise ValueError(f"kappa must be positive and finite, got {self.kappa}")


CurvatureLike = Union[Curvature, float, int]


def _kappa(curvature: CurvatureLike) -> float:
    if isinstance(curvature, Curvature):
        return float(curvature.kappa)
    return Curvature(float(curvature)).kappa


@dataclass(frozen=True)
class LorentzPoint:
    time: np.ndarray
    spatial: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "time", np.asarray(self.time, dtype=np.float64))
        object.__setattr__(self, "spatial", np.asarray(self.spatial, dtype=np.float64))
        if self.spatial.ndim == 0:
            raise ValueError("spatial part must have at least one axis")
        if self.time.shape != self.spatial.shape[:-1]:
            raise ValueError(
                f"time shape {self.time.shape} does not match spatial batch "
                f"shape {self.spatial.shape[:-1]}"
            )

    @property
    def dim(self) -> int:
        """Intrinsic dimension ``n`` (number of spatial coordinates)."""
        return self.spatial.shape[-1]

    def as_array(self) -> np.ndarray:
        """Ambient ``(..., n + 1)`` coordinates, time first."""
        return np.concatenate([self.time[..., None], self.spatial], axis=-1)

    @classmethod
    def from_array(cls, coords) -> "LorentzPoint":
        coords = np.asarray(coords, dtype=np.float64)
        return cls(coords[..., 0], coords[..., 1:])

    def __getitem__(self, idx) -> "LorentzPoint":
        return LorentzPoint(self.time[idx], self.spatial[idx])

    def __len__(self) -> int:
        return len(self.time)


def _ambient(p) -> np.ndarray:
    if isinstance(p, LorentzPoint):
        return p.as_array()
    return np.asarray(p, dtype=np.float64)


def lorentz_inner(p, q) -> np.ndarray:
    """Lorentzian inner product ``-p0*q0 + <p~, q~>``.

    Accepts ``LorentzPoint`` instances or raw ambient ``(..., n + 1)`` arrays.
    """
    a, b = _ambient(p), _ambient(q)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    return -a[..., 0] * b[..., 0] + np.sum(a[..., 1:] * b[..., 1:], axis=-1)


def membership_residual(p: LorentzPoint, curvature: CurvatureLike = 1.0) -> np.ndarray:
    """Absolute hyperboloid residual ``|<p, p>_L + 1/kappa|``."""
    k = _kappa(curvature)
    return np.abs(lorentz_inner(p, p) + 1.0 / k)


def _relative_residual(p: LorentzPoint, k: float) -> np.ndarray:
    # Absolute residuals scale with time**2 through round-off alone, so the
    # off-manifold test is made relative to the size of the coordinates.
    return membership_residual(p, k) / np.maximum(1.0, p.time**2)


def lift_spatial(spatial, curvature: CurvatureLike = 1.0) -> LorentzPoint:
    """Complete spatial coordinates with the unique positive time coordinate."""
    k = _kappa(curvature)
    spatial = np.asarray(spatial, dtype=np.float64)
    if not np.all(np.isfinite(spatial)):
        raise ValueError("spatial coordinates must be finite")
    time = np.sqrt(1.0 / k + np.sum(spatial * spatial, axis=-1))
    return LorentzPoint(time, spatial)


def origin(dim: int, curvature: CurvatureLike = 1.0) -> LorentzPoint:
    k = _kappa(curvature)
    return LorentzPoint(np.float64(1.0 / np.sqrt(k)), np.zeros(dim))


def sinhc(x) -> np.ndarray:
    """``sinh(x) / x`` with the removable singularity at 0 filled in."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < _SINHC_SERIES_BELOW
    s = x * x
    series = 1.0 + s / 6.0 * (1.0 + s / 20.0 * (1.0 + s / 42.0))
    safe = np.where(small, 1.0, x)
    return np.where(small, series, np.sinh(safe) / safe)


def exp_map_origin(v, curvature: CurvatureLike = 1.0) -> LorentzPoint:
    """Exponential map at the origin for tangent vectors given by their spatial part.

    The spatial output is ``sinh(sqrt(k)|v|) / (sqrt(k)|v|) * v``.  The time
    coordinate is recovered from the hyperboloid constraint rather than from
    ``cosh(sqrt(k)|v|)/sqrt(k)``; the two agree analytically and the former
    keeps the membership residual at the round-off floor.
    """
    k = _kappa(curvature)
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("tangent vector must be finite")
    x = np.sqrt(k) * np.linalg.norm(v, axis=-1)
    spatial = sinhc(x)[..., None] * v
    return lift_spatial(spatial, k)


def _check_on_manifold(p: LorentzPoint, k: float, name: str) -> None:
    if np.any(p.time <= 0) or np.any(_relative_residual(p, k) > OFF_MANIFOLD_TOL):
        raise GeometryError(f"{name} is not on the hyperboloid (kappa={k})")


def lorentz_distance(p: LorentzPoint, q: LorentzPoint, curvature: CurvatureLike = 1.0,
                     check: bool = True) -> np.ndarray:
    """Geodesic distance ``acosh(-k <p, q>_L) / sqrt(k)``.

    The acosh argument is clamped at 1 since round-off can push it below.
    For nearby points (argument below ``NEAR_ACOSH``) the same distance is
    evaluated as ``2 asinh(|p - q|_L sqrt(k) / 2) / sqrt(k)`` from the
    Lorentzian norm of the difference, which keeps full relative precision
    where acosh near 1 would lose half the digits.
    """
    k = _kappa(curvature)
    if check:
        _check_on_manifold(p, k, "p")
        _check_on_manifold(q, k, "q")
    z = -k * lorentz_inner(p, q)
    dt = p.time - q.time
    ds = p.spatial - q.spatial
    chord2 = np.maximum(k * (np.sum(ds * ds, axis=-1) - dt * dt), 0.0)
    near = 2.0 * np.arcsinh(0.5 * np.sqrt(chord2))
    far = np.arccosh(np.maximum(z, 1.0))
    return np.where(z < NEAR_ACOSH, near, far) / np.sqrt(k)


def exterior_angle(pocket: LorentzPoint, ligand: LorentzPoint,
                   curvature: CurvatureLike = 1.0) -> np.ndarray:
    """Angle at ``pocket`` between the outward radial direction and the geodesic to ``ligand``.

    0 means the ligand sits further out on the pocket's own ray; pi means it
    lies on the segment back towards the origin.
    """
    k = _kappa(curvature)
    p_norm = np.linalg.norm(pocket.spatial, axis=-1)
    if np.any(p_norm <= DEGENERATE_NORM):
        raise GeometryError("exterior angle is undefined for a pocket at the origin")
    if np.any(lorentz_distance(pocket, ligand, k, check=False) <= DEGENERATE_NORM):
        raise GeometryError("exterior angle is undefined for coincident points")
    c = k * (np.sum(pocket.spatial * ligand.spatial, axis=-1) - pocket.time * ligand.time)
    num = ligand.time + c * pocket.time
    den = p_norm * np.sqrt(np.maximum(c * c - 1.0, 0.0))
    return np.arccos(np.clip(num / den, -1.0, 1.0))


def half_aperture(pocket: LorentzPoint, r0: float = 0.1,
                  curvature: CurvatureLike = 1.0) -> np.ndarray:
    """Half-aperture of the cone rooted at ``pocket``.

    ``arcsin(2 r0 / (sqrt(k) |p~|))`` with the argument capped at 1, so pockets
    close to the origin get the widest cone, pi/2.
    """
    k = _kappa(curvature)
    if r0 <= 0:
        raise ValueError("r0 must be positive")
    p_norm = np.linalg.norm(pocket.spatial, axis=-1)
    if np.any(p_norm <= DEGENERATE_NORM):
        raise GeometryError("half aperture is undefined for a pocket at the origin")
    return np.arcsin(np.minimum(1.0, 2.0 * r0 / (np.sqrt(k) * p_norm)))
