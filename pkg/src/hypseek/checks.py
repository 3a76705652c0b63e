"""Numerical self-checks for the geometry and the gradients.

Each check returns a :class:`CheckResult`; ``run_geomcheck`` strings the
default suite together for the ``geomcheck`` command.  The exterior-angle
oracle here works from pairwise geodesic distances only (hyperbolic law of
cosines), so it shares no algebra with :func:`hypseek.geometry.exterior_angle`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import (LorentzPoint, exp_map_origin, exterior_angle, half_aperture,
                       lorentz_distance, membership_residual, origin)
from .losses import BucketConfig, LossWeights, _cone_quantities, assign_buckets
from .model import Batch, GradientBundle, embed, finite_diff_check, grad_total_loss, init_params
from .seeding import derive_rng

__all__ = [
    "CheckResult",
    "law_of_cosines_angle",
    "random_tangents",
    "membership_check",
    "radius_identity_check",
    "metric_axioms_check",
    "exterior_angle_check",
    "aperture_monotone_check",
    "small_angle_errors",
    "small_angle_check",
    "random_fd_batch",
    "gradient_check",
    "run_geomcheck",
]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{tag}  {self.name}: measured={self.measured:.3e} bound={self.tolerance:.3e}{extra}"


def law_of_cosines_angle(pocket: LorentzPoint, ligand: LorentzPoint, curvature=1.0) -> np.ndarray:
    """Exterior angle at ``pocket`` from the three side lengths of (origin, pocket, ligand)."""
    k = float(getattr(curvature, "kappa", curvature))
    o = origin(pocket.dim, k)
    sk = np.sqrt(k)
    a = sk * lorentz_distance(o, pocket, k)
    b = sk * lorentz_distance(pocket, ligand, k)
    c = sk * lorentz_distance(o, ligand, k)
    cos_interior = (np.cosh(a) * np.cosh(b) - np.cosh(c)) / (np.sinh(a) * np.sinh(b))
    return np.pi - np.arccos(np.clip(cos_interior, -1.0, 1.0))


def random_tangents(rng, count: int, dim: int, max_norm: float) -> np.ndarray:
    """Uniform random directions with norms uniform in ``[0, max_norm]``."""
    v = rng.normal(size=(count, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(0.0, max_norm, size=(count, 1))


def membership_check(seed: int = 0, count: int = 10_000, dim: int = 16, max_norm: float = 10.0,
                     kappas: Sequence[float] = (0.5, 1.0, 2.0), tol: float = 1e-9,
                     relative: bool = False) -> CheckResult:
    """Worst hyperboloid residual ``|<p,p> + 1/kappa|`` after the exp map.

    With ``relative=True`` the residual is divided by ``max(1, time^2)``,
    which is what double precision can actually guarantee at large radii.
    """
    rng = derive_rng(seed, "membership")
    t0 = time.perf_counter()
    worst = 0.0
    for k in kappas:
        p = exp_map_origin(random_tangents(rng, count, dim, max_norm), k)
        res = np.abs(membership_residual(p, k))
        if relative:
            res = res / np.maximum(1.0, p.time ** 2)
        worst = max(worst, float(res.max()))
    elapsed = time.perf_counter() - t0
    name = "membership (relative)" if relative else "membership"
    return CheckResult(name, worst <= tol and elapsed < 1.0, worst, tol, f"{elapsed:.3f}s")


def radius_identity_check(dim: int = 8, kappa: float = 1.0, tol: float = 1e-8,
                          seed: int = 0) -> CheckResult:
    rng = derive_rng(seed, "radius")
    norms = np.logspace(-6, 1, 100)
    u = rng.normal(size=(100, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    p = exp_map_origin(u * norms[:, None], kappa)
    d = lorentz_distance(p, origin(dim, kappa), kappa)
    worst = float(np.max(np.abs(d - norms) / norms))
    return CheckResult("radius identity", worst <= tol, worst, tol)


def metric_axioms_check(seed: int = 0, count: int = 2000, dim: int = 6,
                        kappa: float = 1.0) -> CheckResult:
    """Symmetry within 1e-9 and the triangle inequality with 1e-12 slack."""
    rng = derive_rng(seed, "axioms")
    x, y, z = (exp_map_origin(random_tangents(rng, count, dim, 4.0), kappa) for _ in range(3))
    dxy, dyx = lorentz_distance(x, y, kappa), lorentz_distance(y, x, kappa)
    asym = float(np.max(np.abs(dxy - dyx)))
    excess = float(np.max(dxy - lorentz_distance(x, z, kappa) - lorentz_distance(z, y, kappa)))
    ok = asym <= 1e-9 and excess <= 1e-12
    return CheckResult("symmetry / triangle", ok, asym, 1e-9, f"max triangle excess {excess:.2e}")


def _nondegenerate_triples(rng, count, dim, kappa):
    pockets, ligands = [], []
    have = 0
    while have < count:
        p = exp_map_origin(random_tangents(rng, 2 * count, dim, 3.0), kappa)
        q = exp_map_origin(random_tangents(rng, 2 * count, dim, 3.0), kappa)
        o = origin(dim, kappa)
        ok = ((lorentz_distance(o, p, kappa) > 1e-2) & (lorentz_distance(p, q, kappa) > 1e-4)
              & (lorentz_distance(o, q, kappa) > 1e-4))
        pockets.append(p.as_array()[ok])
        ligands.append(q.as_array()[ok])
        have += int(ok.sum())
    return (LorentzPoint.from_array(np.vstack(pockets)[:count]),
            LorentzPoint.from_array(np.vstack(ligands)[:count]))


def exterior_angle_check(seed: int = 0, count: int = 1000, dim: int = 5,
                         kappas: Sequence[float] = (0.5, 1.0, 2.0),
                         tol: float = 1e-6) -> CheckResult:
    rng = derive_rng(seed, "exterior")
    worst = 0.0
    for k in kappas:
        p, q = _nondegenerate_triples(rng, count, dim, k)
        diff = np.abs(exterior_angle(p, q, k) - law_of_cosines_angle(p, q, k))
        worst = max(worst, float(diff.max()))
    return CheckResult("exterior angle vs law of cosines", worst <= tol, worst, tol)


def aperture_monotone_check(dim: int = 4, kappa: float = 1.0, r0: float = 0.1) -> CheckResult:
    u = np.zeros(dim)
    u[0] = 1.0
    radii = np.linspace(1e-3, 6.0, 500)
    omega = half_aperture(exp_map_origin(radii[:, None] * u, kappa), r0, kappa)
    rise = float(np.max(np.diff(omega), initial=0.0))
    return CheckResult("half aperture non-increasing", rise <= 0.0, max(rise, 0.0), 0.0)


def small_angle_errors(thetas: Sequence[float], r: float = 2.0, kappa: float = 1.0,
                       dim: int = 3) -> list:
    """For each angle, ``(theta, d / |v1 - v2|, relative error of d ~ sinh(r) theta)``.

    ``v1`` and ``v2`` have norm ``r`` and meet at angle ``theta``; the
    approximation scales ``sinh(sqrt(kappa) r) / sqrt(kappa)``.
    """
    out = []
    sk = np.sqrt(kappa)
    for theta in thetas:
        v1 = np.zeros(dim)
        v2 = np.zeros(dim)
        v1[0] = r
        v2[0], v2[1] = r * np.cos(theta), r * np.sin(theta)
        d = float(lorentz_distance(exp_map_origin(v1, kappa), exp_map_origin(v2, kappa), kappa))
        approx = np.sinh(sk * r) / sk * theta
        out.append((float(theta), d / float(np.linalg.norm(v1 - v2)), abs(d - approx) / approx))
    return out


def small_angle_check(thetas: Sequence[float] = (1e-2, 1e-3), r: float = 2.0,
                      kappa: float = 1.0) -> list:
    """Limit ratio at the smallest angle and the error quotient between the two smallest."""
    thetas = sorted(thetas, reverse=True)
    rows = small_angle_errors(thetas, r, kappa)
    target = np.sinh(np.sqrt(kappa) * r) / (np.sqrt(kappa) * r)
    theta, ratio, _ = rows[-1]
    dev = abs(ratio - target) / target
    results = [CheckResult(f"small-angle ratio at theta={theta:g}", dev <= 0.01, dev, 0.01,
                           f"ratio {ratio:.6f}, limit {target:.6f}")]
    if len(rows) >= 2:
        (t_big, _, e_big), (t_small, _, e_small) = rows[-2], rows[-1]
        quotient = e_small / e_big
        expected = (t_small / t_big) ** 2
        lo, hi = 0.5 * expected, 2.0 * expected
        results.append(CheckResult(
            f"small-angle error quotient {t_small:g}/{t_big:g}", lo <= quotient <= hi, quotient,
            hi, f"errors {e_big:.3e} -> {e_small:.3e}, expected quotient in [{lo:g}, {hi:g}]"))
    return results


# --------------------------------------------------------------------------
# gradients


FD_WEIGHTS = LossWeights(affinity_threshold=1.0)
FD_BUCKETS = BucketConfig(thresholds=(-2.0, -1.0, 0.0, 1.0), base_radius=0.5, angle_step=0.1)
_KINK_MARGIN = 1e-3


def _off_kinks(batch: Batch, params, weights: LossWeights, buckets: BucketConfig) -> bool:
    k = params.kappa
    pockets = embed(batch.pocket_x, params.pocket, k)
    ligands = embed(batch.lig_x, params.ligand, k)
    pairs = batch.cone_pairs
    d, phi, omega, r, eta = _cone_quantities(pockets, ligands[pairs], batch.lig_assay[pairs],
                                             batch.bucket[pairs], buckets, k)
    hinges = np.concatenate([d - r, phi - eta * omega, phi - eta * omega + weights.margin])
    cap = 2.0 * buckets.aperture_r0 / (np.sqrt(k) * np.linalg.norm(pockets.spatial, axis=1))
    each_live = np.all([np.any(h > 0) for h in (d - r, phi - eta * omega)])
    return (bool(each_live) and np.min(np.abs(hinges)) > _KINK_MARGIN
            and np.min(np.abs(cap - 1.0)) > _KINK_MARGIN
            and np.min(np.abs(np.cos(phi))) < 1.0 - 1e-6)


def random_fd_batch(seed: int, assays: int = 3, ligands: int = 4, dim: int = 8,
                    weights: LossWeights = FD_WEIGHTS, buckets: BucketConfig = FD_BUCKETS):
    """A random batch and parameter set with every loss term non-zero and no hinge near its kink.

    Returns ``(batch, params)``.
    """
    rng = derive_rng(seed, "fd-batch")
    for attempt in range(1000):
        px = rng.normal(size=(assays, dim))
        sx = rng.normal(size=(assays, dim))
        lx = rng.normal(size=(assays * ligands, dim))
        lig_assay = np.repeat(np.arange(assays), ligands)
        active = rng.random(assays * ligands) < 0.5
        active[::ligands] = True
        active[1::ligands] = True
        aff = rng.normal(size=assays * ligands) + active
        bucket = assign_buckets(-aff, buckets.thresholds)
        batch = Batch(px, lx, lig_assay, active, aff, bucket, sx)
        params = init_params(dim, dim, seed=int(rng.integers(2**31)))
        _, _, breakdown = grad_total_loss(batch, params, weights, buckets)
        if all(v > 0 for v in breakdown.values()) and _off_kinks(batch, params, weights, buckets):
            return batch, params
    raise RuntimeError("could not draw a batch away from every kink")


def corrupt(grads: GradientBundle) -> GradientBundle:
    """Double the largest-magnitude gradient entry (negative control)."""
    arrays = {k: np.array(g, copy=True) for k, g in grads.arrays.items()}
    name = max(arrays, key=lambda k: np.max(np.abs(arrays[k])))
    arr = arrays[name]
    arr[np.unravel_index(np.argmax(np.abs(arr)), arr.shape)] *= 2.0
    return GradientBundle(arrays)


def gradient_check(batches: int = 20, seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                   corrupt_gradient: bool = False) -> CheckResult:
    worst = 0.0
    t0 = time.perf_counter()
    for i in range(batches):
        batch, params = random_fd_batch(seed * 1000 + i)
        grads = None
        if corrupt_gradient:
            grads = corrupt(grad_total_loss(batch, params, FD_WEIGHTS, FD_BUCKETS)[1])
        err = finite_diff_check(batch, params, FD_WEIGHTS, h, FD_BUCKETS, grads)
        worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    name = "gradient vs finite differences" + (" [corrupted]" if corrupt_gradient else "")
    return CheckResult(name, worst < tol, worst, tol, f"{batches} batches, {elapsed:.1f}s")


def run_geomcheck(thetas: Optional[Sequence[float]] = None, seed: int = 0,
                  corrupt_gradient: bool = False, gradient_batches: int = 3) -> list:
    """The default self-check suite.

    Membership is judged relative to ``time^2`` (the absolute residual is
    reported alongside for information; see the README).
    """
    results = [
        membership_check(seed, relative=True),
        radius_identity_check(seed=seed),
        metric_axioms_check(seed),
        exterior_angle_check(seed),
        aperture_monotone_check(),
    ]
    results += small_angle_check(thetas or (1e-2, 1e-3))
    results.append(gradient_check(gradient_batches, seed, corrupt_gradient=corrupt_gradient))
    return results
