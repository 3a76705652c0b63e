"""
A tour of the hyperboloid
=========================

Points, distances, cones and the small-angle stretch, printed as we go.
"""

import numpy as np

from hypseek.geometry import (exp_map_origin, exterior_angle, half_aperture, lorentz_distance,
                              membership_residual, origin)

# Tangent vectors at the origin become points through the exp map.
v = np.array([[0.3, 0.0, 0.0],
              [2.0, 0.0, 0.0],
              [0.0, 5.0, 0.0]])
p = exp_map_origin(v)
print("time coordinates:", p.time)
print("membership residual:", membership_residual(p))

# The geodesic radius of exp(v) is |v|.
o = origin(3)
print("radius:", lorentz_distance(o, p), "vs |v|:", np.linalg.norm(v, axis=1))

# Two vectors of norm r meeting at a small angle theta end up about
# sinh(r) * theta apart, while their tangent gap is only about r * theta.
r = 2.0
for theta in (1e-1, 1e-2, 1e-3):
    a = exp_map_origin(np.array([r, 0.0, 0.0]))
    b = exp_map_origin(np.array([r * np.cos(theta), r * np.sin(theta), 0.0]))
    d = float(lorentz_distance(a, b))
    print(f"theta={theta:g}  d={d:.6e}  d/(2r sin(theta/2))={d / (2 * r * np.sin(theta / 2)):.6f}")
print("limit sinh(r)/r =", np.sinh(r) / r)

# Cones: the half aperture shrinks as the pocket moves outward, and the
# exterior angle says how far a ligand sits off the pocket's outward ray.
for radius in (0.5, 1.0, 2.0, 4.0):
    pocket = exp_map_origin(np.array([radius, 0.0, 0.0]))
    print(f"pocket at radius {radius}: half aperture {float(half_aperture(pocket)):.4f} rad")

pocket = exp_map_origin(np.array([[1.0, 0.0, 0.0]]))
on_ray = exp_map_origin(np.array([[2.0, 0.0, 0.0]]))
off_ray = exp_map_origin(np.array([[1.5, 0.6, 0.0]]))
print("angle on the ray:", exterior_angle(pocket, on_ray))
print("angle off the ray:", exterior_angle(pocket, off_ray))
