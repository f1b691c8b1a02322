"""Two ways a photometric surfel map can be ill-posed, and what fixes each.

Usage: python3 demos/gauge_freedoms.py

1. Growing map.  Scaling a surfel's centre and tangent basis by the same
   factor about the camera centre leaves every projected texel where it
   was.  With a free deformation tensor this is a null direction of the
   per-surfel Hessian.  Forcing F = I removes it.

2. Floating map.  Moving every surfel and the camera by the same rigid
   motion changes no residual either.  Equilibrium anchors pin this gauge.
"""
from surfel_track.diagnostics import floating_ambiguity, growing_ambiguity

g = growing_ambiguity(seed=0, n_surfels=100)
print("growing map")
print(f"  largest texel shift under scaling by {g.mus}: {g.max_displacement:.2e} px")
print(f"  sigma_min / sigma_max, free F      : {g.ratio_general:.2e}")
print(f"  |cos| between null vector and scaling direction: {g.null_cosine:.6f}")
print(f"  sigma_min / sigma_max, F = I       : {g.ratio_isometry:.2e}  "
      f"({g.improvement:.1e} times better)")

print("\nfloating map (12 surfels and one camera)")
for rep in floating_ambiguity(seed=0, omegas=(0.0, 0.01, 1.0)):
    print(f"  omega_E = {rep.omega_E:<5}  near-null directions: {rep.near_null}  "
          f"sigma_min / sigma_max = {rep.ratio:.2e}")
