"""Bound states of the magnetic Laplacian on the unit torus.

Run with ``python demos/02_torus_landau_levels.py`` (about a minute).
"""

# %% Solve a few tensor powers on the default grid N = 4p
import math

import numpy as np

from bergman_lab.speclab import (
    TorusSpec,
    bergman_fields,
    gap_and_dimension,
    near_diagonal_check,
    solve_torus,
    theta_oracle,
)

ps = (8, 12, 16, 24)
runs = {p: solve_torus(TorusSpec(p=p)) for p in ps}

# %% Cluster size, spread and the next level
for p, res in runs.items():
    info = gap_and_dimension(res)
    print(f"p={p:3d}  d_p={info['d_p']:3d}  spread={info['cluster_spread']:.4f}  "
          f"next/p={info['next'] / p:.3f}  (2 mu0 = {2 * res.spec.mu0:.3f})")

# %% The Bergman density is flat: B/p - 1 collapses much faster than 1/p
for p, res in runs.items():
    B0 = bergman_fields(res)[0]
    print(f"p={p:3d}  sup|B/p - 1| = {np.max(np.abs(B0 / p - 1)):.2e}")

# %% Theta functions reproduce the lattice density
for p, res in runs.items():
    X, Y = res.spec.grid()
    diff = np.max(np.abs(theta_oracle(res.spec).bergman_diagonal(X, Y) - bergman_fields(res)[0]))
    print(f"p={p:3d}  sup|B_theta - B_lattice| / p = {diff / p:.2e}")


# %% Off the diagonal: compare with the rescaled model kernel
def model_kernel(Z, Zp, p):
    z = math.sqrt(p) * (Z[:, 0] + 1j * Z[:, 1])
    w = math.sqrt(p) * (Zp[:, 0] + 1j * Zp[:, 1])
    return np.exp(-math.pi / 2 * (abs(z) ** 2 + abs(w) ** 2 - 2 * z * w.conj()))


for p, res in runs.items():
    out = near_diagonal_check(res, model_kernel)
    # small p: the ball of radius 2/sqrt(p) sees the periodic images
    print(f"p={p:3d}  sup error {out['sup_error']:.2e} over {out['points']} offsets")
