"""Fubini-Study pullbacks, peak sections and spectral moments.

Run with ``python demos/03_kodaira_embedding.py``.
"""

# %% Sphere: the pullback identity is exact, only differencing error remains
import numpy as np

from bergman_lab.speclab import (
    CP1Spec,
    TorusSpec,
    cp1_exact,
    dos_moments,
    fit_exponent,
    fs_pullback_kernel,
    fs_pullback_lattice,
    peak_section,
    solve_torus,
)

z = np.array([0.0, 0.5 + 0.5j, -1.2j, 1.8])
for p in (8, 16, 32):
    o = cp1_exact(CP1Spec(p))
    for delta in (1 / (4 * p), 1e-3 / p):
        err = fs_pullback_kernel(o.kernel, z, delta, p, o.omega)["sup_error"]
        print(f"sphere p={p:3d} delta={delta:.1e}  sup error {err:.2e}")

# %% Torus: lattice differences in the parallel frame, error about 0.2 / p
ps = (8, 12, 16, 24)
runs = {p: solve_torus(TorusSpec(p=p)) for p in ps}
errs = [fs_pullback_lattice(runs[p])["sup_error"] for p in ps]
print("torus pullback errors", [f"{e:.4f}" for e in errs], "exponent", round(fit_exponent(ps, errs), 2))

# %% Peak sections concentrate within p^(-1/4)
for p, res in runs.items():
    out = peak_section(res, (0, 0))
    print(f"p={p:3d}  norm={out['norm']:.12f}  mass outside r_p = {out['deficit']:.2e}")

# %% Moments of the cluster: the trace identity holds to rounding,
# the first moment is the constant lattice shift of the lowest level
for p, res in runs.items():
    rows = dos_moments(res)["moments"]
    print(f"p={p:3d}  " + "  ".join(f"q={m['q']}: {m['spectral']:+.4f} (res {m['identity_residual']:.0e})"
                                    for m in rows))
