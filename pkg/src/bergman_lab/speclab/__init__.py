"""Magnetic-Laplacian spectra on tori, closed-form oracles and post-processing."""

from .analysis import (
    BaseLocusError,
    FitResult,
    IllConditionedFit,
    dos_moments,
    fit_expansion,
    fit_exponent,
    fs_pullback_kernel,
    fs_pullback_lattice,
    near_diagonal_check,
    peak_section,
    radial_gauge_kernel,
)
from .io import EigenCache, cache_from_env, write_csv
from .oracles import CP1Oracle, CP1Spec, ThetaOracle, TruncationError, cp1_exact, theta_oracle
from .torus import (
    GAUGES,
    ClusterAmbiguous,
    ConvergenceError,
    SpectralResult,
    TorusSpec,
    assemble_torus,
    bergman_fields,
    default_grid,
    gap_and_dimension,
    kernel_column,
    low_spectrum,
    plaquette_flux,
    solve_torus,
)

__all__ = [
    "BaseLocusError", "FitResult", "IllConditionedFit", "dos_moments", "fit_expansion", "fit_exponent",
    "fs_pullback_kernel", "fs_pullback_lattice", "near_diagonal_check", "peak_section",
    "radial_gauge_kernel", "EigenCache", "cache_from_env", "write_csv", "CP1Oracle", "CP1Spec",
    "ThetaOracle", "TruncationError", "cp1_exact", "theta_oracle", "GAUGES", "ClusterAmbiguous",
    "ConvergenceError", "SpectralResult", "TorusSpec", "assemble_torus", "bergman_fields",
    "default_grid", "gap_and_dimension", "kernel_column", "low_spectrum", "plaquette_flux", "solve_torus",
]
