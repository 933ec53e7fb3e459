"""Magnetic Laplacians on flat square-grid tori and their low-lying spectra.

The torus is ``R^2 / (L1 Z + L2 Z)`` carrying a line bundle of degree ``d``
with constant curvature.  On ``L^p`` the magnetic field is
``B = 2 pi p d / (L1 L2)`` and the connection is ``nabla = d - i A``.  A
section is stored by its values on the ``N x N`` grid of the fundamental
domain; crossing a boundary multiplies by the transition phase of the
gauge.  Parallel transport along a grid link is the exact exponential of
the line integral of ``A``, so every plaquette carries flux ``B h1 h2``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "GAUGES",
    "TorusSpec",
    "SpectralResult",
    "ConvergenceError",
    "ClusterAmbiguous",
    "assemble_torus",
    "plaquette_flux",
    "low_spectrum",
    "solve_torus",
    "gap_and_dimension",
    "bergman_fields",
    "kernel_column",
    "default_grid",
]

GAUGES = ("landau", "symmetric")


class ConvergenceError(RuntimeError):
    """The eigensolver did not reach the requested residual."""

    def __init__(self, message: str, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class ClusterAmbiguous(RuntimeError):
    """No clean spectral gap separates the bound states at this resolution."""


def default_grid(p: int, d: int = 1, per_p: int = 4) -> int:
    """Grid size ``N = max(8 ceil(sqrt(pd)), per_p * p d)``.

    Keeping ``h`` proportional to ``1/(pd)`` keeps ``B h^2``, the relative
    stencil error of the Landau levels, of order ``1/p``.
    """
    return max(8 * math.ceil(math.sqrt(p * d)), per_p * p * d, 8)


@dataclass(frozen=True)
class TorusSpec:
    """Flat torus with sides ``L1, L2``, degree ``d``, grid ``N x N`` and tensor power ``p``."""

    p: int
    d: int = 1
    L1: float = 1.0
    L2: float = 1.0
    N: int | None = None
    gauge: str = "landau"

    def __post_init__(self):
        if self.p < 0 or self.d < 1:
            raise ValueError("need p >= 0 and d >= 1")
        if self.L1 <= 0 or self.L2 <= 0:
            raise ValueError("side lengths must be positive")
        if self.gauge not in GAUGES:
            raise ValueError(f"unknown gauge {self.gauge!r}; choose from {GAUGES}")
        if self.N is None:
            object.__setattr__(self, "N", default_grid(self.p, self.d))
        if self.N < 8 * math.ceil(math.sqrt(self.p * self.d)):
            raise ValueError(f"grid N={self.N} does not resolve the magnetic length; "
                             f"need N >= {8 * math.ceil(math.sqrt(self.p * self.d))}")

    @property
    def flux(self) -> int:
        """Chern number ``p d`` of ``L^p``."""
        return self.p * self.d

    @property
    def area(self) -> float:
        return self.L1 * self.L2

    @property
    def field(self) -> float:
        """Magnetic field ``B = 2 pi p d / area``."""
        return 2 * math.pi * self.flux / self.area

    @property
    def mu0(self) -> float:
        """Per-power model eigenvalue ``a = 2 pi d / area`` (gap ``2 p mu0``)."""
        return 2 * math.pi * self.d / self.area

    @property
    def tau(self) -> float:
        """``tau`` per unit power; the renormalization subtracts ``p tau = B``."""
        return self.mu0

    @property
    def h(self) -> tuple[float, float]:
        return self.L1 / self.N, self.L2 / self.N

    @property
    def cell(self) -> float:
        h1, h2 = self.h
        return h1 * h2

    def grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates ``(x, y)`` of the grid, each of shape ``(N, N)``, index ``[i, j]``."""
        h1, h2 = self.h
        x = np.arange(self.N) * h1
        y = np.arange(self.N) * h2
        return np.meshgrid(x, y, indexing="ij")

    def index(self, i, j):
        return (np.asarray(i) % self.N) * self.N + (np.asarray(j) % self.N)

    def key(self) -> str:
        """Stable hash identifying the discretization (used for caching)."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# gauges: line integrals of A along links and transition phases


def _gauge_data(t: TorusSpec):
    """Link phases ``theta_x[i, j]`` (to ``i+1``) and ``theta_y[i, j]`` (to ``j+1``).

    Phases include the transition function when a link leaves the
    fundamental domain, so the stencil entry is ``exp(-i theta)``.
    """
    B = t.field
    h1, h2 = t.h
    x, y = t.grid()
    if t.gauge == "landau":
        # A = B x dy; psi(x + L1, y) = exp(i B L1 y) psi(x, y)
        tx = np.zeros_like(x)
        ty = B * x * h2
        wrap_x = -B * t.L1 * y  # transition applied to the far endpoint
        wrap_y = np.zeros_like(x)
    else:
        # A = (B/2)(x dy - y dx); transitions exp(i B L1 y / 2), exp(-i B L2 x / 2)
        tx = -0.5 * B * y * h1
        ty = 0.5 * B * x * h2
        wrap_x = -0.5 * B * t.L1 * y
        wrap_y = 0.5 * B * t.L2 * x
    last = t.N - 1
    tx = tx.copy()
    ty = ty.copy()
    tx[last, :] += wrap_x[last, :]
    ty[:, last] += wrap_y[:, last]
    return tx, ty


def assemble_torus(t: TorusSpec) -> sp.csr_matrix:
    """Sparse Hermitian matrix of ``Delta_p - p tau`` (5-point magnetic stencil).

    ``(H psi)(s) = sum_e (2 psi(s) - U_e psi(s+e) - conj(U_e) psi(s-e)) / h_e^2 - B psi(s)``.
    Only forward links are generated and the backward ones are their
    conjugate transpose, so the matrix is Hermitian bit for bit.
    """
    N = t.N
    h1, h2 = t.h
    tx, ty = _gauge_data(t)
    i, j = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    src = t.index(i, j).ravel()
    fx = t.index(i + 1, j).ravel()
    fy = t.index(i, j + 1).ravel()
    ux = (-np.exp(-1j * tx) / h1 ** 2).ravel()
    uy = (-np.exp(-1j * ty) / h2 ** 2).ravel()
    M = N * N
    fwd = sp.coo_matrix((np.concatenate([ux, uy]), (np.concatenate([src, src]), np.concatenate([fx, fy]))),
                        shape=(M, M)).tocsr()
    diag = sp.identity(M, dtype=complex, format="csr") * (2 / h1 ** 2 + 2 / h2 ** 2 - t.p * t.tau)
    H = diag + fwd + fwd.conj().T
    return H.tocsr()


def plaquette_flux(t: TorusSpec) -> float:
    """Total flux through the fundamental domain from the link phases.

    Each plaquette's circulation is reduced to ``(-pi, pi]``; the raw
    circulations cancel over the closed torus, and the transition phases on
    the boundary plaquettes carry the missing multiples of ``2 pi``.  The
    sum of the reduced angles is ``2 pi p d`` for a consistent gauge
    (valid while ``B h1 h2 < pi``, which the grid invariant guarantees).
    """
    tx, ty = _gauge_data(t)
    # circulation around plaquette (i, j): tx[i,j] + ty[i+1,j] - tx[i,j+1] - ty[i,j]
    circ = tx + np.roll(ty, -1, axis=0) - np.roll(tx, -1, axis=1) - ty
    return float(np.angle(np.exp(1j * circ)).sum())


# ---------------------------------------------------------------------------
# eigensolver


def low_spectrum(matrix, k: int, tol: float = 1e-9, seed: int = 0, sigma: float | None = None,
                 maxiter: int = 500, pad: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` smallest eigenpairs of a Hermitian matrix (ascending).

    Small matrices go to a dense solver.  Larger ones use block
    shift-invert subspace iteration around ``sigma`` (default: a Gershgorin
    lower bound) with Rayleigh-Ritz, which is robust for the exactly
    degenerate Landau clusters where single-vector Lanczos drops copies.
    The start block is seeded.  Raises :class:`ConvergenceError` when the
    relative residuals stay above ``tol`` after ``maxiter`` sweeps.
    """
    m = matrix.shape[0]
    if k >= m:
        raise ValueError("k must be smaller than the matrix size")
    if m <= 1600:
        dense = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix)
        w, v = np.linalg.eigh(dense)
        return w[:k], v[:, :k]
    A = sp.csc_matrix(matrix, dtype=complex)
    if sigma is None:
        absrow = np.asarray(abs(A).sum(axis=1)).ravel()
        dvals = A.diagonal().real
        sigma = float(np.min(dvals - (absrow - np.abs(dvals)))) - 1.0
    lu = spla.splu((A - sigma * sp.identity(m, dtype=A.dtype, format="csc")).tocsc())
    rng = np.random.default_rng(seed)
    block = min(m - 1, k + pad)
    X = rng.standard_normal((m, block)) + 1j * rng.standard_normal((m, block))
    X, _ = np.linalg.qr(X)
    scale = None
    res = np.full(k, np.inf)
    for _ in range(maxiter):
        Y = lu.solve(X)
        Y, _ = np.linalg.qr(Y)
        AY = A @ Y
        small = Y.conj().T @ AY
        w, c = np.linalg.eigh((small + small.conj().T) / 2)
        X = Y @ c
        AX = AY @ c
        if scale is None:
            scale = max(1.0, float(np.max(np.abs(w))))
        res = np.linalg.norm(AX[:, :k] - X[:, :k] * w[:k], axis=0) / scale
        if np.max(res) <= tol:
            return w[:k], X[:, :k]
    raise ConvergenceError(f"subspace iteration stalled (max residual {np.max(res):.2e})", residuals=res)


@dataclass
class SpectralResult:
    """Low spectrum of one torus problem with its bound-state cluster."""

    spec: TorusSpec
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # l2-normalized columns on the grid
    cluster: int  # number of bound states (leading eigenpairs)
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def p(self) -> int:
        return self.spec.p

    @property
    def d_p(self) -> int:
        return self.cluster

    @property
    def cluster_values(self) -> np.ndarray:
        return self.eigenvalues[: self.cluster]

    @property
    def next_value(self) -> float | None:
        if len(self.eigenvalues) > self.cluster:
            return float(self.eigenvalues[self.cluster])
        return None

    def sections(self) -> np.ndarray:
        """Cluster eigenvectors scaled to unit ``L^2`` norm, shape ``(N, N, d_p)``."""
        t = self.spec
        vecs = self.eigenvectors[:, : self.cluster] / math.sqrt(t.cell)
        return vecs.reshape(t.N, t.N, self.cluster)


def _cluster_size(values: np.ndarray, t: TorusSpec) -> int:
    """Count eigenvalues below ``p mu0``; refuse when some fall in ``(p mu0 / 2, 3 p mu0 / 2)``."""
    if t.p == 0:
        # only the constant function: the next level is at (2 pi / L)^2
        return 1
    bound = t.p * t.mu0
    near = (values > bound / 2) & (values < 1.5 * bound)
    if np.any(near):
        raise ClusterAmbiguous(f"eigenvalues {values[near]} within the ambiguity band around {bound}")
    return int(np.sum(values <= bound / 2))


def solve_torus(t: TorusSpec, extra: int = 4, tol: float = 1e-9, seed: int = 0,
                cache=None) -> SpectralResult:
    """Assemble, solve for ``p d + extra`` eigenpairs and identify the cluster.

    ``cache`` may be an :class:`~bergman_lab.speclab.io.EigenCache`.
    """
    expected = max(t.flux, 1)
    k = expected + extra
    if cache is not None:
        hit = cache.load(t, k)
        if hit is not None:
            w, v = hit
            return SpectralResult(t, w, v, _cluster_size(w, t))
    H = assemble_torus(t)
    # shift below the cluster, well inside the ambiguity band
    w, v = low_spectrum(H, k, tol=tol, seed=seed, sigma=-0.5 * max(t.p, 1) * t.mu0 - 1.0)
    res = np.linalg.norm(H @ v - v * w, axis=0)
    if cache is not None:
        cache.store(t, k, w, v)
    return SpectralResult(t, w, v, _cluster_size(w, t), res)


def gap_and_dimension(result: SpectralResult, t: TorusSpec | None = None) -> dict:
    """Cluster size, the spread of the cluster and the distance of the next level from ``2 p mu0``.

    ``C_est`` is the larger of ``max |lambda|`` over the cluster and
    ``2 p mu0 - lambda_next``; ``gap_ok`` states that the next level lies
    above ``p mu0`` (half way to its continuum value).
    """
    t = t or result.spec
    lam = result.cluster_values
    nxt = result.next_value
    spread = float(np.max(np.abs(lam))) if len(lam) else 0.0
    deficit = None if nxt is None else 2 * t.p * t.mu0 - nxt
    c_est = spread if deficit is None else max(spread, deficit)
    return {
        "p": t.p,
        "d_p": result.d_p,
        "riemann_roch": t.flux,
        "dimension_ok": result.d_p == t.flux if t.p else result.d_p == 1,
        "cluster_spread": spread,
        "next": nxt,
        "gap_deficit": deficit,
        "C_est": c_est,
        "gap_ok": nxt is not None and nxt >= t.p * t.mu0,
    }


def bergman_fields(result: SpectralResult, qs=(0, 1, 2)) -> dict[int, np.ndarray]:
    """``B_{q,p}(x) = sum_i lambda_i^q |S_i(x)|^2`` on the grid, one array per ``q``."""
    S = result.sections()
    dens = np.abs(S) ** 2
    lam = result.cluster_values
    return {q: np.tensordot(dens, lam ** q, axes=([2], [0])) for q in qs}


def kernel_column(result: SpectralResult, site: tuple[int, int], q: int = 0) -> np.ndarray:
    """``P_{q,p}(x, x0)`` for all grid points ``x`` and fixed ``x0 = site`` (grid gauge frame)."""
    S = result.sections()
    lam = result.cluster_values ** q
    i, j = site
    return np.tensordot(S, lam * S[i, j, :].conj(), axes=([2], [0]))
