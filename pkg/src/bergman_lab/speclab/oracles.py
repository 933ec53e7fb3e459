"""Closed-form references: the round sphere and theta functions on a flat torus."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .torus import TorusSpec

__all__ = ["CP1Spec", "CP1Oracle", "cp1_exact", "ThetaOracle", "theta_oracle", "TruncationError"]


class TruncationError(ValueError):
    """The theta series cannot be truncated within the requested tolerance."""


# ---------------------------------------------------------------------------
# CP^1 with the Fubini-Study form of total area 1


@dataclass(frozen=True)
class CP1Spec:
    """``O(p)`` over ``CP^1``; ``omega = dx dy / (pi (1 + |z|^2)^2)`` has total area 1."""

    p: int

    def __post_init__(self):
        if self.p < 0:
            raise ValueError("p must be non-negative")


class CP1Oracle:
    """Exact Bergman data of ``O(p)`` from the monomial basis ``z^k``.

    Sections are written in the unit frame of ``O(p)`` at ``z``, i.e. a
    section ``s`` is represented by ``s(z) / (1 + |z|^2)^(p/2)``.
    """

    volume = 1.0
    scalar_curvature = 8 * math.pi  # Gauss curvature 4 pi on an area-1 round sphere

    def __init__(self, spec: CP1Spec):
        self.spec = spec
        self.p = spec.p

    @property
    def d_p(self) -> int:
        return self.p + 1

    def gram(self) -> list[Fraction]:
        """``||z^k||^2 = k! (p-k)! / (p+1)!`` (diagonal; distinct monomials are orthogonal)."""
        p = self.p
        return [Fraction(math.factorial(k) * math.factorial(p - k), math.factorial(p + 1)) for k in range(p + 1)]

    def sections(self, z) -> np.ndarray:
        """Orthonormal sections in the unit frame; shape ``z.shape + (p+1,)``."""
        z = np.asarray(z, dtype=complex)
        p = self.p
        k = np.arange(p + 1)
        log_norm = 0.5 * (math.lgamma(p + 2) - np.array([math.lgamma(j + 1) + math.lgamma(p - j + 1) for j in k]))
        frame = (1 + np.abs(z) ** 2) ** (-p / 2)
        powers = z[..., None] ** k
        return powers * np.exp(log_norm) * frame[..., None]

    def bergman_diagonal(self, z) -> np.ndarray:
        """``B_{0,p}(z) = sum_k |s_k(z)|^2`` evaluated from the basis."""
        s = self.sections(z)
        return np.sum(np.abs(s) ** 2, axis=-1)

    def kernel(self, z, w) -> np.ndarray:
        """``P_{0,p}(z, w) = (p+1) (1 + z conj(w))^p / ((1+|z|^2)(1+|w|^2))^(p/2)`` (unit frames)."""
        z = np.asarray(z, dtype=complex)
        w = np.asarray(w, dtype=complex)
        p = self.p
        return (p + 1) * (1 + z * np.conj(w)) ** p / ((1 + np.abs(z) ** 2) * (1 + np.abs(w) ** 2)) ** (p / 2)

    def holomorphic_kernel(self, z, w) -> np.ndarray:
        """The same kernel in the holomorphic frame: ``(p+1)(1 + z conj(w))^p``."""
        z = np.asarray(z, dtype=complex)
        w = np.asarray(w, dtype=complex)
        return (self.p + 1) * (1 + z * np.conj(w)) ** self.p

    @staticmethod
    def omega(z) -> np.ndarray:
        """Density of ``omega`` with respect to ``dx dy``."""
        return 1.0 / (math.pi * (1 + np.abs(np.asarray(z)) ** 2) ** 2)

    @staticmethod
    def geodesic_radius_to_chart(r: float) -> float:
        """``|z|`` at geodesic distance ``r`` from ``z = 0`` (sphere radius ``1/sqrt(4 pi)``)."""
        R = 1 / math.sqrt(4 * math.pi)
        if r >= math.pi * R:
            return math.inf
        return math.tan(r / (2 * R))

    def peak_mass_deficit(self, r: float) -> float:
        """``1 - mass`` of the peak section at ``0`` outside the geodesic ball of radius ``r``."""
        rho = self.geodesic_radius_to_chart(r)
        if math.isinf(rho):
            return 0.0
        return (1 + rho ** 2) ** (-(self.p + 1))


def cp1_exact(spec: CP1Spec) -> CP1Oracle:
    """Exact Bergman data of ``O(p)`` on the round sphere of area 1."""
    return CP1Oracle(spec)


# ---------------------------------------------------------------------------
# theta functions on the flat torus (Landau gauge)


class ThetaOracle:
    """Level-``pd`` theta functions in the Landau gauge ``A = B x dy``.

    ``psi_j(x, y) = sum_s exp(-B (x - x_j - s L1)^2 / 2) exp(2 pi i (j + s pd) y / L2)``
    with ``x_j = 2 pi j / (B L2)``, ``j = 0..pd-1``.  These satisfy
    ``psi(x + L1, y) = exp(i B L1 y) psi(x, y)`` and are annihilated by
    ``nabla_x + i nabla_y``, so they span the lowest Landau level.
    """

    def __init__(self, t: TorusSpec, tol: float = 1e-14, quad: int | None = None):
        if t.p == 0:
            raise ValueError("theta oracle needs p >= 1")
        self.spec = t
        self.tol = tol
        B = t.field
        self.B = B
        self.m = t.flux
        self.centers = 2 * math.pi * np.arange(self.m) / (B * t.L2)
        reach = math.sqrt(2 * math.log(1 / tol) / B)
        self.M = 1 + math.ceil(reach / t.L1)
        self.tail_bound = math.exp(-B * ((self.M - 1) * t.L1) ** 2 / 2) if self.M > 1 else 1.0
        if self.tail_bound > tol * 10:
            raise TruncationError(f"tail bound {self.tail_bound:.2e} exceeds {tol:.1e}")
        self.quad = quad or max(64, 16 * math.ceil(math.sqrt(self.m)) * 4)
        self.gram = self._numeric_gram()
        self.gram_exact = np.eye(self.m) * t.L2 * math.sqrt(math.pi / B)
        evals = np.linalg.eigvalsh(self.gram)
        if evals[0] <= 0:
            raise ValueError("theta Gram matrix is not positive definite")
        self._chol = np.linalg.cholesky(self.gram)

    def raw(self, x, y) -> np.ndarray:
        """Unnormalized ``psi_j(x, y)``; shape ``x.shape + (pd,)``."""
        t = self.spec
        x = np.asarray(x, dtype=float)[..., None]
        y = np.asarray(y, dtype=float)[..., None]
        out = np.zeros(np.broadcast(x, y).shape[:-1] + (self.m,), dtype=complex)
        j = np.arange(self.m)
        for s in range(-self.M, self.M + 1):
            shift = x - self.centers - s * t.L1
            out += np.exp(-0.5 * self.B * shift ** 2) * np.exp(2j * math.pi * (j + s * self.m) * y / t.L2)
        return out

    def _numeric_gram(self) -> np.ndarray:
        t = self.spec
        Q = self.quad
        x = np.arange(Q) * t.L1 / Q
        y = np.arange(Q) * t.L2 / Q
        X, Y = np.meshgrid(x, y, indexing="ij")
        vals = self.raw(X, Y).reshape(Q * Q, self.m)
        # gram[j, k] = <psi_j, psi_k>, conjugate-linear in the first slot
        return (vals.conj().T @ vals) * (t.L1 * t.L2 / Q ** 2)

    def sections(self, x, y) -> np.ndarray:
        """Orthonormal basis values (Gram-orthonormalized theta functions)."""
        raw = self.raw(x, y)
        # gram = L L^H; phi = psi L^{-H} has identity Gram matrix
        flat = raw.reshape(-1, self.m)
        phi = np.linalg.solve(self._chol.conj(), flat.T).T
        return phi.reshape(raw.shape)

    def bergman_diagonal(self, x, y) -> np.ndarray:
        return np.sum(np.abs(self.sections(x, y)) ** 2, axis=-1)

    def kernel(self, x, y, xp, yp) -> np.ndarray:
        """``P_{0,p}((x, y), (x', y'))`` in the Landau gauge."""
        a = self.sections(x, y)
        b = self.sections(xp, yp)
        return np.sum(a * b.conj(), axis=-1)


def theta_oracle(t: TorusSpec, tol: float = 1e-14) -> ThetaOracle:
    """Holomorphic-section basis of ``L^p`` on the flat torus ``t`` (Landau gauge)."""
    if t.gauge != "landau":
        t = TorusSpec(p=t.p, d=t.d, L1=t.L1, L2=t.L2, N=t.N, gauge="landau")
    return ThetaOracle(t, tol=tol)
