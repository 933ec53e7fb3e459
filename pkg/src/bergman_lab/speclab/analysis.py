"""Expansion fits, density-of-states moments, Kodaira-map pullbacks and peak sections."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .torus import SpectralResult, TorusSpec, bergman_fields

__all__ = [
    "IllConditionedFit",
    "BaseLocusError",
    "FitResult",
    "fit_expansion",
    "fit_exponent",
    "dos_moments",
    "shifted_sections",
    "fs_pullback_lattice",
    "fs_pullback_kernel",
    "peak_section",
    "near_diagonal_check",
    "radial_gauge_kernel",
]


class IllConditionedFit(ValueError):
    """Too few or too clustered values of ``p`` for the requested order."""


class BaseLocusError(ValueError):
    """``B_{0,p}`` vanishes somewhere, so the Kodaira map is undefined."""


# ---------------------------------------------------------------------------
# fits


@dataclass
class FitResult:
    """Coefficients ``b_r`` (one array per ``r``, same shape as the fields) and diagnostics."""

    coefficients: list[np.ndarray]
    stderr: list[np.ndarray]
    residual: np.ndarray  # sup over p of |p^{-n} B - sum b_r p^{-r}| per point
    condition: float

    def sup(self, r: int) -> float:
        return float(np.max(np.abs(self.coefficients[r])))


def fit_expansion(ps: Sequence[float], fields: Sequence, k: int, n: int = 1,
                  max_condition: float = 1e12) -> FitResult:
    """Least-squares fit of ``p^{-n} B_p(x) = sum_{r<=k} b_r(x) p^{-r}`` at every point.

    Rows are weighted by ``p^{k+1}`` so that large ``p``, where the
    truncation error is smallest, dominates.  ``fields[i]`` is an array (or
    scalar) of ``B`` values for ``ps[i]``.
    """
    ps = np.asarray(ps, dtype=float)
    if len(ps) < k + 2:
        raise IllConditionedFit(f"need at least {k + 2} values of p for order {k}")
    Y = np.stack([np.asarray(f, dtype=float) / p ** n for f, p in zip(fields, ps)])
    shape = Y.shape[1:]
    Y = Y.reshape(len(ps), -1)
    V = np.stack([ps ** (-r) for r in range(k + 1)], axis=1)
    w = ps ** (k + 1)
    Vw = V * w[:, None]
    cond = float(np.linalg.cond(Vw))
    if not math.isfinite(cond) or cond > max_condition:
        raise IllConditionedFit(f"fit matrix condition number {cond:.2e}")
    coef, *_ = np.linalg.lstsq(Vw, Y * w[:, None], rcond=None)
    pred = V @ coef
    resid = np.abs(Y - pred)
    dof = max(len(ps) - (k + 1), 1)
    sigma2 = np.sum(((Y - pred) * w[:, None]) ** 2, axis=0) / dof
    cov = np.linalg.inv(Vw.T @ Vw)
    stderr = np.sqrt(np.outer(np.diag(cov), sigma2))
    return FitResult(
        coefficients=[coef[r].reshape(shape) for r in range(k + 1)],
        stderr=[stderr[r].reshape(shape) for r in range(k + 1)],
        residual=resid.max(axis=0).reshape(shape),
        condition=cond,
    )


def fit_exponent(ps: Sequence[float], errors: Sequence[float]) -> float:
    """Slope of ``log error`` against ``log p`` (least squares)."""
    x = np.log(np.asarray(ps, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


# ---------------------------------------------------------------------------
# density of states


def dos_moments(result: SpectralResult, q_max: int = 2, rho_moments: Sequence[float] | None = None) -> dict:
    """Moments ``(1/d_p) sum lambda^q`` and ``(1/d_p) int B_q dv`` for ``q <= q_max``.

    ``rho_moments[q]`` is the limiting value ``int rho^q / vol`` (zero for
    flat and Kahler geometries when ``q >= 1``).
    """
    t = result.spec
    d_p = result.d_p
    lam = result.cluster_values
    fields = bergman_fields(result, range(q_max + 1))
    rows = []
    for q in range(q_max + 1):
        spectral = float(np.sum(lam ** q)) / d_p
        integral = float(np.sum(fields[q]) * t.cell) / d_p
        scale = max(1.0, abs(spectral))
        limit = (1.0 if q == 0 else 0.0) if rho_moments is None else rho_moments[q]
        rows.append({"q": q, "spectral": spectral, "integral": integral,
                     "identity_residual": abs(spectral - integral) / scale,
                     "limit": limit, "distance_to_limit": abs(spectral - limit)})
    return {"p": t.p, "d_p": d_p, "moments": rows}


# ---------------------------------------------------------------------------
# sections in the covering space


def shifted_sections(result: SpectralResult, di: int, dj: int) -> np.ndarray:
    """Section values at grid points ``(i + di, j + dj)`` expressed in the frame at ``(i, j)``'s patch.

    Grid indices leaving the fundamental domain are brought back with the
    transition functions of the gauge, so finite differences across the
    boundary see a smooth section.
    """
    t = result.spec
    S = result.sections()
    N = t.N
    B = t.field
    i = np.arange(N)[:, None] + di
    j = np.arange(N)[None, :] + dj
    mi, ri = np.divmod(i, N)
    mj, rj = np.divmod(j, N)
    vals = S[ri, rj]  # (N, N, d)
    h1, h2 = t.h
    x = ri * h1
    y = rj * h2
    if t.gauge == "landau":
        # psi(x + m L1, y + n L2) = exp(i m B L1 y) psi(x, y)
        phase = mi * B * t.L1 * y
    else:
        # psi(x + m L1, y + n L2) = exp(i m B L1 (y + n L2) / 2) exp(-i n B L2 x / 2) psi(x, y)
        phase = mi * B * t.L1 * (y + mj * t.L2) / 2 - mj * B * t.L2 * x / 2
    return vals * np.exp(1j * phase)[..., None]


def _pullback_from_values(f0, fx, fy, fxy) -> np.ndarray:
    """``omega_12`` of ``Phi^* omega_FS`` from kernel derivatives on the diagonal.

    ``fx[a]`` is ``d_{x_a} f(x, y)`` and ``fy[b]`` is ``d_{y_b} f(x, y)`` at
    ``y = x``; ``fxy[a][b]`` is the mixed derivative.
    """
    first = (fxy[0][1] - fxy[1][0]) / f0
    second = (fx[0] * fy[1] - fx[1] * fy[0]) / f0 ** 2
    return (1j / (2 * math.pi)) * (first - second)


def _radial_phase(t: TorusSpec, u: float, v: float) -> np.ndarray:
    """``chi`` on the grid for the offset ``(u, v)`` from every base point.

    The grid-gauge potential minus the radial potential at ``x0`` is
    ``d chi``; multiplying by ``exp(-i chi)`` moves values into the frame
    parallel along rays from ``x0``.
    """
    B = t.field
    x0, y0 = t.grid()
    if t.gauge == "landau":
        return B * x0 * v + 0.5 * B * u * v
    return 0.5 * B * (x0 * v - y0 * u)


def fs_pullback_lattice(result: SpectralResult, step: int = 1) -> dict:
    """``(1/p) Phi_p^* omega_FS`` on the grid via central differences of ``f(x, y)``.

    Differences are taken in the parallel-transport frame at each grid
    point, where the connection vanishes at the base point.  ``step`` is
    the difference step in grid units.  Returns the field and
    ``sup |(1/p) Phi^* omega_FS - omega|`` with ``omega = (d / area) dx dy``.
    """
    t = result.spec
    h = t.h
    S0 = shifted_sections(result, 0, 0)
    f0 = np.sum(np.abs(S0) ** 2, axis=-1).real
    if np.min(f0) <= 0:
        raise BaseLocusError("B_{0,p} vanishes on the grid")

    def transported(di: int, dj: int) -> np.ndarray:
        phase = _radial_phase(t, di * h[0], dj * h[1])
        return shifted_sections(result, di, dj) * np.exp(-1j * phase)[..., None]

    dS = []
    for a, (di, dj) in enumerate([(step, 0), (0, step)]):
        dS.append((transported(di, dj) - transported(-di, -dj)) / (2 * step * h[a]))
    # d_{x_a} f(x, y)|_{y=x} = sum dS_a conj(S); d_{y_b} f = sum S conj(dS_b)
    fx = [np.sum(d * S0.conj(), axis=-1) for d in dS]
    fy = [np.sum(S0 * d.conj(), axis=-1) for d in dS]
    fxy = [[np.sum(dS[a] * dS[b].conj(), axis=-1) for b in range(2)] for a in range(2)]
    omega_fs = _pullback_from_values(f0, fx, fy, fxy)
    scaled = omega_fs.real / max(t.p, 1)
    target = t.d / t.area
    return {"p": t.p, "field": scaled, "imag_max": float(np.max(np.abs(omega_fs.imag))),
            "target": target, "sup_error": float(np.max(np.abs(scaled - target)))}


def fs_pullback_kernel(kernel: Callable, points: np.ndarray, delta: float, p: int,
                       omega: Callable) -> dict:
    """Pullback from a kernel function ``kernel(z, w)`` (complex coordinates) by central differences.

    ``omega(z)`` is the density of the reference form w.r.t. ``dx dy``.
    Returns the sup error of ``(1/p) Phi^* omega_FS - omega`` over ``points``.
    """
    z = np.asarray(points, dtype=complex)
    e = [delta, 1j * delta]
    f0 = kernel(z, z).real
    if np.min(f0) <= 0:
        raise BaseLocusError("B_{0,p} vanishes at a sample point")
    fx = [(kernel(z + e[a], z) - kernel(z - e[a], z)) / (2 * delta) for a in range(2)]
    fy = [(kernel(z, z + e[b]) - kernel(z, z - e[b])) / (2 * delta) for b in range(2)]
    fxy = [[(kernel(z + e[a], z + e[b]) - kernel(z + e[a], z - e[b])
             - kernel(z - e[a], z + e[b]) + kernel(z - e[a], z - e[b])) / (4 * delta ** 2)
            for b in range(2)] for a in range(2)]
    omega_fs = _pullback_from_values(f0, fx, fy, fxy)
    scaled = omega_fs.real / max(p, 1)
    err = np.abs(scaled - omega(z))
    return {"p": p, "field": scaled, "imag_max": float(np.max(np.abs(omega_fs.imag))),
            "sup_error": float(np.max(err))}


# ---------------------------------------------------------------------------
# peak sections and near-diagonal comparison


def _torus_distance(t: TorusSpec, i0: int, j0: int) -> np.ndarray:
    X, Y = t.grid()
    dx = X - X[i0, j0]
    dy = Y - Y[i0, j0]
    dx = dx - t.L1 * np.round(dx / t.L1)
    dy = dy - t.L2 * np.round(dy / t.L2)
    return np.hypot(dx, dy)


def peak_section(result: SpectralResult, site: tuple[int, int], radius: float | None = None) -> dict:
    """Unit section ``P_{0,p}(., x0) / sqrt(B_{0,p}(x0))`` and its mass near ``x0``.

    ``radius`` defaults to ``p^{-1/4}``.
    """
    t = result.spec
    S = result.sections()
    i0, j0 = site
    col = np.tensordot(S, S[i0, j0, :].conj(), axes=([2], [0]))
    b0 = float(np.sum(np.abs(S[i0, j0, :]) ** 2))
    if b0 <= 0:
        raise BaseLocusError("B_{0,p}(x0) = 0")
    section = col / math.sqrt(b0)
    norm = float(np.sum(np.abs(section) ** 2) * t.cell)
    r = radius if radius is not None else t.p ** -0.25
    inside = _torus_distance(t, i0, j0) <= r
    mass = float(np.sum(np.abs(section[inside]) ** 2) * t.cell)
    return {"p": t.p, "section": section, "norm": norm, "radius": r, "mass": mass,
            "deficit": 1.0 - mass, "peak_sq": float(np.abs(section[i0, j0]) ** 2), "B0": b0}


def radial_gauge_kernel(result: SpectralResult, site: tuple[int, int], radius: float, stride: int = 1):
    """``P_{0,p}(Z, Z')`` for grid offsets ``Z, Z'`` within ``radius`` of ``x0``.

    The kernel is moved from the grid gauge into the radial gauge at ``x0``
    (parallel frame along rays), where the model kernel applies.  Only every
    ``stride``-th grid offset is kept.  Returns ``(offsets, matrix)`` with
    ``offsets`` of shape ``(m, 2)``.
    """
    t = result.spec
    i0, j0 = site
    h1, h2 = t.h
    reach_i = int(math.ceil(radius / h1)) // stride
    reach_j = int(math.ceil(radius / h2)) // stride
    di, dj = np.meshgrid(stride * np.arange(-reach_i, reach_i + 1), stride * np.arange(-reach_j, reach_j + 1),
                         indexing="ij")
    off = np.stack([di.ravel() * h1, dj.ravel() * h2], axis=1)
    keep = np.hypot(off[:, 0], off[:, 1]) <= radius + 1e-12
    di, dj, off = di.ravel()[keep], dj.ravel()[keep], off[keep]
    S = result.sections()
    vals = []
    for a, b in zip(di, dj):
        vals.append(shifted_sections_at(result, S, i0 + a, j0 + b))
    V = np.array(vals)
    P = V @ V.conj().T
    B = t.field
    x0, y0 = i0 * h1, j0 * h2
    u, v = off[:, 0], off[:, 1]
    if t.gauge == "landau":
        # A_landau - A_radial = d(B x0 (y - y0) + B u v / 2)
        chi = B * x0 * v + 0.5 * B * u * v
    else:
        # A_sym - A_radial = d((B/2)(x0 (y - y0) - y0 (x - x0)))
        chi = 0.5 * B * (x0 * v - y0 * u)
    G = np.exp(-1j * chi)
    return off, G[:, None] * P * G.conj()[None, :]


def shifted_sections_at(result: SpectralResult, S: np.ndarray, i: int, j: int) -> np.ndarray:
    """Section values at covering-grid index ``(i, j)`` (transition phases applied)."""
    t = result.spec
    N = t.N
    mi, ri = divmod(i, N)
    mj, rj = divmod(j, N)
    h1, h2 = t.h
    x, y = ri * h1, rj * h2
    B = t.field
    if t.gauge == "landau":
        phase = mi * B * t.L1 * y
    else:
        phase = mi * B * t.L1 * (y + mj * t.L2) / 2 - mj * B * t.L2 * x / 2
    return S[ri, rj, :] * np.exp(1j * phase)


def near_diagonal_check(result: SpectralResult, prediction: Callable, sigma: float = 2.0,
                        site: tuple[int, int] | None = None, max_points: int = 1200) -> dict:
    """``sup |p^{-1} P_{0,p}(Z, Z') - prediction(Z, Z', p)|`` over ``|Z|, |Z'| <= sigma / sqrt(p)``.

    ``prediction(Z, Zp, p)`` takes arrays of real 2-vectors (one row per
    pair).  The grid ball is thinned to a sub-lattice of at most about
    ``max_points`` offsets so the pair count stays bounded.
    """
    t = result.spec
    site = site or (t.N // 2, t.N // 2)
    radius = sigma / math.sqrt(t.p)
    count = math.pi * radius ** 2 / t.cell
    stride = max(1, math.ceil(math.sqrt(count / max_points)))
    off, P = radial_gauge_kernel(result, site, radius, stride)
    m = len(off)
    Zi = np.repeat(off, m, axis=0)
    Zj = np.tile(off, (m, 1))
    pred = np.asarray(prediction(Zi, Zj, t.p)).reshape(m, m)
    err = np.abs(P / t.p - pred)
    c = int(np.argmin(np.hypot(off[:, 0], off[:, 1])))
    return {"p": t.p, "points": m, "stride": stride, "radius": radius, "sup_error": float(np.max(err)),
            "diagonal_error": float(err[c, c])}
