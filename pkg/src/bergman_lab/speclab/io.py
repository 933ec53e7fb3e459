"""CSV writers and the on-disk eigenvector cache."""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = ["fmt", "write_csv", "EigenCache", "cache_from_env", "CACHE_ENV"]

CACHE_ENV = "BERGMAN_LAB_CACHE"


def fmt(x) -> str:
    """Deterministic text for a number: 17 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (complex, np.complexfloating)):
        return f"{format(float(x.real), '.17g')}{format(float(x.imag), '+.17g')}j"
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Write a CSV file with a header row and fixed float formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


class EigenCache:
    """Eigenpairs stored as ``.npz`` files keyed by the discretization hash and ``k``."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, spec, k: int) -> Path:
        return self.root / f"torus-{spec.key()}-p{spec.p}-k{k}.npz"

    def load(self, spec, k: int):
        path = self._path(spec, k)
        if not path.exists():
            return None
        with np.load(path) as data:
            return data["w"], data["v"]

    def store(self, spec, k: int, w: np.ndarray, v: np.ndarray) -> None:
        path = self._path(spec, k)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, w=w, v=v)
        os.replace(tmp, path)


def cache_from_env() -> EigenCache | None:
    """The cache named by ``BERGMAN_LAB_CACHE``, or ``None`` when unset."""
    root = os.environ.get(CACHE_ENV)
    return EigenCache(root) if root else None
