"""``bergman-lab <verb> --config <file> [--out <dir>] [--threads k] [--seed s]``.

Verbs: ``expand``, ``spectrum``, ``bergman``, ``dos``, ``embed``, ``verify``.
The config is a JSON object; every verb has usable defaults, so
``--config`` may be omitted.  Exit status: 0 success, 1 a verification
check failed, 2 invalid input, 3 numerical non-convergence.  Errors are
reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata, resources
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .expansion import MissingOperator, expand, verify_identities
from .jets import InvalidJets, PointJets, jets_from_json, random_jets
from .scalar import Mat, to_complex
from .speclab import (
    BaseLocusError,
    ClusterAmbiguous,
    ConvergenceError,
    CP1Spec,
    IllConditionedFit,
    TorusSpec,
    bergman_fields,
    cache_from_env,
    cp1_exact,
    default_grid,
    dos_moments,
    fit_expansion,
    fit_exponent,
    fs_pullback_kernel,
    fs_pullback_lattice,
    gap_and_dimension,
    peak_section,
    solve_torus,
    write_csv,
)

VERBS = ("expand", "spectrum", "bergman", "dos", "embed", "verify")
DEFAULT_PS = [8, 12, 16, 24, 32, 48]

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_NONCONVERGENCE = 0, 1, 2, 3


class ConfigError(ValueError):
    """The config file is malformed or lacks a required field."""


@dataclass
class RunConfig:
    verb: str
    raw: dict
    base_dir: Path
    out: Path
    seed: int = 0
    threads: int = 1
    inputs: dict = field(default_factory=dict)  # name -> sha256 of every file read

    def get(self, key: str, default: Any = None) -> Any:
        return self.raw.get(key, default)

    @property
    def mode(self) -> str:
        mode = self.get("mode", "exact")
        if mode not in ("exact", "float"):
            raise ConfigError(f"mode must be 'exact' or 'float', got {mode!r}")
        return mode

    def p_values(self) -> list[int]:
        spec = self.get("p", DEFAULT_PS)
        if isinstance(spec, int):
            values = [spec]
        elif isinstance(spec, dict):
            try:
                values = list(range(spec["start"], spec["stop"] + 1, spec.get("step", 1)))
            except KeyError as exc:
                raise ConfigError(f"p range needs {exc.args[0]!r}") from None
        else:
            values = list(spec)
        if not values or any(not isinstance(v, int) or v < 0 for v in values):
            raise ConfigError("p must be a non-negative integer, a list of them or a {start, stop, step} range")
        return sorted(set(values))

    def torus(self, p: int) -> TorusSpec:
        tc = dict(self.get("torus", {}))
        per_p = tc.pop("per_p", 4)
        unknown = set(tc) - {"d", "L1", "L2", "N", "gauge"}
        if unknown:
            raise ConfigError(f"unknown torus fields {sorted(unknown)}")
        d = tc.get("d", 1)
        if tc.get("N") is None:
            tc["N"] = default_grid(p, d, per_p)
        return TorusSpec(p=p, **tc)


# ---------------------------------------------------------------------------
# input loading


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _load_jets(cfg: RunConfig, ref: str | None = None) -> PointJets:
    ref = ref or cfg.get("jets")
    if ref is None:
        raise ConfigError("config needs a 'jets' entry (path or 'fixture:<name>')")
    if ref.startswith("fixture:"):
        name = ref.split(":", 1)[1]
        res = resources.files("bergman_lab") / "fixtures" / f"{name}.json"
        if not res.is_file():
            raise ConfigError(f"no bundled fixture named {name!r}")
        data = res.read_bytes()
    else:
        path = (cfg.base_dir / ref).resolve()
        if not path.is_file():
            raise ConfigError(f"jets file {str(path)!r} not found")
        data = path.read_bytes()
    cfg.inputs[ref] = _sha256(data)
    try:
        jets = jets_from_json(json.loads(data))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse jets {ref!r}: {exc}") from None
    return jets.to_mode(cfg.mode) if cfg.mode != jets.arith.mode else jets


def _map_p(cfg: RunConfig, fn: Callable[[int], Any]) -> dict[int, Any]:
    """Run ``fn`` for every ``p`` (concurrently with ``--threads``), keyed by ``p``."""
    ps = cfg.p_values()
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(fn, ps))
    else:
        results = [fn(p) for p in ps]
    return dict(zip(ps, results))


def _solve(cfg: RunConfig, p: int):
    return solve_torus(cfg.torus(p), seed=cfg.seed, cache=cache_from_env())


def _geometry(cfg: RunConfig) -> str:
    geo = cfg.get("geometry", "torus")
    if geo not in ("torus", "cp1"):
        raise ConfigError(f"geometry must be 'torus' or 'cp1', got {geo!r}")
    return geo


def _dump_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x).__name__)


# ---------------------------------------------------------------------------
# verbs; each returns (summary dict, list of written files, exit status)


def _entries(value) -> list[tuple[int, int, Any]]:
    if isinstance(value, Mat):
        return [(i, j, x) for i, row in enumerate(value.rows) for j, x in enumerate(row)]
    return [(0, 0, value)]


def run_expand(cfg: RunConfig):
    jets = _load_jets(cfg, cfg.get("jets", "fixture:kahler_random"))
    report = expand(jets, q_max=cfg.get("q_max", 1), r_max=cfg.get("r_max", 1),
                    series_order=cfg.get("series_order", 2))
    rows = []
    coeffs = []
    for (q, r), value in sorted(report.b.items()):
        for i, j, x in _entries(value):
            c = to_complex(x)
            rows.append((q, r, i, j, c.real, c.imag, str(x)))
            coeffs.append({"q": q, "r": r, "row": i, "col": j, "real": c.real, "imag": c.imag, "exact": str(x)})
    files = [write_csv(cfg.out / "expand.csv", ["q", "r", "row", "col", "real", "imag", "exact"], rows)]
    summary = {"n": jets.n, "rank": jets.rank, "kahler": jets.kahler, "mode": jets.arith.mode,
               "coefficients": coeffs, "checks": report.checks, "diagnostics": report.diagnostics}
    _dump_json(cfg.out / "expand.json", summary)
    files.append(cfg.out / "expand.json")
    ok = all(c.get("agree", True) for c in report.checks.values())
    return summary, files, EXIT_OK if ok else EXIT_CHECK_FAILED


def run_spectrum(cfg: RunConfig):
    results = _map_p(cfg, lambda p: _solve(cfg, p))
    rows = [(p, i, lam) for p, res in results.items() for i, lam in enumerate(res.eigenvalues)]
    files = [write_csv(cfg.out / "spectrum.csv", ["p", "index", "eigenvalue"], rows)]
    reports = [gap_and_dimension(res) for res in results.values()]
    summary = {"reports": reports}
    _dump_json(cfg.out / "spectrum.json", summary)
    files.append(cfg.out / "spectrum.json")
    return summary, files, EXIT_OK


def _cp1_samples(count: int) -> np.ndarray:
    """Deterministic chart points on a polar grid inside ``|z| <= 2``."""
    radii = np.linspace(0.0, 2.0, count)
    angles = np.linspace(0.0, 2 * math.pi, count, endpoint=False)
    return (radii[:, None] * np.exp(1j * angles)[None, :]).ravel()


def run_bergman(cfg: RunConfig):
    k = cfg.get("fit_order", 1)
    if _geometry(cfg) == "cp1":
        z = _cp1_samples(cfg.get("samples", 8))
        fields = {p: cp1_exact(CP1Spec(p)).bergman_diagonal(z) for p in cfg.p_values()}
        coords = [(float(w.real), float(w.imag)) for w in z]
        rows = [(p, x, y, b, 0.0, 0.0) for p, f in fields.items() for (x, y), b in zip(coords, f)]
    else:
        results = _map_p(cfg, lambda p: _solve(cfg, p))
        # grids differ with p; fit on the sub-grid common to all of them
        common = math.gcd(*(res.spec.N for res in results.values()))
        fields = {}
        rows = []
        for p, res in results.items():
            B = bergman_fields(res, (0, 1, 2))
            X, Y = res.spec.grid()
            stride = res.spec.N // common
            fields[p] = B[0][::stride, ::stride]
            rows.extend(zip([p] * X.size, X.ravel(), Y.ravel(), B[0].ravel(), B[1].ravel(), B[2].ravel()))
    files = [write_csv(cfg.out / "bergman.csv", ["p", "x1", "x2", "B0", "B1", "B2"], rows)]
    ps = list(fields)
    fit = fit_expansion(ps, [fields[p] for p in ps], k)
    fit_rows = []
    for r in range(k + 1):
        fit_rows.append((f"b_0_{r}", float(np.mean(fit.coefficients[r])), float(np.max(fit.stderr[r]))))
        fit_rows.append((f"sup_abs_b_0_{r}", fit.sup(r), float(np.max(fit.stderr[r]))))
    files.append(write_csv(cfg.out / "fit.csv", ["coefficient", "value", "stderr"], fit_rows))
    sup_dev = {p: float(np.max(np.abs(fields[p] / p - 1))) if p else None for p in ps}
    summary = {"fit": [dict(zip(("coefficient", "value", "stderr"), r)) for r in fit_rows],
               "condition": fit.condition, "sup_deviation": sup_dev}
    _dump_json(cfg.out / "bergman.json", summary)
    files.append(cfg.out / "bergman.json")
    return summary, files, EXIT_OK


def run_dos(cfg: RunConfig):
    q_max = cfg.get("q_max", 2)
    results = _map_p(cfg, lambda p: dos_moments(_solve(cfg, p), q_max))
    rows = [(p, m["q"], m["spectral"], m["integral"], m["identity_residual"])
            for p, rep in results.items() for m in rep["moments"]]
    files = [write_csv(cfg.out / "dos.csv", ["p", "q", "spectral_moment", "integral_moment", "identity_residual"], rows)]
    ps = list(results)
    first = [abs(results[p]["moments"][1]["spectral"]) for p in ps] if q_max >= 1 else []
    summary = {"max_identity_residual": max(r[4] for r in rows),
               "first_moment": dict(zip(ps, first)),
               "first_moment_exponent": fit_exponent(ps, first) if len(ps) >= 2 and all(first) else None}
    _dump_json(cfg.out / "dos.json", summary)
    files.append(cfg.out / "dos.json")
    return summary, files, EXIT_OK


def run_embed(cfg: RunConfig):
    geo = _geometry(cfg)
    ps = cfg.p_values()
    errors, deficits = {}, {}
    if geo == "cp1":
        z = _cp1_samples(cfg.get("samples", 8))
        for p in ps:
            oracle = cp1_exact(CP1Spec(p))
            errors[p] = fs_pullback_kernel(oracle.kernel, z, 1 / (4 * p), p, oracle.omega)["sup_error"]
            deficits[p] = oracle.peak_mass_deficit(p ** -0.25)
    else:
        def one(p):
            res = _solve(cfg, p)
            site = (res.spec.N // 2, res.spec.N // 2)
            return fs_pullback_lattice(res)["sup_error"], peak_section(res, site)["deficit"]

        for p, (err, deficit) in _map_p(cfg, one).items():
            errors[p], deficits[p] = err, deficit
    files = [write_csv(cfg.out / "embed.csv", ["p", "sup_error"], sorted(errors.items()))]
    summary = {"geometry": geo, "sup_error": errors, "peak_deficit": deficits,
               "exponent": fit_exponent(ps, [errors[p] for p in ps]) if len(ps) >= 2 else None}
    _dump_json(cfg.out / "embed.json", summary)
    files.append(cfg.out / "embed.json")
    return summary, files, EXIT_OK


def run_verify(cfg: RunConfig):
    suites: dict[str, dict[str, bool]] = {}
    refs = cfg.get("jets", "fixture:flat_jets")
    for ref in [refs] if isinstance(refs, str) else refs:
        suites[ref] = verify_identities(_load_jets(cfg, ref), q_max=cfg.get("q_max", 2))
    rand = cfg.get("random")
    if rand:
        for i in range(rand.get("count", 1)):
            seed = cfg.seed + i
            jets = random_jets(rand.get("n", 1), rank=rand.get("rank", 1), seed=seed,
                               kahler=rand.get("kahler", False), mode=cfg.mode)
            suites[f"random:{seed}"] = verify_identities(jets, q_max=cfg.get("q_max", 2))
    rows = [(suite, name, ok) for suite, checks in suites.items() for name, ok in checks.items()]
    files = [write_csv(cfg.out / "verify.csv", ["suite", "check", "passed"], rows)]
    passed = all(ok for _, _, ok in rows)
    summary = {"passed": passed, "suites": suites}
    _dump_json(cfg.out / "verify.json", summary)
    files.append(cfg.out / "verify.json")
    return summary, files, EXIT_OK if passed else EXIT_CHECK_FAILED


RUNNERS = {"expand": run_expand, "spectrum": run_spectrum, "bergman": run_bergman,
           "dos": run_dos, "embed": run_embed, "verify": run_verify}


# ---------------------------------------------------------------------------
# entry point


def _versions() -> dict[str, str]:
    out = {"bergman_lab": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "gmpy2"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def _write_manifest(cfg: RunConfig, files: list[Path], timings: dict, status: int) -> Path:
    canonical = json.dumps(cfg.raw, sort_keys=True).encode()
    digest = hashlib.sha256(canonical)
    for name in sorted(cfg.inputs):
        digest.update(name.encode() + cfg.inputs[name].encode())
    manifest = {
        "verb": cfg.verb,
        "config": cfg.raw,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "inputs_sha256": digest.hexdigest(),
        "input_files": cfg.inputs,
        "versions": _versions(),
        "timings_s": timings,
        "outputs": sorted(str(Path(f).name) for f in files),
        "exit_status": status,
    }
    path = cfg.out / "manifest.json"
    _dump_json(path, manifest)
    return path


def _error(kind: str, exc: BaseException, **extra) -> None:
    doc = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    doc.update(extra)
    print(json.dumps(doc, default=_json_default), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bergman-lab", description=__doc__.splitlines()[0])
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", type=Path, help="JSON config file (defaults per verb when omitted)")
    ap.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for independent p values")
    ap.add_argument("--seed", type=int, default=0, help="seed for random jets and solver start vectors")
    return ap


def run(cfg: RunConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        summary, files, status = RUNNERS[cfg.verb](cfg)
    except (ConfigError, InvalidJets, IllConditionedFit, BaseLocusError, MissingOperator) as exc:
        extra = {"problems": exc.problems} if isinstance(exc, InvalidJets) else {}
        _error("validation", exc, **extra)
        return EXIT_INVALID
    except ValueError as exc:
        _error("validation", exc)
        return EXIT_INVALID
    except ConvergenceError as exc:
        residuals = None if exc.residuals is None else np.asarray(exc.residuals).tolist()
        _error("non_convergence", exc, residuals=residuals)
        return EXIT_NONCONVERGENCE
    except ClusterAmbiguous as exc:
        _error("cluster_ambiguous", exc)
        return EXIT_NONCONVERGENCE
    timings = {"total": time.perf_counter() - start}
    _write_manifest(cfg, files, timings, status)
    if status == EXIT_CHECK_FAILED:
        print(json.dumps({"error": "check_failed", "summary": summary}, default=_json_default), file=sys.stderr)
    return status


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    raw: dict = {}
    base = Path.cwd()
    inputs = {}
    if args.config is not None:
        try:
            data = args.config.read_bytes()
            raw = json.loads(data)
        except (OSError, json.JSONDecodeError) as exc:
            _error("validation", exc)
            return EXIT_INVALID
        if not isinstance(raw, dict):
            _error("validation", ConfigError("config must be a JSON object"))
            return EXIT_INVALID
        base = args.config.resolve().parent
        inputs[str(args.config)] = _sha256(data)
    if args.threads < 1:
        _error("validation", ConfigError("--threads must be positive"))
        return EXIT_INVALID
    cfg = RunConfig(verb=args.verb, raw=raw, base_dir=base, out=args.out, seed=args.seed,
                    threads=args.threads, inputs=inputs)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
