"""Problem generators and experiment orchestration.

Artifacts are deterministic: CSV files start with a ``#`` comment line
carrying the config hash and seed, JSON reports are written with sorted
keys, and wall-clock timings go to a separate ``timings.json`` so that two
runs of the same config produce byte-identical CSV/JSON results.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .bt import UnstableSystemError, bt_reduce, gramians
from .krylov import ArnoldiProcess
from .lyapunov import METHODS, SolveReport, solve_stein
from .mor import (
    MLTISystem,
    ReducedSystem,
    frequency_response,
    project,
    reduce_classic_global,
    reduce_extended_global,
)
from .tensor import Tensor4, spectral_radius, write_coo, write_dense

__all__ = [
    "PROBLEMS",
    "PIPELINES",
    "SPDIAGS_DEFAULT",
    "ExperimentConfig",
    "ConfigError",
    "gen_spdiags",
    "gen_heat2d",
    "gen_randsparse",
    "gen_identity_perturbed",
    "gen_rhs",
    "build_system",
    "reduce_system",
    "config_hash",
    "run_experiment",
]

log = logging.getLogger(__name__)

PROBLEMS = ("spdiags", "heat2d", "randsparse", "identity-perturbed")
PIPELINES = ("gen", "reduce", "lyap", "bt", "freqresp", "bench")
# main diagonal and two superdiagonals before rescaling
SPDIAGS_DEFAULT = (1.0, -0.025, 0.0125)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# generators ---------------------------------------------------------------


def gen_spdiags(n: int, seed: int | None = None, spectral_target: float = 0.9,
                diagonals=SPDIAGS_DEFAULT) -> Tensor4:
    """Upper triangular banded operator of dims ``(n, n, n, n)``.

    The unfolding has constant main diagonal and superdiagonals taken from
    ``diagonals`` and is scaled so that its spectral radius (the magnitude
    of the main diagonal) equals ``spectral_target``.  ``seed`` is accepted
    for a uniform generator signature; the result is deterministic.
    """
    if n < 2:
        raise ConfigError("spdiags needs n >= 2")
    d = [float(x) for x in diagonals]
    if not d or d[0] == 0.0:
        raise ConfigError("main diagonal must be nonzero")
    N = n * n
    scale = spectral_target / abs(d[0])
    offs = list(range(len(d)))
    M = sp.diags([np.full(N - k, v * scale) for k, v in zip(offs, d)], offs, format="csr")
    return Tensor4(M, (n, n, n, n))


def laplacian2d(n: int) -> sp.csr_matrix:
    """Five-point Dirichlet Laplacian on an ``n x n`` grid (unit spacing)."""
    T = sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1])
    I = sp.identity(n)
    return (sp.kron(I, T) + sp.kron(T, I)).tocsr()


def gen_heat2d(n: int, c: float = 1.0, dt: float | None = None, h: float | None = None,
               euler: bool = False) -> Tensor4:
    """Scaled 2D heat operator ``(c^2 dt / h^2) * Laplacian``, dims ``(n,n,n,n)``.

    ``h`` defaults to ``1/(n+1)``.  ``dt`` defaults to the value making the
    scale factor 0.2, the largest round value for which the explicit Euler
    form ``I + scale * Laplacian`` keeps every eigenvalue in (-1, 1).  With
    ``euler=True`` that Euler operator is returned instead.
    """
    if n < 3:
        raise ConfigError("heat2d needs n >= 3")
    h = 1.0 / (n + 1) if h is None else h
    if dt is None:
        dt = 0.2 * h * h / (c * c)
    scale = c * c * dt / (h * h)
    L = laplacian2d(n) * scale
    if euler:
        L = (sp.identity(n * n, format="csr") + L).tocsr()
    return Tensor4(L, (n, n, n, n))


def _rescale(A: Tensor4, target: float | None) -> Tensor4:
    if target is None:
        return A
    rho = spectral_radius(A)
    if rho == 0.0:
        return A
    return A * (target / rho)


def gen_randsparse(dims, density: float, seed: int, spectral_target: float | None = None) -> Tensor4:
    """Random sparse tensor with ``round(density * total)`` normal entries at
    distinct positions.  Square tensors can be rescaled to a spectral radius."""
    if not 0.0 < density <= 1.0:
        raise ConfigError("density must lie in (0, 1]")
    dims = tuple(int(d) for d in dims)
    rows, cols = dims[0] * dims[1], dims[2] * dims[3]
    total = rows * cols
    nnz = int(round(density * total))
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(total, size=nnz, replace=False))
    vals = rng.standard_normal(nnz)
    M = sp.csr_matrix((vals, (flat // cols, flat % cols)), shape=(rows, cols))
    A = Tensor4(M, dims)
    if spectral_target is not None:
        A = _rescale(A, spectral_target)
    return A


def gen_identity_perturbed(n: int, scale: float = 0.1, seed: int = 0, density: float | None = None,
                           spectral_target: float | None = 0.9) -> Tensor4:
    """``I + scale * R`` with ``R`` sparse standard normal, dims ``(n,n,n,n)``.

    ``density`` defaults to about five entries per row of the unfolding.
    When ``spectral_target`` is set the result is rescaled to that spectral
    radius so it can serve as a discrete-time operator.
    """
    N = n * n
    density = min(1.0, 5.0 / N) if density is None else density
    R = gen_randsparse((n, n, n, n), density, seed).unfold()
    M = (sp.identity(N, format="csr") + scale * R).tocsr()
    return _rescale(Tensor4(M, (n, n, n, n)), spectral_target)


def gen_rhs(dims, kind: str = "dense", seed: int = 0, density: float = 0.1) -> Tensor4:
    """Random input/output tensor normalized to unit Frobenius norm.

    ``kind='sparse'`` keeps ``round(density * total)`` entries (at least
    one per column of the unfolding, so block methods see full rank).
    """
    dims = tuple(int(d) for d in dims)
    rows, cols = dims[0] * dims[1], dims[2] * dims[3]
    rng = np.random.default_rng(seed)
    if kind == "dense":
        M = rng.standard_normal((rows, cols))
    elif kind == "sparse":
        M = gen_randsparse(dims, density, seed).unfold().toarray()
        # guarantee a nonzero in every column
        idx = rng.integers(0, rows, size=cols)
        M[idx, np.arange(cols)] += rng.standard_normal(cols)
    else:
        raise ConfigError(f"unknown rhs kind {kind!r}")
    M /= np.linalg.norm(M)
    return Tensor4(M, dims)


# configuration -------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """All knobs of an experiment.  JSON configs use these field names."""

    problem: str = "spdiags"
    size: tuple = (32, 32, 3, 5)
    method: str = "ext-global"
    m: int = 5
    m_max: int = 30
    eps: float = 1e-6
    dtol: float = 1e-12
    grid_size: int = 200
    seed: int = 0
    out: str = "out"
    spectral_target: float = 0.9
    spdiags_diagonals: tuple = SPDIAGS_DEFAULT
    density: float = 0.01
    perturbation: float = 0.1
    heat_c: float = 1.0
    heat_dt: float | None = None
    heat_euler: bool = True
    rhs_kind: str = "dense"
    bt_order: int | None = None
    hankel_tol: float = 1e-8
    bench_sizes: tuple = (32, 64, 128)
    bench_repeats: int = 3

    def __post_init__(self):
        self.size = tuple(int(x) for x in self.size)
        self.spdiags_diagonals = tuple(float(x) for x in self.spdiags_diagonals)
        self.bench_sizes = tuple(int(x) for x in self.bench_sizes)
        self.validate()

    def validate(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {PROBLEMS}")
        if len(self.size) != 4 or min(self.size) < 1:
            raise ConfigError("size must be four positive integers")
        if self.size[0] != self.size[1] and self.problem != "randsparse":
            raise ConfigError(f"{self.problem} needs n1 == n2")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if not 0.0 < self.eps < 1.0 or not 0.0 < self.dtol < 1.0:
            raise ConfigError("eps and dtol must lie in (0, 1)")
        for name in ("m", "m_max", "grid_size", "bench_repeats"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.density <= 1.0:
            raise ConfigError("density must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON config, output location excluded."""
    d = cfg.to_dict()
    d.pop("out", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def build_system(cfg: ExperimentConfig) -> MLTISystem:
    """Operator and input/output tensors for the configured problem."""
    n1, n2, k1, k2 = cfg.size
    s = cfg.seed
    if cfg.problem == "spdiags":
        A = gen_spdiags(n1, s, cfg.spectral_target, cfg.spdiags_diagonals)
    elif cfg.problem == "heat2d":
        A = gen_heat2d(n1, cfg.heat_c, cfg.heat_dt, euler=cfg.heat_euler)
    elif cfg.problem == "randsparse":
        A = gen_randsparse((n1, n2, n1, n2), cfg.density, s, cfg.spectral_target)
    else:
        A = gen_identity_perturbed(n1, cfg.perturbation, s, spectral_target=cfg.spectral_target)
    B = gen_rhs((n1, n2, k1, k2), cfg.rhs_kind, s + 1, cfg.density)
    Ct = gen_rhs((n1, n2, k1, k2), "dense", s + 2)
    C = Tensor4(np.ascontiguousarray(Ct.unfold().T), (k1, k2, n1, n2))
    return MLTISystem(A, B, C)


def reduce_system(sys: MLTISystem, method: str, m: int) -> ReducedSystem:
    """Krylov reduction of order ``m`` (steps) for any of the four methods.

    Global methods use the structured realizations; block methods project
    on the block basis (Galerkin)."""
    if method == "classic-global":
        return reduce_classic_global(sys, m)
    if method == "ext-global":
        return reduce_extended_global(sys, m)
    proc = ArnoldiProcess(sys.A, sys.B, method).run(m)
    V = proc.basis_matrix()[:, : proc.m * proc.block]
    n1, n2 = sys.state_dims
    return project(sys, Tensor4(V, (n1, n2, 1, V.shape[1])))


# artifacts ----------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    return format(float(x), ".17g")


class _Writer:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.dir = Path(cfg.out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.tag = f"# config_sha256={config_hash(cfg)} seed={cfg.seed}"
        self.files: list[str] = []

    def csv(self, name: str, header: list[str], rows) -> Path:
        path = self.dir / name
        with open(path, "w", newline="") as fh:
            fh.write(self.tag + "\n")
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(v if isinstance(v, str) else _fmt(v) for v in row) + "\n")
        self.files.append(name)
        return path

    def json(self, name: str, payload: dict) -> Path:
        path = self.dir / name
        body = dict(payload)
        body["config_sha256"] = config_hash(self.cfg)
        body["seed"] = self.cfg.seed
        path.write_text(json.dumps(body, sort_keys=True, indent=2, default=_json_default) + "\n")
        self.files.append(name)
        return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _freq_rows(fr):
    for k, th in enumerate(fr.points):
        vals = [th, fr.sigma_full[k]]
        if fr.sigma_reduced is not None:
            vals += [fr.sigma_reduced[k], fr.sigma_error[k]]
        else:
            vals += [None, None]
        yield ["nan" if (v is not None and np.isnan(v)) else v for v in vals]


FREQ_HEADER = ["theta", "sigma_max_full", "sigma_max_reduced", "sigma_max_error"]


def _pipeline_gen(cfg, w, sys, report):
    write_coo(w.dir / "A.coo", sys.A)
    write_dense(w.dir / "B.bin", sys.B)
    write_dense(w.dir / "C.bin", sys.C)
    w.files += ["A.coo", "B.bin", "C.bin"]
    report["nnz_A"] = sys.A.nnz
    return 0


def _pipeline_reduce(cfg, w, sys, report, curve_only=False):
    red = reduce_system(sys, cfg.method, cfg.m)
    with_bound = red.decomp is not None
    fr = frequency_response(sys, red, cfg.grid_size, with_bound=with_bound)
    w.csv("freqresp.csv", FREQ_HEADER, _freq_rows(fr))
    report.update(
        order=red.order,
        max_sigma_full=fr.max_full,
        max_sigma_error=fr.max_error,
        relative_error=fr.max_error / fr.max_full,
        skipped_points=fr.skipped,
    )
    if with_bound:
        report["max_error_bound"] = float(np.nanmax(fr.bound))
        report["breakdown"] = bool(red.decomp.breakdown)
    if not curve_only:
        k1 = sys.B.dims[2]
        write_dense(w.dir / "reduced_A.bin", Tensor4(red.A_small, (1, red.order, 1, red.order)))
        write_dense(w.dir / "reduced_B.bin",
                    Tensor4(red.B_small, (1, red.order, 1, red.B_small.shape[1])))
        write_dense(w.dir / "reduced_C.bin",
                    Tensor4(red.C_full, (k1, red.C_full.shape[0] // k1, 1, red.C_full.shape[1])))
        w.files += ["reduced_A.bin", "reduced_B.bin", "reduced_C.bin"]
    return 0


def _residual_rows(rep: SolveReport):
    return ([i + 1, r] for i, r in enumerate(rep.residuals))


def _pipeline_lyap(cfg, w, sys, report):
    _, rep = solve_stein(sys.A, sys.B, cfg.method, cfg.eps, cfg.dtol, cfg.m_max)
    w.csv("residuals.csv", ["iteration", "residual"], _residual_rows(rep))
    report["solve"] = rep.to_dict()
    w.timings["lyap_seconds"] = rep.seconds
    return 0 if rep.converged else 2


def _pipeline_bt(cfg, w, sys, report):
    P, Q, reps = gramians(sys, cfg.eps, cfg.dtol, cfg.m_max, cfg.method)
    report["gramian_solves"] = [r.to_dict() for r in reps]
    res = bt_reduce(sys, P, Q, cfg.bt_order, cfg.hankel_tol)
    w.csv("hankel.csv", ["index", "sigma"], ([i + 1, s] for i, s in enumerate(res.hankel)))
    fr = frequency_response(sys, res.reduced, cfg.grid_size)
    w.csv("freqresp.csv", FREQ_HEADER, _freq_rows(fr))
    report.update(order=res.r, n_hankel=len(res.hankel), max_sigma_full=fr.max_full,
                  max_sigma_error=fr.max_error, relative_error=fr.max_error / fr.max_full)
    return 0 if all(r.converged for r in reps) else 2


def _pipeline_bench(cfg, w, sys, report):
    rows, timing_rows, runs = [], [], []
    n1, n2, k1, k2 = cfg.size
    status = 0
    for size in cfg.bench_sizes:
        sub = dataclasses.replace(cfg, size=(size, size, k1, k2))
        bsys = build_system(sub)
        for method in METHODS:
            secs = []
            rep = None
            for _ in range(cfg.bench_repeats):
                t0 = time.perf_counter()
                _, rep = solve_stein(bsys.A, bsys.B, method, cfg.eps, cfg.dtol, cfg.m_max)
                secs.append(time.perf_counter() - t0)
            med = statistics.median(secs)
            log.info("bench n=%d %s: %d iterations, %.3fs", size, method, rep.iterations, med)
            rows.append([str(size), method, str(rep.iterations), str(int(rep.converged)),
                         str(rep.subspace_dim), rep.residuals[-1] if rep.residuals else None])
            timing_rows.append({"size": size, "method": method, "median_seconds": med, "runs": secs})
            runs.append({"size": size, **rep.to_dict()})
            if not rep.converged:
                status = 2
    w.csv("bench.csv", ["size", "method", "iterations", "converged", "subspace_dim", "final_residual"], rows)
    report["runs"] = runs
    w.timings["bench"] = timing_rows
    return status


def run_experiment(cfg: ExperimentConfig, pipeline: str) -> tuple[dict, int]:
    """Run one pipeline and write its artifacts into ``cfg.out``.

    Returns ``(report, exit_status)`` with status 0 on success and 2 when an
    iterative solve did not converge.  Input errors raise ``ConfigError``.
    """
    if pipeline not in PIPELINES:
        raise ConfigError(f"pipeline must be one of {PIPELINES}")
    cfg.validate()
    w = _Writer(cfg)
    w.timings = {}
    t0 = time.perf_counter()
    sys = build_system(cfg) if pipeline != "bench" else None
    report = {"pipeline": pipeline, "config": {k: v for k, v in cfg.to_dict().items() if k != "out"}}
    handler = {
        "gen": _pipeline_gen,
        "reduce": _pipeline_reduce,
        "lyap": _pipeline_lyap,
        "bt": _pipeline_bt,
        "freqresp": lambda c, w_, s, r: _pipeline_reduce(c, w_, s, r, curve_only=True),
        "bench": _pipeline_bench,
    }[pipeline]
    try:
        status = handler(cfg, w, sys, report)
    except UnstableSystemError as exc:
        raise ConfigError(str(exc)) from exc
    report["status"] = status
    report["artifacts"] = sorted(set(w.files) | {"report.json"})
    w.json("report.json", report)
    w.timings["total_seconds"] = time.perf_counter() - t0
    (w.dir / "timings.json").write_text(json.dumps(w.timings, sort_keys=True, indent=2) + "\n")
    return report, status
