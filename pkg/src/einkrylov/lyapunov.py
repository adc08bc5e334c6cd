"""Low-rank Galerkin solvers for the Stein tensor equation

    X - A * X * A^T = B * B^T

on classic and extended, global and block, tensor Krylov subspaces.

Each outer iteration adds one Arnoldi block, solves the projected Stein
equation and evaluates the residual norm from small quantities only.  The
converged approximation is returned as a truncated factor pair with
``X ~= Z1 * Z2``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .krylov import ArnoldiProcess, _slab_combine
from .tensor import DimensionError, FactorizedOp, Tensor4, TensorError, spectrum

__all__ = [
    "METHODS",
    "UniquenessError",
    "LowRankFactors",
    "SolveReport",
    "stein_small",
    "uniqueness_check",
    "solve_stein",
    "solve_ext_global",
    "solve_ext_block",
    "solve_classic_global",
    "solve_classic_block",
    "solve_continuous",
    "residual_explicit",
]

METHODS = ("classic-global", "classic-block", "ext-global", "ext-block")

# largest projected size solved through the Kronecker linear system
KRON_LIMIT = 20
UNIQUENESS_TOL = 1e-10
DENSE_GUARD = 10**7


class UniquenessError(TensorError):
    """Raised when ``lambda_i * lambda_j`` is numerically 1 for some pair."""


@dataclass(frozen=True)
class LowRankFactors:
    """Factor pair with ``X ~= Z1 * Z2``.

    ``Z1`` has dims ``(n1, n2, k1, w)`` and ``Z2`` dims ``(k1, w, n1, n2)``;
    ``Z2`` already carries the transpose.  ``rank`` is the number of kept
    singular values of the projected solution.  For block methods the
    unfolded column count is padded with zeros up to a multiple of ``k1``.
    """

    Z1: Tensor4
    Z2: Tensor4
    rank: int
    slab_width: int

    def unfolded(self) -> np.ndarray:
        """Dense unfolding of ``Z1 * Z2``."""
        n = self.Z1.unfold().shape[0]
        if n * n > DENSE_GUARD:
            raise MemoryError(f"refusing to densify a {n} x {n} operator")
        return np.asarray(self.Z1.unfold() @ self.Z2.unfold())

    def tensor(self) -> Tensor4:
        n1, n2 = self.Z1.dims[:2]
        return Tensor4(self.unfolded(), (n1, n2, n1, n2))


@dataclass
class SolveReport:
    """Per-run summary.  ``seconds`` is excluded from :meth:`to_dict` unless
    asked for, so that reports of identical runs compare equal byte for
    byte."""

    method: str
    dims: tuple
    eps: float
    dtol: float
    iterations: int = 0
    residuals: list = field(default_factory=list)
    seconds: float = 0.0
    converged: bool = False
    subspace_dim: int = 0
    breakdown: bool = False

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "method": self.method,
            "dims": list(self.dims),
            "eps": self.eps,
            "dtol": self.dtol,
            "iterations": self.iterations,
            "residuals": [float(r) for r in self.residuals],
            "converged": self.converged,
            "subspace_dim": self.subspace_dim,
            "breakdown": self.breakdown,
        }
        if include_timing:
            out["seconds"] = self.seconds
        return out


# small dense Stein solver -------------------------------------------------


def _pairwise_ok(lam: np.ndarray, tol: float = UNIQUENESS_TOL, chunk: int = 2048) -> bool:
    mags = np.abs(lam)
    if mags.size == 0 or mags.max() ** 2 < 1.0 - tol:
        return True
    for start in range(0, lam.size, chunk):
        prod = np.outer(lam[start:start + chunk], lam)
        if np.min(np.abs(prod - 1.0)) <= tol:
            return False
    return True


def _stein_kron(T, C):
    p = T.shape[0]
    M = np.eye(p * p) - np.kron(T, T)
    y = np.linalg.solve(M, C.ravel(order="F"))
    return y.reshape(p, p, order="F")


def _stein_schur(T, C):
    """Complex Schur form, then back-substitution one column at a time."""
    S, U = sla.schur(T, output="complex")
    Ct = U.conj().T @ C @ U
    p = T.shape[0]
    Yt = np.zeros((p, p), dtype=complex)
    eye = np.eye(p)
    for j in range(p - 1, -1, -1):
        rhs = Ct[:, j].copy()
        if j < p - 1:
            rhs += S @ (Yt[:, j + 1:] @ S[j, j + 1:].conj())
        Yt[:, j] = sla.solve_triangular(eye - S[j, j].conj() * S, rhs)
    return (U @ Yt @ U.conj().T).real


def stein_small(T, Bm=None, *, rhs=None, kron_limit: int = KRON_LIMIT) -> np.ndarray:
    """Solve ``Y - T Y T^T = Bm Bm^T`` (or ``= rhs``) for a small dense ``T``.

    Parameters
    ----------
    T : (p, p) array_like
    Bm : (p, q) array_like, optional
    rhs : (p, p) array_like, optional
        Symmetric right-hand side, used instead of ``Bm Bm^T``.
    kron_limit : int
        Sizes up to this go through the ``p^2 x p^2`` Kronecker system,
        larger ones through a Schur-form back-substitution.

    Returns
    -------
    Y : ndarray
        Symmetrized solution ``(Y + Y^T) / 2``.

    Raises
    ------
    UniquenessError
        If two eigenvalues of ``T`` multiply to 1 within ``1e-10``.
    """
    T = np.atleast_2d(np.asarray(T, dtype=float))
    p = T.shape[0]
    if T.shape != (p, p):
        raise DimensionError(f"T must be square, got {T.shape}")
    if rhs is None:
        if Bm is None:
            raise ValueError("need Bm or rhs")
        Bm = np.asarray(Bm, dtype=float).reshape(p, -1)
        C = Bm @ Bm.T
    else:
        C = np.asarray(rhs, dtype=float)
        if C.shape != (p, p):
            raise DimensionError(f"rhs must be {p} x {p}, got {C.shape}")
    if not _pairwise_ok(np.linalg.eigvals(T)):
        raise UniquenessError("projected Stein equation has no unique solution")
    Y = _stein_kron(T, C) if p <= kron_limit else _stein_schur(T, C)
    return 0.5 * (Y + Y.T)


def uniqueness_check(A: Tensor4, tol: float = UNIQUENESS_TOL) -> bool:
    """True iff no pair of eigenvalues of ``A`` multiplies to 1 (within
    ``tol``), i.e. the Stein equation with ``A`` is uniquely solvable."""
    return _pairwise_ok(spectrum(A), tol)


# projected problems -------------------------------------------------------


def _projected_rhs(proc: ArnoldiProcess, order: int) -> np.ndarray:
    """Coordinates of B in the current basis, as a (order x q) matrix."""
    R0 = proc.R0
    if proc.is_global:
        Bm = np.zeros((order, 1))
        Bm[0, 0] = R0[0, 0]
        return Bm
    K = proc.K
    Bm = np.zeros((order, K))
    Bm[:K] = R0[:K, :K]
    return Bm


def _residual_norm(Tbar: np.ndarray, Y: np.ndarray, order: int, last: int) -> float:
    """Residual of the Galerkin approximation from small quantities.

    With ``A V = V_+ [T; tau E^T]`` and ``Y`` solving the projected
    equation, the residual is ``V_+ [[0, -G], [-G^T, -F]] V_+^T`` where
    ``G = T Y E tau^T`` and ``F = tau E^T Y E tau^T``.  This returns
    ``sqrt(2 ||G||^2 + ||F||^2)``.
    """
    if Tbar.shape[0] <= order:
        return 0.0
    T = Tbar[:order, :order]
    tau = Tbar[order:, order - last:order]
    G = T @ Y[:, order - last:] @ tau.T
    F = tau @ Y[order - last:, order - last:] @ tau.T
    return float(np.sqrt(2.0 * np.sum(G * G) + np.sum(F * F)))


def _factors(proc: ArnoldiProcess, Y: np.ndarray, order: int, dtol: float) -> LowRankFactors:
    n1, n2, k1, k2 = proc.dims
    U, s, Vt = np.linalg.svd(Y)
    if s.size == 0 or s[0] == 0.0:
        r = 0
    else:
        r = int(np.sum(s >= dtol * s[0]))
    r = max(r, 1) if s.size else 0
    left = U[:, :r] * np.sqrt(s[:r])
    right = np.sqrt(s[:r])[:, None] * Vt[:r]
    V = proc.basis_matrix()
    if proc.is_global:
        K = proc.K
        Vm = V[:, : order * K]
        Z1 = _slab_combine(Vm, left, K)
        Z2t = _slab_combine(Vm, right.T, K)
        width = r * k2
    else:
        Vm = V[:, :order]
        Z1 = Vm @ left
        Z2t = Vm @ right.T
        pad = (-r) % k1
        if pad:
            Z1 = np.hstack([Z1, np.zeros((Z1.shape[0], pad))])
            Z2t = np.hstack([Z2t, np.zeros((Z2t.shape[0], pad))])
        width = (r + pad) // k1
    return LowRankFactors(
        Z1=Tensor4(Z1, (n1, n2, k1, width)),
        Z2=Tensor4(np.ascontiguousarray(Z2t.T), (k1, width, n1, n2)),
        rank=r,
        slab_width=k2 if proc.is_global else 1,
    )


def solve_stein(A: Tensor4, B: Tensor4, method: str = "ext-global", eps: float = 1e-6,
                dtol: float = 1e-12, m_max: int = 30, factor: FactorizedOp | None = None,
                callback=None, kron_limit: int = KRON_LIMIT):
    """Galerkin solver for ``X - A * X * A^T = B * B^T``.

    Parameters
    ----------
    A : Tensor4
        Square ``(n1, n2, n1, n2)`` operator.  Extended methods factorize it
        once unless ``factor`` is given.
    B : Tensor4
        ``(n1, n2, k1, k2)``, nonzero.
    method : {'classic-global', 'classic-block', 'ext-global', 'ext-block'}
    eps : float
        Stop once the residual norm drops below ``eps``.
    dtol : float
        Singular values of the projected solution below ``dtol * sigma_1``
        are dropped from the returned factors.
    m_max : int
        Maximum number of outer iterations (Arnoldi blocks).
    callback : callable, optional
        ``callback(m, residual, factors)`` after every iteration, where
        ``factors()`` builds the untruncated factor pair on demand.

    Returns
    -------
    (LowRankFactors, SolveReport)
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if not (0 < eps < 1) or not (0 <= dtol < 1):
        raise ValueError("eps must lie in (0, 1) and dtol in [0, 1)")
    t0 = time.perf_counter()
    report = SolveReport(method=method, dims=tuple(B.dims), eps=eps, dtol=dtol)
    proc = ArnoldiProcess(A, B, method, factor=factor)
    Y = None
    order = 0
    while proc.m < m_max:
        if not proc.step() and proc.m == 0:
            break
        if proc.breakdown and not proc.exact and proc.m == report.iterations:
            # partial breakdown: no new block, keep the previous answer
            break
        order = proc.m * proc.block
        Tbar = proc.Tbar()
        T = Tbar[:order, :order]
        Bm = _projected_rhs(proc, order)
        Y = stein_small(T, Bm, kron_limit=kron_limit)
        r = _residual_norm(Tbar, Y, order, proc.block)
        report.iterations = proc.m
        report.residuals.append(r)
        report.subspace_dim = order * (proc.K if proc.is_global else 1)
        if callback is not None:
            Ycur, ocur = Y, order
            callback(proc.m, r, lambda: _factors(proc, Ycur, ocur, 0.0))
        if r < eps:
            report.converged = True
            break
        if proc.breakdown:
            break
    report.breakdown = proc.breakdown
    if Y is None:
        # nothing usable was built; the starting block is degenerate
        report.seconds = time.perf_counter() - t0
        raise TensorError("Krylov process broke down before the first iteration")
    factors = _factors(proc, Y, order, dtol)
    report.seconds = time.perf_counter() - t0
    return factors, report


def solve_ext_global(A, B, eps=1e-6, dtol=1e-12, m_max=30, **kw):
    """Extended global Arnoldi solver with ``X_m = V (Y (x) I) V^T``."""
    return solve_stein(A, B, "ext-global", eps, dtol, m_max, **kw)


def solve_ext_block(A, B, eps=1e-6, dtol=1e-12, m_max=30, **kw):
    """Extended block Arnoldi solver with ``X_m = V * Y * V^T``."""
    return solve_stein(A, B, "ext-block", eps, dtol, m_max, **kw)


def solve_classic_global(A, B, eps=1e-6, dtol=1e-12, m_max=30, **kw):
    return solve_stein(A, B, "classic-global", eps, dtol, m_max, **kw)


def solve_classic_block(A, B, eps=1e-6, dtol=1e-12, m_max=30, **kw):
    return solve_stein(A, B, "classic-block", eps, dtol, m_max, **kw)


def solve_continuous(*args, **kwargs):
    """Continuous-time Lyapunov equations are not supported."""
    raise NotImplementedError("only the discrete-time (Stein) equation is implemented")


def residual_explicit(A: Tensor4, B: Tensor4, factors: LowRankFactors | None) -> float:
    """``||X - A * X * A^T - B * B^T||_F`` assembled densely.

    ``factors=None`` stands for ``X = 0``.
    """
    Am = A.unfold()
    Bm = B.unfold()
    Bm = Bm.toarray() if hasattr(Bm, "toarray") else np.asarray(Bm)
    n = Bm.shape[0]
    if n * n > DENSE_GUARD:
        raise MemoryError(f"refusing to densify a {n} x {n} residual")
    R = -(Bm @ Bm.T)
    if factors is not None:
        Z1 = np.asarray(factors.Z1.unfold())
        Z2 = np.asarray(factors.Z2.unfold())
        if Z1.shape[0] != n:
            raise DimensionError("factors do not match B")
        R += Z1 @ Z2 - np.asarray(Am @ Z1) @ np.asarray((Am @ Z2.T)).T
    return float(np.linalg.norm(R))
