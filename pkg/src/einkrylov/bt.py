"""Balanced truncation of MLTI systems from low-rank Gramian factors.

The reachability and observability Gramians solve

    P - A * P * A^T = B * B^T,      Q - A^T * Q * A = C^T * C,

and are approximated as ``P ~ Z * Z^T`` and ``Q ~ W * W^T`` with the
Krylov solvers of :mod:`einkrylov.lyapunov`.  The Hankel singular values
are the singular values of the unfolding of ``W^T * Z``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lyapunov import LowRankFactors, SolveReport, solve_stein
from .mor import MLTISystem, ReducedSystem, project
from .tensor import Tensor4, TensorError, spectral_radius, transpose4

__all__ = [
    "UnstableSystemError",
    "BTResult",
    "gramians",
    "hankel_values",
    "bt_reduce",
    "balanced_truncation",
]

# relative cut-off for Hankel values when no order is requested
HANKEL_TOL = 1e-8


class UnstableSystemError(TensorError):
    """Raised when the Gramians of an unstable system are requested."""


@dataclass(frozen=True)
class BTResult:
    reduced: ReducedSystem
    hankel: np.ndarray
    X_r: Tensor4
    Y_r: Tensor4
    r: int

    @property
    def A_r(self) -> np.ndarray:
        return self.reduced.A_small

    @property
    def B_r(self) -> np.ndarray:
        return self.reduced.B_small

    @property
    def C_r(self) -> np.ndarray:
        return self.reduced.C_full


def _factor(F) -> np.ndarray:
    if isinstance(F, LowRankFactors):
        F = F.Z1
    M = F.unfold()
    return M.toarray() if hasattr(M, "toarray") else np.asarray(M)


def gramians(sys: MLTISystem, eps: float = 1e-6, dtol: float = 1e-12, m_max: int = 20,
             method: str = "ext-global", **kw) -> tuple[LowRankFactors, LowRankFactors, list[SolveReport]]:
    """Low-rank reachability and observability Gramians.

    The observability Gramian comes from the same solver applied to
    ``(A^T, C^T)``.  Returns ``(P, Q, [report_P, report_Q])``.
    """
    if not sys.discrete_time:
        raise NotImplementedError("only discrete-time Gramians are supported")
    rho = spectral_radius(sys.A)
    if rho >= 1.0:
        raise UnstableSystemError(f"spectral radius {rho:.6g} >= 1")
    P, rep_p = solve_stein(sys.A, sys.B, method, eps, dtol, m_max, **kw)
    Q, rep_q = solve_stein(transpose4(sys.A), transpose4(sys.C), method, eps, dtol, m_max, **kw)
    return P, Q, [rep_p, rep_q]


def hankel_values(P, Q) -> np.ndarray:
    """Singular values of ``Psi(W^T * Z)`` for factors ``Z`` of ``P`` and
    ``W`` of ``Q`` (``LowRankFactors`` or factor tensors), non-increasing."""
    Z, W = _factor(P), _factor(Q)
    return np.linalg.svd(W.T @ Z, compute_uv=False)


def bt_reduce(sys: MLTISystem, P, Q, r: int | None = None, tol: float = HANKEL_TOL) -> BTResult:
    """Balanced truncation from Gramian factors.

    With ``Psi(W^T * Z) = U S V^T`` split after ``r`` values, the projectors
    are ``X_r = Z V_1 S_1^{-1/2}`` and ``Y_r = W U_1 S_1^{-1/2}`` and the
    reduced triple is ``(Y_r^T*A*X_r, Y_r^T*B, C*X_r)``.

    Parameters
    ----------
    r : int, optional
        Retained order; by default every Hankel value above
        ``tol * sigma_1``.
    """
    Z, W = _factor(P), _factor(Q)
    n1, n2 = sys.state_dims
    if Z.shape[0] != n1 * n2 or W.shape[0] != n1 * n2:
        raise ValueError("Gramian factors do not match the system")
    U, s, Vt = np.linalg.svd(W.T @ Z, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("Gramian factors have no common range")
    rank = int(np.sum(s > tol * s[0]))
    if r is None:
        r = rank
    elif r < 1 or r > rank:
        raise ValueError(f"requested order {r} outside 1..{rank} (numerical rank)")
    scale = 1.0 / np.sqrt(s[:r])
    Xr = Z @ (Vt[:r].T * scale)
    Yr = W @ (U[:, :r] * scale)
    X_r = Tensor4(Xr, (n1, n2, 1, r))
    Y_r = Tensor4(Yr, (n1, n2, 1, r))
    red = project(sys, X_r, Y_r, kind="balanced-truncation")
    return BTResult(reduced=red, hankel=s, X_r=X_r, Y_r=Y_r, r=r)


def balanced_truncation(sys: MLTISystem, r: int | None = None, eps: float = 1e-6, dtol: float = 1e-12,
                        m_max: int = 20, method: str = "ext-global", tol: float = HANKEL_TOL):
    """Gramians plus truncation in one call; returns ``(BTResult, reports)``."""
    P, Q, reports = gramians(sys, eps, dtol, m_max, method)
    return bt_reduce(sys, P, Q, r, tol), reports
