"""MLTI systems, transfer functions and projection-based reduction.

A discrete-time MLTI system

    X_{k+1} = A * X_k + B * U_k,    Y_k = C * X_k

has transfer function ``F(s) = C * (sI - A)^{-1} * B``.  Everything
frequency-related is done on unfoldings with complex arithmetic; the
returned transfer values are ``(k1*k2) x (k1*k2)`` complex matrices.

Reduced models keep a small-matrix realization ``(A_small, B_small,
C_full)`` and evaluate through it.  For the global reductions the small
matrices are lifted by ``(x) I_K``, which is exactly the tensor form
``A_hat = H (x) I_K``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .krylov import (
    GlobalKrylovDecomp,
    _slab_combine,
    extended_global_arnoldi,
    global_arnoldi,
)
from .tensor import (
    DimensionError,
    FactorizedOp,
    SingularOperatorError,
    Tensor4,
    einstein,
    spectral_radius,
    transpose4,
)

__all__ = [
    "MLTISystem",
    "ReducedSystem",
    "FrequencyResponse",
    "transfer_eval",
    "reduce_classic_global",
    "reduce_extended_global",
    "project",
    "error_bound",
    "frequency_points",
    "frequency_response",
    "hinf_error",
    "simulate",
]


def _dense(M):
    return M.toarray() if sp.issparse(M) else np.asarray(M)


@dataclass(frozen=True)
class MLTISystem:
    """Triple ``(A, B, C)`` with ``A (n1,n2,n1,n2)``, ``B (n1,n2,k1,k2)``
    and ``C (k1,k2,n1,n2)``."""

    A: Tensor4
    B: Tensor4
    C: Tensor4
    discrete_time: bool = True

    def __post_init__(self):
        n1, n2, n3, n4 = self.A.dims
        if (n1, n2) != (n3, n4):
            raise DimensionError(f"A must be square, got {self.A.dims}")
        if self.B.dims[:2] != (n1, n2):
            raise DimensionError(f"B dims {self.B.dims} do not match A")
        if self.C.dims[2:] != (n1, n2):
            raise DimensionError(f"C dims {self.C.dims} do not match A")

    @property
    def state_dims(self):
        return self.A.dims[:2]

    @property
    def n(self) -> int:
        return self.A.dims[0] * self.A.dims[1]

    def is_stable(self) -> bool:
        """All eigenvalues of ``A`` inside the unit disc (discrete time) or
        the open left half plane (continuous time)."""
        if self.discrete_time:
            return spectral_radius(self.A) < 1.0
        from .tensor import spectrum

        return bool(np.all(spectrum(self.A).real < 0))

    def dual(self) -> "MLTISystem":
        """``(A^T, C^T, B^T)``, whose reachability Gramian is the
        observability Gramian of this system."""
        return MLTISystem(transpose4(self.A), transpose4(self.C), transpose4(self.B), self.discrete_time)


class _Resolvent:
    """Factorization of ``s I - A`` for one complex ``s``."""

    def __init__(self, A: Tensor4, s: complex):
        M = A.unfold()
        n = M.shape[0]
        if sp.issparse(M):
            shifted = (s * sp.identity(n, format="csc", dtype=complex) - M.astype(complex)).tocsc()
            try:
                lu = spla.splu(shifted)
            except RuntimeError as exc:
                raise SingularOperatorError(f"s = {s} lies in the spectrum of A") from exc
            diag = np.abs(lu.U.diagonal())
            self._solve = lu.solve
        else:
            shifted = s * np.eye(n) - M
            with warnings.catch_warnings():
                # singularity is reported below as an exception
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                lu, piv = sla.lu_factor(shifted)
            diag = np.abs(np.diag(lu))
            self._solve = lambda rhs: sla.lu_solve((lu, piv), rhs)
        if diag.min() <= n * np.finfo(float).eps * max(diag.max(), 1.0):
            raise SingularOperatorError(f"s = {s} lies in the spectrum of A")

    def solve(self, X):
        return self._solve(np.asarray(_dense(X), dtype=complex))


def transfer_eval(sys: MLTISystem, s: complex) -> np.ndarray:
    """Unfolded transfer value ``Psi(F(s))``, a complex ``K x K`` matrix."""
    X = _Resolvent(sys.A, s).solve(sys.B.unfold())
    return np.asarray(sys.C.unfold() @ X)


@dataclass(frozen=True)
class ReducedSystem:
    """Reduced model in small-matrix form.

    Attributes
    ----------
    kind : str
        'classic-global', 'extended-global', 'balanced-truncation' or
        'generic-projection'.
    A_small : ndarray (p, p)
    B_small : ndarray (p, q)
    C_full : ndarray (K_out, p * lift)
        Output map; for the global kinds the unfolding of ``C * V_m``.
    lift : int
        ``K`` for the global kinds (small matrices act through ``(x) I_K``),
        1 otherwise.
    decomp : GlobalKrylovDecomp or None
        Krylov data retained for the error bound.
    """

    kind: str
    A_small: np.ndarray
    B_small: np.ndarray
    C_full: np.ndarray
    lift: int
    decomp: GlobalKrylovDecomp | None = None
    out_dims: tuple = (1, 1)
    in_dims: tuple = (1, 1)

    @property
    def order(self) -> int:
        return self.A_small.shape[0]

    def coefficients(self, s: complex) -> np.ndarray:
        """``(sI - A_small)^{-1} B_small``."""
        p = self.order
        return np.linalg.solve(s * np.eye(p) - self.A_small, self.B_small.astype(complex))

    def transfer(self, s: complex) -> np.ndarray:
        y = self.coefficients(s)
        if self.lift == 1:
            return self.C_full @ y
        return _slab_combine(self.C_full.astype(complex), y, self.lift)

    def tensor_triple(self) -> tuple[Tensor4, Tensor4, Tensor4]:
        """Equivalent tensor realization ``(A_hat, B_hat, C_hat)``."""
        K = self.lift
        k1o, k2o = self.out_dims
        k1i, k2i = self.in_dims
        p = self.order
        Ah = np.kron(self.A_small, np.eye(K))
        Bh = np.kron(self.B_small, np.eye(K))
        if K == 1:
            # generic realization: reduced state dims (1, p)
            return (
                Tensor4(Ah, (1, p, 1, p)),
                Tensor4(Bh, (1, p, k1i, k2i)),
                Tensor4(self.C_full, (k1o, k2o, 1, p)),
            )
        k1 = k1i
        return (
            Tensor4(Ah, (k1, p * K // k1, k1, p * K // k1)),
            Tensor4(Bh, (k1, p * K // k1, k1, Bh.shape[1] // k1)),
            Tensor4(self.C_full, (k1o, k2o, k1, p * K // k1)),
        )

    def transfer_tensor_form(self, s: complex) -> np.ndarray:
        """Transfer value evaluated on the lifted tensor realization."""
        Ah, Bh, Ch = self.tensor_triple()
        M = s * np.eye(Ah.unfold().shape[0]) - Ah.unfold()
        return Ch.unfold() @ np.linalg.solve(M, Bh.unfold().astype(complex))


def _global_reduced(sys: MLTISystem, dec: GlobalKrylovDecomp, kind: str, b_coef: float) -> ReducedSystem:
    p = dec.order
    K = sys.B.dims[2] * sys.B.dims[3]
    Vm = dec.basis.unfold()[:, : p * K]
    Cf = np.asarray(sys.C.unfold() @ Vm)
    Bs = np.zeros((p, 1))
    Bs[0, 0] = b_coef
    return ReducedSystem(
        kind=kind,
        A_small=dec.projected.copy(),
        B_small=Bs,
        C_full=Cf,
        lift=K,
        decomp=dec,
        out_dims=sys.C.dims[:2],
        in_dims=sys.B.dims[2:],
    )


def reduce_classic_global(sys: MLTISystem, m: int) -> ReducedSystem:
    """Order-``m`` reduction on the classic global Krylov subspace.

    ``A_hat = H_m (x) I_K``, ``B_hat = (||B|| e_1) (x) I_K``,
    ``C_hat = C * V_m``.  An Arnoldi breakdown yields a smaller order.
    """
    dec = global_arnoldi(sys.A, sys.B, m)
    if dec.breakdown and not dec.exact:
        warnings.warn(f"Arnoldi breakdown: reduced order {dec.m} < {m}", RuntimeWarning, stacklevel=2)
    beta = float(np.linalg.norm(_dense(sys.B.unfold())))
    return _global_reduced(sys, dec, "classic-global", beta)


def reduce_extended_global(sys: MLTISystem, m: int, factor: FactorizedOp | None = None) -> ReducedSystem:
    """Order-``2m`` reduction on the extended global Krylov subspace, with
    ``A_hat = T_m (x) I_K`` and ``B_hat = (omega_11 e_1) (x) I_K``."""
    dec = extended_global_arnoldi(sys.A, sys.B, m, factor=factor)
    if dec.breakdown and not dec.exact:
        warnings.warn(f"Arnoldi breakdown: reduced order {dec.order} < {2 * m}", RuntimeWarning, stacklevel=2)
    return _global_reduced(sys, dec, "extended-global", float(dec.omega[0, 0]))


def project(sys: MLTISystem, X: Tensor4, Y: Tensor4 | None = None, kind: str = "generic-projection") -> ReducedSystem:
    """Petrov-Galerkin projection ``(Y^T*A*X, Y^T*B, C*X)``; ``Y = X`` when
    omitted.  Bases are used through their unfoldings."""
    Y = X if Y is None else Y
    Xm = _dense(X.unfold())
    Ym = _dense(Y.unfold())
    if Xm.shape != Ym.shape or Xm.shape[0] != sys.n:
        raise DimensionError("projection bases do not match the system")
    Ar = Ym.T @ np.asarray(sys.A.unfold() @ Xm)
    Br = Ym.T @ _dense(sys.B.unfold())
    Cr = np.asarray(sys.C.unfold() @ Xm)
    return ReducedSystem(kind, Ar, Br, Cr, 1, None, sys.C.dims[:2], sys.B.dims[2:])


def _bound_data(sys: MLTISystem, red: ReducedSystem):
    """Columns of the next basis block and the closing coefficients."""
    dec = red.decomp
    if dec is None:
        raise ValueError("error bound needs a Krylov reduction")
    K = red.lift
    p = dec.order
    step = 2 if dec.extended else 1
    if dec.exact or dec.projected_bar.shape[0] <= p:
        return None, None
    closing = dec.projected_bar[p:p + step, p - step:p]
    Vnext = dec.basis.unfold()[:, p * K:(p + step) * K]
    if Vnext.shape[1] < step * K:
        return None, None
    return Vnext, closing


def error_bound(sys: MLTISystem, red: ReducedSystem, s: complex, _res: _Resolvent | None = None) -> float:
    """Upper bound for ``||F(s) - F_hat(s)||_F`` of a global Krylov reduction.

    The error equals ``C (sI - A)^{-1} V_next ((h E^T y) (x) I_K)`` with
    ``y = (sI - H)^{-1} b`` and ``h`` the closing block of the Hessenberg
    matrix, so it is bounded by
    ``||C (sI - A)^{-1} V_next||_F * ||(h E^T y) (x) I_K||_F``.
    Returns 0 after an exact breakdown.
    """
    Vnext, closing = _bound_data(sys, red)
    if Vnext is None or not np.any(closing):
        return 0.0
    res = _Resolvent(sys.A, s) if _res is None else _res
    left = np.asarray(sys.C.unfold() @ res.solve(Vnext))
    return _bound_from(left, closing, red, s)


def _bound_from(left, closing, red, s):
    step = closing.shape[0]
    y = red.coefficients(s)[:, 0]
    c = closing @ y[-step:]
    return float(np.linalg.norm(left) * np.linalg.norm(c) * np.sqrt(red.lift))


def frequency_points(grid_size: int = 200, discrete_time: bool = True):
    """Sample points: ``theta_k = 2 pi k / grid`` on the unit circle, or
    ``s = i w`` with ``w`` log-spaced in ``[1e-2, 1e2]``."""
    if grid_size < 1:
        raise ValueError("grid_size must be positive")
    if discrete_time:
        theta = 2.0 * np.pi * np.arange(grid_size) / grid_size
        return theta, np.exp(1j * theta)
    w = np.logspace(-2, 2, grid_size)
    return w, 1j * w


@dataclass
class FrequencyResponse:
    """Sampled largest singular values along a frequency grid.

    Arrays are NaN at skipped points (``skipped`` lists their indices).
    """

    points: np.ndarray
    sigma_full: np.ndarray
    sigma_reduced: np.ndarray | None
    sigma_error: np.ndarray | None
    bound: np.ndarray | None
    skipped: list

    @property
    def max_error(self) -> float:
        return float(np.nanmax(self.sigma_error)) if self.sigma_error is not None else float("nan")

    @property
    def max_full(self) -> float:
        return float(np.nanmax(self.sigma_full))


def _smax(M):
    return float(np.linalg.norm(M, 2))


def frequency_response(sys: MLTISystem, red: ReducedSystem | None = None, grid_size: int = 200,
                       with_bound: bool = False) -> FrequencyResponse:
    """Evaluate ``sigma_max`` of ``F``, ``F_hat`` and ``F - F_hat`` on the grid.

    One factorization of ``sI - A`` per point serves both the full transfer
    value and (optionally) the error bound.
    """
    pts, svals = frequency_points(grid_size, sys.discrete_time)
    g = len(pts)
    full = np.full(g, np.nan)
    redv = np.full(g, np.nan) if red is not None else None
    err = np.full(g, np.nan) if red is not None else None
    bnd = np.full(g, np.nan) if (red is not None and with_bound) else None
    Bm = _dense(sys.B.unfold())
    Cm = sys.C.unfold()
    Vnext = closing = None
    if bnd is not None:
        Vnext, closing = _bound_data(sys, red)
    skipped = []
    for k, s in enumerate(svals):
        try:
            res = _Resolvent(sys.A, s)
            rhs = Bm if Vnext is None else np.hstack([Bm, Vnext])
            X = res.solve(rhs)
            F = np.asarray(Cm @ X[:, : Bm.shape[1]])
            Fr = red.transfer(s) if red is not None else None
        except (SingularOperatorError, np.linalg.LinAlgError):
            warnings.warn(f"skipping singular grid point {k} (s = {s:.6g})", RuntimeWarning, stacklevel=2)
            skipped.append(k)
            continue
        full[k] = _smax(F)
        if red is not None:
            redv[k] = _smax(Fr)
            err[k] = _smax(F - Fr)
        if bnd is not None:
            if Vnext is None or not np.any(closing):
                bnd[k] = 0.0
            else:
                left = np.asarray(Cm @ X[:, Bm.shape[1]:])
                bnd[k] = _bound_from(left, closing, red, s)
    return FrequencyResponse(pts, full, redv, err, bnd, skipped)


def hinf_error(sys: MLTISystem, red: ReducedSystem, grid_size: int = 200):
    """Sampled ``max_theta sigma_max(F - F_hat)(e^{i theta})``.

    Returns ``(max_error, FrequencyResponse)``.
    """
    fr = frequency_response(sys, red, grid_size)
    return fr.max_error, fr


def simulate(sys: MLTISystem, X0: Tensor4, inputs, steps: int | None = None) -> list:
    """Iterate ``X_{k+1} = A*X_k + B*U_k`` and return ``[C*X_0, ..., C*X_steps]``.

    ``X0`` has dims ``(n1, n2, j1, j2)`` and each input ``(k1, k2, j1, j2)``.
    """
    inputs = list(inputs)
    steps = len(inputs) if steps is None else steps
    if steps > len(inputs):
        raise DimensionError(f"{steps} steps requested but {len(inputs)} inputs given")
    if X0.dims[:2] != sys.state_dims:
        raise DimensionError(f"initial state dims {X0.dims} do not match A")
    X = X0
    outs = [einstein(sys.C, X)]
    for k in range(steps):
        X = einstein(sys.A, X) + einstein(sys.B, inputs[k])
        outs.append(einstein(sys.C, X))
    return outs
