"""Arnoldi processes on tensor Krylov subspaces.

Four processes are provided, all working on unfoldings internally:

* classic global Arnoldi on ``span{B, A*B, ...}`` with scalar coefficients,
* extended global Arnoldi, which also brings in ``A^{-1}*B, A^{-2}*B, ...``,
* extended block Arnoldi, the same subspace with matrix coefficients,
* classic block Arnoldi (for benchmarking).

A basis tensor of dims ``(n1, n2, k1, p*k2)`` is a row of ``p`` slabs of
width ``k2``; under unfolding slab ``l`` is the column block
``l*K:(l+1)*K`` with ``K = k1*k2``.  Global processes keep slabs orthonormal
under the trace inner product, block processes keep all columns orthonormal.

Every Gram-Schmidt loop runs twice.  Breakdown is soft: the largest valid
decomposition is returned together with a flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, FactorizedOp, RankDeficiencyError, Tensor4, factorize

__all__ = [
    "BREAKDOWN_TOL",
    "GlobalKrylovDecomp",
    "BlockKrylovDecomp",
    "ArnoldiProcess",
    "global_arnoldi",
    "extended_global_arnoldi",
    "extended_block_arnoldi",
    "classic_block_arnoldi",
    "compute_Tm",
    "recursion_growth",
    "direct_projection",
    "orthonormality_error",
    "decomposition_residual",
]

# relative size below which an orthogonalized direction counts as zero
BREAKDOWN_TOL = 1e-12
# accepted error level of the T_m recursion before switching to projection
RECURSION_TOL = 1e-10


# matrix-level helpers -----------------------------------------------------


def _slab_gram(V: np.ndarray, W: np.ndarray, K: int) -> np.ndarray:
    """Slab-wise trace inner products of two unfolded slab rows."""
    n = V.shape[0]
    return np.tensordot(V.reshape(n, -1, K), W.reshape(n, -1, K), axes=([0, 2], [0, 2]))


def _slab_combine(V: np.ndarray, C: np.ndarray, K: int) -> np.ndarray:
    """``V @ kron(C, I_K)`` without forming the Kronecker product."""
    n = V.shape[0]
    out = np.tensordot(V.reshape(n, -1, K), C, axes=([1], [0]))  # (n, K, q)
    return np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, -1)


def _slab_norms(W: np.ndarray, K: int) -> np.ndarray:
    n = W.shape[0]
    return np.sqrt(np.einsum("nsk,nsk->s", W.reshape(n, -1, K), W.reshape(n, -1, K)))


def _global_qr(W: np.ndarray, K: int, ref: np.ndarray):
    """Slab-wise Gram-Schmidt QR, ``W = Q @ kron(R, I_K)``.

    Returns ``(Q, R, dependent)`` where ``dependent`` flags slabs whose
    orthogonalized norm fell below ``BREAKDOWN_TOL * ref``.
    """
    n = W.shape[0]
    s = W.shape[1] // K
    Q = np.array(W, dtype=float).reshape(n, s, K)
    R = np.zeros((s, s))
    dep = np.zeros(s, dtype=bool)
    for l in range(s):
        for _ in range(2):
            for i in range(l):
                c = np.vdot(Q[:, i], Q[:, l])
                R[i, l] += c
                Q[:, l] -= c * Q[:, i]
        nrm = np.linalg.norm(Q[:, l])
        R[l, l] = nrm
        if nrm <= BREAKDOWN_TOL * ref[l]:
            dep[l] = True
            Q[:, l] = 0.0
        else:
            Q[:, l] /= nrm
    return Q.reshape(n, s * K), R, dep


def _block_qr(W: np.ndarray, ref: np.ndarray):
    """Thin QR with nonnegative ``diag(R)`` and a per-column dependency test."""
    if W.shape[1] > W.shape[0]:
        # more columns than the space has room for
        dep = np.linalg.norm(W, axis=0) <= BREAKDOWN_TOL * ref
        dep[W.shape[0]:] = True
        return W, None, dep
    Q, R = np.linalg.qr(W, mode="reduced")
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    Q = Q * signs
    R = signs[:, None] * R
    dep = np.abs(np.diag(R)) <= BREAKDOWN_TOL * ref
    return Q, R, dep


class _Operator:
    """Multiplication by ``A`` and (lazily) solves with it, on unfoldings."""

    def __init__(self, A, need_inverse: bool):
        if isinstance(A, FactorizedOp):
            raise TypeError("pass the tensor A; a prebuilt factorization goes in `factor`")
        if not isinstance(A, Tensor4):
            raise TypeError("A must be a Tensor4")
        n1, n2, n3, n4 = A.dims
        if (n1, n2) != (n3, n4):
            raise DimensionError(f"A must be square, got {A.dims}")
        self.A = A
        self.mat = A.unfold()
        self.factor = None
        self._need_inverse = need_inverse

    def set_factor(self, factor):
        if factor is not None:
            self.factor = factor
        elif self._need_inverse:
            self.factor = factorize(self.A)

    def mul(self, X):
        out = self.mat @ X
        return np.asarray(out)

    def solve(self, X):
        return self.factor.solve_matrix(X)


# decompositions -----------------------------------------------------------


@dataclass(frozen=True)
class GlobalKrylovDecomp:
    """Output of a global Arnoldi process.

    Attributes
    ----------
    basis : Tensor4
        ``(n1, n2, k1, s*k2)`` with ``s = m + 1`` slabs (classic) or
        ``2(m + 1)`` slabs (extended); one block fewer after an exact
        breakdown.
    Hbar : ndarray
        Loop coefficients, ``(m+1) x m`` or ``2(m+1) x 2m``.
    m : int
        Number of completed steps.
    slab_width : int
        ``k2``.
    extended : bool
    omega : ndarray or None
        2x2 upper triangular factor of the initial pair (extended only).
    Tbar : ndarray or None
        Projected operator ``basis^T <> (A * V_{2m})`` (extended only).
    breakdown : bool
        The process stopped before the requested number of steps.
    exact : bool
        The stop was an exact breakdown: the subspace is invariant, the last
        block row of ``Hbar`` is zero and ``basis`` holds no extra block.
    """

    basis: Tensor4
    Hbar: np.ndarray
    m: int
    slab_width: int
    extended: bool = False
    omega: np.ndarray | None = None
    Tbar: np.ndarray | None = None
    breakdown: bool = False
    exact: bool = False

    @property
    def order(self) -> int:
        """Dimension of the projected problem (``m`` or ``2m``)."""
        return 2 * self.m if self.extended else self.m

    @property
    def projected(self) -> np.ndarray:
        """Square projected operator ``H_m`` (classic) or ``T_m`` (extended)."""
        M = self.Tbar if self.extended else self.Hbar
        return M[: self.order, : self.order]

    @property
    def projected_bar(self) -> np.ndarray:
        return self.Tbar if self.extended else self.Hbar

    def leading_basis(self, count: int | None = None) -> Tensor4:
        """First ``count`` slabs of the basis (default: ``order``)."""
        count = self.order if count is None else count
        n1, n2, k1, _ = self.basis.dims
        K = k1 * self.slab_width
        M = self.basis.unfold()[:, : count * K]
        return Tensor4(np.array(M), (n1, n2, k1, count * self.slab_width))


@dataclass(frozen=True)
class BlockKrylovDecomp:
    """Output of a block Arnoldi process (classic or extended).

    Attributes
    ----------
    basis : Tensor4
        ``(n1, n2, k1, b*(m+1)*k2)`` with ``b = 2`` (extended) or 1.
    Hbar, Tbar : Tensor4
        ``(k1, b*(m+1)*k2, k1, b*m*k2)`` block Hessenberg tensors.  ``Hbar``
        holds the loop coefficients, ``Tbar = basis^T * (A * V_m)``.  For the
        classic process the two coincide.
    R0 : Tensor4
        Upper triangular factor of the initial block.
    """

    basis: Tensor4
    Hbar: Tensor4
    Tbar: Tensor4
    R0: Tensor4
    m: int
    slab_width: int
    extended: bool = True
    breakdown: bool = False
    exact: bool = False

    @property
    def block_cols(self) -> int:
        """Unfolded columns per Arnoldi block."""
        k1 = self.basis.dims[2]
        return (2 if self.extended else 1) * k1 * self.slab_width

    @property
    def order(self) -> int:
        """Unfolded dimension of the projected problem."""
        return self.m * self.block_cols

    @property
    def projected(self) -> np.ndarray:
        T = self.Tbar.unfold()
        return T[: self.order, : self.order]

    def leading_basis(self, cols: int | None = None) -> Tensor4:
        cols = self.order if cols is None else cols
        n1, n2, k1, _ = self.basis.dims
        M = self.basis.unfold()[:, :cols]
        return Tensor4(np.array(M), (n1, n2, k1, cols // k1))


# the processes ------------------------------------------------------------


class ArnoldiProcess:
    """Incremental Arnoldi process that can be stepped one block at a time.

    Parameters
    ----------
    A : Tensor4
        Square operator ``(n1, n2, n1, n2)``.
    B : Tensor4
        Starting tensor ``(n1, n2, k1, k2)``.
    kind : {'classic-global', 'ext-global', 'classic-block', 'ext-block'}
    factor : FactorizedOp, optional
        Reused factorization of ``A`` for the extended processes.

    Notes
    -----
    After construction the first block is available; :meth:`step` adds one
    more and returns False once the process has broken down.
    """

    KINDS = ("classic-global", "ext-global", "classic-block", "ext-block")

    def __init__(self, A: Tensor4, B: Tensor4, kind: str, factor: FactorizedOp | None = None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown process kind {kind!r}")
        self.kind = kind
        self.extended = kind.startswith("ext")
        self.is_global = kind.endswith("global")
        self.op = _Operator(A, self.extended)
        n1, n2 = A.dims[:2]
        if B.dims[:2] != (n1, n2):
            raise DimensionError(f"B dims {B.dims} do not match A dims {A.dims}")
        self.B = B
        self.dims = (n1, n2, B.dims[2], B.dims[3])
        self.k2 = B.dims[3]
        self.K = B.dims[2] * B.dims[3]
        Bm = B.unfold()
        Bm = Bm.toarray() if hasattr(Bm, "toarray") else np.asarray(Bm, dtype=float)
        self.b_norm = float(np.linalg.norm(Bm))
        if self.b_norm == 0.0:
            raise ValueError("starting tensor B is zero")
        self.op.set_factor(factor)

        # slabs (global) or unfolded columns (block) per Arnoldi block
        s = 2 if self.extended else 1
        self.block = s if self.is_global else s * self.K
        self.blocks: list[np.ndarray] = []
        self._AV: list[np.ndarray] = []
        self.H = np.zeros((0, 0))
        self.m = 0
        self.breakdown = False
        self.exact = False

        if self.extended:
            W = np.hstack([Bm, self.op.solve(Bm)])
        else:
            W = Bm
        ref = self._col_norms(W)
        Q, R, dep = self._qr(W, ref)
        self.R0 = R
        if dep.any():
            # the starting block itself is degenerate; keep what is usable
            self.breakdown = True
            cols = self._unit_cols(self._first_dependent(dep))
            if not self.is_global:
                # the basis must fold back to whole mode-3 fibres
                cols -= cols % self.dims[2]
            if cols == 0:
                raise RankDeficiencyError("starting block is rank deficient")
            self.blocks.append(Q[:, :cols])
            return
        self.blocks.append(Q)

    # coefficient algebra, global vs block
    def _col_norms(self, W):
        return _slab_norms(W, self.K) if self.is_global else np.linalg.norm(W, axis=0)

    def _qr(self, W, ref):
        if self.is_global:
            return _global_qr(W, self.K, ref)
        return _block_qr(W, ref)

    def _proj(self, V, W):
        return _slab_gram(V, W, self.K) if self.is_global else V.T @ W

    def _comb(self, V, C):
        return _slab_combine(V, C, self.K) if self.is_global else V @ C

    def _unit_cols(self, units):
        return units * self.K if self.is_global else units

    @staticmethod
    def _first_dependent(dep):
        return int(np.argmax(dep)) if dep.any() else len(dep)

    def _apply(self, V):
        if not self.extended:
            return self.op.mul(V)
        half = V.shape[1] // 2
        return np.hstack([self.op.mul(V[:, :half]), self.op.solve(V[:, half:])])

    def step(self) -> bool:
        """Add one block.  Returns False if the process cannot continue."""
        if self.breakdown:
            return False
        j = self.m  # 0-based index of the block being expanded
        W = self._apply(self.blocks[j])
        ref = self._col_norms(W)
        b = self.block
        coeff = np.zeros(((j + 2) * b, b))
        for _ in range(2):
            for i in range(j + 1):
                C = self._proj(self.blocks[i], W)
                coeff[i * b:(i + 1) * b] += C
                W = W - self._comb(self.blocks[i], C)
        Q, R, dep = self._qr(W, ref)
        if dep.all():
            # invariant subspace: the decomposition closes exactly
            self._append_column(coeff)
            self.m += 1
            self.breakdown = self.exact = True
            return False
        if dep.any():
            self.breakdown = True
            return False
        coeff[(j + 1) * b:] = R
        self._append_column(coeff)
        self.blocks.append(Q)
        self.m += 1
        return True

    def _append_column(self, coeff):
        b = self.block
        rows, cols = coeff.shape[0], self.H.shape[1] + b
        H = np.zeros((rows, cols))
        H[: self.H.shape[0], : self.H.shape[1]] = self.H
        H[:, -b:] = coeff
        self.H = H

    def run(self, m: int):
        while self.m < m and self.step():
            pass
        return self

    # snapshots
    def basis_matrix(self) -> np.ndarray:
        return np.hstack(self.blocks)

    def _basis_tensor(self) -> Tensor4:
        n1, n2, k1, _ = self.dims
        M = self.basis_matrix()
        return Tensor4(M, (n1, n2, k1, M.shape[1] // k1))

    def Tbar(self, method: str = "auto") -> np.ndarray:
        """Projected operator for the extended processes.

        ``'recursion'`` uses :func:`compute_Tm`, ``'direct'`` projects
        ``A * V`` onto the basis, and ``'auto'`` takes the recursion unless
        its error growth (driven by small pivots) could exceed
        ``RECURSION_TOL``.  A negligible pivot always falls back to the
        direct projection.
        """
        if not self.extended:
            return self.H
        if method not in ("auto", "recursion", "direct"):
            raise ValueError(f"unknown method {method!r}")
        Hbar = self.H[: (self.m + 1) * self.block, : self.m * self.block]
        b = self.block // 2
        if method == "auto" and (
            recursion_growth(Hbar, self.R0, self.m, b) * np.finfo(float).eps > RECURSION_TOL
        ):
            method = "direct"
        if method != "direct":
            try:
                return compute_Tm(Hbar, self.R0, self.m, block=b)
            except ZeroDivisionError:
                pass
        return self._direct_T()

    def _direct_T(self) -> np.ndarray:
        V = self.basis_matrix()
        order = self.m * self.block
        # products with earlier blocks never change; cache them
        for j in range(len(self._AV), self.m):
            self._AV.append(self.op.mul(self.blocks[j]))
        AV = np.hstack(self._AV[: self.m])
        T = self._proj(V, AV)
        rows = (self.m + 1) * self.block
        out = np.zeros((rows, order))
        out[: T.shape[0]] = T[:rows]
        return out

    def global_decomp(self, Tbar_method: str = "auto") -> GlobalKrylovDecomp:
        if not self.is_global:
            raise TypeError("block process; use block_decomp")
        b = self.block
        Hbar = self.H[: (self.m + 1) * b, : self.m * b] if self.m else np.zeros((b, 0))
        Tbar = None
        if self.extended:
            Tbar = self.Tbar(Tbar_method) if self.m else np.zeros((b, 0))
        return GlobalKrylovDecomp(
            basis=self._basis_tensor(),
            Hbar=Hbar,
            m=self.m,
            slab_width=self.k2,
            extended=self.extended,
            omega=self.R0 if self.extended else None,
            Tbar=Tbar,
            breakdown=self.breakdown,
            exact=self.exact,
        )

    def block_decomp(self, Tbar_method: str = "auto") -> BlockKrylovDecomp:
        if self.is_global:
            raise TypeError("global process; use global_decomp")
        b = self.block
        k1 = self.dims[2]
        Hbar = self.H[: (self.m + 1) * b, : self.m * b] if self.m else np.zeros((b, 0))
        Tbar = (self.Tbar(Tbar_method) if self.m else Hbar) if self.extended else Hbar

        def fold(M):
            return Tensor4(M, (k1, max(M.shape[0] // k1, 1), k1, M.shape[1] // k1)) if M.size else None

        R0 = self.R0
        return BlockKrylovDecomp(
            basis=self._basis_tensor(),
            Hbar=fold(Hbar),
            Tbar=fold(Tbar),
            R0=Tensor4(R0, (k1, R0.shape[0] // k1, k1, R0.shape[1] // k1)),
            m=self.m,
            slab_width=self.k2,
            extended=self.extended,
            breakdown=self.breakdown,
            exact=self.exact,
        )


def global_arnoldi(A: Tensor4, B: Tensor4, m: int) -> GlobalKrylovDecomp:
    """Classic global Arnoldi process, ``m`` steps.

    Returns the basis ``V_{m+1}`` with ``V_1 = B / ||B||`` and the
    ``(m+1) x m`` Hessenberg matrix of trace inner products.
    """
    return ArnoldiProcess(A, B, "classic-global").run(m).global_decomp()


def extended_global_arnoldi(
    A: Tensor4, B: Tensor4, m: int, factor: FactorizedOp | None = None, Tbar_method: str = "auto"
) -> GlobalKrylovDecomp:
    """Extended global Arnoldi process on ``{..., A^{-1}*B, B, A*B, ...}``.

    Each step expands ``[A * V_j^1, A^{-1} * V_j^2]`` and closes with a
    global QR.  ``Tbar`` is obtained through :func:`compute_Tm`.
    """
    proc = ArnoldiProcess(A, B, "ext-global", factor=factor).run(m)
    return proc.global_decomp(Tbar_method)


def extended_block_arnoldi(
    A: Tensor4, B: Tensor4, m: int, factor: FactorizedOp | None = None, Tbar_method: str = "auto"
) -> BlockKrylovDecomp:
    """Extended block Arnoldi process with tensor QR closures."""
    proc = ArnoldiProcess(A, B, "ext-block", factor=factor).run(m)
    return proc.block_decomp(Tbar_method)


def classic_block_arnoldi(A: Tensor4, B: Tensor4, m: int) -> BlockKrylovDecomp:
    """Block Arnoldi on ``{B, A*B, ..., A^{m-1}*B}``; no solves with ``A``."""
    return ArnoldiProcess(A, B, "classic-block").run(m).block_decomp()


def compute_Tm(Hbar: np.ndarray, omega: np.ndarray, m: int, block: int = 1,
               pivot_tol: float = 1e-12) -> np.ndarray:
    """Projected operator of an extended Arnoldi run from its loop data.

    Parameters
    ----------
    Hbar : ndarray, shape (2(m+1)b, 2mb)
        Loop coefficients of the extended process.
    omega : ndarray, shape (2b, 2b)
        Upper triangular factor of the initial pair ``[B, A^{-1}*B]``.
    m : int
    block : int
        ``b``; 1 for the global process, ``k1*k2`` for the block one.

    Returns
    -------
    ndarray, shape (2(m+1)b, 2mb)

    Notes
    -----
    Odd block columns are copied from ``Hbar``; even ones come from
    multiplying the ``A^{-1}`` expansions by ``A``.  Raises
    ``ZeroDivisionError`` when a pivot block is (numerically) singular.
    """
    b = block
    Hbar = np.asarray(Hbar, dtype=float)
    omega = np.asarray(omega, dtype=float)
    rows = 2 * (m + 1) * b
    if Hbar.shape != (rows, 2 * m * b):
        raise DimensionError(f"Hbar has shape {Hbar.shape}, expected {(rows, 2 * m * b)}")
    if omega.shape != (2 * b, 2 * b):
        raise DimensionError(f"omega has shape {omega.shape}, expected {(2 * b, 2 * b)}")

    def blk(c):
        return slice(c * b, (c + 1) * b)

    def right_solve(M, P):
        # M @ inv(P) for an upper triangular pivot block P
        d = np.abs(np.diag(P))
        if d.min() <= pivot_tol * max(np.abs(P).max(), 1.0):
            raise ZeroDivisionError("negligible pivot in the T_m recursion")
        return np.linalg.solve(P.T, M.T).T

    T = np.zeros((rows, 2 * m * b))
    for j in range(m):
        T[:, blk(2 * j)] = Hbar[:, blk(2 * j)]
    E = np.eye(rows)
    R11, R12, R22 = omega[:b, :b], omega[:b, b:], omega[b:, b:]
    T[:, blk(1)] = right_solve(E[:, blk(0)] @ R11 - T[:, blk(0)] @ R12, R22)
    for j in range(1, m):
        c = 2 * j - 1
        acc = E[:, blk(c)] - T[:, : (2 * j + 1) * b] @ Hbar[: (2 * j + 1) * b, blk(c)]
        T[:, blk(2 * j + 1)] = right_solve(acc, Hbar[blk(2 * j + 1), blk(c)])
    return T


def recursion_growth(Hbar: np.ndarray, omega: np.ndarray, m: int, block: int = 1) -> float:
    """Rough amplification factor of rounding errors in :func:`compute_Tm`.

    Every even block column divides by a pivot block, multiplying the error
    already present by about ``||Hbar|| / sigma_min(pivot)``.
    """
    b = block
    hscale = np.abs(Hbar).max() if Hbar.size else 0.0
    pairs = [(omega[b:, b:], np.abs(omega).max())]
    pairs += [(Hbar[(2 * j + 1) * b:(2 * j + 2) * b, (2 * j - 1) * b:(2 * j) * b], hscale)
              for j in range(1, m)]
    growth = 1.0
    for P, scale in pairs:
        d = np.abs(np.diag(P)).min()
        if d == 0.0:
            return np.inf
        growth *= 1.0 + scale / d
    return growth


def direct_projection(A: Tensor4, decomp) -> np.ndarray:
    """``basis^T <> (A * V)`` (global) or ``basis^T * (A * V)`` (block),
    computed from scratch; the oracle for ``Hbar``/``Tbar``."""
    V = decomp.basis.unfold()
    Amat = A.unfold()
    if isinstance(decomp, GlobalKrylovDecomp):
        K = decomp.basis.dims[2] * decomp.slab_width
        Vm = V[:, : decomp.order * K]
        return _slab_gram(V, np.asarray(Amat @ Vm), K)
    Vm = V[:, : decomp.order]
    return V.T @ np.asarray(Amat @ Vm)


def orthonormality_error(decomp) -> float:
    """``||basis^T <> basis - I||`` or ``||basis^T * basis - I||``."""
    V = decomp.basis.unfold()
    if isinstance(decomp, GlobalKrylovDecomp):
        K = decomp.basis.dims[2] * decomp.slab_width
        G = _slab_gram(V, V, K)
    else:
        G = V.T @ V
    return float(np.linalg.norm(G - np.eye(G.shape[0])))


def decomposition_residual(A: Tensor4, decomp) -> float:
    """Frobenius norm of ``A * V_m - V_{m+1} * (Hbar (x) I)`` (global) or
    ``A * V_m - V_{m+1} * Tbar`` (block).

    Uses ``Tbar`` for the extended processes and ``Hbar`` otherwise.  After
    an exact breakdown the missing last block is treated as zero.
    """
    V = decomp.basis.unfold()
    Amat = A.unfold()
    if isinstance(decomp, GlobalKrylovDecomp):
        K = decomp.basis.dims[2] * decomp.slab_width
        M = decomp.projected_bar
        Vm = V[:, : decomp.order * K]
        rows = min(M.shape[0], V.shape[1] // K)
        rhs = _slab_combine(V[:, : rows * K], M[:rows], K)
    else:
        M = decomp.Tbar.unfold()
        Vm = V[:, : decomp.order]
        rows = min(M.shape[0], V.shape[1])
        rhs = V[:, :rows] @ M[:rows]
    return float(np.linalg.norm(np.asarray(Amat @ Vm) - rhs))
