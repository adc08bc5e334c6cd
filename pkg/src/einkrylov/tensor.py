"""Fourth-order tensors and the Einstein-product primitives.

A :class:`Tensor4` of dims ``(d1, d2, d3, d4)`` is stored through its
unfolding, the ``(d1*d2) x (d3*d4)`` matrix whose row index is
``j1 + j2*d1`` and column index ``k1 + k2*d3`` (0-based, first index
fastest).  With that linearization folding and unfolding are plain
Fortran-order reshapes, and the Einstein product of two tensors is carried
to the matrix product of their unfoldings.

Dense tensors hold a numpy array, sparse ones a CSR matrix of the
unfolding.  Values are treated as immutable once wrapped.
"""

from __future__ import annotations

import struct
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "TensorError",
    "DimensionError",
    "SingularOperatorError",
    "RankDeficiencyError",
    "Tensor4",
    "FactorizedOp",
    "einstein",
    "transpose4",
    "trace4",
    "inner",
    "fro_norm",
    "identity",
    "zeros",
    "unfold",
    "fold",
    "inverse",
    "factorize",
    "solve",
    "boxtimes",
    "diamond",
    "mode4_concat",
    "mode4_slice",
    "block_assemble",
    "block_extract",
    "tqr",
    "tsvd",
    "spectrum",
    "spectral_radius",
    "read_coo",
    "write_coo",
    "read_dense",
    "write_dense",
]

# tqr declares a column dependent below this fraction of the reference norm
RANK_TOL = 1e-12


class TensorError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(TensorError, ValueError):
    """Raised when tensor extents are not conformal."""


class SingularOperatorError(TensorError):
    """Raised when a square operator is singular to working precision."""


class RankDeficiencyError(TensorError):
    """Raised when a tensor QR finds linearly dependent columns."""


def _check_dims(dims) -> tuple[int, int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or any(d < 1 for d in dims):
        raise DimensionError(f"expected four positive extents, got {dims}")
    return dims


class Tensor4:
    """Real 4th-order tensor, dense or sparse.

    Parameters
    ----------
    data : array_like or scipy sparse matrix
        Either a 4-way array of shape ``dims`` or, when ``dims`` is given,
        the unfolding matrix of shape ``(d1*d2, d3*d4)``.  Sparse input is
        always interpreted as an unfolding.
    dims : tuple of int, optional
        Extents; required for unfolding input.
    """

    __slots__ = ("dims", "_mat")

    def __init__(self, data, dims=None):
        if sp.issparse(data):
            if dims is None:
                raise DimensionError("sparse data needs explicit dims")
            dims = _check_dims(dims)
            mat = sp.csr_matrix(data, dtype=float)
            mat.sum_duplicates()
        else:
            arr = np.asarray(data, dtype=float)
            if dims is None:
                if arr.ndim != 4:
                    raise DimensionError(f"expected a 4-way array, got ndim={arr.ndim}")
                dims = _check_dims(arr.shape)
                mat = arr.reshape(dims[0] * dims[1], dims[2] * dims[3], order="F")
            else:
                dims = _check_dims(dims)
                if arr.ndim == 4:
                    if arr.shape != dims:
                        raise DimensionError(f"array shape {arr.shape} != dims {dims}")
                    mat = arr.reshape(dims[0] * dims[1], dims[2] * dims[3], order="F")
                else:
                    mat = arr
            if mat.flags.writeable:
                # never freeze an array the caller still owns
                mat = mat.copy()
            mat.setflags(write=False)
        if mat.shape != (dims[0] * dims[1], dims[2] * dims[3]):
            raise DimensionError(f"unfolding shape {mat.shape} does not match dims {dims}")
        self.dims = dims
        self._mat = mat

    # construction helpers -------------------------------------------------

    @classmethod
    def from_coo(cls, dims, indices, values) -> "Tensor4":
        """Build a sparse tensor from 0-based index quadruples."""
        dims = _check_dims(dims)
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, 4)
        vals = np.asarray(values, dtype=float).ravel()
        if len(idx) != len(vals):
            raise DimensionError("indices and values differ in length")
        if len(idx) and (np.any(idx < 0) or np.any(idx >= np.array(dims))):
            raise DimensionError("index quadruple out of range")
        rows = idx[:, 0] + idx[:, 1] * dims[0]
        cols = idx[:, 2] + idx[:, 3] * dims[2]
        keys = rows * (dims[2] * dims[3]) + cols
        if len(np.unique(keys)) != len(keys):
            raise DimensionError("duplicate index quadruples")
        mat = sp.coo_matrix((vals, (rows, cols)), shape=(dims[0] * dims[1], dims[2] * dims[3]))
        return cls(mat, dims)

    # views ------------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.dims

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self._mat)

    @property
    def nnz(self) -> int:
        if self.is_sparse:
            return int(self._mat.nnz)
        return int(np.count_nonzero(self._mat))

    @property
    def array(self) -> np.ndarray:
        """Dense 4-way array (densifies sparse tensors)."""
        mat = self._mat.toarray() if self.is_sparse else self._mat
        return mat.reshape(self.dims, order="F")

    def unfold(self):
        return self._mat

    def to_dense(self) -> "Tensor4":
        if not self.is_sparse:
            return self
        return Tensor4(self._mat.toarray(), self.dims)

    def to_sparse(self) -> "Tensor4":
        if self.is_sparse:
            return self
        return Tensor4(sp.csr_matrix(self._mat), self.dims)

    @property
    def T(self) -> "Tensor4":
        return transpose4(self)

    # arithmetic -------------------------------------------------------------

    def _same_dims(self, other):
        if not isinstance(other, Tensor4):
            return NotImplemented
        if other.dims != self.dims:
            raise DimensionError(f"dims mismatch {self.dims} vs {other.dims}")
        return other

    def __add__(self, other):
        other = self._same_dims(other)
        if other is NotImplemented:
            return other
        return Tensor4(_densify_sum(self._mat + other._mat), self.dims)

    def __sub__(self, other):
        other = self._same_dims(other)
        if other is NotImplemented:
            return other
        return Tensor4(_densify_sum(self._mat - other._mat), self.dims)

    def __neg__(self):
        return Tensor4(-self._mat, self.dims)

    def __mul__(self, alpha):
        if not np.isscalar(alpha):
            return NotImplemented
        return Tensor4(self._mat * float(alpha), self.dims)

    __rmul__ = __mul__

    def __truediv__(self, alpha):
        if not np.isscalar(alpha):
            return NotImplemented
        return Tensor4(self._mat / float(alpha), self.dims)

    def __matmul__(self, other):
        return einstein(self, other)

    def __repr__(self):
        kind = "sparse" if self.is_sparse else "dense"
        return f"Tensor4(dims={self.dims}, {kind})"


def _densify_sum(mat):
    # sparse + dense comes back as np.matrix
    if isinstance(mat, np.matrix):
        return np.asarray(mat)
    return mat


def zeros(dims) -> Tensor4:
    dims = _check_dims(dims)
    return Tensor4(np.zeros((dims[0] * dims[1], dims[2] * dims[3])), dims)


def unfold(A: Tensor4):
    """Matricization of ``A`` (dense ndarray or CSR matrix)."""
    return A.unfold()


def fold(M, dims) -> Tensor4:
    """Inverse of :func:`unfold`."""
    dims = _check_dims(dims)
    if M.shape != (dims[0] * dims[1], dims[2] * dims[3]):
        raise DimensionError(f"matrix shape {M.shape} cannot fold into {dims}")
    if sp.issparse(M):
        return Tensor4(M, dims)
    return Tensor4(np.array(M, dtype=float), dims)


def einstein(A: Tensor4, B: Tensor4) -> Tensor4:
    """Einstein product contracting the last two modes of ``A`` with the
    first two of ``B``."""
    a1, a2, c1, c2 = A.dims
    if B.dims[:2] != (c1, c2):
        raise DimensionError(f"cannot contract {A.dims} with {B.dims}")
    dims = (a1, a2, B.dims[2], B.dims[3])
    if A.is_sparse or B.is_sparse:
        out = A._mat @ B._mat
        if sp.issparse(out):
            return Tensor4(out, dims)
        return Tensor4(np.asarray(out), dims)
    out = np.tensordot(A.array, B.array, axes=([2, 3], [0, 1]))
    return Tensor4(out)


def transpose4(A: Tensor4) -> Tensor4:
    d1, d2, d3, d4 = A.dims
    if A.is_sparse:
        return Tensor4(A._mat.T.tocsr(), (d3, d4, d1, d2))
    return Tensor4(np.ascontiguousarray(A._mat.T), (d3, d4, d1, d2))


def _check_square(A: Tensor4):
    d1, d2, d3, d4 = A.dims
    if (d1, d2) != (d3, d4):
        raise DimensionError(f"expected a square tensor, got {A.dims}")


def trace4(A: Tensor4) -> float:
    _check_square(A)
    return float(A._mat.diagonal().sum())


def inner(X: Tensor4, Y: Tensor4) -> float:
    """Trace inner product ``tr(X^T * Y)``."""
    if X.dims != Y.dims:
        raise DimensionError(f"dims mismatch {X.dims} vs {Y.dims}")
    if X.is_sparse:
        return float(X._mat.multiply(Y._mat).sum())
    if Y.is_sparse:
        return float(Y._mat.multiply(X._mat).sum())
    return float(np.vdot(X._mat, Y._mat))


def fro_norm(X: Tensor4) -> float:
    if X.is_sparse:
        return float(np.linalg.norm(X._mat.data))
    return float(np.linalg.norm(X._mat))


def identity(k1: int, k2: int, sparse: bool = False) -> Tensor4:
    n = int(k1) * int(k2)
    if sparse:
        return Tensor4(sp.identity(n, format="csr"), (k1, k2, k1, k2))
    return Tensor4(np.eye(n), (k1, k2, k1, k2))


class FactorizedOp:
    """LU factorization of a square tensor's unfolding, reusable for solves.

    Sparse operators go through SuperLU, dense ones through LAPACK.
    """

    def __init__(self, A: Tensor4):
        _check_square(A)
        self.dims = A.dims
        n = A._mat.shape[0]
        if A.is_sparse:
            try:
                self._lu = spla.splu(A._mat.tocsc())
            except RuntimeError as exc:
                raise SingularOperatorError(str(exc)) from exc
            diag = np.abs(self._lu.U.diagonal())
            self._solve = self._lu.solve
        else:
            with warnings.catch_warnings():
                # singularity is reported below as an exception
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                lu, piv = sla.lu_factor(np.asarray(A._mat), check_finite=True)
            diag = np.abs(np.diag(lu))
            self._solve = lambda rhs: sla.lu_solve((lu, piv), rhs)
        scale = diag.max() if diag.size else 0.0
        if scale == 0.0 or diag.min() <= n * np.finfo(float).eps * scale:
            raise SingularOperatorError("operator is singular to working precision")

    def solve_matrix(self, rhs: np.ndarray) -> np.ndarray:
        return self._solve(np.asarray(rhs, dtype=float))

    def solve(self, B: Tensor4) -> Tensor4:
        if B.dims[:2] != self.dims[2:]:
            raise DimensionError(f"cannot solve {self.dims} against {B.dims}")
        rhs = B._mat.toarray() if B.is_sparse else B._mat
        return Tensor4(self.solve_matrix(rhs), (self.dims[0], self.dims[1], B.dims[2], B.dims[3]))


def factorize(A: Tensor4) -> FactorizedOp:
    return FactorizedOp(A)


def solve(F: FactorizedOp, B: Tensor4) -> Tensor4:
    """Return ``X`` with ``A * X = B`` for the factorized ``A``."""
    return F.solve(B)


def inverse(A: Tensor4) -> Tensor4:
    """Explicit inverse.  Dense; meant for small operators only."""
    F = FactorizedOp(A)
    n1, n2 = A.dims[:2]
    return Tensor4(F.solve_matrix(np.eye(n1 * n2)), A.dims)


def boxtimes(P, J: Tensor4) -> Tensor4:
    """Lift an ``m x n`` matrix ``P`` by a square tensor ``J`` of dims
    ``(k1, k2, k1, k2)``.

    The result ``R`` has dims ``(k1, m*k2, k1, n*k2)`` with
    ``R[i, :, i, :] = kron(P, J[i, :, i, :])`` and zeros elsewhere.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    k1, k2, k3, k4 = J.dims
    if (k1, k2) != (k3, k4):
        raise DimensionError(f"boxtimes needs a square tensor, got {J.dims}")
    m, n = P.shape
    Jarr = J.array
    R = np.zeros((k1, m * k2, k1, n * k2))
    for i in range(k1):
        R[i, :, i, :] = np.kron(P, Jarr[i, :, i, :])
    return Tensor4(R)


def _slabs(V: Tensor4, k2: int) -> np.ndarray:
    """View the unfolding as ``(rows, p, k1*k2)`` slab stack."""
    n1, n2, k1, pk2 = V.dims
    if pk2 % k2:
        raise DimensionError(f"slab width {k2} does not divide mode-4 extent {pk2}")
    mat = V._mat.toarray() if V.is_sparse else V._mat
    return mat.reshape(n1 * n2, pk2 // k2, k1 * k2)


def diamond(V: Tensor4, W: Tensor4, k2: int) -> np.ndarray:
    """Matrix of slab-wise trace inner products ``<V_i, W_j>``."""
    if V.dims[:3] != W.dims[:3]:
        raise DimensionError(f"incompatible leading dims {V.dims} vs {W.dims}")
    return np.tensordot(_slabs(V, k2), _slabs(W, k2), axes=([0, 2], [0, 2]))


def mode4_concat(parts: Sequence[Tensor4]) -> Tensor4:
    """Row block tensor along mode 4, in list order."""
    parts = list(parts)
    if not parts:
        raise DimensionError("nothing to concatenate")
    lead = parts[0].dims[:3]
    for P in parts:
        if P.dims[:3] != lead:
            raise DimensionError(f"incompatible leading dims {P.dims} vs {lead}")
    dims = lead + (sum(P.dims[3] for P in parts),)
    if len(parts) == 1:
        return parts[0]
    if any(P.is_sparse for P in parts):
        return Tensor4(sp.hstack([P._mat for P in parts], format="csr"), dims)
    return Tensor4(np.hstack([P._mat for P in parts]), dims)


def mode4_slice(T: Tensor4, slab_index: int, slab_width: int) -> Tensor4:
    """Slab ``slab_index`` (0-based) of width ``slab_width`` along mode 4."""
    n1, n2, k1, d4 = T.dims
    if d4 % slab_width:
        raise DimensionError(f"slab width {slab_width} does not divide {d4}")
    count = d4 // slab_width
    if not 0 <= slab_index < count:
        raise IndexError(f"slab {slab_index} out of range for {count} slabs")
    K = k1 * slab_width
    cols = slice(slab_index * K, (slab_index + 1) * K)
    mat = T._mat[:, cols]
    if not sp.issparse(mat):
        mat = np.array(mat)
    return Tensor4(mat, (n1, n2, k1, slab_width))


def block_assemble(blocks) -> Tensor4:
    """Assemble a grid of ``(k1, k2, k1, k2)`` tensors into one tensor of
    dims ``(k1, m*k2, k1, n*k2)``."""
    rows = [list(r) for r in blocks]
    if not rows or not rows[0]:
        raise DimensionError("empty block grid")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise DimensionError("ragged block grid")
    k1, k2 = rows[0][0].dims[:2]
    for r in rows:
        for b in r:
            if b.dims != (k1, k2, k1, k2):
                raise DimensionError(f"block dims {b.dims} != {(k1, k2, k1, k2)}")
    mats = [[b._mat.toarray() if b.is_sparse else b._mat for b in r] for r in rows]
    return Tensor4(np.block(mats), (k1, len(rows) * k2, k1, width * k2))


def block_extract(T: Tensor4, i: int, j: int, k2: int) -> Tensor4:
    """Block ``(i, j)`` (0-based) of a block tensor with block width ``k2``."""
    k1, mk2, k3, nk2 = T.dims
    if mk2 % k2 or nk2 % k2 or k1 != k3:
        raise DimensionError(f"{T.dims} is not a grid of width-{k2} blocks")
    if not (0 <= i < mk2 // k2 and 0 <= j < nk2 // k2):
        raise IndexError(f"block ({i}, {j}) out of range")
    K = k1 * k2
    mat = T._mat[i * K:(i + 1) * K, j * K:(j + 1) * K]
    mat = mat.toarray() if sp.issparse(mat) else np.array(mat)
    return Tensor4(mat, (k1, k2, k1, k2))


def tqr(W: Tensor4, ref_norm: float | None = None) -> tuple[Tensor4, Tensor4]:
    """Tensor QR ``W = Q * R`` with ``Q^T * Q = I`` and ``R`` upper triangular.

    Diagonal entries of the unfolded ``R`` are made nonnegative.  A column
    whose orthogonalized norm is below ``1e-12 * ref_norm`` (default: the
    Frobenius norm of ``W``) raises :class:`RankDeficiencyError`.
    """
    n1, n2, k1, d4 = W.dims
    M = W._mat.toarray() if W.is_sparse else np.asarray(W._mat)
    rows, cols = M.shape
    if rows < cols:
        raise RankDeficiencyError(f"{cols} columns cannot be independent in dimension {rows}")
    Q, R = np.linalg.qr(M, mode="reduced")
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    Q = Q * signs
    R = signs[:, None] * R
    ref = np.linalg.norm(M) if ref_norm is None else ref_norm
    if ref == 0 or np.min(np.diag(R)) < RANK_TOL * ref:
        raise RankDeficiencyError("dependent columns in tensor QR")
    return Tensor4(Q, W.dims), Tensor4(R, (k1, d4, k1, d4))


def tsvd(X: Tensor4) -> tuple[Tensor4, Tensor4, Tensor4]:
    """Einstein-product SVD ``X = U * S * V^T``."""
    d1, d2, d3, d4 = X.dims
    M = X._mat.toarray() if X.is_sparse else X._mat
    U, s, Vt = np.linalg.svd(M, full_matrices=True)
    S = np.zeros(M.shape)
    S[np.arange(s.size), np.arange(s.size)] = s
    return (
        Tensor4(U, (d1, d2, d1, d2)),
        Tensor4(S, X.dims),
        Tensor4(Vt.T, (d3, d4, d3, d4)),
    )


def spectrum(A: Tensor4) -> np.ndarray:
    """All eigenvalues of the unfolding (dense eigensolver)."""
    _check_square(A)
    M = A._mat.toarray() if A.is_sparse else A._mat
    return np.linalg.eigvals(M)


def spectral_radius(A: Tensor4, dense_limit: int = 2000) -> float:
    """Largest eigenvalue magnitude; ARPACK for large sparse operators."""
    _check_square(A)
    n = A._mat.shape[0]
    if n <= dense_limit:
        return float(np.max(np.abs(spectrum(A))))
    mat = A._mat
    if sp.issparse(mat) and (sp.triu(mat, k=1).nnz == mat.nnz - np.count_nonzero(mat.diagonal())):
        # upper triangular: eigenvalues sit on the diagonal
        return float(np.max(np.abs(mat.diagonal())))
    vals = spla.eigs(mat, k=1, which="LM", v0=np.ones(n), return_eigenvectors=False)
    return float(np.max(np.abs(vals)))


# file formats -------------------------------------------------------------


def write_coo(path, A: Tensor4) -> None:
    """Text COO: header ``d1 d2 d3 d4 nnz`` then 1-based ``j1 j2 k1 k2 value``."""
    d1, d2, d3, d4 = A.dims
    coo = sp.coo_matrix(A._mat)
    coo.sum_duplicates()
    keep = coo.data != 0
    rows, cols, vals = coo.row[keep], coo.col[keep], coo.data[keep]
    order = np.lexsort((rows, cols))
    rows, cols, vals = rows[order], cols[order], vals[order]
    j1, j2 = rows % d1, rows // d1
    k1, k2 = cols % d3, cols // d3
    with open(path, "w") as fh:
        fh.write(f"{d1} {d2} {d3} {d4} {len(vals)}\n")
        for q in zip(j1 + 1, j2 + 1, k1 + 1, k2 + 1, vals):
            fh.write(f"{q[0]} {q[1]} {q[2]} {q[3]} {q[4]:.17g}\n")


def read_coo(path) -> Tensor4:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 5:
            raise DimensionError(f"bad COO header in {path}")
        d1, d2, d3, d4, nnz = (int(x) for x in header)
        data = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 5))
    if data.shape[0] != nnz:
        raise DimensionError(f"expected {nnz} entries, found {data.shape[0]}")
    idx = data[:, :4].astype(np.int64) - 1
    return Tensor4.from_coo((d1, d2, d3, d4), idx, data[:, 4])


def write_dense(path, A: Tensor4) -> None:
    """Raw little-endian binary: four int64 extents, then float64 values in
    unfolding (first-index-fastest) order."""
    mat = A._mat.toarray() if A.is_sparse else np.asarray(A._mat)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4q", *A.dims))
        fh.write(mat.ravel(order="F").astype("<f8").tobytes())


def read_dense(path) -> Tensor4:
    raw = Path(path).read_bytes()
    dims = struct.unpack("<4q", raw[:32])
    vals = np.frombuffer(raw[32:], dtype="<f8")
    if vals.size != int(np.prod(dims)):
        raise DimensionError(f"{path}: payload size does not match dims {dims}")
    return Tensor4(vals.reshape(dims, order="F").astype(float), dims)
