import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dec, dense, random_tensor, tens
from einkrylov import (
    DimensionError,
    RankDeficiencyError,
    SingularOperatorError,
    Tensor4,
    block_assemble,
    block_extract,
    boxtimes,
    diamond,
    einstein,
    factorize,
    fold,
    fro_norm,
    identity,
    inner,
    inverse,
    mode4_concat,
    mode4_slice,
    read_coo,
    read_dense,
    solve,
    spectral_radius,
    spectrum,
    tqr,
    trace4,
    transpose4,
    tsvd,
    unfold,
    write_coo,
    write_dense,
    zeros,
)

ext = st.integers(1, 4)
seeds = st.integers(0, 2**32 - 1)


# --- Tensor4 storage ------------------------------------------------------

def test_ivec_entry_maps_to_row2_col1():
    arr = np.zeros((2, 2, 2, 2))
    arr[1, 0, 0, 0] = 1.0  # 1-based (2,1,1,1)
    M = unfold(Tensor4(arr))
    assert M[1, 0] == 1.0 and M.sum() == 1.0


def test_ivec_general_entry():
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((2, 3, 4, 5))
    M = unfold(Tensor4(arr))
    for j1, j2, k1, k2 in [(1, 2, 3, 4), (0, 1, 2, 0), (1, 0, 0, 3)]:
        assert M[j1 + 2 * j2, k1 + 4 * k2] == arr[j1, j2, k1, k2]


def test_rejects_bad_dims():
    with pytest.raises(DimensionError):
        Tensor4(np.zeros((2, 2, 2)))
    with pytest.raises(DimensionError):
        Tensor4(np.zeros((4, 5)), (2, 2, 2, 2))
    with pytest.raises(DimensionError):
        zeros((0, 1, 1, 1))


def test_caller_array_stays_writeable():
    M = np.ones((4, 4))
    T = Tensor4(M, (2, 2, 2, 2))
    M[0, 0] = 5.0
    assert T.unfold()[0, 0] == 1.0


def test_from_coo_rejects_duplicates_and_range():
    with pytest.raises(DimensionError):
        Tensor4.from_coo((2, 2, 1, 1), [[0, 0, 0, 0], [0, 0, 0, 0]], [1.0, 2.0])
    with pytest.raises(DimensionError):
        Tensor4.from_coo((2, 2, 1, 1), [[2, 0, 0, 0]], [1.0])


def test_fold_unfold_roundtrip():
    rng = np.random.default_rng(1)
    A = random_tensor(rng, (2, 3, 4, 5))
    B = fold(unfold(A), A.dims)
    assert B.dims == A.dims and np.array_equal(B.array, A.array)
    with pytest.raises(DimensionError):
        fold(np.zeros((5, 5)), (2, 3, 4, 5))


# --- einstein / transpose / trace / inner ------------------------------------

def test_einstein_oracle_seed7(oracle):
    o = oracle("einstein_seed7")
    C = einstein(tens(o["A"]), tens(o["B"]))
    np.testing.assert_allclose(C.array, dec(o["C"]), rtol=0, atol=1e-14)


def test_einstein_identity_and_zero():
    rng = np.random.default_rng(2)
    B = random_tensor(rng, (2, 3, 4, 1))
    assert np.array_equal(einstein(identity(2, 3), B).array, B.array)
    assert fro_norm(einstein(zeros((5, 2, 2, 3)), B)) == 0.0


def test_einstein_dimension_mismatch():
    with pytest.raises(DimensionError):
        einstein(zeros((2, 2, 2, 3)), zeros((2, 2, 2, 2)))


def test_einstein_sparse_matches_dense():
    rng = np.random.default_rng(3)
    M = sp.random(12, 12, density=0.3, random_state=3, format="csr")
    A = Tensor4(M, (3, 4, 3, 4))
    B = random_tensor(rng, (3, 4, 2, 2))
    np.testing.assert_allclose(dense(einstein(A, B)), M.toarray() @ dense(B), atol=1e-14)


def test_transpose_oracle_seed1(oracle):
    o = oracle("transpose_seed1")
    A = tens(o["A"])
    At = transpose4(A)
    assert At.dims == (4, 5, 2, 3)
    np.testing.assert_array_equal(At.array, dec(o["At"]))
    np.testing.assert_array_equal(transpose4(At).array, A.array)


def test_transpose_identity():
    I = identity(3, 2)
    np.testing.assert_array_equal(transpose4(I).array, I.array)


def test_trace_oracle_seed3(oracle):
    o = oracle("trace_seed3")
    assert trace4(tens(o["A"])) == pytest.approx(o["trace"], abs=1e-14)


def test_trace_trivial():
    assert trace4(identity(3, 4)) == 12.0
    assert trace4(zeros((2, 3, 2, 3))) == 0.0
    with pytest.raises(DimensionError):
        trace4(zeros((2, 3, 3, 2)))


def test_inner_oracle_seed5(oracle):
    o = oracle("inner_seed5")
    assert inner(tens(o["X"]), tens(o["Y"])) == pytest.approx(o["inner"], abs=1e-14)


def test_norm_trivial():
    assert fro_norm(identity(2, 2)) == 2.0
    rng = np.random.default_rng(4)
    X = random_tensor(rng, (2, 3, 2, 2))
    assert inner(X, X) == pytest.approx(fro_norm(X) ** 2, rel=1e-14)
    with pytest.raises(DimensionError):
        inner(X, zeros((2, 3, 2, 1)))


def test_identity():
    np.testing.assert_array_equal(unfold(identity(3, 2)), np.eye(6))
    one = identity(1, 1)
    assert one.dims == (1, 1, 1, 1) and one.array.ravel().tolist() == [1.0]
    np.testing.assert_array_equal(dense(identity(2, 3, sparse=True)), np.eye(6))


# --- inverse / factorize / solve ----------------------------------------------

def test_inverse_oracle_seed4(oracle):
    o = oracle("inverse_seed4")
    Ainv = inverse(tens(o["A"]))
    np.testing.assert_allclose(Ainv.array, dec(o["Ainv"]), rtol=0, atol=1e-13 * o["cond"])


def test_inverse_trivial():
    np.testing.assert_array_equal(inverse(identity(2, 3)).array, identity(2, 3).array)
    A = Tensor4(2.0 * np.eye(6), (3, 2, 3, 2))
    np.testing.assert_allclose(unfold(inverse(A)), 0.5 * np.eye(6), atol=1e-15)


def test_solve_then_multiply_returns_input():
    rng = np.random.default_rng(5)
    A = Tensor4(rng.standard_normal((12, 12)) + 5 * np.eye(12), (3, 4, 3, 4))
    B = random_tensor(rng, (3, 4, 2, 3))
    X = solve(factorize(A), B)
    assert fro_norm(einstein(A, X) - B) <= 1e-10 * fro_norm(B)
    S = Tensor4(sp.csr_matrix(dense(A)), A.dims)
    Xs = solve(factorize(S), B)
    np.testing.assert_allclose(Xs.array, X.array, atol=1e-12)


def test_singular_operator_detected():
    M = np.eye(4)
    M[3, 3] = 0.0
    with pytest.raises(SingularOperatorError):
        factorize(Tensor4(M, (2, 2, 2, 2)))
    with pytest.raises(SingularOperatorError):
        factorize(Tensor4(sp.csr_matrix(M), (2, 2, 2, 2)))


# --- boxtimes / diamond -----------------------------------------------------------

def test_boxtimes_trivial():
    np.testing.assert_array_equal(boxtimes(np.eye(3), identity(2, 2)).array, identity(2, 6).array)
    np.testing.assert_array_equal(unfold(boxtimes([[2.0]], identity(2, 2))), 2 * np.eye(4))


def test_boxtimes_slices_are_kronecker():
    rng = np.random.default_rng(6)
    P = rng.standard_normal((2, 3))
    J = random_tensor(rng, (2, 2, 2, 2))
    R = boxtimes(P, J)
    assert R.dims == (2, 4, 2, 6)
    for i in range(2):
        np.testing.assert_allclose(R.array[i, :, i, :], np.kron(P, J.array[i, :, i, :]))
    assert R.array[0, :, 1, :].any() == 0
    with pytest.raises(DimensionError):
        boxtimes(P, zeros((2, 2, 2, 3)))


def test_boxtimes_product_rule():
    rng = np.random.default_rng(7)
    P, Q = rng.standard_normal((3, 2)), rng.standard_normal((2, 4))
    I = identity(2, 3)
    lhs = boxtimes(P @ Q, I)
    rhs = einstein(boxtimes(P, I), boxtimes(Q, I))
    np.testing.assert_allclose(lhs.array, rhs.array, atol=1e-14)


def test_diamond_orthonormal_and_single_slab():
    rng = np.random.default_rng(8)
    Q, _ = np.linalg.qr(rng.standard_normal((12, 6)))
    # two orthonormal columns per slab: scaling by 1/sqrt(2) gives unit slabs
    V = Tensor4(Q / np.sqrt(2), (3, 4, 2, 3))
    np.testing.assert_allclose(diamond(V, V, 1), np.eye(3), atol=1e-14)
    X, Y = random_tensor(rng, (3, 2, 2, 1)), random_tensor(rng, (3, 2, 2, 1))
    assert diamond(X, Y, 1).shape == (1, 1)
    assert diamond(X, Y, 1)[0, 0] == pytest.approx(inner(X, Y), rel=1e-14)
    with pytest.raises(DimensionError):
        diamond(X, Y, 2)


def test_diamond_linearity_items():
    rng = np.random.default_rng(9)
    dims = (3, 2, 2, 8)
    E, F, G = (random_tensor(rng, dims) for _ in range(3))
    S = rng.standard_normal((4, 4))
    k2 = 2
    np.testing.assert_allclose(diamond(E + F, G, k2), diamond(E, G, k2) + diamond(F, G, k2), atol=1e-12)
    np.testing.assert_allclose(diamond(E, F + G, k2), diamond(E, F, k2) + diamond(E, G, k2), atol=1e-12)
    FS = einstein(F, boxtimes(S, identity(2, k2)))
    np.testing.assert_allclose(diamond(E, FS, k2), diamond(E, F, k2) @ S, atol=1e-12)


# --- mode-4 slabs and block grids ---------------------------------------------------

def test_concat_slice():
    rng = np.random.default_rng(10)
    A = random_tensor(rng, (2, 3, 2, 2))
    assert mode4_concat([A]) is A
    parts = [random_tensor(rng, (2, 3, 2, 2)) for _ in range(3)]
    T = mode4_concat(parts)
    assert T.dims == (2, 3, 2, 6)
    for l, P in enumerate(parts):
        np.testing.assert_array_equal(mode4_slice(T, l, 2).array, P.array)
    # the first K2 mode-4 indices of |A B| recover A
    AB = mode4_concat([parts[0], parts[1]])
    np.testing.assert_array_equal(AB.array[:, :, :, :2], parts[0].array)
    with pytest.raises(IndexError):
        mode4_slice(T, 3, 2)
    with pytest.raises(DimensionError):
        mode4_concat([A, random_tensor(rng, (3, 2, 2, 2))])


def test_block_assemble_identity_and_roundtrip():
    I, O = identity(2, 3), zeros((2, 3, 2, 3))
    grid = [[I if i == j else O for j in range(3)] for i in range(3)]
    np.testing.assert_array_equal(block_assemble(grid).array, identity(2, 9).array)
    rng = np.random.default_rng(11)
    blocks = [[random_tensor(rng, (2, 3, 2, 3)) for _ in range(2)] for _ in range(3)]
    T = block_assemble(blocks)
    assert T.dims == (2, 9, 2, 6)
    for i in range(3):
        for j in range(2):
            np.testing.assert_array_equal(block_extract(T, i, j, 3).array, blocks[i][j].array)
    with pytest.raises(DimensionError):
        block_assemble([[I, O], [I]])


def test_block_product_oracle_seed8(oracle):
    o = oracle("block_product_seed8")
    M = block_assemble([[tens(b) for b in row] for row in o["M"]])
    A, B = dec(o["A"]), dec(o["B"])
    stacked = Tensor4(np.concatenate([A, B], axis=1))  # mode-2 stack |A B|_1
    np.testing.assert_allclose(einstein(M, stacked).array, dec(o["expected"]), atol=1e-13)


# --- tqr / tsvd / spectrum -------------------------------------------------------

def test_tqr_oracle_seed2(oracle):
    o = oracle("tqr_seed2")
    Q, R = tqr(tens(o["W"]))
    np.testing.assert_allclose(Q.array, dec(o["Q"]), atol=1e-13)
    np.testing.assert_allclose(R.array, dec(o["R"]), atol=1e-13)


def test_tqr_orthonormal_input_and_duplicates():
    Q0, _ = np.linalg.qr(np.random.default_rng(12).standard_normal((16, 4)))
    W = Tensor4(Q0, (4, 4, 2, 2))
    Q, R = tqr(W)
    np.testing.assert_allclose(np.abs(dense(R)), np.eye(4), atol=1e-14)
    np.testing.assert_allclose(np.abs(dense(Q)), np.abs(Q0), atol=1e-14)
    slab = mode4_slice(W, 0, 1)
    with pytest.raises(RankDeficiencyError):
        tqr(mode4_concat([slab, slab]))


def test_tsvd_oracle_seed13(oracle):
    o = oracle("tsvd_seed13")
    X = tens(o["X"])
    U, S, V = tsvd(X)
    s = np.diag(dense(S))
    np.testing.assert_allclose(s, dec(o["sigma"]), rtol=1e-13)
    rebuilt = einstein(einstein(U, S), transpose4(V))
    assert fro_norm(rebuilt - X) <= 1e-10 * fro_norm(X)


def test_tsvd_trivial():
    U, S, V = tsvd(identity(2, 2))
    np.testing.assert_allclose(np.diag(dense(S)), np.ones(4))
    rng = np.random.default_rng(13)
    a = rng.standard_normal((6, 1))
    b = rng.standard_normal((4, 1))
    _, S, _ = tsvd(Tensor4(a @ b.T, (3, 2, 2, 2)))
    s = np.diag(dense(S))
    assert s[0] == pytest.approx(np.linalg.norm(a) * np.linalg.norm(b), rel=1e-13)
    assert np.all(s[1:] < 1e-14 * s[0])


def test_spectrum_oracle_seed17(oracle):
    o = oracle("spectrum_seed17")
    ev = spectrum(tens(o["A"]))
    ev = ev[np.lexsort((ev.imag, ev.real))]
    np.testing.assert_allclose(ev, dec(o["eig"]), atol=1e-13)


def test_spectrum_trivial():
    np.testing.assert_allclose(spectrum(identity(2, 2)), np.ones(4))
    D = Tensor4(np.diag([0.1, 0.2, 0.3, 0.4]), (2, 2, 2, 2))
    np.testing.assert_allclose(np.sort(spectrum(D).real), [0.1, 0.2, 0.3, 0.4])
    assert spectral_radius(D) == pytest.approx(0.4)


def test_spectral_radius_sparse_paths():
    n = 50
    M = sp.diags([np.full(n * n, 0.7), np.full(n * n - 1, 0.1)], [0, 1], format="csr")
    assert spectral_radius(Tensor4(M, (n, n, n, n))) == pytest.approx(0.7)
    D = sp.diags(np.linspace(-0.95, 0.5, n * n), format="csr") + sp.diags(np.full(n * n - 1, 1e-3), -1)
    assert spectral_radius(Tensor4(D.tocsr(), (n, n, n, n))) == pytest.approx(0.95, rel=1e-6)


# --- file formats -------------------------------------------------------------------

def test_coo_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    arr = rng.standard_normal((2, 3, 2, 1))
    arr[arr < 0] = 0.0
    A = Tensor4(arr)
    path = tmp_path / "a.coo"
    write_coo(path, A)
    header = path.read_text().splitlines()[0].split()
    assert header == ["2", "3", "2", "1", str(np.count_nonzero(arr))]
    B = read_coo(path)
    assert B.dims == A.dims
    np.testing.assert_array_equal(dense(B), dense(A))


def test_coo_one_based(tmp_path):
    path = tmp_path / "e.coo"
    path.write_text("2 2 1 1 1\n2 1 1 1 3.5\n")
    T = read_coo(path)
    assert T.array[1, 0, 0, 0] == 3.5


def test_dense_roundtrip(tmp_path):
    rng = np.random.default_rng(15)
    A = random_tensor(rng, (2, 3, 4, 1))
    path = tmp_path / "a.bin"
    write_dense(path, A)
    raw = path.read_bytes()
    assert len(raw) == 4 * 8 + A.array.size * 8
    assert np.frombuffer(raw[:32], "<i8").tolist() == [2, 3, 4, 1]
    # payload in first-index-fastest order
    np.testing.assert_array_equal(np.frombuffer(raw[32:], "<f8"), A.array.ravel(order="F"))
    np.testing.assert_array_equal(read_dense(path).array, A.array)


# --- properties ---------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(a1=ext, a2=ext, c1=ext, c2=ext, b1=ext, b2=ext, seed=seeds)
def test_homomorphism_property(a1, a2, c1, c2, b1, b2, seed):
    rng = np.random.default_rng(seed)
    A = random_tensor(rng, (a1, a2, c1, c2))
    B = random_tensor(rng, (c1, c2, b1, b2))
    lhs = unfold(einstein(A, B))
    rhs = unfold(A) @ unfold(B)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(unfold(A)) * np.linalg.norm(unfold(B))


@settings(max_examples=40, deadline=None)
@given(a1=ext, a2=ext, c1=ext, c2=ext, b1=ext, b2=ext, seed=seeds)
def test_transpose_of_product_property(a1, a2, c1, c2, b1, b2, seed):
    rng = np.random.default_rng(seed)
    A = random_tensor(rng, (a1, a2, c1, c2))
    B = random_tensor(rng, (c1, c2, b1, b2))
    lhs = transpose4(einstein(A, B))
    rhs = einstein(transpose4(B), transpose4(A))
    np.testing.assert_allclose(lhs.array, rhs.array, atol=1e-12)
    np.testing.assert_allclose(einstein(identity(a1, a2), A).array, A.array)
    np.testing.assert_allclose(einstein(A, identity(c1, c2)).array, A.array)


@settings(max_examples=40, deadline=None)
@given(d=st.tuples(ext, ext, ext, ext), seed=seeds, alpha=st.floats(-3, 3))
def test_inner_symmetric_bilinear_property(d, seed, alpha):
    rng = np.random.default_rng(seed)
    X, Y, Z = (random_tensor(rng, d) for _ in range(3))
    assert inner(X, Y) == pytest.approx(inner(Y, X), rel=1e-12, abs=1e-12)
    lhs = inner(X * alpha + Y, Z)
    assert lhs == pytest.approx(alpha * inner(X, Z) + inner(Y, Z), rel=1e-10, abs=1e-10)
    assert fro_norm(X) ** 2 == pytest.approx(np.sum(X.array ** 2), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(n1=st.integers(2, 4), n2=st.integers(2, 4), k1=st.integers(1, 2), p=st.integers(1, 3), seed=seeds)
def test_tqr_property(n1, n2, k1, p, seed):
    rng = np.random.default_rng(seed)
    if n1 * n2 < k1 * p:
        return
    W = random_tensor(rng, (n1, n2, k1, p))
    Q, R = tqr(W)
    QtQ = unfold(einstein(transpose4(Q), Q))
    assert np.abs(QtQ - np.eye(k1 * p)).max() <= 1e-10
    assert fro_norm(einstein(Q, R) - W) <= 1e-10 * fro_norm(W)
    Rm = dense(R)
    assert np.allclose(np.tril(Rm, -1), 0) and np.all(np.diag(Rm) >= 0)


@settings(max_examples=40, deadline=None)
@given(d=st.tuples(ext, ext, ext, ext), seed=seeds)
def test_tsvd_property(d, seed):
    X = random_tensor(np.random.default_rng(seed), d)
    U, S, V = tsvd(X)
    s = np.diag(dense(S))
    # LAPACK may take a different driver without vectors: allow a few ulps
    np.testing.assert_allclose(s, np.linalg.svd(unfold(X), compute_uv=False), rtol=1e-14, atol=1e-300)
    assert np.all(np.diff(s) <= 0)
    rebuilt = einstein(einstein(U, S), transpose4(V))
    assert fro_norm(rebuilt - X) <= 1e-10 * max(fro_norm(X), 1e-300)


@settings(max_examples=40, deadline=None)
@given(n1=ext, n2=ext, k1=ext, k2=ext, p=st.integers(1, 3), seed=seeds)
def test_diamond_linearity_property(n1, n2, k1, k2, p, seed):
    rng = np.random.default_rng(seed)
    dims = (n1, n2, k1, p * k2)
    E, F, G = (random_tensor(rng, dims) for _ in range(3))
    S = rng.standard_normal((p, p))
    scale = fro_norm(E) * (fro_norm(F) + fro_norm(G)) * (1 + np.abs(S).sum())
    tol = 1e-12 * scale
    assert np.abs(diamond(E + F, G, k2) - diamond(E, G, k2) - diamond(F, G, k2)).max() <= tol
    assert np.abs(diamond(E, F + G, k2) - diamond(E, F, k2) - diamond(E, G, k2)).max() <= tol
    FS = einstein(F, boxtimes(S, identity(k1, k2)))
    assert np.abs(diamond(E, FS, k2) - diamond(E, F, k2) @ S).max() <= tol
