import numpy as np
import pytest
import scipy.sparse as sp

from flowassim.sparse import (AssemblyPattern, SingularMatrixError, lu_factor, lu_solve, spmv, to_csr,
                              transpose_spmv, write_matrix_market)
from oracle import dense_solve


def test_duplicates_summed():
    A = to_csr([0, 0], [0, 0], [1.0, 2.0], 1, 1)
    assert A.nnz == 1 and A[0, 0] == 3.0


def test_empty_triplets():
    A = to_csr([], [], [], 3, 4)
    assert A.shape == (3, 4) and A.nnz == 0


def test_out_of_range():
    with pytest.raises(IndexError):
        to_csr([2], [0], [1.0], 2, 2)


def test_canonical_csr():
    rng = np.random.default_rng(1)
    r, c = rng.integers(0, 10, 200), rng.integers(0, 10, 200)
    A = to_csr(r, c, rng.standard_normal(200), 10, 10)
    for i in range(10):
        idx = A.indices[A.indptr[i]:A.indptr[i + 1]]
        assert (np.diff(idx) > 0).all()


def test_identity_solve():
    b = np.arange(5.0)
    assert np.array_equal(lu_solve(sp.identity(5, format="csr"), b), b)


def test_two_by_two():
    x = lu_solve(sp.csr_matrix([[2.0, 1.0], [1.0, 3.0]]), np.array([3.0, 4.0]))
    assert np.allclose(x, [1.0, 1.0], atol=1e-14)


def test_zero_matrix_singular():
    with pytest.raises(SingularMatrixError) as exc:
        lu_solve(sp.csr_matrix((3, 3)), np.ones(3))
    assert exc.value.pivot == 0


def test_rank_deficient_singular():
    A = sp.csr_matrix([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(SingularMatrixError):
        lu_solve(A, np.ones(2))


def test_residual_bound_and_transpose():
    rng = np.random.default_rng(3)
    n = 50
    A = sp.random(n, n, density=0.1, random_state=4, format="csr") + 5 * sp.identity(n)
    b = rng.standard_normal(n)
    f = lu_factor(A)
    for trans, M in ((False, A), (True, A.T)):
        x = f.solve(b, trans=trans)
        r = np.abs(M @ x - b).max()
        assert r <= 1e-10 * (abs(M).sum(axis=1).max() * np.abs(x).max() + np.abs(b).max())


def test_permuted_factor():
    rng = np.random.default_rng(5)
    n = 30
    A = sp.random(n, n, density=0.2, random_state=6, format="csr") + 4 * sp.identity(n)
    perm = rng.permutation(n)
    b = rng.standard_normal(n)
    x = lu_factor(A, perm).solve(b)
    assert np.allclose(A @ x, b, atol=1e-12)
    y = lu_factor(A, perm).solve(b, trans=True)
    assert np.allclose(A.T @ y, b, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_lu_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 21))
    D = rng.standard_normal((n, n)) * (rng.random((n, n)) < 0.4) + (n ** 0.5) * np.eye(n)
    b = rng.standard_normal(n)
    x = lu_solve(sp.csr_matrix(D), b)
    assert np.allclose(x, dense_solve(D, b), rtol=0, atol=1e-10 * max(1, np.abs(x).max()))


def test_spmv_examples():
    I = sp.identity(3, format="csr")
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(spmv(I, x), x)
    A = sp.csr_matrix([[1.0, 2.0], [3.0, 4.0]])
    assert np.allclose(spmv(A, [1.0, 1.0]), [3.0, 7.0])
    assert np.allclose(transpose_spmv(A, [1.0, 1.0]), [4.0, 6.0])
    with pytest.raises(ValueError):
        spmv(A, np.ones(3))
    with pytest.raises(ValueError):
        transpose_spmv(A, np.ones(3))


def test_assembly_pattern_matches_coo():
    rng = np.random.default_rng(2)
    ld = rng.integers(0, 12, size=(15, 4))
    ld = np.array([rng.permutation(12)[:4] for _ in range(15)])
    K = rng.standard_normal((15, 4, 4))
    pat = AssemblyPattern(ld, 12)
    A = pat.matrix(K)
    R = np.repeat(ld, 4, axis=1).reshape(15, 4, 4)
    C = np.tile(ld, (1, 4)).reshape(15, 4, 4)
    B = to_csr(R, C, K, 12, 12)
    assert abs(A - B).max() < 1e-14
    rows = np.unique(ld)[:3]
    Aid = pat.matrix(K, identity_rows=rows).toarray()
    for r in rows:
        e = np.zeros(12)
        e[r] = 1
        assert np.array_equal(Aid[r], e)


def test_matrix_market(tmp_path):
    A = sp.csr_matrix([[1.0, 0.0], [0.5, 2.0]])
    write_matrix_market(tmp_path / "a.mtx", A, comment="test")
    import scipy.io
    B = scipy.io.mmread(str(tmp_path / "a.mtx"))
    assert abs(sp.csr_matrix(B) - A).max() == 0
