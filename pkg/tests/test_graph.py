import numpy as np
import pytest

from conftest import lastfm_path, needs_lastfm
from drcsd.errors import ValidationError
from drcsd.graph import (SparseMatrix, bfs_distances, build_bipartite,
                         is_symmetric, read_matrix_text, spmatmul, spmv_dense,
                         symmetric_normalize, validate_matrix,
                         write_matrix_text)
from helpers import random_bipartite


def entries(m):
    return {(int(r), int(c)): float(v)
            for r, c, v in zip(m.row_entry_ids(), m.col_indices, m.values)}


class TestBuildBipartite:
    def test_g1_structure(self, g1):
        assert g1.adjacency.nnz == 6
        expected = {(0, 2): 1.0, (1, 2): 1.0, (1, 3): 1.0,
                    (2, 0): 1.0, (2, 1): 1.0, (3, 1): 1.0}
        assert entries(g1.adjacency) == expected
        assert g1.degrees.tolist() == [1.0, 2.0, 2.0, 1.0]

    def test_nonzeros_count_is_twice_pairs(self):
        train = random_bipartite(17, 23, 0.1, seed=4)
        g = build_bipartite(train)
        assert g.adjacency.nnz == 2 * len(train)

    def test_adjacency_equals_transpose(self, g1):
        a = g1.adjacency.to_scipy()
        assert (a != a.T).nnz == 0

    def test_bipartite_blocks_only(self):
        g = build_bipartite(random_bipartite(11, 13, 0.15, seed=1))
        rows = g.adjacency.row_entry_ids()
        cols = g.adjacency.col_indices
        user_side = rows < g.n_users
        assert np.all((cols >= g.n_users) == user_side)

    def test_empty_train_rejected(self):
        from drcsd.data import InteractionSet
        empty = InteractionSet(2, 2, np.empty((0, 2), dtype=np.int64))
        with pytest.raises(ValidationError):
            build_bipartite(empty)


class TestSpmatmul:
    def test_g1_square_against_dense(self, g1):
        a = g1.adjacency
        sq = spmatmul(a, a)
        dense = a.to_dense() @ a.to_dense()
        assert np.array_equal(sq.to_dense(), dense)
        got = entries(sq)
        assert got[(0, 0)] == 1.0 and got[(1, 1)] == 2.0
        assert got[(2, 2)] == 2.0 and got[(3, 3)] == 1.0
        assert got[(0, 1)] == 1.0 and got[(2, 3)] == 1.0
        assert got[(1, 0)] == 1.0 and got[(3, 2)] == 1.0

    def test_identity_is_neutral(self, g1):
        eye = SparseMatrix.identity(4)
        product = spmatmul(eye, g1.adjacency)
        assert entries(product) == entries(g1.adjacency)

    def test_square_of_symmetric_is_symmetric(self, g1):
        sq = spmatmul(g1.adjacency, g1.adjacency)
        assert is_symmetric(sq)

    def test_dimension_mismatch(self, g1):
        with pytest.raises(ValidationError):
            spmatmul(g1.adjacency, SparseMatrix.identity(7))

    def test_associativity_against_dense(self):
        rng = np.random.default_rng(9)
        for trial in range(5):
            n = 12
            mats = []
            for _ in range(3):
                mask = rng.random((n, n)) < 0.2
                mask = np.triu(mask, 1)
                dense = (mask | mask.T) * rng.random((n, n)).round(2)
                dense = np.triu(dense, 1) + np.triu(dense, 1).T
                rows, cols = np.nonzero(dense)
                mats.append(SparseMatrix.from_coo(n, rows, cols, dense[rows, cols]))
            ab_c = spmatmul(spmatmul(mats[0], mats[1]), mats[2])
            a_bc = spmatmul(mats[0], spmatmul(mats[1], mats[2]))
            assert np.max(np.abs(ab_c.to_dense() - a_bc.to_dense())) < 1e-10


class TestSpmvDense:
    def test_identity(self, g1):
        x = np.random.default_rng(0).normal(size=(4, 3))
        assert np.array_equal(spmv_dense(SparseMatrix.identity(4), x), x)

    def test_one_hot_probe_recovers_rows(self, g1):
        a = g1.adjacency
        assert np.array_equal(spmv_dense(a, np.eye(4)), a.to_dense())

    def test_random_against_dense(self):
        g = build_bipartite(random_bipartite(10, 10, 0.2, seed=7))
        x = np.random.default_rng(1).normal(size=(g.n, 5))
        got = spmv_dense(g.adjacency, x)
        want = g.adjacency.to_dense() @ x
        assert np.max(np.abs(got - want)) < 1e-12

    def test_dimension_mismatch(self, g1):
        with pytest.raises(ValidationError):
            spmv_dense(g1.adjacency, np.zeros((5, 2)))


class TestBfs:
    def test_g1_from_u1(self, g1):
        assert bfs_distances(g1, 0).tolist() == [0.0, 2.0, 1.0, 3.0]

    def test_isolated_source(self):
        from drcsd.data import InteractionSet
        # item 2 never interacted with: isolated node 4
        train = InteractionSet(2, 3, np.array([[0, 0], [1, 0], [1, 1]]))
        g = build_bipartite(train)
        dist = bfs_distances(g, 4)
        assert dist[4] == 0.0
        assert np.all(np.isinf(np.delete(dist, 4)))

    def test_bipartite_parity(self):
        g = build_bipartite(random_bipartite(9, 14, 0.12, seed=2))
        for source in (0, 3, g.n_users + 1):
            dist = bfs_distances(g, source)
            side = (np.arange(g.n) >= g.n_users).astype(int)
            reachable = np.isfinite(dist)
            parity = (dist[reachable].astype(int) + side[source]) % 2
            assert np.array_equal(parity, side[reachable] % 2)

    def test_source_out_of_range(self, g1):
        with pytest.raises(ValidationError):
            bfs_distances(g1, 99)


class TestSymmetricNormalize:
    def test_g1_values(self, g1):
        norm = symmetric_normalize(g1.adjacency)
        got = entries(norm)
        assert got[(0, 2)] == pytest.approx(1 / np.sqrt(2), abs=1e-12)
        assert got[(1, 2)] == pytest.approx(0.5, abs=1e-12)
        assert got[(1, 3)] == pytest.approx(1 / np.sqrt(2), abs=1e-12)

    def test_unit_degree_edge(self):
        m = SparseMatrix.from_coo(2, [0, 1], [1, 0], [1.0, 1.0])
        assert symmetric_normalize(m).values.tolist() == [1.0, 1.0]

    def test_contraction_bounds_for_binary_inputs(self):
        # Row sums of D^-1/2 A D^-1/2 can exceed 1 on irregular graphs (a
        # star's center row sums to sqrt(k)); the bounds that do hold are
        # row_sum(u) <= sqrt(deg(u)) and spectral norm <= 1.
        for seed in range(8):
            g = build_bipartite(random_bipartite(12, 15, 0.15, seed=seed))
            norm = symmetric_normalize(g.adjacency)
            sums = np.add.reduceat(
                np.concatenate([norm.values, [0.0]]), norm.row_offsets[:-1])
            sums[np.diff(norm.row_offsets) == 0] = 0.0
            assert np.all(sums <= np.sqrt(np.maximum(g.degrees, 1.0)) + 1e-12)
            eigs = np.linalg.eigvalsh(norm.to_dense())
            assert np.max(np.abs(eigs)) <= 1 + 1e-12

    def test_pattern_preserved_and_zero_rows_stay_zero(self, g1):
        masked = g1.adjacency.with_values(
            np.where(g1.adjacency.col_indices == 3, 0.0, g1.adjacency.values))
        masked = masked.with_values(
            np.where(g1.adjacency.row_entry_ids() == 3, 0.0, masked.values))
        norm = symmetric_normalize(masked)
        assert np.array_equal(norm.row_offsets, g1.adjacency.row_offsets)
        assert np.array_equal(norm.col_indices, g1.adjacency.col_indices)
        assert np.all(np.isfinite(norm.values))

    def test_negative_values_rejected(self):
        m = SparseMatrix.from_coo(2, [0, 1], [1, 0], [-1.0, -1.0])
        with pytest.raises(ValidationError):
            symmetric_normalize(m)


class TestPowersVsDistance:
    def test_power_support_bounds_distance_and_parity(self, g1):
        a = g1.adjacency
        power = a
        for p in range(1, 4):
            if p > 1:
                power = spmatmul(a, power)
            rows = power.row_entry_ids()
            for r, c in zip(rows, power.col_indices):
                if r == c:
                    continue
                dist = bfs_distances(g1, int(r))[int(c)]
                assert dist <= p and (p - dist) % 2 == 0


class TestValidationAndIo:
    def test_validate_matrix_accepts_canonical(self, g1):
        validate_matrix(g1.adjacency)

    def test_validate_matrix_rejects_asymmetry(self):
        m = SparseMatrix.wrap(2, [0, 1, 1], [1], [1.0])
        with pytest.raises(ValidationError):
            validate_matrix(m)

    def test_text_roundtrip(self, g1, tmp_path):
        norm = symmetric_normalize(g1.adjacency)
        path = tmp_path / "m.txt"
        write_matrix_text(norm, path)
        back = read_matrix_text(path)
        assert back.n == norm.n
        assert np.array_equal(back.col_indices, norm.col_indices)
        assert np.array_equal(back.values, norm.values)


class TestLastfmGraph:
    @needs_lastfm
    def test_adjacency_nnz_is_twice_interactions(self):
        from drcsd.data import load_interactions
        data = load_interactions(lastfm_path())
        g = build_bipartite(data)
        assert g.adjacency.nnz == 2 * 92834
