import numpy as np
import pytest

from swfusion.blockmat import (
    PartitionedSpd,
    SingularBlock,
    block_inverse,
    marginalize_indices,
    schur_marginalize,
)

from conftest import random_spd


def random_partition(rng, dm, db, cond_scale=1.0):
    n = random_spd(rng, dm + db, cond_scale)
    b = rng.normal(0.0, 1.0, dm + db)
    return PartitionedSpd(
        n_mm=n[:dm, :dm], n_mb=n[:dm, dm:], n_bb=n[dm:, dm:], b_m=b[:dm], b_b=b[dm:]
    ), n, b


class TestSchurMarginalize:
    def test_decoupled_blocks_pass_through(self, rng):
        p = PartitionedSpd(
            n_mm=random_spd(rng, 3),
            n_mb=np.zeros((3, 4)),
            n_bb=random_spd(rng, 4),
            b_m=rng.normal(size=3),
            b_b=rng.normal(size=4),
        )
        n_b, b_b = schur_marginalize(p)
        np.testing.assert_array_equal(n_b, p.n_bb)
        np.testing.assert_array_equal(b_b, p.b_b)

    def test_scalar_hand_elimination(self):
        # Eliminating the first variable of [[2,1],[1,3]] x = [1,1] leaves
        # 2.5 x_b = 0.5.
        p = PartitionedSpd(n_mm=[[2.0]], n_mb=[[1.0]], n_bb=[[3.0]], b_m=[1.0], b_b=[1.0])
        n_b, b_b = schur_marginalize(p)
        assert n_b[0, 0] == pytest.approx(2.5, abs=1e-15)
        assert b_b[0] == pytest.approx(0.5, abs=1e-15)

    def test_matches_full_inverse_oracle(self, rng):
        # Marginal information equals the inverse of the kept block of the
        # full covariance (dense-inverse oracle).
        p, n, b = random_partition(rng, 2, 4)
        n_b, b_b = schur_marginalize(p)
        cov = np.linalg.inv(n)
        n_b_oracle = np.linalg.inv(cov[2:, 2:])
        mean_oracle = np.linalg.solve(n, b)[2:]
        np.testing.assert_allclose(n_b, n_b_oracle, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(np.linalg.solve(n_b, b_b), mean_oracle, rtol=1e-9)

    def test_singular_marginal_block_raises(self, rng):
        n_mm = np.zeros((2, 2))
        n_mm[0, 0] = 1.0  # rank deficient
        p = PartitionedSpd(
            n_mm=n_mm, n_mb=np.zeros((2, 3)), n_bb=np.eye(3),
            b_m=np.zeros(2), b_b=np.zeros(3),
        )
        with pytest.raises(SingularBlock):
            schur_marginalize(p)

    def test_requires_rhs(self, rng):
        p, _, _ = random_partition(rng, 2, 2)
        p.b_m = None
        with pytest.raises(ValueError):
            schur_marginalize(p)


class TestBlockInverse:
    def test_identity(self):
        p = PartitionedSpd(n_mm=np.eye(3), n_mb=np.zeros((3, 2)), n_bb=np.eye(2))
        np.testing.assert_allclose(block_inverse(p), np.eye(5), atol=1e-14)

    def test_block_diagonal(self, rng):
        a, d = random_spd(rng, 3), random_spd(rng, 4)
        p = PartitionedSpd(n_mm=a, n_mb=np.zeros((3, 4)), n_bb=d)
        inv = block_inverse(p)
        np.testing.assert_allclose(inv[:3, :3], np.linalg.inv(a), rtol=1e-9)
        np.testing.assert_allclose(inv[3:, 3:], np.linalg.inv(d), rtol=1e-9)
        np.testing.assert_allclose(inv[:3, 3:], 0.0, atol=1e-12)

    def test_matches_dense_inverse_oracle(self, rng):
        p, n, _ = random_partition(rng, 3, 5)
        inv = block_inverse(p)
        oracle = np.linalg.inv(n)
        assert np.linalg.norm(inv - oracle) / np.linalg.norm(oracle) < 1e-9

    def test_result_symmetric(self, rng):
        p, _, _ = random_partition(rng, 4, 4)
        inv = block_inverse(p)
        np.testing.assert_array_equal(inv, inv.T)


class TestInvariants:
    def test_inverse_times_assembled_is_identity(self, rng):
        for _ in range(20):
            dm, db = rng.integers(1, 8), rng.integers(1, 8)
            p, n, _ = random_partition(rng, int(dm), int(db))
            prod = block_inverse(p) @ n
            err = np.linalg.norm(prod - np.eye(n.shape[0])) / np.sqrt(n.shape[0])
            assert err < 1e-9

    def test_matrix_inversion_lemma(self, rng):
        # (D^-1 + C^T A C)^-1 C^T A == D C^T (A^-1 + C D C^T)^-1
        for _ in range(20):
            nd, na = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            d = random_spd(rng, nd)
            a = random_spd(rng, na)
            c = rng.normal(0.0, 1.0, (na, nd))
            lhs = np.linalg.solve(np.linalg.inv(d) + c.T @ a @ c, c.T @ a)
            rhs = d @ c.T @ np.linalg.solve(np.linalg.inv(a) + c @ d @ c.T, np.eye(na))
            np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-11)

    def test_schur_equals_inverse_of_kept_covariance_block(self, rng):
        p, n, _ = random_partition(rng, 3, 4)
        n_b, _ = schur_marginalize(p)
        d_block = block_inverse(p)[3:, 3:]
        np.testing.assert_allclose(n_b, np.linalg.inv(d_block), rtol=1e-9)

    def test_marginalize_indices_matches_partition(self, rng):
        n = random_spd(rng, 8)
        b = rng.normal(size=8)
        drop = np.array([1, 4, 5])
        n_b, b_b = marginalize_indices(n, b, drop)
        keep = np.array([0, 2, 3, 6, 7])
        cov = np.linalg.inv(n)
        np.testing.assert_allclose(
            n_b, np.linalg.inv(cov[np.ix_(keep, keep)]), rtol=1e-9
        )
        np.testing.assert_allclose(
            np.linalg.solve(n_b, b_b), np.linalg.solve(n, b)[keep], rtol=1e-9
        )


class TestValidation:
    def test_rejects_asymmetric_diagonal_block(self):
        with pytest.raises(ValueError):
            PartitionedSpd(n_mm=[[1.0, 2.0], [0.0, 1.0]], n_mb=np.zeros((2, 1)), n_bb=[[1.0]])

    def test_rejects_misshaped_off_diagonal(self):
        with pytest.raises(ValueError):
            PartitionedSpd(n_mm=np.eye(2), n_mb=np.zeros((3, 1)), n_bb=np.eye(1))
