"""Symmetric-block matrix algebra: Schur-complement marginalization and the
full block inverse of a two-block SPD partition.

This is the shared numerical kernel behind every marginalization and
information/covariance conversion in the estimators. All solves go through
a symmetric positive-definite Cholesky factorization; an explicit inverse
is formed only where the inverse matrix itself is the contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

# A block counts as singular once its smallest Cholesky pivot (squared)
# falls below this fraction of the largest; distinguishes structural rank
# deficiency from round-off.
CONDITION_RTOL = 1e-12


class SingularBlock(Exception):
    """A diagonal block is numerically singular (under-constrained variable)."""


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def spd_factor(m: np.ndarray, what: str = "matrix", check_conditioning: bool = True):
    """Cholesky-factor an SPD matrix, raising SingularBlock when it fails.

    With `check_conditioning` the pivot spread is also tested against the
    threshold, which distinguishes structural rank deficiency from
    round-off; solvers whose systems legitimately mix strong measurement
    information with weak regularization priors turn the test off.
    """
    m = np.asarray(m, dtype=float)
    try:
        c, low = cho_factor(m, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularBlock(f"{what} is not positive definite: {exc}") from exc
    if check_conditioning:
        piv = np.diag(c) ** 2
        if piv.min() < CONDITION_RTOL * piv.max():
            raise SingularBlock(
                f"{what} fails conditioning threshold "
                f"(pivot ratio {piv.min() / piv.max():.3e} < {CONDITION_RTOL:.0e})"
            )
    return (c, low)


def spd_solve(
    m: np.ndarray, rhs: np.ndarray, what: str = "matrix", check_conditioning: bool = True
) -> np.ndarray:
    return cho_solve(spd_factor(m, what, check_conditioning), rhs, check_finite=False)


def spd_inverse(
    m: np.ndarray, what: str = "matrix", check_conditioning: bool = True
) -> np.ndarray:
    fac = spd_factor(m, what, check_conditioning)
    inv = cho_solve(fac, np.eye(m.shape[0]), check_finite=False)
    return symmetrize(inv)


@dataclass
class PartitionedSpd:
    """Two-block partition of a symmetric matrix, optionally with a
    right-hand side split the same way.

    The assembled matrix is [[n_mm, n_mb], [n_mb.T, n_bb]]; n_mm is the
    block to be eliminated, n_bb the block that is kept.
    """

    n_mm: np.ndarray
    n_mb: np.ndarray
    n_bb: np.ndarray
    b_m: np.ndarray | None = None
    b_b: np.ndarray | None = None

    def __post_init__(self):
        self.n_mm = np.atleast_2d(np.asarray(self.n_mm, dtype=float))
        self.n_mb = np.atleast_2d(np.asarray(self.n_mb, dtype=float))
        self.n_bb = np.atleast_2d(np.asarray(self.n_bb, dtype=float))
        dm, db = self.n_mm.shape[0], self.n_bb.shape[0]
        if self.n_mm.shape != (dm, dm) or self.n_bb.shape != (db, db):
            raise ValueError("diagonal blocks must be square")
        if self.n_mb.shape != (dm, db):
            raise ValueError(f"off-diagonal block must be {dm}x{db}, got {self.n_mb.shape}")
        for name, blk in (("n_mm", self.n_mm), ("n_bb", self.n_bb)):
            if not np.allclose(blk, blk.T, rtol=0.0, atol=1e-9 * max(1.0, abs(blk).max())):
                raise ValueError(f"{name} is not symmetric")
        if self.b_m is not None:
            self.b_m = np.asarray(self.b_m, dtype=float).reshape(-1)
            self.b_b = np.asarray(self.b_b, dtype=float).reshape(-1)
            if self.b_m.shape[0] != dm or self.b_b.shape[0] != db:
                raise ValueError("right-hand side does not match block dimensions")

    @property
    def dim_m(self) -> int:
        return self.n_mm.shape[0]

    @property
    def dim_b(self) -> int:
        return self.n_bb.shape[0]

    def assembled(self) -> np.ndarray:
        top = np.hstack([self.n_mm, self.n_mb])
        bot = np.hstack([self.n_mb.T, self.n_bb])
        return np.vstack([top, bot])


def schur_marginalize(p: PartitionedSpd) -> tuple[np.ndarray, np.ndarray]:
    """Eliminate the m-block, returning the marginal information and
    right-hand side over the kept block:

        N_b = n_bb - n_mb.T n_mm^-1 n_mb
        b_b = b_b  - n_mb.T n_mm^-1 b_m

    Raises SingularBlock when n_mm fails the conditioning threshold.
    """
    if p.b_m is None:
        raise ValueError("schur_marginalize requires a right-hand side")
    fac = spd_factor(p.n_mm, "marginal block n_mm")
    nmm_inv_nmb = cho_solve(fac, p.n_mb, check_finite=False)
    nmm_inv_bm = cho_solve(fac, p.b_m, check_finite=False)
    n_b = symmetrize(p.n_bb - p.n_mb.T @ nmm_inv_nmb)
    b_b = p.b_b - p.n_mb.T @ nmm_inv_bm
    return n_b, b_b


def block_inverse(p: PartitionedSpd) -> np.ndarray:
    """Full inverse of the assembled SPD matrix, built from the two Schur
    complements:

        A = (n_mm - n_mb n_bb^-1 n_mb.T)^-1
        D = (n_bb - n_mb.T n_mm^-1 n_mb)^-1
        C = B.T = -D n_mb.T n_mm^-1

    The result is explicitly symmetrized.
    """
    fac_mm = spd_factor(p.n_mm, "block n_mm")
    fac_bb = spd_factor(p.n_bb, "block n_bb")
    nmm_inv_nmb = cho_solve(fac_mm, p.n_mb, check_finite=False)
    schur_m = symmetrize(p.n_mm - p.n_mb @ cho_solve(fac_bb, p.n_mb.T, check_finite=False))
    schur_b = symmetrize(p.n_bb - p.n_mb.T @ nmm_inv_nmb)
    a = spd_inverse(schur_m, "Schur complement over n_bb")
    d = spd_inverse(schur_b, "Schur complement over n_mm")
    c = -d @ nmm_inv_nmb.T
    top = np.hstack([a, c.T])
    bot = np.hstack([c, d])
    return symmetrize(np.vstack([top, bot]))


def marginalize_indices(
    n: np.ndarray, b: np.ndarray, drop: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Schur-marginalize an arbitrary index set out of a full (N, b) system.

    `drop` is a boolean mask or integer index array over rows of `n`. The
    kept rows retain their original relative order.
    """
    n = np.asarray(n, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    mask = np.zeros(n.shape[0], dtype=bool)
    mask[drop] = True
    keep = ~mask
    part = PartitionedSpd(
        n_mm=n[np.ix_(mask, mask)],
        n_mb=n[np.ix_(mask, keep)],
        n_bb=n[np.ix_(keep, keep)],
        b_m=b[mask],
        b_b=b[keep],
    )
    return schur_marginalize(part)
