"""Full-state estimators: batch nonlinear least squares, the sequential
Kalman sweep that matches it, the deliberately inconsistent per-measurement
variant, and the single-block information/Kalman dual updates.

All iterative solvers share one outer discipline: Jacobians and residuals
of every measurement are evaluated at the same linearization point per
outer iteration, the state is compensated once per outer iteration, and the
iteration stops when the max-norm of the solved error drops below
`SolverOptions.step_tol`, the iteration cap is reached, or the weighted
residual cost increases (the step is then reverted and the report flagged
not converged). Identical constants are shared by every estimator so that
cross-estimator equivalence is meaningful.

Prior knowledge enters as `PriorFactor` terms. A factor keeps its
information (or covariance) form fixed and re-expresses only its residual
against the current linearization point via the manifold difference to its
anchor values; a frozen factor skips that re-expression. This is exactly
the handling the sliding-window strategies need to share.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import blas, cho_solve

from .blockmat import SingularBlock, spd_factor, spd_inverse, spd_solve, symmetrize
from .rotations import rotvec_between
from .problem import (
    DynamicModel,
    ErrorState,
    GaussianBelief,
    MeasurementBlock,
    NominalState,
    StateIndex,
    compensate,
    error_between,
    propagate,
)

# Information granted to states not covered by any prior; finite stand-in
# for an infinite-covariance (unconstrained) prior, shared by information-
# and covariance-form estimators so their equivalence is exact.
UNCONSTRAINED_INFO = 1e-8


class SingularSystem(Exception):
    """The normal equations are numerically singular."""


@dataclass
class SolverOptions:
    """Stopping rule shared by every estimator in the package.

    `cost_increase_rtol` separates a genuine divergence of the undamped
    iteration from float-resolution ties near the optimum: an iteration
    counts as a violation only when the weighted residual cost exceeds the
    previous one by more than this relative slack.
    """

    step_tol: float = 1e-8
    max_iterations: int = 50
    cost_increase_rtol: float = 1e-9


@dataclass
class PriorFactor:
    """Gaussian prior over a subset of states with fixed quadratic form.

    `mean_err` is the expected error of the anchor values (delta-hat in the
    module's error convention); at a linearization point X the factor
    observes delta = mean_err + (X (-) anchors), the manifold difference
    taken per state. A frozen factor observes `mean_err` regardless of the
    linearization point.
    """

    keys: list
    mean_err: np.ndarray
    anchors: dict
    info: np.ndarray | None = None
    cov: np.ndarray | None = None
    frozen: bool = False
    _info_cache: np.ndarray | None = field(default=None, repr=False)
    _cov_cache: np.ndarray | None = field(default=None, repr=False)
    _chol_cov: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if (self.info is None) == (self.cov is None):
            raise ValueError("exactly one of info/cov must be given")
        self.mean_err = np.asarray(self.mean_err, dtype=float).reshape(-1)
        d = sum(6 if k[0] == "f" else 3 for k in self.keys)
        m = self.info if self.info is not None else self.cov
        if m.shape != (d, d) or self.mean_err.shape[0] != d:
            raise ValueError("prior factor dimensions do not match keys")

    @property
    def dim(self) -> int:
        return self.mean_err.shape[0]

    def residual(self, lin: NominalState) -> np.ndarray:
        if self.frozen:
            return self.mean_err
        r = self.mean_err.copy()
        off = 0
        for key in self.keys:
            anchor = self.anchors[key]
            if key[0] == "f":
                pose = lin.frames[key[1]]
                r[off : off + 3] += pose.position - anchor.position
                r[off + 3 : off + 6] += rotvec_between(pose.attitude, anchor.attitude)
                off += 6
            else:
                r[off : off + 3] += lin.landmarks[key[1]].point - anchor.point
                off += 3
        return r

    def information(self) -> np.ndarray:
        if self.info is not None:
            return self.info
        if self._info_cache is None:
            self._info_cache = spd_inverse(self.cov, "prior covariance", check_conditioning=False)
        return self._info_cache

    def covariance(self) -> np.ndarray:
        if self.cov is not None:
            return self.cov
        if self._cov_cache is None:
            self._cov_cache = spd_inverse(self.info, "prior information", check_conditioning=False)
        return self._cov_cache

    def info_times(self, r: np.ndarray) -> np.ndarray:
        """N_p @ r without materializing the information matrix."""
        if self.info is not None:
            return self.info @ r
        if self._chol_cov is None:
            self._chol_cov = spd_factor(self.cov, "prior covariance", check_conditioning=False)
        return cho_solve(self._chol_cov, r, check_finite=False)

    def quad_cost(self, r: np.ndarray) -> float:
        return float(r @ self.info_times(r))


@dataclass
class EstimationProblem:
    """Full-state estimation problem: linearization seeds, prior belief,
    re-linearizable measurement factories, and the dynamic model."""

    initial: NominalState
    measurements: list
    prior: GaussianBelief | None = None
    dynamic: DynamicModel | None = None

    def __post_init__(self):
        ids = [m.id for m in self.measurements]
        if len(set(ids)) != len(ids):
            raise ValueError("measurement ids must be unique")
        self.measurements = sorted(self.measurements, key=lambda m: m.id)


@dataclass
class EstimatorReport:
    """Solver outcome. The posterior belief has zero mean: the estimated
    error has been folded into `estimates` (closed loop)."""

    estimates: NominalState
    posterior: GaussianBelief
    iterations: int
    converged: bool
    step_norms: list[float]
    costs: list[float] = field(default_factory=list)
    inconsistent: bool = False
    elapsed_s: float = 0.0


@dataclass
class _SolveTrace:
    """Internals of the last accepted iteration, for conversions."""

    lin_state: NominalState
    blocks: list[MeasurementBlock]
    info_matrix: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# single-block dual updates


def ifr_update(prior: GaussianBelief, m: MeasurementBlock) -> GaussianBelief:
    """Information-form measurement update:
    N_post = P^-1 + h^T Lambda h,  b_post = P^-1 delta + h^T Lambda l."""
    n, b = prior.information_pair()
    cols = prior.index.columns(m.touched)
    hw = m.jacobian.T @ m.weight
    n_post = n.copy()
    n_post[np.ix_(cols, cols)] += hw @ m.jacobian
    b_post = b.copy()
    b_post[cols] += hw @ m.residual
    return GaussianBelief(prior.index, "information", symmetrize(n_post), b_post)


def kfr_update(prior: GaussianBelief, m: MeasurementBlock) -> GaussianBelief:
    """Kalman-form measurement update:
    K = P h^T (Lambda^-1 + h P h^T)^-1, delta += K (l - h delta),
    P_post = (I - K h) P."""
    cb = prior.to_covariance()
    p, delta = cb.matrix, cb.vector.copy()
    cols = prior.index.columns(m.touched)
    h = m.jacobian
    s = spd_inverse(m.weight, "measurement weight") + h @ p[np.ix_(cols, cols)] @ h.T
    fac = spd_factor(symmetrize(s), "innovation covariance")
    pht = p[:, cols] @ h.T
    k = cho_solve(fac, pht.T, check_finite=False).T
    delta += k @ (m.residual - h @ delta[cols])
    p_post = symmetrize(p - k @ pht.T)
    return GaussianBelief(prior.index, "covariance", p_post, delta)


def inconsistency_effect(h: np.ndarray, delta_h: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """State error implied by a Jacobian perturbation:
    delta_x = -(H + dH)^+ dH x_hat (Moore-Penrose pseudoinverse)."""
    h = np.asarray(h, dtype=float)
    delta_h = np.asarray(delta_h, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float).reshape(-1)
    return -np.linalg.pinv(h + delta_h) @ (delta_h @ x_hat)


# ---------------------------------------------------------------------------
# prior handling shared by every iterative solver


def build_prior_factors(problem: EstimationProblem, index: StateIndex) -> list[PriorFactor]:
    """Problem prior as anchored factors; states the prior does not cover
    receive the shared unconstrained-information block."""
    factors: list[PriorFactor] = []
    covered: set = set()
    if problem.prior is not None:
        pb = problem.prior
        for k in pb.index.keys:
            if k not in index:
                raise ValueError(f"prior covers unknown state {k}")
        covered = set(pb.index.keys)
        anchors = {k: problem.initial.value_of(k) for k in pb.index.keys}
        if pb.form == "information":
            factors.append(
                PriorFactor(
                    keys=list(pb.index.keys),
                    mean_err=spd_solve(pb.matrix, pb.vector, "prior information", check_conditioning=False),
                    anchors=anchors,
                    info=pb.matrix,
                )
            )
        else:
            factors.append(
                PriorFactor(
                    keys=list(pb.index.keys),
                    mean_err=pb.vector,
                    anchors=anchors,
                    cov=pb.matrix,
                )
            )
    free = [k for k in index.keys if k not in covered]
    if free:
        dim = sum(6 if k[0] == "f" else 3 for k in free)
        factors.append(
            PriorFactor(
                keys=free,
                mean_err=np.zeros(dim),
                anchors={k: problem.initial.value_of(k) for k in free},
                info=UNCONSTRAINED_INFO * np.eye(dim),
            )
        )
    return factors


def _apply_dynamics(factors: list[PriorFactor], problem: EstimationProblem, index: StateIndex):
    """Propagate the prior through the dynamic model (identity + zero noise
    is a no-op and skipped)."""
    dyn = problem.dynamic
    if dyn is None:
        return factors
    if dyn.phi.shape[0] != index.dim:
        raise ValueError("dynamic model dimension does not match problem")
    identity = np.array_equal(dyn.phi, np.eye(index.dim)) and not dyn.q.any()
    if identity:
        return factors
    n = np.zeros((index.dim, index.dim))
    b = np.zeros(index.dim)
    for f in factors:
        cols = index.columns(f.keys)
        n[np.ix_(cols, cols)] += f.information()
        b[cols] += f.info_times(f.mean_err)
    belief = GaussianBelief(index, "information", symmetrize(n), b)
    prop = propagate(belief, dyn)
    anchors = {k: problem.initial.value_of(k) for k in index.keys}
    return [
        PriorFactor(
            keys=list(index.keys), mean_err=prop.vector, anchors=anchors, cov=prop.matrix
        )
    ]


class _PriorContext:
    """Per-solve view of the prior factors over the stacked index."""

    def __init__(self, factors: list[PriorFactor], index: StateIndex):
        self.factors = factors
        self.index = index
        self.cols = [index.columns(f.keys) for f in factors]
        self._n = None
        self._p = None

    def info_matrix(self) -> np.ndarray:
        if self._n is None:
            n = np.zeros((self.index.dim, self.index.dim))
            for f, c in zip(self.factors, self.cols):
                n[np.ix_(c, c)] += f.information()
            self._n = symmetrize(n)
        return self._n

    def cov_matrix(self) -> np.ndarray:
        """Prior covariance; factors cover disjoint states in every caller,
        which keeps this a block scatter without a global inversion."""
        if self._p is None:
            seen: set = set()
            for f in self.factors:
                overlap = seen.intersection(f.keys)
                if overlap:
                    raise ValueError(f"prior factors overlap on {sorted(overlap)[:3]}")
                seen.update(f.keys)
            p = np.zeros((self.index.dim, self.index.dim))
            for f, c in zip(self.factors, self.cols):
                p[np.ix_(c, c)] += f.covariance()
            self._p = symmetrize(p)
        return self._p

    def residuals(self, lin: NominalState) -> list[np.ndarray]:
        return [f.residual(lin) for f in self.factors]

    def rhs(self, res: list[np.ndarray]) -> np.ndarray:
        b = np.zeros(self.index.dim)
        for f, c, r in zip(self.factors, self.cols, res):
            b[c] += f.info_times(r)
        return b

    def seed(self, res: list[np.ndarray]) -> np.ndarray:
        """Combined prior mean in stacked coordinates (disjoint factors)."""
        d = np.zeros(self.index.dim)
        for c, r in zip(self.cols, res):
            d[c] = r
        return d

    def cost(self, res: list[np.ndarray]) -> float:
        return sum(f.quad_cost(r) for f, r in zip(self.factors, res))


def _measurement_cost(blocks: list[MeasurementBlock]) -> float:
    return sum(float(b.residual @ b.weight @ b.residual) for b in blocks)


def _assemble_information(
    index: StateIndex, blocks: list[MeasurementBlock], prior: _PriorContext, res
) -> tuple[np.ndarray, np.ndarray]:
    n = prior.info_matrix().copy()
    b = prior.rhs(res)
    for blk in blocks:
        hw = blk.jacobian.T @ blk.weight
        nb = hw @ blk.jacobian
        lb = hw @ blk.residual
        # Scatter via per-state contiguous runs (cheaper than fancy indexing).
        slices = [index.slice_of(k) for k in blk.touched]
        o0 = 0
        for si, sl_i in enumerate(slices):
            w_i = sl_i.stop - sl_i.start
            b[sl_i] += lb[o0 : o0 + w_i]
            o1 = 0
            for sl_j in slices:
                w_j = sl_j.stop - sl_j.start
                n[sl_i, sl_j] += nb[o0 : o0 + w_i, o1 : o1 + w_j]
                o1 += w_j
            o0 += w_i
    return symmetrize(n), b


def _weight_inverse(w: np.ndarray) -> np.ndarray:
    d = np.diag(w)
    if np.count_nonzero(w - np.diag(d)) == 0:
        return np.diag(1.0 / d)
    return spd_inverse(w, "measurement weight", check_conditioning=False)


def kfr_sweep(
    delta: np.ndarray,
    p: np.ndarray,
    groups: list[list[MeasurementBlock]],
    index: StateIndex,
) -> tuple[np.ndarray, np.ndarray]:
    """Sequentially apply measurement groups to (delta, P) in covariance
    form. Each group is one stacked Kalman update; per-measurement
    processing is the special case of singleton groups. The covariance is
    updated in place through a fused rank-k BLAS call and symmetrized once
    at the end of the sweep."""
    p = np.asfortranarray(p)
    for group in groups:
        if len(group) == 1:
            blk = group[0]
            cols = index.columns(blk.touched)
            h = blk.jacobian
            l = blk.residual
            lam_inv = _weight_inverse(blk.weight)
        else:
            cols_list = [index.columns(b.touched) for b in group]
            cols = np.unique(np.concatenate(cols_list))
            pos = {c: i for i, c in enumerate(cols)}
            rows = sum(b.residual.shape[0] for b in group)
            h = np.zeros((rows, cols.shape[0]))
            l = np.empty(rows)
            lam_inv = np.zeros((rows, rows))
            r0 = 0
            for blk, bc in zip(group, cols_list):
                r1 = r0 + blk.residual.shape[0]
                local = [pos[c] for c in bc]
                h[r0:r1, local] = blk.jacobian
                l[r0:r1] = blk.residual
                lam_inv[r0:r1, r0:r1] = _weight_inverse(blk.weight)
                r0 = r1
        pht = p[:, cols] @ h.T
        s = lam_inv + h @ pht[cols, :]
        fac = spd_factor(symmetrize(s), "innovation covariance", check_conditioning=False)
        k = cho_solve(fac, pht.T, check_finite=False).T
        delta += k @ (l - h @ delta[cols])
        # P <- P - K (H P) done in place: P is symmetric, so H P = (P H^T)^T.
        blas.dgemm(-1.0, k, pht.T, beta=1.0, c=p, overwrite_c=1)
    return delta, symmetrize(p)


def _group_by_frame(blocks: list[MeasurementBlock]) -> list[list[MeasurementBlock]]:
    groups: dict[int, list[MeasurementBlock]] = {}
    for b in blocks:
        fid = next(k[1] for k in b.touched if k[0] == "f")
        groups.setdefault(fid, []).append(b)
    return [groups[f] for f in sorted(groups)]


# ---------------------------------------------------------------------------
# shared outer iteration


def _iterate(
    initial: NominalState,
    index: StateIndex,
    factories: list,
    prior: _PriorContext,
    opts: SolverOptions,
    solve_step,
) -> tuple[EstimatorReport, _SolveTrace]:
    """Gauss-Newton outer loop: relinearize everything at the current state,
    solve via `solve_step`, compensate once, stop on step tolerance, the
    iteration cap, or a cost increase (step reverted)."""
    t0 = time.perf_counter()
    state = initial.copy()
    step_norms: list[float] = []
    costs: list[float] = []
    converged = False
    prev: tuple | None = None
    trace = None
    iterations = 0
    for it in range(opts.max_iterations):
        blocks = [f(state) for f in factories]
        res = prior.residuals(state)
        cost = _measurement_cost(blocks) + prior.cost(res)
        if prev is not None and cost > prev[0] * (1.0 + opts.cost_increase_rtol):
            # Undamped step increased the weighted residual cost: revert.
            state, trace = prev[1], prev[2]
            step_norms.pop()
            converged = False
            break
        costs.append(cost)
        try:
            delta, extras = solve_step(state, blocks, res)
        except SingularBlock as exc:
            raise SingularSystem(str(exc)) from exc
        trace = _SolveTrace(lin_state=state, blocks=blocks, extras=extras)
        prev = (cost, state, trace)
        iterations = it + 1
        step = float(np.max(np.abs(delta))) if delta.size else 0.0
        step_norms.append(step)
        state = compensate(state, ErrorState(index, delta))
        if step <= opts.step_tol:
            converged = True
            break
    posterior = trace.extras.pop("_posterior")
    report = EstimatorReport(
        estimates=state,
        posterior=posterior,
        iterations=iterations,
        converged=converged,
        step_norms=step_norms,
        costs=costs,
        elapsed_s=time.perf_counter() - t0,
    )
    return report, trace


# ---------------------------------------------------------------------------
# full-state estimators


def batch_solve(
    problem: EstimationProblem, opts: SolverOptions | None = None
) -> EstimatorReport:
    report, _ = batch_solve_traced(problem, opts)
    return report


def batch_solve_traced(
    problem: EstimationProblem, opts: SolverOptions | None = None
) -> tuple[EstimatorReport, _SolveTrace]:
    """Gauss-Newton on the stacked normal equations: every measurement is
    relinearized at the same compensated state each iteration."""
    opts = opts or SolverOptions()
    index = StateIndex.of(problem.initial)
    factors = _apply_dynamics(build_prior_factors(problem, index), problem, index)
    prior = _PriorContext(factors, index)

    def solve_step(state, blocks, res):
        n, b = _assemble_information(index, blocks, prior, res)
        delta = spd_solve(n, b, "normal equations", check_conditioning=False)
        return delta, {"_posterior": GaussianBelief(index, "information", n, np.zeros(index.dim))}

    return _iterate(problem.initial, index, problem.measurements, prior, opts, solve_step)


def sequential_pass(
    problem: EstimationProblem, opts: SolverOptions | None = None
) -> EstimatorReport:
    """Full-state sequential update: per outer iteration, every measurement
    is applied through the Kalman form in ascending id order with Jacobians
    fixed at the iteration's linearization point; the state is compensated
    once per outer iteration. Converges to the batch fixed point."""
    opts = opts or SolverOptions()
    index = StateIndex.of(problem.initial)
    factors = _apply_dynamics(build_prior_factors(problem, index), problem, index)
    prior = _PriorContext(factors, index)
    p0 = prior.cov_matrix()

    def solve_step(state, blocks, res):
        delta = prior.seed(res)
        p = p0.copy()
        delta, p = kfr_sweep(delta, p, [[b] for b in blocks], index)
        return delta, {"_posterior": GaussianBelief(index, "covariance", p, np.zeros(index.dim))}

    return _iterate(problem.initial, index, problem.measurements, prior, opts, solve_step)[0]


def sequential_naive(
    problem: EstimationProblem, opts: SolverOptions | None = None
) -> EstimatorReport:
    """Per-measurement iterate-and-compensate sweep: each measurement is
    iterated to convergence at its own linearization point and folded into
    the state before the next one is touched. Jacobians of successive
    measurements are therefore evaluated at different linearization points,
    which corrupts their consistency; the report is flagged `inconsistent`.
    The covariance is committed once per measurement at its final iterate."""
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    index = StateIndex.of(problem.initial)
    factors = _apply_dynamics(build_prior_factors(problem, index), problem, index)
    prior = _PriorContext(factors, index)
    state = problem.initial.copy()
    p = prior.cov_matrix().copy()
    entry_res = prior.residuals(state)
    delta_entry = prior.seed(entry_res)
    step_norms: list[float] = []
    converged_all = True
    for factory in problem.measurements:
        entry_state = state
        inner_steps = 0
        for _ in range(opts.max_iterations):
            blk = factory(state)
            # Prior mean re-expressed against this measurement's entry state.
            shift = error_between(state, entry_state, index).vector
            delta_pr = delta_entry + shift
            cols = index.columns(blk.touched)
            h = blk.jacobian
            s = spd_inverse(blk.weight, "weight", check_conditioning=False) + h @ p[np.ix_(cols, cols)] @ h.T
            fac = spd_factor(symmetrize(s), "innovation covariance", check_conditioning=False)
            pht = p[:, cols] @ h.T
            k = cho_solve(fac, pht.T, check_finite=False).T
            delta = delta_pr + k @ (blk.residual - h @ delta_pr[cols])
            state = compensate(state, ErrorState(index, delta))
            inner_steps += 1
            if float(np.max(np.abs(delta))) <= opts.step_tol:
                break
        else:
            converged_all = False
        step_norms.append(float(np.max(np.abs(delta))))
        blk = factory(state)
        cols = index.columns(blk.touched)
        h = blk.jacobian
        s = spd_inverse(blk.weight, "weight", check_conditioning=False) + h @ p[np.ix_(cols, cols)] @ h.T
        fac = spd_factor(symmetrize(s), "innovation covariance", check_conditioning=False)
        pht = p[:, cols] @ h.T
        k = cho_solve(fac, pht.T, check_finite=False).T
        p = symmetrize(p - k @ pht.T)
        delta_entry = np.zeros(index.dim)
        entry_res = None
    report = EstimatorReport(
        estimates=state,
        posterior=GaussianBelief(index, "covariance", p, np.zeros(index.dim)),
        iterations=len(problem.measurements),
        converged=converged_all,
        step_norms=step_norms,
        inconsistent=True,
        elapsed_s=time.perf_counter() - t0,
    )
    return report
