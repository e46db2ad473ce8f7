"""Sliding-window estimation strategies.

Five strategies share one window pipeline (grow, solve, slide) and differ
only in how the window is solved and what crosses the slide boundary:

* ``swo``      - information-form Gauss-Newton over the prior plus all live
                 measurements; on a slide only the measurements touching the
                 marginalized states are converted, via a Schur complement,
                 into a prior over the survivors (with its nonzero mean and
                 with the linearization-drift correction applied); retained
                 measurements stay live and keep re-linearizing.
* ``swf``      - covariance-form Kalman sweep over all live measurements;
                 every used measurement is converted, the marginalized rows
                 and columns are deleted from the posterior covariance, and
                 the transferred mean is zeroed.
* ``swf_sa``   - the strategy-adjusted two-step filter: step 1 sequentially
                 applies only the to-be-converted measurements, step 2
                 sequentially applies the rest on top without committing its
                 covariance; the transferred prior is exactly step 1's
                 posterior with the marginalized entries deleted.
* ``swf_fej``  - swf_sa with the transferred mean zeroed (ablation).
* ``swf_full`` - swf_sa with the drift correction between current estimates
                 and the fixed linearization anchors forced to zero
                 (ablation); the transferred mean is kept.

Every state entering a window brings a diagonal seed prior anchored at its
entry value (standard, drift-tracked, identical across strategies); each
conversion consumes the seed priors together with the carried prior, so the
carried prior always covers exactly the active states.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .blockmat import marginalize_indices, spd_solve, symmetrize
from .estimators import (
    UNCONSTRAINED_INFO,
    EstimatorReport,
    PriorFactor,
    SolverOptions,
    _group_by_frame,
    _iterate,
    _PriorContext,
    kfr_sweep,
)
from .problem import (
    FRAME,
    LANDMARK,
    GaussianBelief,
    Landmark,
    NominalState,
    Pose,
    StateIndex,
    StereoCamera,
    StereoFactory,
    frame_key,
    landmark_key,
)
from .rotations import rotvec_between


class MissingAnchor(Exception):
    """A prior-constrained state has no fixed linearization anchor."""


@dataclass
class SlidePolicy:
    """Window-slide policy shared by all strategies of one experiment."""

    window_length: int = 20
    marginal_selector: str = "oldest_frame"  # or "landmark_trigger"
    landmark_min_track: int = 2

    def __post_init__(self):
        if self.window_length < 2:
            raise ValueError("window_length must be >= 2")
        if self.marginal_selector not in ("oldest_frame", "landmark_trigger"):
            raise ValueError(f"unknown marginal selector {self.marginal_selector!r}")


@dataclass
class SeedPrior:
    """Diagonal prior granted to every state when it enters the window.

    `None` sigmas fall back to the shared unconstrained-information value.
    """

    pos_sigma: float | None = None
    att_sigma: float | None = None
    lm_sigma: float | None = None

    def frame_info(self) -> np.ndarray:
        d = np.empty(6)
        d[:3] = UNCONSTRAINED_INFO if self.pos_sigma is None else 1.0 / self.pos_sigma**2
        d[3:] = UNCONSTRAINED_INFO if self.att_sigma is None else 1.0 / self.att_sigma**2
        return d

    def landmark_info(self) -> np.ndarray:
        v = UNCONSTRAINED_INFO if self.lm_sigma is None else 1.0 / self.lm_sigma**2
        return np.full(3, v)


@dataclass
class WindowState:
    """Active window: states, carried prior, anchors, live measurements,
    and the ledger of measurement ids already converted into a prior."""

    active: NominalState
    cam: StereoCamera
    transfer: PriorFactor | None = None
    seed_info: dict = field(default_factory=dict)  # key -> diag info vector
    seed_anchor: dict = field(default_factory=dict)  # key -> anchor value
    live: dict = field(default_factory=dict)  # meas_id -> factory
    converted_ids: set = field(default_factory=set)
    pending: dict = field(default_factory=dict)  # lm_id -> {frame_id: factory}
    track: dict = field(default_factory=dict)  # lm_id -> set of observing frames

    def check_invariants(self):
        overlap = set(self.live).intersection(self.converted_ids)
        if overlap:
            raise AssertionError(f"measurements reused after conversion: {sorted(overlap)[:5]}")
        for k in self.prior_keys():
            if k not in self.fej_anchors():
                raise MissingAnchor(f"prior-constrained state {k} has no anchor")

    def prior_keys(self) -> list:
        keys = list(self.transfer.keys) if self.transfer is not None else []
        keys += list(self.seed_info)
        return keys

    def fej_anchors(self) -> dict:
        anchors = dict(self.transfer.anchors) if self.transfer is not None else {}
        anchors.update(self.seed_anchor)
        return anchors

    def prior_factors(self) -> list[PriorFactor]:
        factors = [] if self.transfer is None else [self.transfer]
        if self.seed_info:
            keys = sorted(self.seed_info)
            diag = np.concatenate([self.seed_info[k] for k in keys])
            dim = diag.shape[0]
            factors.append(
                PriorFactor(
                    keys=keys,
                    mean_err=np.zeros(dim),
                    anchors={k: self.seed_anchor[k] for k in keys},
                    info=np.diag(diag),
                )
            )
        return factors

    def prior_belief(self) -> GaussianBelief:
        """Carried prior assembled over the active states, information form."""
        index = StateIndex.of(self.active)
        ctx = _PriorContext(self.prior_factors(), index)
        n = ctx.info_matrix()
        b = np.zeros(index.dim)
        for f, cols in zip(ctx.factors, ctx.cols):
            b[cols] += f.info_times(f.mean_err)
        return GaussianBelief(index, "information", n, b)


def new_window(cam: StereoCamera) -> WindowState:
    return WindowState(active=NominalState(), cam=cam)


# ---------------------------------------------------------------------------
# public policy operations


def select_marginal(w: WindowState, policy: SlidePolicy) -> set:
    """States to marginalize: nothing while the window is not over-full;
    otherwise the oldest frame plus every landmark whose track ends with it
    (or, under the landmark-trigger policy, every landmark no longer seen
    by the newest frame)."""
    frame_ids = w.active.frame_ids()
    if len(frame_ids) <= policy.window_length:
        return set()
    oldest, newest = frame_ids[0], frame_ids[-1]
    xm = {frame_key(oldest)}
    for lm_id in w.active.landmark_ids():
        observers = w.track.get(lm_id, set())
        if policy.marginal_selector == "oldest_frame":
            if observers and observers.issubset({oldest}):
                xm.add(landmark_key(lm_id))
        else:
            if newest not in observers:
                xm.add(landmark_key(lm_id))
    return xm


def partition_measurements(w: WindowState, x_m: set) -> tuple[list, list]:
    """Split the live set into the measurements touching any marginalized
    state and the rest; both halves ordered by measurement id."""
    z_m, z_r = [], []
    for mid in sorted(w.live):
        f = w.live[mid]
        if any(k in x_m for k in f.touched):
            z_m.append(f)
        else:
            z_r.append(f)
    return z_m, z_r


def fej_compensation(
    prior: GaussianBelief,
    anchors: dict,
    current: NominalState,
    return_delta_b: bool = False,
):
    """First-order linearization-drift correction: per prior-constrained
    state, the manifold difference between the current estimate and its
    fixed anchor. Optionally also N @ delta_x."""
    dx = np.zeros(prior.index.dim)
    for key in prior.index.keys:
        if key not in anchors:
            raise MissingAnchor(f"no anchor for prior-constrained state {key}")
        anchor = anchors[key]
        sl = prior.index.slice_of(key)
        if key[0] == FRAME:
            pose = current.frames[key[1]]
            dx[sl.start : sl.start + 3] = pose.position - anchor.position
            dx[sl.start + 3 : sl.stop] = rotvec_between(pose.attitude, anchor.attitude)
        else:
            dx[sl] = current.landmarks[key[1]].point - anchor.point
    if return_delta_b:
        n, _ = prior.information_pair()
        return dx, n @ dx
    return dx


def triangulate_midpoint(
    obs: list[tuple[Pose, np.ndarray]], cam: StereoCamera
) -> Landmark:
    """Initialize a landmark from its first two stereo observations by
    averaging the per-observation disparity back-projections."""
    pts = []
    for pose, z in obs[:2]:
        disparity = max(z[0] - z[2], 1e-3)
        depth = cam.fx * cam.baseline / disparity
        q = np.array(
            [(z[0] - cam.cx) * depth / cam.fx, (z[1] - cam.cy) * depth / cam.fy, depth]
        )
        pts.append(pose.rotation() @ q + pose.position)
    return Landmark(np.mean(pts, axis=0))


# ---------------------------------------------------------------------------
# window growth


def absorb(
    w: WindowState,
    new_frames: dict,
    new_measurements: list,
    policy: SlidePolicy,
    seed: SeedPrior,
    new_landmarks: dict | None = None,
) -> WindowState:
    """Add newly arrived frames and observations; promote landmarks whose
    tracks reach the inclusion threshold. New states receive their seed
    prior anchored at the entry value."""
    new_landmarks = new_landmarks or {}
    for fid, pose in sorted(new_frames.items()):
        if fid in w.active.frames:
            raise ValueError(f"frame {fid} already in window")
        w.active.frames[fid] = pose.copy()
        key = frame_key(fid)
        w.seed_info[key] = seed.frame_info()
        w.seed_anchor[key] = pose.copy()
    w.active.frames = {i: w.active.frames[i] for i in sorted(w.active.frames)}
    for fac in new_measurements:
        if fac.id in w.converted_ids or fac.id in w.live:
            raise ValueError(f"measurement id {fac.id} reused")
        w.track.setdefault(fac.lm_id, set()).add(fac.frame_id)
        if fac.lm_id in w.active.landmarks:
            w.live[fac.id] = fac
        else:
            w.pending.setdefault(fac.lm_id, {})[fac.frame_id] = fac
    # Promote landmarks whose track length reached the policy threshold.
    for lm_id in sorted(w.pending):
        entries = w.pending[lm_id]
        if len(entries) < policy.landmark_min_track:
            continue
        if lm_id in new_landmarks:
            lm = new_landmarks[lm_id].copy()
        else:
            first = [
                (w.active.frames[fid], entries[fid].z) for fid in sorted(entries)
            ]
            lm = triangulate_midpoint(first, w.cam)
        w.active.landmarks[lm_id] = lm
        key = landmark_key(lm_id)
        w.seed_info[key] = seed.landmark_info()
        w.seed_anchor[key] = lm.copy()
        for fid in sorted(entries):
            fac = entries[fid]
            w.live[fac.id] = fac
        del w.pending[lm_id]
    return w


# ---------------------------------------------------------------------------
# window solvers (shared outer iteration, strategy-specific inner step)


def _solve_information(w: WindowState, opts: SolverOptions):
    """Information-form Gauss-Newton over prior plus all live measurements."""
    index = StateIndex.of(w.active)
    prior = _PriorContext(w.prior_factors(), index)
    factories = [w.live[mid] for mid in sorted(w.live)]

    from .estimators import _assemble_information

    def solve_step(state, blocks, res):
        n, b = _assemble_information(index, blocks, prior, res)
        delta = spd_solve(n, b, "window normal equations", check_conditioning=False)
        post = GaussianBelief(index, "information", n, np.zeros(index.dim))
        return delta, {"_posterior": post}

    return _iterate(w.active, index, factories, prior, opts, solve_step), index


def _solve_two_step(w: WindowState, z_m_ids: set, opts: SolverOptions):
    """Two-step covariance-form solve: step 1 sweeps the to-be-converted
    measurements and commits (delta, P); step 2 sweeps the rest on top of a
    copy, yielding the full-information estimate without committing its
    covariance."""
    index = StateIndex.of(w.active)
    prior = _PriorContext(w.prior_factors(), index)
    factories = [w.live[mid] for mid in sorted(w.live)]
    p0 = prior.cov_matrix()
    order = sorted(w.live)
    m_ids = [mid for mid in order if mid in z_m_ids]
    blocks_by_id = {}

    def solve_step(state, blocks, res):
        blocks_by_id.clear()
        blocks_by_id.update({b.id: b for b in blocks})
        delta = prior.seed(res)
        p = p0.copy()
        step1 = [[blocks_by_id[mid]] for mid in m_ids]
        delta, p = kfr_sweep(delta, p, step1, index)
        delta_m, p_m = delta.copy(), p.copy()
        step2 = _group_by_frame([blocks_by_id[mid] for mid in order if mid not in z_m_ids])
        delta, _ = kfr_sweep(delta, p, step2, index)
        post = GaussianBelief(index, "covariance", p_m, np.zeros(index.dim))
        return delta, {"step1": (delta_m, p_m), "_posterior": post}

    return _iterate(w.active, index, factories, prior, opts, solve_step), index


def _solve_full_sweep(w: WindowState, opts: SolverOptions):
    """Covariance-form Kalman sweep over every live measurement."""
    index = StateIndex.of(w.active)
    prior = _PriorContext(w.prior_factors(), index)
    factories = [w.live[mid] for mid in sorted(w.live)]
    p0 = prior.cov_matrix()

    def solve_step(state, blocks, res):
        delta = prior.seed(res)
        p = p0.copy()
        delta, p = kfr_sweep(delta, p, _group_by_frame(blocks), index)
        post = GaussianBelief(index, "covariance", p, np.zeros(index.dim))
        return delta, {"p_post": p, "delta_post": delta.copy(), "_posterior": post}

    return _iterate(w.active, index, factories, prior, opts, solve_step), index


# ---------------------------------------------------------------------------
# slide bookkeeping shared by the strategies


def _drop_marginalized(w: WindowState, x_m: set, z_m: list):
    for fac in z_m:
        w.converted_ids.add(fac.id)
        del w.live[fac.id]
    for key in x_m:
        kind, sid = key
        if kind == FRAME:
            del w.active.frames[sid]
        else:
            del w.active.landmarks[sid]
    # Registry upkeep: forget departed frames/landmarks and drop pending
    # observations that can no longer qualify.
    gone_frames = {sid for kind, sid in x_m if kind == FRAME}
    gone_lms = {sid for kind, sid in x_m if kind == LANDMARK}
    for lm_id in list(w.track):
        if lm_id in gone_lms:
            del w.track[lm_id]
            continue
        w.track[lm_id] -= gone_frames
        if not w.track[lm_id]:
            del w.track[lm_id]
    for lm_id in list(w.pending):
        if lm_id in gone_lms:
            del w.pending[lm_id]
            continue
        for fid in list(w.pending[lm_id]):
            if fid in gone_frames:
                del w.pending[lm_id][fid]
        if not w.pending[lm_id]:
            del w.pending[lm_id]


def _survivor_keys(index: StateIndex, x_m: set) -> list:
    return [k for k in index.keys if k not in x_m]


def _anchors_at(state: NominalState, keys) -> dict:
    out = {}
    for key in keys:
        kind, sid = key
        out[key] = state.frames[sid].copy() if kind == FRAME else state.landmarks[sid].copy()
    return out


def _delete_from_cov(
    index: StateIndex, x_m: set, p: np.ndarray, delta: np.ndarray
) -> tuple[list, np.ndarray, np.ndarray]:
    keep_keys = _survivor_keys(index, x_m)
    keep_cols = index.columns(keep_keys)
    return keep_keys, p[np.ix_(keep_cols, keep_cols)].copy(), delta[keep_cols].copy()


# ---------------------------------------------------------------------------
# strategy steps


@dataclass
class SlideRecord:
    """Diagnostics captured at one slide, for tests and analysis."""

    x_m: set
    z_m_ids: list[int]
    z_r_ids: list[int]
    lin_state: NominalState
    transfer: PriorFactor


def _step_common(
    w: WindowState,
    new_frames: dict,
    new_measurements: list,
    opts: SolverOptions | None,
    policy: SlidePolicy,
    seed: SeedPrior,
    new_landmarks: dict | None,
    solver: str,
    convert_all: bool,
    zero_mean: bool,
    freeze_drift: bool,
) -> tuple[EstimatorReport | None, WindowState, SlideRecord | None]:
    opts = opts or SolverOptions()
    w.check_invariants()
    absorb(w, new_frames, new_measurements, policy, seed, new_landmarks)
    if len(w.active.frames) < policy.window_length:
        return None, w, None
    x_m = select_marginal(w, policy)
    z_m, z_r = partition_measurements(w, x_m)
    z_m_ids = {f.id for f in z_m}

    if solver == "information":
        (report, trace), index = _solve_information(w, opts)
    elif solver == "two_step":
        (report, trace), index = _solve_two_step(w, z_m_ids, opts)
    else:
        (report, trace), index = _solve_full_sweep(w, opts)

    record = None
    if x_m:
        lin = trace.lin_state
        keep_keys: list
        if solver == "information":
            # Convert prior + Z_m at the last linearization point, then
            # marginalize the departing states by Schur complement.
            prior = _PriorContext(w.prior_factors(), index)
            res = prior.residuals(lin)
            n_in = prior.info_matrix().copy()
            b_in = prior.rhs(res)
            for blk in trace.blocks:
                if blk.id in z_m_ids:
                    cols = index.columns(blk.touched)
                    hw = blk.jacobian.T @ blk.weight
                    n_in[np.ix_(cols, cols)] += hw @ blk.jacobian
                    b_in[cols] += hw @ blk.residual
            xm_cols = index.columns([k for k in index.keys if k in x_m])
            n_t, b_t = marginalize_indices(symmetrize(n_in), b_in, xm_cols)
            keep_keys = _survivor_keys(index, x_m)
            mean = spd_solve(n_t, b_t, "transferred prior", check_conditioning=False)
            transfer = PriorFactor(
                keys=keep_keys,
                mean_err=np.zeros_like(mean) if zero_mean else mean,
                anchors=_anchors_at(lin, keep_keys),
                info=n_t,
                frozen=freeze_drift,
            )
        elif solver == "two_step":
            delta_m, p_m = trace.extras["step1"]
            keep_keys, p_keep, mean = _delete_from_cov(index, x_m, p_m, delta_m)
            transfer = PriorFactor(
                keys=keep_keys,
                mean_err=np.zeros_like(mean) if zero_mean else mean,
                anchors=_anchors_at(lin, keep_keys),
                cov=p_keep,
                frozen=freeze_drift,
            )
        else:
            p_post = trace.extras["p_post"]
            delta_post = trace.extras["delta_post"]
            keep_keys, p_keep, mean = _delete_from_cov(index, x_m, p_post, delta_post)
            transfer = PriorFactor(
                keys=keep_keys,
                mean_err=np.zeros_like(mean) if zero_mean else mean,
                anchors=_anchors_at(lin, keep_keys),
                cov=p_keep,
                frozen=freeze_drift,
            )
        if convert_all:
            for mid in list(w.live):
                if mid not in z_m_ids:
                    w.converted_ids.add(mid)
                    del w.live[mid]
        _drop_marginalized(w, x_m, z_m)
        w.transfer = transfer
        w.seed_info.clear()
        w.seed_anchor.clear()
        record = SlideRecord(
            x_m=x_m,
            z_m_ids=sorted(z_m_ids),
            z_r_ids=[f.id for f in z_r],
            lin_state=lin,
            transfer=transfer,
        )
    w.check_invariants()
    return report, w, record


def swo_step(w, new_frames, new_measurements, opts=None, policy=None, seed=None, new_landmarks=None):
    """Sliding-window optimization: solve with the prior and all live
    measurements in information form; convert only the measurements of the
    marginalized states, keeping the rest live for re-linearization."""
    return _step_common(
        w, new_frames, new_measurements, opts, policy or SlidePolicy(), seed or SeedPrior(),
        new_landmarks, solver="information", convert_all=False, zero_mean=False,
        freeze_drift=False,
    )


def swf_step(w, new_frames, new_measurements, opts=None, policy=None, seed=None, new_landmarks=None):
    """Baseline sliding-window filter: Kalman sweep over all live
    measurements, covariance rows/columns of the marginalized states
    deleted, transferred mean zeroed, every used measurement converted."""
    return _step_common(
        w, new_frames, new_measurements, opts, policy or SlidePolicy(), seed or SeedPrior(),
        new_landmarks, solver="full_sweep", convert_all=True, zero_mean=True,
        freeze_drift=False,
    )


def swf_sa_step(w, new_frames, new_measurements, opts=None, policy=None, seed=None, new_landmarks=None):
    """Strategy-adjusted filter: two-step update; the transferred prior is
    step 1's posterior with the marginalized entries deleted, mean kept,
    drift correction against the fixed anchors applied."""
    return _step_common(
        w, new_frames, new_measurements, opts, policy or SlidePolicy(), seed or SeedPrior(),
        new_landmarks, solver="two_step", convert_all=False, zero_mean=False,
        freeze_drift=False,
    )


def swf_fej_step(w, new_frames, new_measurements, opts=None, policy=None, seed=None, new_landmarks=None):
    """Ablation: swf_sa with the transferred mean zeroed (constraints from
    the converted measurements' residuals are discarded)."""
    return _step_common(
        w, new_frames, new_measurements, opts, policy or SlidePolicy(), seed or SeedPrior(),
        new_landmarks, solver="two_step", convert_all=False, zero_mean=True,
        freeze_drift=False,
    )


def swf_full_step(w, new_frames, new_measurements, opts=None, policy=None, seed=None, new_landmarks=None):
    """Ablation: swf_sa with the linearization-drift correction forced to
    zero (the transferred prior ignores how far the estimates have moved
    from its anchors); the mean is kept."""
    return _step_common(
        w, new_frames, new_measurements, opts, policy or SlidePolicy(), seed or SeedPrior(),
        new_landmarks, solver="two_step", convert_all=False, zero_mean=False,
        freeze_drift=True,
    )


STRATEGY_STEPS = {
    "swo": swo_step,
    "swf": swf_step,
    "swf_sa": swf_sa_step,
    "swf_fej": swf_fej_step,
    "swf_full": swf_full_step,
}


# ---------------------------------------------------------------------------
# whole-run driver


@dataclass
class SlidingResult:
    frame_estimates: dict  # frame_id -> Pose
    reports: list[EstimatorReport]
    slides: list[SlideRecord]
    elapsed_s: float


def run_sliding(
    strategy: str,
    frames: list,  # ordered (frame_id, initial Pose)
    observations: dict,  # frame_id -> list of StereoFactory
    cam: StereoCamera,
    policy: SlidePolicy | None = None,
    opts: SolverOptions | None = None,
    seed: SeedPrior | None = None,
    landmark_initials: dict | None = None,
) -> SlidingResult:
    """Feed frames through a window strategy; a frame's reported estimate is
    taken from the solve of the window in which it was marginalized (or the
    final window)."""
    if strategy not in STRATEGY_STEPS:
        raise ValueError(f"unknown strategy {strategy!r}")
    step = STRATEGY_STEPS[strategy]
    policy = policy or SlidePolicy()
    opts = opts or SolverOptions()
    seed = seed or SeedPrior()
    t0 = time.perf_counter()
    w = new_window(cam)
    estimates: dict[int, Pose] = {}
    reports: list[EstimatorReport] = []
    slides: list[SlideRecord] = []
    last_report: EstimatorReport | None = None
    for frame_id, pose0 in frames:
        report, w, record = step(
            w,
            {frame_id: pose0},
            observations.get(frame_id, []),
            opts=opts,
            policy=policy,
            seed=seed,
            new_landmarks=landmark_initials,
        )
        if report is not None:
            reports.append(report)
            last_report = report
        if record is not None:
            slides.append(record)
            for kind, sid in record.x_m:
                if kind == FRAME:
                    estimates[sid] = last_report.estimates.frames[sid].copy()
    if last_report is not None:
        for fid, pose in last_report.estimates.frames.items():
            estimates[fid] = pose.copy()
    return SlidingResult(
        frame_estimates=estimates,
        reports=reports,
        slides=slides,
        elapsed_s=time.perf_counter() - t0,
    )
