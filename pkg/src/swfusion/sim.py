"""Monte-Carlo world and measurement generator: a stereo camera on a
circular trajectory observing randomly placed landmarks, with deterministic
per-trial random streams so every strategy consumes identical data.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .estimators import (
    EstimationProblem,
    EstimatorReport,
    SolverOptions,
    batch_solve,
    sequential_naive,
    sequential_pass,
)
from .problem import (
    GaussianBelief,
    Landmark,
    NominalState,
    Pose,
    StateIndex,
    StereoCamera,
    StereoFactory,
    stereo_observe,
)
from .rotations import exp_quat, matrix_to_quat, quat_multiply, quat_normalize
from .sliding import SeedPrior, SlidePolicy, run_sliding

_TAG_LANDMARKS = 1
_TAG_NOISE = 2
_TAG_PERTURB = 3


class DegenerateWorld(Exception):
    """A frame observes too few landmarks even after re-sampling."""


@dataclass
class SimConfig:
    n_frames: int = 24
    circle_radius: float = 10.0
    angular_step: float = 2.0 * np.pi / 72.0
    n_landmarks: int = 160
    landmark_box: tuple = ((-15.0, -15.0, -3.0), (15.0, 15.0, 3.0))
    camera: StereoCamera = field(default_factory=StereoCamera)
    pixel_sigma: float = 2.0
    init_perturb_pos: float = 0.1
    init_perturb_att: float = np.radians(0.5)
    n_trials: int = 50
    master_seed: int = 0
    # Seed prior granted to every state (None: unconstrained-information).
    prior_sigma_pos: float | None = 2.0
    prior_sigma_att: float | None = np.radians(2.0)
    prior_sigma_lm: float | None = 1.0
    # Observations are only generated this far inside the image bounds and
    # within this depth band, so perturbed linearizations stay well-posed
    # and every landmark keeps a usable stereo disparity.
    obs_margin_px: float = 40.0
    obs_depth_min: float = 1.5
    obs_depth_max: float = 14.0
    min_landmarks_per_frame: int = 8

    def __post_init__(self):
        if self.n_frames <= 0 or self.n_landmarks <= 0 or self.n_trials <= 0:
            raise ValueError("counts must be positive")
        if self.pixel_sigma < 0:
            raise ValueError("pixel_sigma must be >= 0")
        # Noiseless runs keep a unit weight: scaling the objective uniformly
        # leaves the minimizer unchanged and the system well conditioned.
        self.camera.pixel_sigma = self.pixel_sigma if self.pixel_sigma > 0 else 1.0

    def seed_prior(self) -> SeedPrior:
        return SeedPrior(self.prior_sigma_pos, self.prior_sigma_att, self.prior_sigma_lm)


@dataclass
class Observation:
    meas_id: int
    frame_id: int
    lm_id: int
    z: np.ndarray


@dataclass
class Trial:
    truth: NominalState
    observations: list[Observation]
    initials: NominalState
    seed: tuple

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for fid in self.truth.frame_ids():
            p = self.truth.frames[fid]
            h.update(p.position.tobytes())
            h.update(p.attitude.tobytes())
        for lid in self.truth.landmark_ids():
            h.update(self.truth.landmarks[lid].point.tobytes())
        for o in self.observations:
            h.update(np.int64([o.meas_id, o.frame_id, o.lm_id]).tobytes())
            h.update(o.z.tobytes())
        for fid in self.initials.frame_ids():
            p = self.initials.frames[fid]
            h.update(p.position.tobytes())
            h.update(p.attitude.tobytes())
        for lid in self.initials.landmark_ids():
            h.update(self.initials.landmarks[lid].point.tobytes())
        return h.hexdigest()


def _rng(cfg: SimConfig, trial_index: int, tag: int, attempt: int = 0) -> np.random.Generator:
    seq = np.random.SeedSequence((cfg.master_seed, trial_index, tag, attempt))
    return np.random.Generator(np.random.PCG64(seq))


def _circle_pose(cfg: SimConfig, k: int) -> Pose:
    theta = k * cfg.angular_step
    pos = np.array([cfg.circle_radius * np.cos(theta), cfg.circle_radius * np.sin(theta), 0.0])
    x_cam = np.array([np.cos(theta), np.sin(theta), 0.0])  # image right: radially out
    z_cam = np.array([-np.sin(theta), np.cos(theta), 0.0])  # optical axis: tangent
    y_cam = np.cross(z_cam, x_cam)
    r = np.column_stack([x_cam, y_cam, z_cam])
    return Pose(pos, matrix_to_quat(r))


def _observable(pose: Pose, lm: Landmark, cfg: SimConfig) -> np.ndarray | None:
    cam = cfg.camera
    uv = stereo_observe(pose, lm, cam)
    if uv is None:
        return None
    q = pose.rotation().T @ (lm.point - pose.position)
    if not (cfg.obs_depth_min <= q[2] <= cfg.obs_depth_max):
        return None
    m = cfg.obs_margin_px
    if not (m <= uv[0] <= cam.width - 1 - m and m <= uv[2] <= cam.width - 1 - m):
        return None
    if not (m <= uv[1] <= cam.height - 1 - m):
        return None
    return uv


def generate_trial(cfg: SimConfig, trial_index: int) -> Trial:
    """Build one trial: circular trajectory, uniformly sampled landmarks,
    noisy stereo observations of visible landmarks tracked by at least two
    frames, and perturbed linearization seeds. Deterministic in
    (master_seed, trial_index)."""
    truth_frames = {k: _circle_pose(cfg, k) for k in range(cfg.n_frames)}
    lo, hi = np.asarray(cfg.landmark_box[0]), np.asarray(cfg.landmark_box[1])
    for attempt in range(10):
        rng_lm = _rng(cfg, trial_index, _TAG_LANDMARKS, attempt)
        points = rng_lm.uniform(lo, hi, size=(cfg.n_landmarks, 3))
        landmarks = {j: Landmark(points[j]) for j in range(cfg.n_landmarks)}
        visible: dict[int, list[tuple[int, np.ndarray]]] = {}
        for fid in range(cfg.n_frames):
            pose = truth_frames[fid]
            for lid in range(cfg.n_landmarks):
                uv = _observable(pose, landmarks[lid], cfg)
                if uv is not None:
                    visible.setdefault(lid, []).append((fid, uv))
        kept = {lid: obs for lid, obs in visible.items() if len(obs) >= 2}
        per_frame: dict[int, int] = {fid: 0 for fid in range(cfg.n_frames)}
        for obs in kept.values():
            for fid, _ in obs:
                per_frame[fid] += 1
        if min(per_frame.values()) >= cfg.min_landmarks_per_frame:
            break
    else:
        raise DegenerateWorld(
            f"trial {trial_index}: a frame observes fewer than "
            f"{cfg.min_landmarks_per_frame} landmarks after 10 re-samples"
        )

    rng_noise = _rng(cfg, trial_index, _TAG_NOISE)
    observations: list[Observation] = []
    meas_id = 0
    for fid in range(cfg.n_frames):
        for lid in sorted(kept):
            match = [uv for f, uv in kept[lid] if f == fid]
            if not match:
                continue
            z = match[0] + cfg.pixel_sigma * rng_noise.standard_normal(4)
            observations.append(Observation(meas_id, fid, lid, z))
            meas_id += 1

    rng_pert = _rng(cfg, trial_index, _TAG_PERTURB)
    init_frames = {}
    for fid in range(cfg.n_frames):
        p = truth_frames[fid]
        dp = cfg.init_perturb_pos * rng_pert.standard_normal(3)
        dth = cfg.init_perturb_att * rng_pert.standard_normal(3)
        q = quat_normalize(quat_multiply(exp_quat(dth), p.attitude))
        init_frames[fid] = Pose(p.position + dp, q)
    init_lms = {}
    for lid in sorted(kept):
        dl = cfg.init_perturb_pos * rng_pert.standard_normal(3)
        init_lms[lid] = Landmark(landmarks[lid].point + dl)

    truth = NominalState(truth_frames, {lid: landmarks[lid] for lid in sorted(kept)})
    initials = NominalState(init_frames, init_lms)
    return Trial(
        truth=truth,
        observations=observations,
        initials=initials,
        seed=(cfg.master_seed, trial_index),
    )


# ---------------------------------------------------------------------------
# strategy runners over one trial


def seed_prior_belief(cfg: SimConfig, initials: NominalState) -> GaussianBelief:
    index = StateIndex.of(initials)
    seed = cfg.seed_prior()
    diag = np.empty(index.dim)
    for key in index.keys:
        sl = index.slice_of(key)
        diag[sl] = seed.frame_info() if key[0] == "f" else seed.landmark_info()
    return GaussianBelief(index, "information", np.diag(diag), np.zeros(index.dim))


def build_problem(trial: Trial, cfg: SimConfig) -> EstimationProblem:
    factories = [
        StereoFactory(o.meas_id, o.frame_id, o.lm_id, o.z, cfg.camera)
        for o in trial.observations
    ]
    return EstimationProblem(
        initial=trial.initials,
        measurements=factories,
        prior=seed_prior_belief(cfg, trial.initials),
    )


@dataclass
class StrategyRun:
    strategy: str
    frame_estimates: dict  # frame_id -> Pose
    elapsed_s: float
    converged: bool
    error: str | None = None
    fingerprint: str = ""


def _estimates_from_report(report: EstimatorReport) -> dict:
    return {fid: pose.copy() for fid, pose in report.estimates.frames.items()}


def run_strategy(
    trial: Trial,
    cfg: SimConfig,
    strategy: str,
    opts: SolverOptions | None = None,
    policy: SlidePolicy | None = None,
) -> StrategyRun:
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    if strategy in ("batch", "sequential", "sequential_naive"):
        problem = build_problem(trial, cfg)
        solver = {
            "batch": batch_solve,
            "sequential": sequential_pass,
            "sequential_naive": sequential_naive,
        }[strategy]
        report = solver(problem, opts)
        return StrategyRun(
            strategy=strategy,
            frame_estimates=_estimates_from_report(report),
            elapsed_s=time.perf_counter() - t0,
            converged=report.converged,
            fingerprint=trial.fingerprint(),
        )
    frames = [(fid, trial.initials.frames[fid]) for fid in trial.initials.frame_ids()]
    obs_by_frame: dict[int, list] = {}
    for o in trial.observations:
        obs_by_frame.setdefault(o.frame_id, []).append(
            StereoFactory(o.meas_id, o.frame_id, o.lm_id, o.z, cfg.camera)
        )
    result = run_sliding(
        strategy,
        frames,
        obs_by_frame,
        cfg.camera,
        policy=policy or SlidePolicy(),
        opts=opts,
        seed=cfg.seed_prior(),
        landmark_initials=trial.initials.landmarks,
    )
    converged = all(r.converged for r in result.reports) if result.reports else False
    return StrategyRun(
        strategy=strategy,
        frame_estimates=result.frame_estimates,
        elapsed_s=time.perf_counter() - t0,
        converged=converged,
        fingerprint=trial.fingerprint(),
    )


KNOWN_STRATEGIES = (
    "batch",
    "sequential",
    "sequential_naive",
    "swo",
    "swf",
    "swf_sa",
    "swf_fej",
    "swf_full",
)


@dataclass
class MonteCarloResult:
    config: SimConfig
    strategies: list[str]
    trials: list[Trial]
    runs: dict  # (trial_index, strategy) -> StrategyRun


def _run_one_trial(args):
    cfg, index, strategies, opts, policy = args
    trial = generate_trial(cfg, index)
    out = {}
    for name in strategies:
        try:
            out[name] = run_strategy(trial, cfg, name, opts, policy)
        except Exception as exc:  # keep the sweep alive, mark the run failed
            out[name] = StrategyRun(
                strategy=name,
                frame_estimates={},
                elapsed_s=0.0,
                converged=False,
                error=f"{type(exc).__name__}: {exc}",
                fingerprint=trial.fingerprint(),
            )
    return index, trial, out


def run_monte_carlo(
    cfg: SimConfig,
    strategy_set,
    opts: SolverOptions | None = None,
    policy: SlidePolicy | None = None,
    workers: int = 1,
) -> MonteCarloResult:
    """Run every strategy on the identical trial data for each trial index.
    Trials are independent; with workers > 1 they are fanned out to a
    process pool and results are aggregated in trial order."""
    strategies = list(strategy_set)
    if not strategies:
        raise ValueError("strategy_set must be nonempty")
    for name in strategies:
        if name not in KNOWN_STRATEGIES:
            raise ValueError(f"unknown strategy {name!r}")
    opts = opts or SolverOptions()
    tasks = [(cfg, i, strategies, opts, policy) for i in range(cfg.n_trials)]
    results: dict[int, tuple[Trial, dict]] = {}
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(processes=workers) as pool:
            for index, trial, out in pool.imap_unordered(_run_one_trial, tasks):
                results[index] = (trial, out)
    else:
        for task in tasks:
            index, trial, out = _run_one_trial(task)
            results[index] = (trial, out)
    trials = [results[i][0] for i in range(cfg.n_trials)]
    runs = {}
    for i in range(cfg.n_trials):
        for name, run in results[i][1].items():
            runs[(i, name)] = run
    return MonteCarloResult(config=cfg, strategies=strategies, trials=trials, runs=runs)
