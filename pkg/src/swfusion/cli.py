"""Command-line harness: experiment configuration, Monte-Carlo execution,
result emission, and track-file ingestion.

Subcommands:
    simulate  run strategies on simulated trials, emit estimate /
              discrepancy / RMSE CSVs plus a JSON manifest
    compare   pairwise discrepancy of strategies against a control, with a
              log10 summary table
    ablate    compare with ablation defaults (control swo, subjects
              swf_sa / swf_fej / swf_full)
    ingest    parse and validate a track file, print summary counts

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical
failure. Errors are reported as one JSON record on stderr.

The worker count comes from --workers or the SWFUSION_THREADS environment
variable. Every numeric CSV cell is checked finite before writing; CSVs
carry no timestamps or timings, so identical configurations reproduce
byte-identical files (run with a pinned BLAS thread count, e.g.
OPENBLAS_NUM_THREADS=1, for bit reproducibility).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .blockmat import SingularBlock
from .estimators import SingularSystem, SolverOptions
from .metrics import (
    DiscrepancySeries,
    discrepancy,
    log10_stats,
    log10_stats_mean_of_logs,
    poses_to_state,
    rmse,
)
from .problem import NominalState
from .sim import (
    KNOWN_STRATEGIES,
    MonteCarloResult,
    Observation,
    SimConfig,
    StrategyRun,
    Trial,
    run_monte_carlo,
    run_strategy,
)
from .sliding import SlidePolicy
from .trackfile import ParseError, ValidationError, read_trackfile, validate_trackfile

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    sim: SimConfig | None = None
    trackfile: str | None = None
    strategies: list[str] = field(default_factory=lambda: ["batch"])
    control: str | None = None
    policy: SlidePolicy = field(default_factory=SlidePolicy)
    solver: SolverOptions = field(default_factory=SolverOptions)
    workers: int = 1

    def __post_init__(self):
        if (self.sim is None) == (self.trackfile is None):
            raise DataError("config must define exactly one source: sim or trackfile")
        for s in self.strategies:
            if s not in KNOWN_STRATEGIES:
                raise DataError(f"unknown strategy {s!r}; known: {', '.join(KNOWN_STRATEGIES)}")


def _sim_to_dict(cfg: SimConfig) -> dict:
    d = {}
    for name in (
        "n_frames", "circle_radius", "angular_step", "n_landmarks", "pixel_sigma",
        "init_perturb_pos", "init_perturb_att", "n_trials", "master_seed",
        "prior_sigma_pos", "prior_sigma_att", "prior_sigma_lm",
        "obs_margin_px", "obs_depth_min", "obs_depth_max", "min_landmarks_per_frame",
    ):
        d[name] = getattr(cfg, name)
    d["landmark_box"] = [list(cfg.landmark_box[0]), list(cfg.landmark_box[1])]
    cam = cfg.camera
    d["camera"] = {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "baseline": cam.baseline, "width": cam.width, "height": cam.height,
        "depth_min": cam.depth_min,
    }
    return d


def _sim_from_dict(d: dict) -> SimConfig:
    from .problem import StereoCamera

    d = dict(d)
    cam = d.pop("camera", None)
    box = d.pop("landmark_box", None)
    kwargs = dict(d)
    if cam is not None:
        kwargs["camera"] = StereoCamera(**cam)
    if box is not None:
        kwargs["landmark_box"] = (tuple(box[0]), tuple(box[1]))
    try:
        return SimConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad sim config: {exc}") from exc


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "source": (
            {"sim": _sim_to_dict(cfg.sim)} if cfg.sim is not None
            else {"trackfile": cfg.trackfile}
        ),
        "strategies": list(cfg.strategies),
        "control": cfg.control,
        "policy": {
            "window_length": cfg.policy.window_length,
            "marginal_selector": cfg.policy.marginal_selector,
            "landmark_min_track": cfg.policy.landmark_min_track,
        },
        "solver": {
            "step_tol": cfg.solver.step_tol,
            "max_iterations": cfg.solver.max_iterations,
            "cost_increase_rtol": cfg.solver.cost_increase_rtol,
        },
        "workers": cfg.workers,
    }


def config_from_dict(d: dict) -> ExperimentConfig:
    if "config" in d:  # a manifest: re-execute the run it records
        d = d["config"]
    src = d.get("source", {})
    sim = _sim_from_dict(src["sim"]) if "sim" in src else None
    trackfile = src.get("trackfile")
    policy = SlidePolicy(**d.get("policy", {}))
    solver = SolverOptions(**d.get("solver", {}))
    return ExperimentConfig(
        sim=sim,
        trackfile=trackfile,
        strategies=list(d.get("strategies", ["batch"])),
        control=d.get("control"),
        policy=policy,
        solver=solver,
        workers=int(d.get("workers", 1)),
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataError("config root must be a JSON object")
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# track-file source as a single trial


@dataclass
class _TrackRunConfig:
    """Adapter giving a TrackFile run the surface run_strategy needs."""

    camera: object
    prior_sigma_pos: float | None = 2.0
    prior_sigma_att: float | None = np.radians(2.0)
    prior_sigma_lm: float | None = 0.5

    def seed_prior(self):
        from .sliding import SeedPrior

        return SeedPrior(self.prior_sigma_pos, self.prior_sigma_att, self.prior_sigma_lm)


def trial_from_trackfile(path: str) -> tuple[Trial, _TrackRunConfig]:
    tf = read_trackfile(path)
    observations = [
        Observation(i, o.frame_id, o.lm_id, o.z) for i, o in enumerate(tf.observations)
    ]
    initials = NominalState(
        {fid: p.copy() for fid, p in tf.frames.items()},
        {lid: l.copy() for lid, l in tf.landmarks.items()},
    )
    truth = NominalState(
        {fid: p.copy() for fid, p in tf.ground_truth.items()}, {}
    )
    trial = Trial(truth=truth, observations=observations, initials=initials, seed=(0, 0))
    return trial, _TrackRunConfig(camera=tf.camera)


# ---------------------------------------------------------------------------
# emission


def _check_finite(value: float, where: str) -> float:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite value in {where}")
    return float(value)


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, float):
                cells.append(repr(_check_finite(v, str(path))))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _estimates_rows(runs: dict, n_trials: int, strategies: list[str]) -> list[list]:
    rows = []
    for i in range(n_trials):
        for s in strategies:
            run = runs[(i, s)]
            if run.error:
                continue
            for fid in sorted(run.frame_estimates):
                p = run.frame_estimates[fid]
                rows.append(
                    [i, fid, s]
                    + [float(v) for v in p.position]
                    + [float(v) for v in p.attitude]
                )
    return rows


def _pairwise_series(
    runs: dict, n_trials: int, subjects: list[str], control: str
) -> dict:
    """(strategy -> list of per-trial DiscrepancySeries vs the control)."""
    out: dict[str, list[DiscrepancySeries]] = {s: [] for s in subjects}
    for i in range(n_trials):
        ctrl_run = runs[(i, control)]
        if ctrl_run.error:
            continue
        ctrl = poses_to_state(ctrl_run.frame_estimates)
        for s in subjects:
            run = runs[(i, s)]
            if run.error:
                continue
            out[s].append(discrepancy(ctrl, poses_to_state(run.frame_estimates)))
    return out


def _discrepancy_rows(series: dict, control: str) -> list[list]:
    rows = []
    for s in sorted(series):
        for i, d in enumerate(series[s]):
            for k, fid in enumerate(d.frame_ids):
                rows.append([i, fid, s, control, float(d.translation[k]), float(d.attitude[k])])
    return rows


def _rmse_rows(result_runs: dict, trials, strategies: list[str]) -> list[list]:
    rows = []
    for i, trial in enumerate(trials):
        if not trial.truth.frames:
            continue
        truth = poses_to_state(trial.truth.frames)
        for s in strategies:
            run = result_runs[(i, s)]
            if run.error:
                continue
            pos, att = rmse(poses_to_state(run.frame_estimates), truth)
            rows.append([i, s, pos, att])
    return rows


def _pooled(series_list: list[DiscrepancySeries]) -> DiscrepancySeries:
    ids = list(range(sum(len(s.frame_ids) for s in series_list)))
    t = np.concatenate([s.translation for s in series_list])
    a = np.concatenate([s.attitude for s in series_list])
    return DiscrepancySeries(ids, t, a)


def _summary_rows(series: dict) -> tuple[list[list], str]:
    header_rows = []
    text = [
        f"{'strategy':<10} {'t_log10max':>11} {'t_log10mean':>12} "
        f"{'a_log10max':>11} {'a_log10mean':>12}"
    ]
    for s in sorted(series):
        if not series[s]:
            continue
        pooled = _pooled(series[s])
        st = log10_stats(pooled)
        tl, al = log10_stats_mean_of_logs(pooled)
        header_rows.append(
            [s, st.translation_max, st.translation_mean, st.attitude_max,
             st.attitude_mean, tl, al]
        )
        text.append(
            f"{s:<10} {st.translation_max:>11.3f} {st.translation_mean:>12.3f} "
            f"{st.attitude_max:>11.3f} {st.attitude_mean:>12.3f}"
        )
    return header_rows, "\n".join(text) + "\n"


def _emit(
    out_dir: str,
    cfg: ExperimentConfig,
    runs: dict,
    trials,
    strategies: list[str],
    control: str | None,
    timings: dict,
) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    n_trials = len(trials)
    written = []

    path = os.path.join(out_dir, "estimates.csv")
    _write_csv(
        path,
        ["trial", "frame_id", "strategy", "px", "py", "pz", "qw", "qx", "qy", "qz"],
        _estimates_rows(runs, n_trials, strategies),
    )
    written.append(path)

    ctrl = control or strategies[0]
    subjects = [s for s in strategies if s != ctrl]
    series = _pairwise_series(runs, n_trials, subjects, ctrl) if subjects else {}
    path = os.path.join(out_dir, "discrepancy.csv")
    _write_csv(
        path,
        ["trial", "frame_id", "strategy", "control", "translation_m", "attitude_deg"],
        _discrepancy_rows(series, ctrl),
    )
    written.append(path)

    path = os.path.join(out_dir, "rmse.csv")
    _write_csv(
        path,
        ["trial", "strategy", "pos_rmse_m", "att_rmse_deg"],
        _rmse_rows(runs, trials, strategies),
    )
    written.append(path)

    if subjects:
        rows, text = _summary_rows(series)
        path = os.path.join(out_dir, "summary_log10.csv")
        _write_csv(
            path,
            ["strategy", "translation_log10_max", "translation_log10_mean",
             "attitude_log10_max", "attitude_log10_mean",
             "translation_log10_mean_of_logs", "attitude_log10_mean_of_logs"],
            rows,
        )
        written.append(path)
        path = os.path.join(out_dir, "table.txt")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        written.append(path)

    failures = {
        f"{i}:{s}": runs[(i, s)].error
        for i in range(n_trials) for s in strategies if runs[(i, s)].error
    }
    manifest = {
        "tool": "swfusion",
        "version": __version__,
        "numpy": np.__version__,
        "config": config_to_dict(cfg),
        "control": ctrl,
        "trial_fingerprints": [t.fingerprint() for t in trials],
        "timings_s": timings,
        "failures": failures,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(path)
    if failures:
        raise NumericalError(f"{len(failures)} strategy runs failed: {failures}")
    return written


# ---------------------------------------------------------------------------
# subcommands


def _run_experiment(cfg: ExperimentConfig, out_dir: str) -> list[str]:
    t0 = time.perf_counter()
    if cfg.sim is not None:
        result = run_monte_carlo(
            cfg.sim, cfg.strategies, opts=cfg.solver, policy=cfg.policy, workers=cfg.workers
        )
        trials, runs = result.trials, result.runs
    else:
        trial, track_cfg = trial_from_trackfile(cfg.trackfile)
        runs = {}
        for s in cfg.strategies:
            try:
                runs[(0, s)] = run_strategy(trial, track_cfg, s, cfg.solver, cfg.policy)
            except Exception as exc:
                runs[(0, s)] = StrategyRun(
                    strategy=s, frame_estimates={}, elapsed_s=0.0,
                    converged=False, error=f"{type(exc).__name__}: {exc}",
                )
        trials = [trial]
    timings = {}
    for s in cfg.strategies:
        timings[s] = sum(
            runs[(i, s)].elapsed_s for i in range(len(trials)) if not runs[(i, s)].error
        )
    timings["total"] = time.perf_counter() - t0
    return _emit(out_dir, cfg, runs, trials, cfg.strategies, cfg.control, timings)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if cfg.sim is None:
        raise DataError("simulate requires a sim source")
    _apply_overrides(cfg, args)
    written = _run_experiment(cfg, args.out)
    print("\n".join(written))
    return EXIT_OK


def cmd_compare(args, ablate: bool = False) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    if ablate and args.strategies is None and not cfg.control:
        cfg.control = "swo"
        cfg.strategies = ["swo", "swf_sa", "swf_fej", "swf_full"]
    if cfg.control is None:
        raise DataError("compare requires a control strategy (--control)")
    if cfg.control not in cfg.strategies:
        cfg.strategies = [cfg.control] + cfg.strategies
    if len(cfg.strategies) < 2:
        raise DataError("compare requires at least two strategies")
    written = _run_experiment(cfg, args.out)
    table = os.path.join(args.out, "table.txt")
    if os.path.exists(table):
        with open(table, "r", encoding="utf-8") as fh:
            print(fh.read(), end="")
    print("\n".join(written))
    return EXIT_OK


def cmd_ingest(args) -> int:
    tf = read_trackfile(args.path)
    summary = validate_trackfile(tf)
    for key, value in summary.items():
        print(f"{key}: {value}")
    return EXIT_OK


def _apply_overrides(cfg: ExperimentConfig, args) -> None:
    if getattr(args, "seed", None) is not None:
        if cfg.sim is None:
            raise DataError("--seed applies to sim sources only")
        cfg.sim.master_seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    elif os.environ.get("SWFUSION_THREADS"):
        try:
            cfg.workers = max(1, int(os.environ["SWFUSION_THREADS"]))
        except ValueError:
            raise DataError("SWFUSION_THREADS must be an integer")
    if getattr(args, "control", None):
        cfg.control = args.control
    if getattr(args, "strategies", None):
        cfg.strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
        for s in cfg.strategies:
            if s not in KNOWN_STRATEGIES:
                raise DataError(f"unknown strategy {s!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="swfusion", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON config or manifest path")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--workers", type=int, help="worker process count")
        sp.add_argument("--control", help="control strategy for discrepancies")
        sp.add_argument("--strategies", help="comma-separated strategy list")

    common(sub.add_parser("simulate", help="run strategies on simulated trials"))
    common(sub.add_parser("compare", help="pairwise discrepancy vs a control"))
    common(sub.add_parser("ablate", help="ablation comparison (control swo)"))
    ing = sub.add_parser("ingest", help="parse and validate a track file")
    ing.add_argument("path", help="track file path")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "compare":
            return cmd_compare(args)
        if args.command == "ablate":
            return cmd_compare(args, ablate=True)
        if args.command == "ingest":
            return cmd_ingest(args)
        raise UsageError(f"unknown command {args.command}")
    except UsageError as exc:
        _report_error("usage", exc)
        return EXIT_USAGE
    except (DataError, ParseError, ValidationError, FileNotFoundError) as exc:
        _report_error("data", exc)
        return EXIT_DATA
    except (NumericalError, SingularBlock, SingularSystem) as exc:
        _report_error("numerical", exc)
        return EXIT_NUMERICAL


def _report_error(kind: str, exc: Exception) -> None:
    record = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
