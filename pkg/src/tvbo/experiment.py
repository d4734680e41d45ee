"""Benchmark sweeps over methods and seeds on the time-varying LQR problem.

Every (method, seed) run writes a trajectory CSV; a sweep adds a summary
CSV with regret and unstable-controller statistics per method and a
normalized-regret curve CSV per method.

Run from the command line with ``python -m tvbo.experiment --help``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import lqr
from .gp import Dataset, HyperPriors, Observation, ParamPoint
from .optimizer import AcquisitionConfig, StepRecord, initialize, tvbo_step
from .region import TrustRegion
from .seeding import child_seed

log = logging.getLogger(__name__)

METHODS = ("ui", "b2p", "c-ui", "c-b2p", "baseline-k0")
PROBLEMS = ("lqr2d", "lqr4d", "lqr4d-reduced")


@dataclass
class Settings:
    """Overridable defaults; every field can be set with ``--override key=value``."""

    n_initial: int = 30
    spread: float | None = None
    noise_std: float = 1e-3
    x0_angle: float = 0.05
    cost_threshold_factor: float = 100.0
    log_cost: bool = True
    state_norm_limit: float = 1e3
    region_fraction: float = 0.4
    vops_per_dim: int | None = None
    n_posterior_samples: int = 64
    grid_per_dim: int = 50
    max_candidates: int = 4096
    gibbs_threshold: int = 60
    burn_in: int = 200
    window: int | None = None
    lengthscale_prior_shape: float = 3.0
    lengthscale_prior_rate: float = 6.0
    initial_noise_variance: float = 0.1
    workers: int = 0


@dataclass
class ExperimentConfig:
    problem: str = "lqr2d"
    methods: tuple = ("ui", "b2p", "c-ui", "c-b2p", "baseline-k0")
    horizon: int = 300
    seeds: tuple = tuple(range(25))
    forgetting: float = 0.03
    beta: float = 2.0
    output_dir: str = "results"
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}")
        if self.horizon < 1 or not self.seeds or not self.forgetting > 0:
            raise ValueError("need horizon >= 1, non-empty seeds and forgetting > 0")
        self.methods = tuple(self.methods)
        self.seeds = tuple(int(s) for s in self.seeds)

    def settings(self) -> Settings:
        s = Settings()
        types = {f.name: f.type for f in fields(Settings)}
        for key, value in self.overrides.items():
            if key not in types:
                raise KeyError(f"unknown override {key!r}")
            setattr(s, key, _coerce(value, getattr(Settings, key, None), types[key]))
        return s


def _coerce(value, default, annotation):
    if not isinstance(value, str):
        return value
    if value.lower() in ("none", ""):
        return None
    kind = str(annotation)
    if "bool" in kind:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if "int" in kind and "float" not in kind:
        return int(value)
    return float(value)


@dataclass
class SummaryRow:
    method: str
    regret_mean: float
    regret_std: float
    unstable_mean: float
    unstable_std: float
    n_runs: int = 0


@dataclass
class RunResult:
    method: str
    seed: int
    rows: list
    timings: list
    error: str | None = None

    @property
    def regret(self) -> float:
        return float(sum(r["regret"] for r in self.rows))

    @property
    def n_unstable(self) -> int:
        return int(sum(not r["stable"] for r in self.rows))


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------


def build_problem(cfg: ExperimentConfig, s: Settings) -> lqr.Problem:
    x0 = np.array([0.0, 0.0, s.x0_angle, 0.0])
    episode = lqr.EpisodeConfig(x0=x0, process_noise_std=np.full(4, s.noise_std))
    return lqr.make_problem(cfg.problem, spread=s.spread, episode=episode)


def acquisition_config(method: str, cfg: ExperimentConfig, s: Settings) -> AcquisitionConfig:
    return AcquisitionConfig(
        beta=cfg.beta, use_constraints=method.startswith("c-"),
        n_posterior_samples=s.n_posterior_samples, region_fraction=s.region_fraction,
        vops_per_dim=s.vops_per_dim, grid_per_dim=s.grid_per_dim,
        max_candidates=s.max_candidates, gibbs_threshold=s.gibbs_threshold,
        burn_in=s.burn_in, window=s.window)


def run_single(cfg: ExperimentConfig, method: str, seed: int) -> RunResult:
    """Run one method for one seed; errors are captured in the result."""
    try:
        return _run_single(cfg, method, seed)
    except Exception as exc:  # recorded per run, summarized later
        log.exception("run %s/%s failed", method, seed)
        return RunResult(method, seed, [], [], error=f"{type(exc).__name__}: {exc}")


def _run_single(cfg: ExperimentConfig, method: str, seed: int) -> RunResult:
    s = cfg.settings()
    problem = build_problem(cfg, s)
    lo, hi = problem.lower, problem.upper
    initial = lqr.make_initial_dataset(problem, s.n_initial, seed)
    threshold = lqr.calibrate_threshold(initial, s.cost_threshold_factor, s.state_norm_limit)

    def to_raw(u):
        return lo + np.asarray(u, dtype=float) * (hi - lo)

    # The GP sees log-costs: raw costs near the stability boundary are
    # orders of magnitude above the optimum and swamp a stationary model.
    shape = np.log if s.log_cost else (lambda c: c)

    def objective(u, t):
        res = problem.simulate(to_raw(u), t, child_seed(seed, "episode", t), threshold)
        y = float(shape(res.cost)) if res.stable else res.cost
        return y, res.stable

    rows, timings = [], []
    if method == "baseline-k0":
        K0 = lqr.optimal_gain(0, problem.params, problem.schedule, problem.episode)
        theta = K0[list(problem.free)]
        for t in range(1, cfg.horizon + 1):
            res = lqr.simulate_episode(K0, t, problem.episode, problem.params, problem.schedule,
                                       child_seed(seed, "episode", t), threshold)
            fq = lqr.expected_cost(K0, t, problem.episode, problem.params, problem.schedule)
            rows.append(_row(t, theta, res.cost, math.nan, res.stable, False, fq,
                             problem.f_opt(t)))
            timings.append(0.0)
        return RunResult(method, seed, rows, timings)

    unit = TrustRegion(np.zeros(problem.dim), np.ones(problem.dim))
    initial_unit = Dataset([
        Observation(ParamPoint((r.point.theta - lo) / (hi - lo), r.point.t), float(shape(r.y)))
        for r in initial.records])
    acq = acquisition_config(method, cfg, s)
    strategy = "ui" if method.endswith("ui") else "b2p"
    priors = HyperPriors(np.full(problem.dim, s.lengthscale_prior_shape),
                         np.full(problem.dim, s.lengthscale_prior_rate))
    state = initialize(initial_unit, unit, strategy, cfg.forgetting, acq,
                       noise_variance=s.initial_noise_variance, priors=priors, rng_seed=seed)
    for _ in range(cfg.horizon):
        tvbo_step(state, acq, objective, seed)
        rec: StepRecord = state.history[-1]
        theta = to_raw(rec.query)
        fq = problem.f(theta, rec.t)
        cost = math.exp(rec.y_raw) if s.log_cost and rec.stable else rec.y_raw
        rows.append(_row(rec.t, theta, cost, rec.y, rec.stable, rec.imputed, fq,
                         problem.f_opt(rec.t)))
        timings.append(rec.wall_ms)
    return RunResult(method, seed, rows, timings)


def _row(t, theta, y_raw, y_norm, stable, imputed, f_query, f_opt):
    ok = stable and math.isfinite(f_query)
    return {"t": int(t), "theta": np.asarray(theta, dtype=float).copy(), "y_raw": float(y_raw),
            "y_norm": float(y_norm), "stable": bool(stable), "imputed": bool(imputed),
            "f_query": float(f_query), "f_opt": float(f_opt),
            "regret": float(f_query - f_opt) if ok else 0.0}


# ---------------------------------------------------------------------------
# Summaries and CSV output
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".12g")


def trajectory_csv(result: RunResult) -> str:
    D = len(result.rows[0]["theta"]) if result.rows else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"theta_{i}" for i in range(D)] +
               ["y_raw", "y_norm", "stable", "imputed", "f_query", "f_opt", "regret"])
    for r in result.rows:
        w.writerow([_fmt(r["t"])] + [_fmt(v) for v in r["theta"]] +
                   [_fmt(r[k]) for k in ("y_raw", "y_norm", "stable", "imputed", "f_query",
                                         "f_opt", "regret")])
    return buf.getvalue()


def read_trajectory(path) -> RunResult:
    """Parse a trajectory CSV written by :func:`trajectory_csv`."""
    path = Path(path)
    method, seed = path.stem.rsplit("_seed", 1)
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            theta = np.array([float(rec[k]) for k in rec if k.startswith("theta_")])
            rows.append({"t": int(rec["t"]), "theta": theta, "y_raw": float(rec["y_raw"]),
                         "y_norm": float(rec["y_norm"]), "stable": rec["stable"] == "1",
                         "imputed": rec["imputed"] == "1", "f_query": float(rec["f_query"]),
                         "f_opt": float(rec["f_opt"]), "regret": float(rec["regret"])})
    return RunResult(method, int(seed), rows, [])


def summarize(results) -> list:
    """Per-method regret and unstable-count statistics (population std)."""
    by_method: dict = {}
    for r in results:
        if r.error is None:
            by_method.setdefault(r.method, []).append(r)
    out = []
    for method, runs in by_method.items():
        reg = np.array([r.regret for r in runs])
        uns = np.array([r.n_unstable for r in runs], dtype=float)
        out.append(SummaryRow(method, float(reg.mean()), float(reg.std()), float(uns.mean()),
                              float(uns.std()), len(runs)))
    return out


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "regret_mean", "regret_std", "unstable_mean", "unstable_std", "n_runs"])
    for r in rows:
        w.writerow([r.method, _fmt(r.regret_mean), _fmt(r.regret_std), _fmt(r.unstable_mean),
                    _fmt(r.unstable_std), _fmt(r.n_runs)])
    return buf.getvalue()


def normalized_regret_curves(results):
    """Cumulative regret divided by ``t`` for each run, plus the mean over runs.

    Returns
    -------
    t : ndarray
    curves : ndarray, shape (n_runs, T)
    mean : ndarray
    """
    incs = [np.array([r["regret"] for r in res.rows]) for res in results]
    lengths = {len(i) for i in incs}
    if len(lengths) != 1:
        raise ValueError("trajectories must share the horizon")
    T = lengths.pop()
    t = np.arange(1, T + 1)
    curves = np.array([np.cumsum(i) / t for i in incs])
    return t, curves, curves.mean(axis=0)


def emit_regret_curves(results) -> str:
    t, curves, mean = normalized_regret_curves(results)
    buf = io.StringIO()
    buf.write("# normalized regret: cumulative regret / t\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"{r.method}_seed{r.seed}" for r in results] + ["mean"])
    for k in range(len(t)):
        w.writerow([_fmt(int(t[k]))] + [_fmt(c[k]) for c in curves] + [_fmt(mean[k])])
    return buf.getvalue()


def config_text(cfg: ExperimentConfig) -> str:
    """Fully resolved configuration in the format read by :func:`load_config`."""
    cp = configparser.ConfigParser()
    cp["experiment"] = {
        "problem": cfg.problem, "methods": ",".join(cfg.methods), "horizon": str(cfg.horizon),
        "seeds": ",".join(str(s) for s in cfg.seeds), "forgetting": repr(cfg.forgetting),
        "beta": repr(cfg.beta), "output_dir": cfg.output_dir}
    cp["settings"] = {k: "none" if v is None else str(v) for k, v in asdict(cfg.settings()).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path, **kwargs) -> ExperimentConfig:
    """Read an INI file with ``[experiment]`` and ``[settings]`` sections."""
    cp = configparser.ConfigParser()
    cp.read(path)
    exp = cp["experiment"] if cp.has_section("experiment") else {}
    opts = {}
    if "problem" in exp:
        opts["problem"] = exp["problem"]
    if "methods" in exp:
        opts["methods"] = tuple(m.strip() for m in exp["methods"].split(","))
    if "horizon" in exp:
        opts["horizon"] = int(exp["horizon"])
    if "seeds" in exp:
        opts["seeds"] = parse_seeds(exp["seeds"])
    for key in ("forgetting", "beta"):
        if key in exp:
            opts[key] = float(exp[key])
    if "output_dir" in exp:
        opts["output_dir"] = exp["output_dir"]
    overrides = dict(cp["settings"]) if cp.has_section("settings") else {}
    overrides.update(kwargs.pop("overrides", {}))
    opts.update(kwargs)
    return ExperimentConfig(overrides=overrides, **opts)


def parse_seeds(text: str) -> tuple:
    """``"0-4"``, ``"1,5,9"`` or a mix of both."""
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            seeds.extend(range(int(a), int(b) + 1))
        elif part:
            seeds.append(int(part))
    return tuple(seeds)


def _run_job(job):
    cfg, method, seed = job
    return run_single(cfg, method, seed)


def run_experiment(cfg: ExperimentConfig):
    """Run every (method, seed) pair and write all CSV outputs.

    Returns
    -------
    results : list of RunResult
    summary : list of SummaryRow
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.settings()
    jobs = [(cfg, m, seed) for m in cfg.methods for seed in cfg.seeds]
    workers = s.workers or (os.cpu_count() or 1)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]

    (out / "config.ini").write_text(config_text(cfg))
    for res in results:
        run_dir = out / res.method
        run_dir.mkdir(exist_ok=True)
        (run_dir / "config.ini").write_text(config_text(cfg))
        if res.error is None:
            (run_dir / f"{res.method}_seed{res.seed}.csv").write_text(trajectory_csv(res))
            (run_dir / f"{res.method}_seed{res.seed}.timing.csv").write_text(
                "t,wall_ms\n" + "".join(f"{r['t']},{w:.3f}\n" for r, w in zip(res.rows, res.timings)))
        else:
            (run_dir / f"{res.method}_seed{res.seed}.error.txt").write_text(res.error + "\n")
    failed = [r for r in results if r.error is not None]
    if failed:
        warnings.warn(f"{len(failed)} run(s) failed and are excluded from the summary")
    summary = summarize(results)
    (out / "summary.csv").write_text(summary_csv(summary))
    for m in cfg.methods:
        ok = [r for r in results if r.method == m and r.error is None]
        if ok:
            (out / f"regret_curves_{m}.csv").write_text(emit_regret_curves(ok))
    return results, summary


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m tvbo.experiment",
                                description="Time-varying LQR tuning benchmark sweep.")
    p.add_argument("--problem", choices=PROBLEMS)
    p.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    p.add_argument("--seeds", help="e.g. 0-24 or 1,2,3")
    p.add_argument("--horizon", type=int)
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--config", help="INI file with [experiment] and [settings] sections")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    overrides = {}
    for item in args.override:
        if "=" not in item:
            p.error(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    opts = {}
    if args.problem:
        opts["problem"] = args.problem
    if args.methods:
        opts["methods"] = tuple(m.strip() for m in args.methods.split(","))
    if args.seeds:
        opts["seeds"] = parse_seeds(args.seeds)
    if args.horizon:
        opts["horizon"] = args.horizon
    if args.output_dir:
        opts["output_dir"] = args.output_dir
    if args.config:
        cfg = load_config(args.config, overrides=overrides, **opts)
    else:
        cfg = ExperimentConfig(overrides=overrides, **opts)
    results, summary = run_experiment(cfg)
    for row in summary:
        print(f"{row.method:12s} regret {row.regret_mean:.6g} +/- {row.regret_std:.3g}   "
              f"unstable {row.unstable_mean:.3g} +/- {row.unstable_std:.3g}")
    return 2 if any(r.error for r in results) else 0


if __name__ == "__main__":
    sys.exit(main())
