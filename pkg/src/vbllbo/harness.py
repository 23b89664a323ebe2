"""Experiment orchestration: seeded BO runs, sweeps, persistence and exports."""

from __future__ import annotations

import copy
import csv
import functools
import hashlib
import json
import logging
import math
import os
import subprocess
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .acquisition import (
    NsgaConfig,
    ParetoArchive,
    nsga2_optimize,
    optimize_acqf_ei,
    optimize_ts_single,
    select_hvi_candidate,
    thompson_sample,
)
from .benchmarks import Problem, evaluate_noisy, initial_design, make_problem
from .trainer import ReinitPolicy, TrainConfig, bo_step

__all__ = [
    "ExperimentConfig",
    "RunRecord",
    "MissingMaxHv",
    "ExperimentFailed",
    "load_config",
    "run_seed",
    "run_experiment",
    "sweep",
    "export_curves",
    "load_records",
    "SWEEP_AXES",
]

logger = logging.getLogger(__name__)

OUT_ENV = "VBLLBO_OUT"
ACQUISITIONS = ("logei", "ts", "mo-ts")
LOG_HV_FLOOR = 1e-12


class MissingMaxHv(ValueError):
    """``logdiff_hv`` export requested without a maximum hypervolume."""


class ExperimentFailed(RuntimeError):
    """At least one seed of an experiment failed."""


def _default_out() -> str:
    return os.environ.get(OUT_ENV, "results")


@dataclass
class ExperimentConfig:
    """Fully resolved experiment description.

    ``surrogate`` keys: width, depth, lr, weight_decay, clip_norm, batch_size,
    max_epochs, patience, prior_scale, wishart_scale, dof. ``policy`` keys:
    kind plus period / center / window / threshold. ``acq_options`` keys:
    restarts, raw_samples, pop_size, generations.
    """

    problem: str
    horizon: int
    seeds: list[int]
    name: str | None = None
    problem_options: dict = field(default_factory=dict)
    surrogate: dict = field(default_factory=dict)
    policy: dict = field(default_factory=lambda: {"kind": "always"})
    acquisition: str = "ts"
    acq_options: dict = field(default_factory=dict)
    noise_std: float = 0.0
    out_dir: str = field(default_factory=_default_out)

    SURROGATE_DEFAULTS = {
        "width": 128,
        "depth": 3,
        "lr": 1e-3,
        "weight_decay": 1e-4,
        "clip_norm": 1.0,
        "batch_size": 32,
        "max_epochs": 10_000,
        "patience": 100,
        "prior_scale": 1.0,
        "wishart_scale": 0.01,
        "dof": 1.0,
    }
    ACQ_DEFAULTS = {"restarts": 10, "raw_samples": 512, "pop_size": 100, "generations": 200}

    def __post_init__(self):
        self.horizon = int(self.horizon)
        self.seeds = [int(s) for s in (self.seeds if isinstance(self.seeds, (list, tuple)) else [self.seeds])]
        unknown = set(self.surrogate) - set(self.SURROGATE_DEFAULTS)
        if unknown:
            raise ValueError(f"unknown surrogate settings {sorted(unknown)}")
        unknown = set(self.acq_options) - set(self.ACQ_DEFAULTS)
        if unknown:
            raise ValueError(f"unknown acquisition options {sorted(unknown)}")
        self.surrogate = {**self.SURROGATE_DEFAULTS, **self.surrogate}
        self.acq_options = {**self.ACQ_DEFAULTS, **self.acq_options}
        self.policy = dict(self.policy)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.acquisition not in ACQUISITIONS:
            raise ValueError(f"acquisition must be one of {ACQUISITIONS}")
        self.reinit_policy()  # validates
        K = self.make_problem().num_objectives
        if (K == 1) != (self.acquisition != "mo-ts"):
            raise ValueError(f"acquisition {self.acquisition!r} is incompatible with K={K}")
        if self.name is None:
            self.name = f"{self.problem}_{self.acquisition}_{self.policy['kind']}"

    def make_problem(self) -> Problem:
        return make_problem(self.problem, {**self.problem_options, "noise_std": self.noise_std})

    def train_config(self) -> TrainConfig:
        s = self.surrogate
        return TrainConfig(
            widths=(int(s["width"]),) * int(s["depth"]),
            lr=float(s["lr"]),
            weight_decay=float(s["weight_decay"]),
            clip_norm=float(s["clip_norm"]),
            batch_size=int(s["batch_size"]),
            max_epochs=int(s["max_epochs"]),
            patience=int(s["patience"]),
            prior_scale=float(s["prior_scale"]),
            wishart_scale=float(s["wishart_scale"]),
            dof=float(s["dof"]),
        )

    def reinit_policy(self) -> ReinitPolicy:
        p = dict(self.policy)
        kind = p.pop("kind", "always")
        return ReinitPolicy(kind, **p)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["problem_options"] = dict(self.problem_options)
        return d

    def config_hash(self) -> str:
        """Hash of everything that affects a seed's trajectory."""
        d = self.to_dict()
        for key in ("seeds", "out_dir", "name"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def run_dir(self) -> Path:
        return Path(self.out_dir) / str(self.name)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**copy.deepcopy(d))


def load_config(path, **overrides) -> ExperimentConfig:
    """Read a YAML config; non-None keyword overrides replace top-level keys."""
    with open(path) as fh:
        d = yaml.safe_load(fh) or {}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# records


@dataclass
class RunRecord:
    """Per-iteration rows of one seed.

    Initial-design rows carry ``t = -n_init, ..., -1`` and BO rows
    ``t = 0, ..., T-1``. ``metric`` is ``best_so_far`` (K=1) or
    ``hv_so_far`` (K>1), in the maximization convention and raw units.
    """

    seed: int
    dim: int
    num_objectives: int
    rows: list[dict] = field(default_factory=list)
    status: str = "ok"
    error: str | None = None
    config_hash: str = ""

    @property
    def metric(self) -> str:
        return "best_so_far" if self.num_objectives == 1 else "hv_so_far"

    @property
    def columns(self) -> list[str]:
        xs = [f"x{i}" for i in range(self.dim)]
        ys = [f"y{i}" for i in range(self.num_objectives)]
        return ["seed", "t", *xs, *ys, self.metric, "cumulative_fit_seconds",
                "cumulative_acq_seconds", "reinit_flag"]

    def append(self, t, x, y, metric_value, fit_s, acq_s, reinit):
        if self.rows:
            prev = self.rows[-1]
            if t <= prev["t"]:
                raise AssertionError("t must be strictly increasing")
            if metric_value < prev[self.metric]:
                raise AssertionError(f"{self.metric} decreased")
        row = {"seed": self.seed, "t": int(t)}
        row.update({f"x{i}": float(v) for i, v in enumerate(np.ravel(x))})
        row.update({f"y{i}": float(v) for i, v in enumerate(np.ravel(y))})
        row[self.metric] = float(metric_value)
        row["cumulative_fit_seconds"] = float(fit_s)
        row["cumulative_acq_seconds"] = float(acq_s)
        row["reinit_flag"] = int(bool(reinit))
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.columns])

    @classmethod
    def read_csv(cls, path, status: str = "ok") -> "RunRecord":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            data = list(reader)
        dim = sum(1 for c in header if c.startswith("x") and c[1:].isdigit())
        K = sum(1 for c in header if c.startswith("y") and c[1:].isdigit())
        rec = cls(seed=0, dim=dim, num_objectives=K, status=status)
        for values in data:
            row = {}
            for c, v in zip(header, values):
                row[c] = int(v) if c in ("seed", "t", "reinit_flag") else float(v)
            rec.rows.append(row)
        if rec.rows:
            rec.seed = rec.rows[0]["seed"]
        return rec


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


# ---------------------------------------------------------------------------
# BO loop


def _acquire(cfg: ExperimentConfig, problem: Problem, model, data, archive, rng):
    opts = cfg.acq_options
    bounds = problem.bounds
    if cfg.acquisition == "logei":
        best = float(model.standardizer.transform(data.Y)[:, 0].max())
        return optimize_acqf_ei(model, best, bounds, opts["restarts"], opts["raw_samples"], rng)
    sample = thompson_sample(model, rng)
    if cfg.acquisition == "ts":
        return optimize_ts_single(sample, bounds, opts["restarts"], rng, opts["raw_samples"])
    nsga = NsgaConfig(pop_size=int(opts["pop_size"]), generations=int(opts["generations"]))
    X, Y_hat = nsga2_optimize(sample, bounds, nsga, rng)
    x, _ = select_hvi_candidate(archive, X, model.standardizer.untransform(Y_hat), rng)
    return x


def run_seed(cfg: ExperimentConfig, seed: int) -> RunRecord:
    """Initial design plus ``cfg.horizon`` BO iterations for one seed.

    Failures are caught: the record keeps the rows written so far and gets
    ``status = "failed"``.
    """
    problem = cfg.make_problem()
    tcfg = cfg.train_config()
    policy = cfg.reinit_policy()
    K = problem.num_objectives
    rec = RunRecord(seed=int(seed), dim=problem.dim, num_objectives=K, config_hash=cfg.config_hash())
    rng = np.random.default_rng(seed)
    archive = None
    if K > 1:
        if problem.ref_point is None:
            raise ValueError(f"{problem.name} has no reference point")
        archive = ParetoArchive(problem.ref_point)
    try:
        data = initial_design(problem, rng)
        n0 = len(data)
        best = -math.inf
        for i in range(n0):
            if K == 1:
                best = max(best, float(data.Y[i, 0]))
                metric = best
            else:
                archive.add(data.Y[i])
                metric = archive.hypervolume()
            rec.append(i - n0, data.X[i], data.Y[i], metric, 0.0, 0.0, False)
        model = None
        fit_s = acq_s = 0.0
        for t in range(cfg.horizon):
            t0 = time.perf_counter()
            model, reinit = bo_step(model, policy, data, tcfg, t, cfg.horizon, rng)
            fit_s += time.perf_counter() - t0
            t0 = time.perf_counter()
            x = _acquire(cfg, problem, model, data, archive, rng)
            acq_s += time.perf_counter() - t0
            x = np.clip(x, problem.lower, problem.upper)
            y = evaluate_noisy(problem, x, rng)
            data.append(x, y)
            if K == 1:
                best = max(best, float(y[0]))
                metric = best
            else:
                archive.add(y)
                metric = archive.hypervolume()
            rec.append(t, x, y, metric, fit_s, acq_s, reinit)
    except Exception as err:  # noqa: BLE001 - a failed seed must not stop its siblings
        rec.status = "failed"
        rec.error = f"{type(err).__name__}: {err}"
        logger.error("seed %d failed:\n%s", seed, traceback.format_exc())
    return rec


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


@functools.lru_cache(maxsize=None)
def code_digest() -> str:
    """Digest of the package sources as first seen by this process.

    Cached records are reused only when their digest matches.
    """
    h = hashlib.sha256()
    for path in sorted(Path(__file__).resolve().parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _seed_paths(run_dir: Path, seed: int):
    return run_dir / f"seed_{seed}.csv", run_dir / f"seed_{seed}.json"


def _run_seed_to_disk(cfg_dict: dict, seed: int, resume: bool) -> tuple[int, str]:
    """Worker entry point; writes the seed's CSV and status sidecar."""
    cfg = ExperimentConfig.from_dict(cfg_dict)
    run_dir = cfg.run_dir()
    csv_path, status_path = _seed_paths(run_dir, seed)
    if resume and csv_path.exists() and status_path.exists():
        status = json.loads(status_path.read_text())
        if (status.get("config_hash") == cfg.config_hash() and status.get("status") == "ok"
                and status.get("code") == code_digest()):
            return seed, "ok"
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None
    if threadpool_limits is not None:
        with threadpool_limits(limits=1):
            rec = run_seed(cfg, seed)
    else:  # pragma: no cover
        rec = run_seed(cfg, seed)
    rec.write_csv(csv_path)
    status_path.write_text(json.dumps(
        {"seed": seed, "status": rec.status, "error": rec.error, "config_hash": rec.config_hash,
         "code": code_digest()}, indent=2))
    return seed, rec.status


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, resume: bool = False) -> dict[int, RunRecord]:
    """Run every seed, writing ``<out_dir>/<name>/seed_<s>.csv`` plus sidecars.

    Args:
        cfg: Experiment description.
        jobs: Worker processes; seeds are independent jobs.
        resume: Skip seeds whose finished record matches the config hash.

    Returns:
        Mapping seed -> record (read back from disk), including failed seeds.
    """
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "git": _git_describe(),
        "code": code_digest(),
        "train_config": cfg.train_config().to_dict(),
    }
    (run_dir / "meta.json").write_text(json.dumps(meta, indent=2, default=float))
    cfg_dict = cfg.to_dict()
    if jobs <= 1 or len(cfg.seeds) == 1:
        statuses = [_run_seed_to_disk(cfg_dict, s, resume) for s in cfg.seeds]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_seed_to_disk, cfg_dict, s, resume) for s in cfg.seeds]
            statuses = [f.result() for f in futures]
    meta["status"] = {str(s): st for s, st in statuses}
    (run_dir / "meta.json").write_text(json.dumps(meta, indent=2, default=float))
    return load_records(run_dir)


def load_records(run_dir) -> dict[int, RunRecord]:
    """Read every ``seed_*.csv`` in ``run_dir``."""
    run_dir = Path(run_dir)
    out = {}
    for path in sorted(run_dir.glob("seed_*.csv")):
        status_path = path.with_suffix(".json")
        status = "ok"
        if status_path.exists():
            status = json.loads(status_path.read_text()).get("status", "ok")
        rec = RunRecord.read_csv(path, status=status)
        out[int(path.stem.split("_")[1])] = rec
    return out


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = {
    "wishart_scale": ("surrogate", "wishart_scale"),
    "prior_scale": ("surrogate", "prior_scale"),
    "width": ("surrogate", "width"),
    "depth": ("surrogate", "depth"),
    "lr": ("surrogate", "lr"),
    "patience": ("surrogate", "patience"),
    "noise_std": (None, "noise_std"),
    "period": ("policy", "period"),
    "threshold": ("policy", "threshold"),
    "window": ("policy", "window"),
    "center": ("policy", "center"),
    "horizon": (None, "horizon"),
}


def sweep(template: ExperimentConfig, axis: str, values, jobs: int = 1, resume: bool = False):
    """Run ``template`` once per value of ``axis``.

    Each value gets its own subdirectory ``<name>/<axis>=<value>``.

    Returns:
        Mapping value -> {seed: RunRecord}.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    section, key = SWEEP_AXES[axis]
    results = {}
    for value in values:
        d = template.to_dict()
        if section is None:
            d[key] = value
        else:
            d[section] = {**d[section], key: value}
        d["name"] = f"{template.name}/{axis}={value}"
        cfg = ExperimentConfig.from_dict(d)
        results[value] = run_experiment(cfg, jobs=jobs, resume=resume)
    return results


# ---------------------------------------------------------------------------
# export


def export_curves(records, metric: str = "best", max_hv: float | None = None, path=None) -> dict:
    """Across-seed mean and 10/90 percentile bands per iteration.

    Args:
        records: Iterable of :class:`RunRecord` (or a seed -> record mapping)
            from one problem, all of the same length.
        metric: ``best``, ``hv`` or ``logdiff_hv``. The last is
            ``log(max_hv - hv_so_far)`` clamped below at ``log(1e-12)``.
        max_hv: Required for ``logdiff_hv``.
        path: Optional CSV destination.

    Returns:
        Columns ``t``, ``mean``, ``p10``, ``p90``, ``n_seeds`` as arrays.
    """
    if isinstance(records, dict):
        records = list(records.values())
    records = [r for r in records if r.rows]
    if not records:
        raise ValueError("no records to export")
    if metric == "logdiff_hv" and max_hv is None:
        raise MissingMaxHv("logdiff_hv needs max_hv")
    column = {"best": "best_so_far", "hv": "hv_so_far", "logdiff_hv": "hv_so_far"}.get(metric)
    if column is None:
        raise ValueError(f"unknown metric {metric!r}")
    n = min(len(r.rows) for r in records)
    t = records[0].column("t")[:n]
    M = np.vstack([r.column(column)[:n] for r in records])
    if metric == "logdiff_hv":
        M = np.log(np.maximum(max_hv - M, LOG_HV_FLOOR))
    out = {
        "t": t,
        "mean": M.mean(axis=0),
        "p10": np.percentile(M, 10, axis=0),
        "p90": np.percentile(M, 90, axis=0),
        "n_seeds": np.full(n, M.shape[0]),
    }
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(out))
            for i in range(n):
                w.writerow([_fmt(int(out["t"][i])), _fmt(out["mean"][i]), _fmt(out["p10"][i]),
                            _fmt(out["p90"][i]), _fmt(int(out["n_seeds"][i]))])
    return out
