"""Experiment configs, the method x seed runner, and CSV artifacts.

A config file is a flat list of ``key = value`` lines; ``#`` starts a
comment. Keys are the :class:`ExperimentConfig` fields plus every
:class:`~saddle_cl.bcl.TrainerConfig` field except ``seed`` (the run seed
is ``seed + repetition``). Lists are comma separated, booleans are
``true``/``false`` and ``repeat_task_at`` is written ``2:1,4:0``.
"""
from __future__ import annotations

import csv
import dataclasses
import difflib
import json
import logging
import os
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .bcl import METHODS, TRACE_FIELDS, TraceRow, TrainerConfig, train_stream
from .game import Trajectory, TrajectoryRow
from .tasks import (SCENARIOS, Dataset, SyntheticSpec, TaskStream, load_mnist,
                    make_permuted_tasks, make_split_tasks, make_synthetic_dataset,
                    make_synthetic_tasks)

log = logging.getLogger(__name__)

THREADS_ENV = "SADDLE_CL_THREADS"


class ConfigError(ValueError):
    """A config file could not be parsed or failed validation."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ExperimentError(RuntimeError):
    """One or more runs failed; ``failures`` maps run names to error logs."""

    def __init__(self, failures: dict):
        self.failures = failures
        names = ", ".join(sorted(failures))
        super().__init__(f"{len(failures)} run(s) failed: {names}")


class ArtifactError(OSError):
    """Writing or reading a CSV artifact failed."""


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class ExperimentConfig:
    source: str = "synthetic"  # synthetic | idx
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    max_samples: int = 0  # per split after loading; 0 keeps everything
    stream: str = "split"  # split | permuted
    scenario: str = "ICL"
    tasks: int = 5
    classes_per_task: int = 2
    synthetic_dim: int = 50
    synthetic_samples: int = 1250
    synthetic_separation: float = 6.0
    repeat_task_at: str = ""
    hidden: tuple = (100,)
    methods: tuple = ("bcl", "naive_rehearsal", "sequential")
    repetitions: int = 5
    seed: int = 0
    output_dir: str = "results"
    trainer: TrainerConfig = TrainerConfig()

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ConfigError("source must be 'synthetic' or 'idx'")
        if self.stream not in ("split", "permuted"):
            raise ConfigError("stream must be 'split' or 'permuted'")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {', '.join(SCENARIOS)}")
        for name in ("repetitions", "tasks", "classes_per_task", "synthetic_dim",
                     "synthetic_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be ≥ 1")
        if self.max_samples < 0:
            raise ConfigError("max_samples must be ≥ 0")
        if self.synthetic_separation <= 0:
            raise ConfigError("synthetic_separation must be > 0")
        if not self.methods:
            raise ConfigError("methods must name at least one method")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must not repeat")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden layer widths must be ≥ 1")
        repeats = self.repeats
        for k, src in repeats.items():
            if not 0 <= src < k < self.tasks:
                raise ConfigError(f"repeat_task_at {k}:{src} must point at an earlier task")
        if self.source == "idx":
            for name in ("train_images", "train_labels"):
                if not getattr(self, name):
                    raise ConfigError(f"source = idx needs {name}")
            if bool(self.test_images) != bool(self.test_labels):
                raise ConfigError("give both test_images and test_labels or neither")
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            path = getattr(self, name)
            if path and not Path(path).is_file():
                raise ConfigError(f"{name}: file {path!r} does not exist")

    @property
    def repeats(self) -> dict:
        return _parse_repeats(self.repeat_task_at)

    def run_seeds(self) -> list:
        return [self.seed + r for r in range(self.repetitions)]


def _parse_repeats(text: str) -> dict:
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        k, sep, src = part.partition(":")
        if not sep:
            raise ConfigError(f"repeat_task_at entry {part!r} must look like 'k:src'")
        try:
            out[int(k)] = int(src)
        except ValueError:
            raise ConfigError(f"repeat_task_at entry {part!r} must hold integers") from None
    return out


_TRAINER_KEYS = tuple(f.name for f in dataclasses.fields(TrainerConfig) if f.name != "seed")
_EXPERIMENT_KEYS = tuple(f.name for f in dataclasses.fields(ExperimentConfig) if f.name != "trainer")
CONFIG_KEYS = _EXPERIMENT_KEYS + _TRAINER_KEYS
_PATH_KEYS = ("train_images", "train_labels", "test_images", "test_labels", "output_dir")


def _default_of(key: str):
    if key in _TRAINER_KEYS:
        return getattr(TrainerConfig(), key)
    return getattr(ExperimentConfig(), key)


def _type_name(default) -> str:
    if isinstance(default, bool):
        return "bool"
    if isinstance(default, tuple):
        return "int list" if default and isinstance(default[0], int) else "list"
    return type(default).__name__


def _coerce(key: str, raw: str, line: Optional[int]):
    default = _default_of(key)
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [v.strip() for v in raw.split(",") if v.strip()]
            if key == "hidden":
                return tuple(int(v) for v in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"{key} expects {_type_name(default)}, got {raw!r}", line) from None


def _split_line(raw_line: str):
    text = raw_line.split("#", 1)[0].strip()
    if not text:
        return None
    key, sep, value = text.partition("=")
    return key.strip(), sep, value.strip()


def parse_assignments(pairs, base_dir=None, start: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Apply ``(line, key, raw_value)`` triples on top of ``start`` (defaults)."""
    start = start or ExperimentConfig()
    exp = {k: getattr(start, k) for k in _EXPERIMENT_KEYS}
    trainer = {k: getattr(start.trainer, k) for k in _TRAINER_KEYS}
    seen = {}
    for line, key, raw in pairs:
        if key not in CONFIG_KEYS:
            near = difflib.get_close_matches(key, CONFIG_KEYS, n=1, cutoff=0.0)
            hint = f"; did you mean {near[0]!r}?" if near else ""
            raise ConfigError(f"unknown key {key!r}{hint}", line)
        if key in seen and line is not None:
            raise ConfigError(f"key {key!r} already set on line {seen[key]}", line)
        seen[key] = line
        value = _coerce(key, raw, line)
        if key in _PATH_KEYS and value and base_dir is not None and key != "output_dir":
            value = str(Path(base_dir) / value) if not Path(value).is_absolute() else value
        (trainer if key in _TRAINER_KEYS else exp)[key] = value
    try:
        tcfg = TrainerConfig(seed=start.trainer.seed, **trainer)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(trainer=tcfg, **exp)


def parse_config(text: str, base_dir=None) -> ExperimentConfig:
    """Parse a config file's text. Relative data paths resolve against ``base_dir``."""
    pairs = []
    for n, raw_line in enumerate(text.splitlines(), start=1):
        parts = _split_line(raw_line)
        if parts is None:
            continue
        key, sep, value = parts
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw_line.strip()!r}", n)
        pairs.append((n, key, value))
    return parse_assignments(pairs, base_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    return parse_config(text, base_dir=path.parent)


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Every key, one per line, in a form :func:`parse_config` reads back."""
    lines = []
    for key in CONFIG_KEYS:
        src = cfg.trainer if key in _TRAINER_KEYS else cfg
        lines.append(f"{key} = {_render(getattr(src, key))}")
    return "\n".join(lines) + "\n"


def defaults_table() -> str:
    cfg = ExperimentConfig()
    width = max(len(k) for k in CONFIG_KEYS)
    rows = []
    for key in CONFIG_KEYS:
        src = cfg.trainer if key in _TRAINER_KEYS else cfg
        value = _render(getattr(src, key))
        rows.append(f"{key:<{width}} = {value:<24} # {_type_name(_default_of(key))}")
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- streams


def _limit(ds: Dataset, n: int) -> Dataset:
    return ds if not n or len(ds) <= n else ds.subset(np.arange(n))


def build_stream(cfg: ExperimentConfig, seed: int) -> TaskStream:
    """The task stream one repetition trains on."""
    K, cpt = cfg.tasks, cfg.classes_per_task
    if cfg.source == "synthetic":
        if cfg.stream == "split":
            return make_synthetic_tasks(SyntheticSpec(
                K=K, classes_per_task=cpt, dim=cfg.synthetic_dim,
                samples=cfg.synthetic_samples, separation=cfg.synthetic_separation,
                seed=seed, scenario=cfg.scenario, repeat_task_at=cfg.repeats))
        ds = make_synthetic_dataset(cpt, cfg.synthetic_dim, cfg.synthetic_samples,
                                    cfg.synthetic_separation, seed)
        return make_permuted_tasks(ds, K, seed, cfg.scenario, repeat_task_at=cfg.repeats)
    train = _limit(load_mnist(cfg.train_images, cfg.train_labels), cfg.max_samples)
    test = None
    if cfg.test_images:
        test = _limit(load_mnist(cfg.test_images, cfg.test_labels), cfg.max_samples)
    if cfg.stream == "permuted":
        return make_permuted_tasks(train, K, seed, cfg.scenario, test=test,
                                   repeat_task_at=cfg.repeats)
    if cfg.repeats:
        raise ConfigError("repeat_task_at is only supported for permuted or synthetic streams")
    pairs = [list(range(k * cpt, (k + 1) * cpt)) for k in range(K)]
    return make_split_tasks(train, pairs, cfg.scenario, test=test, seed=seed)


# ------------------------------------------------------------ CSV artifacts


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return "%.17g" % v


def _write_rows(path, header, rows):
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise ArtifactError(f"cannot write {str(path)!r}: {exc.strerror}") from exc


def _read_rows(path):
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            return list(csv.reader(fh))
    except OSError as exc:
        raise ArtifactError(f"cannot read {str(path)!r}: {exc.strerror}") from exc


def emit_trace(rows, path) -> None:
    """Trace rows as CSV with the fixed header and 17-significant-digit floats."""
    _write_rows(path, TRACE_FIELDS,
                ([getattr(r, f) for f in TRACE_FIELDS] for r in rows))


def read_trace(path) -> list:
    table = _read_rows(path)
    if not table or tuple(table[0]) != TRACE_FIELDS:
        raise ArtifactError(f"{str(path)!r} does not start with the trace header")
    out = []
    for rec in table[1:]:
        k, i, *floats = rec
        out.append(TraceRow(int(k), int(i), *(float(v) for v in floats)))
    return out


def emit_trajectory(traj: Trajectory, path) -> None:
    """Columns ``i, alpha, x_0.., theta_0.., H``; one row per iterate."""
    dx, dt = traj.rows[0].x.size, traj.rows[0].theta.size
    header = ["i", "alpha", *(f"x_{j}" for j in range(dx)), *(f"theta_{j}" for j in range(dt)), "H"]
    _write_rows(path, header,
                ([r.i, r.alpha, *r.x.tolist(), *r.theta.tolist(), r.H] for r in traj.rows))


def read_trajectory(path, game: str = "") -> Trajectory:
    table = _read_rows(path)
    header = table[0]
    dx = sum(1 for h in header if h.startswith("x_"))
    traj = Trajectory(game)
    for rec in table[1:]:
        vals = [float(v) for v in rec[1:]]
        traj.rows.append(TrajectoryRow(int(rec[0]), vals[0], np.array(vals[1:1 + dx]),
                                       np.array(vals[1 + dx:-1]), vals[-1]))
    return traj


# ----------------------------------------------------------------- results


@dataclass
class ResultEntry:
    method: str
    scenario: str
    seeds: list
    values: list  # RA per seed, same order as seeds
    per_task: list = field(default_factory=list)  # final accuracies per seed

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        # sample standard deviation across repetitions; 0 for a single run
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else 0.0


@dataclass
class ResultTable:
    entries: list = field(default_factory=list)

    def get(self, method: str, scenario: Optional[str] = None) -> ResultEntry:
        for e in self.entries:
            if e.method == method and (scenario is None or e.scenario == scenario):
                return e
        raise KeyError(method)

    def summary_rows(self) -> list:
        return [(e.method, e.scenario, len(e.values), e.mean, e.std) for e in self.entries]


@dataclass
class RunResult:
    method: str
    seed: int
    ra: float = float("nan")
    per_task: list = field(default_factory=list)
    wall_time: float = 0.0
    error: str = ""


def _thread_count(n_jobs: int) -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return min(n, n_jobs)


def _run_name(method: str, seed: int) -> str:
    return f"{method}_seed{seed}"


def _run_snapshot(cfg: ExperimentConfig, method: str, seed: int) -> ExperimentConfig:
    # a config that reproduces exactly this run
    return dataclasses.replace(cfg, methods=(method,), repetitions=1, seed=seed)


def _one_run(cfg: ExperimentConfig, method: str, seed: int, run_dir: Path) -> RunResult:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(serialize_config(_run_snapshot(cfg, method, seed)))
    (run_dir / "seeds.json").write_text(json.dumps(
        {"run_seed": seed, "data_seed": seed, "trainer_seed": seed}, indent=2) + "\n")
    err_path = run_dir / "error.log"
    if err_path.exists():
        err_path.unlink()
    try:
        stream = build_stream(cfg, seed)
        tcfg = dataclasses.replace(cfg.trainer, seed=seed)
        _, metrics, trace = train_stream(method, stream, tcfg, cfg.hidden)
        emit_trace(trace, run_dir / "trace.csv")
        _write_rows(run_dir / "ra.csv", ["task", "accuracy"],
                    [(k, a) for k, a in enumerate(metrics.per_task)])
        with open(run_dir / "ra.csv", "a") as fh:
            fh.write(f"ra,{_fmt(metrics.ra)}\n")
        return RunResult(method, seed, metrics.ra, metrics.per_task, metrics.wall_time)
    except Exception:  # every failure is logged per run and re-raised as a batch
        text = traceback.format_exc()
        err_path.write_text(text)
        log.error("run %s failed; see %s", run_dir.name, err_path)
        return RunResult(method, seed, error=text)


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> ResultTable:
    """Train every (method, seed) pair and write the result artifacts.

    Layout under the output directory::

        results.csv    one row per (method, seed)
        summary.csv    mean and sample std of RA per method
        summary.txt    human-readable table (carries a timestamp)
        summary.json   machine-readable summary with timestamps and wall times
        runs/<method>_seed<s>/  config.txt, seeds.json, ra.csv, trace.csv

    Runs fan out over at most ``$SADDLE_CL_THREADS`` threads; results are
    collected in (method, seed) order, so the CSVs do not depend on timing.
    Raises :class:`ExperimentError` if any run fails.
    """
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    jobs = [(m, s) for m in cfg.methods for s in cfg.run_seeds()]
    threads = _thread_count(len(jobs))
    try:
        (out / "runs").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactError(f"cannot create output directory {str(out)!r}: {exc.strerror}") from exc
    (out / "config.txt").write_text(serialize_config(cfg))

    def work(job):
        m, s = job
        return _one_run(cfg, m, s, out / "runs" / _run_name(m, s))

    if threads == 1:
        results = [work(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))

    failures = {_run_name(r.method, r.seed): r.error for r in results if r.error}
    if failures:
        raise ExperimentError(failures)

    table = ResultTable()
    for m in cfg.methods:
        mine = [r for r in results if r.method == m]
        table.entries.append(ResultEntry(m, cfg.scenario, [r.seed for r in mine],
                                         [r.ra for r in mine], [r.per_task for r in mine]))
    _write_results(cfg, table, results, out, started, threads)
    return table


def _write_results(cfg, table: ResultTable, results, out: Path, started: str, threads: int):
    K = cfg.tasks
    _write_rows(out / "results.csv",
                ["method", "scenario", "seed", "ra", *(f"acc_{k}" for k in range(K))],
                [(r.method, cfg.scenario, r.seed, r.ra, *r.per_task) for r in results])
    _write_rows(out / "summary.csv", ["method", "scenario", "n", "ra_mean", "ra_std"],
                table.summary_rows())
    finished = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    lines = [f"# started {started}, finished {finished}",
             f"# scenario {cfg.scenario}, {cfg.tasks} tasks, {cfg.repetitions} repetitions",
             f"{'method':<18} {'RA mean':>9} {'std':>9}"]
    for method, _, n, mean, std in table.summary_rows():
        lines.append(f"{method:<18} {100 * mean:9.2f} {100 * std:9.2f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    payload = {
        "started": started,
        "finished": finished,
        "threads": threads,
        "scenario": cfg.scenario,
        "methods": [
            {"method": e.method, "n": len(e.values), "ra_mean": e.mean, "ra_std": e.std,
             "seeds": e.seeds, "ra": e.values}
            for e in table.entries
        ],
        "wall_time": {_run_name(r.method, r.seed): r.wall_time for r in results},
    }
    (out / "summary.json").write_text(json.dumps(payload, indent=2) + "\n")
