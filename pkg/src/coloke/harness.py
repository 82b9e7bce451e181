"""Experiment orchestration: datasets, learner columns per split, offline baseline, reports."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import generate_dataset, get_system, load_csv, warmup_length
from .errors import ColokeError
from .koopman import LiftedModel, spectrum
from .learners import (
    LEARNERS, KoopmanLearner, LearnerConfig, as_streams, train_offline,
)
from .metrics import (
    SINGLE_ATTRACTOR_EIGS, BenchmarkReport, LearnerResult, eigenvalue_error, generalization_error,
    online_error, threshold_growth, update_stats,
)
from .nn import AdamWState

PROTOCOLS = ("batch", "sequential")
STEP_FIELDS = ("split", "t", "score", "threshold", "e_t", "inner_iters", "cap_hit", "online_sq_error")
_SEED_TAGS = {"dataset": 0, "learner": 1}


def derive_seed(seed, purpose, index=0):
    """Named seed derivation so adding learners or splits never shifts other streams."""
    ss = np.random.SeedSequence([int(seed), _SEED_TAGS[purpose], int(index)])
    return int(ss.generate_state(1)[0])


@dataclass
class ExperimentConfig:
    """One benchmark run. ``learners`` maps a learner name to its hyperparameter overrides."""

    system: str | None = "single_attractor"
    csv: str | None = None
    dt: float | None = None
    n_traj: int = 125
    seed: int = 0
    n_splits: int = 5
    train_fraction: float = 0.8
    horizon: int | None = None
    t0: int | None = None
    w: int = 5
    protocol: str = "batch"
    learners: dict = field(default_factory=lambda: {k: {} for k in LEARNERS})
    track_spectrum: bool = False
    output_dir: str | None = None

    def __post_init__(self):
        if (self.system is None) == (self.csv is None):
            raise ValueError("exactly one of 'system' and 'csv' must be given")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if isinstance(self.learners, (list, tuple)):
            self.learners = {name: {} for name in self.learners}
        for name, hyper in self.learners.items():
            if name not in LEARNERS:
                raise KeyError(f"unknown learner {name!r}; choose from {sorted(LEARNERS)}")
            self.learner_config(name, hyper)

    def learner_config(self, name, hyper=None, split=0):
        doc = dict(self.learners[name] if hyper is None else hyper)
        doc.setdefault("w", self.w)
        doc.setdefault("seed", derive_seed(self.seed, "learner", split))
        return LearnerConfig.from_dict(doc)

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise KeyError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)


def _koopman_init_key(cfg: LearnerConfig):
    return (cfg.m, cfg.hidden, cfg.seed, cfg.lr, cfg.weight_decay, cfg.epochs, cfg.w)


class _InitCache:
    """Shares the warm-up training of COLoKe and OLoKe when their settings coincide."""

    def __init__(self):
        self._store = {}

    def get(self, cfg: LearnerConfig, prefix):
        key = _koopman_init_key(cfg)
        if key not in self._store:
            S = as_streams(prefix)
            model = LiftedModel.create(S.shape[2], cfg.m, cfg.hidden, seed=cfg.seed)
            opt = AdamWState.fresh(len(model.params), lr=cfg.lr, weight_decay=cfg.weight_decay)
            start = time.perf_counter()
            train_offline(model, list(S), cfg.w, cfg.epochs, opt)
            self._store[key] = (model, opt, time.perf_counter() - start)
        return self._store[key]


def _make_learner(name, cfg, prefix, cache):
    """Returns (learner, warm-up seconds); a shared warm-up is charged to every user."""
    cls = LEARNERS[name]
    if issubclass(cls, KoopmanLearner) and cache is not None:
        model, opt, seconds = cache.get(cfg, prefix)
        return cls.from_model(model, opt, cfg, prefix), seconds
    start = time.perf_counter()
    learner = cls.initialise(prefix, cfg)
    return learner, time.perf_counter() - start


@dataclass
class StreamTrace:
    """Everything recorded while one learner consumes the training streams."""

    errors: list
    steps: list
    thresholds: list
    spectra: list
    learner: object = None


def stream(learner, segments, t0, protocol="batch", track_spectrum=False, dt=1.0):
    """Feed the post-warm-up states to an initialised learner.

    ``segments`` is a list of ``(T, d)`` trajectories. Under ``batch`` they
    advance together one time step at a time; under ``sequential`` they are
    consumed one after another with a buffer reset in between. Returns a
    :class:`StreamTrace` whose ``errors`` hold one row of one-step errors per
    trajectory.
    """
    thresholds, spectra, steps = [], [], []

    def record(st, err):
        st.online_sq_error = float(np.mean(err))
        steps.append(st)
        if st.threshold is not None:
            thresholds.append(st.threshold)
        if track_spectrum and isinstance(learner, KoopmanLearner):
            spectra.append(spectrum(learner.model.K, dt))

    if protocol == "batch":
        S = np.stack([np.asarray(s, dtype=float) for s in segments])
        errors = np.empty((S.shape[0], S.shape[1] - t0))
        for i, t in enumerate(range(t0, S.shape[1])):
            x_prev, x = S[:, t - 1], S[:, t]
            err = np.sum((learner.predict(x_prev) - x) ** 2, axis=1)
            errors[:, i] = err
            record(learner.step(x), err)
        return StreamTrace(list(errors), steps, thresholds, spectra, learner)
    errors = []
    for k, seg in enumerate(segments):
        seg = np.asarray(seg, dtype=float)
        if k:
            learner.begin_stream(seg[:t0])
        row = []
        for t in range(t0, len(seg)):
            err = float(np.sum((learner.predict(seg[t - 1]) - seg[t]) ** 2))
            row.append(err)
            record(learner.step(seg[t]), err)
        errors.append(row)
    return StreamTrace(errors, steps, thresholds, spectra, learner)


def _run_cell(name, cfg, train, test, t0, protocol, track_spectrum, dt, cache):
    result = LearnerResult()
    trace = None
    start = time.perf_counter()
    warmup = 0.0
    try:
        prefix = np.stack([s[:t0] for s in train]) if protocol == "batch" else train[0][:t0]
        learner, warmup = _make_learner(name, cfg, prefix, cache)
        start = time.perf_counter()
        trace = stream(learner, train, t0, protocol, track_spectrum, dt)
        result.online_error = online_error(trace.errors)
        if test:
            result.generalization_error = generalization_error(learner.predict, test)
        flags = [s.e_t for s in trace.steps if s.e_t is not None]
        if flags:
            result.update_stats = asdict(update_stats(flags))
        if trace.thresholds:
            result.growth_exponent = threshold_growth(trace.thresholds)
        result.cap_hits = int(sum(s.cap_hit for s in trace.steps))
        result.total_inner_iters = int(sum(s.inner_iters for s in trace.steps))
        if isinstance(learner, KoopmanLearner):
            result.spectrum = [complex(v) for v in spectrum(learner.model.K, dt)]
    except (ColokeError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        result.failure = f"{type(exc).__name__}: {exc}"
    result.wall_time = warmup + time.perf_counter() - start
    return result, trace


def _load_streams(config: ExperimentConfig):
    """Returns (list of (train, test) state lists, t0, dt)."""
    if config.csv is not None:
        traj = load_csv(config.csv, config.dt)
        t0 = config.t0 if config.t0 is not None else warmup_length(len(traj))
        return [([traj.states], [])], t0, traj.dt
    system = get_system(config.system)
    ds = generate_dataset(system, config.n_traj, derive_seed(config.seed, "dataset"),
                          config.n_splits, config.train_fraction, config.horizon)
    t0 = config.t0 if config.t0 is not None else ds.t0
    splits = []
    for k in range(config.n_splits):
        tr, te = ds.split(k)
        splits.append(([t.states for t in tr], [t.states for t in te]))
    return splits, t0, system.dt


def run_cells(config: ExperimentConfig):
    """Yield ``(split, name, result, trace)`` for every cell; ``trace`` is None on failure."""
    splits, t0, dt = _load_streams(config)
    for k, (train, test) in enumerate(splits):
        cache = _InitCache()
        for name in config.learners:
            cfg = config.learner_config(name, split=k)
            res, trace = _run_cell(name, cfg, train, test, t0, config.protocol,
                                   config.track_spectrum, dt, cache)
            yield k, name, res, trace


def run_experiment(config: ExperimentConfig, out_dir=None, progress=None, on_cell=None):
    """Run every learner on every split and assemble (and optionally write) the report.

    ``on_cell(split, name, result, trace)`` sees each finished cell, including the
    trained learner on ``trace.learner``.
    """
    names = list(config.learners)
    report = BenchmarkReport(config.system or str(config.csv), config.seed, names)
    step_rows = {name: [] for name in names}
    spectra_rows = []
    truth = SINGLE_ATTRACTOR_EIGS if config.system == "single_attractor" else None
    results = {}
    for k, name, res, trace in run_cells(config):
        if progress is not None:
            progress(k, name, res)
        if on_cell is not None:
            on_cell(k, name, res, trace)
        results[name] = res
        if len(results) == len(names):
            report.add_split(results)
            results = {}
        if trace is None:
            continue
        for st in trace.steps:
            row = asdict(st)
            row["split"] = k
            step_rows[name].append(row)
        if name == "coloke" and trace.thresholds:
            report.thresholds[f"split{k}"] = trace.thresholds
        for i, spec in enumerate(trace.spectra):
            for j, lam in enumerate(spec):
                spectra_rows.append((name, k, i, j, lam.real, lam.imag))
        if truth is not None and trace.spectra and len(trace.spectra[0]) >= len(truth):
            report.eigen_errors[f"{name}/split{k}"] = eigenvalue_error(trace.spectra, truth)
    report.aggregate()
    out_dir = out_dir or config.output_dir
    if out_dir is not None:
        write_outputs(report, step_rows, spectra_rows, out_dir)
    return report


def write_outputs(report: BenchmarkReport, step_rows, spectra_rows, out_dir):
    out = Path(out_dir)
    report.write(out)
    for name, rows in step_rows.items():
        with (out / f"steps_{name}.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=STEP_FIELDS, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(rows)
    with (out / "spectra.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["learner", "split", "step", "index", "real", "imag"])
        writer.writerows(spectra_rows)
    return out


def run_offline_baseline(config: ExperimentConfig, split=0, budget_seconds=60.0, max_epochs=None,
                         eval_every=10, hyper=None):
    """Full-batch training on whole training trajectories; test error against elapsed time.

    Returns a list of ``(elapsed_seconds, epoch, test_error)`` checkpoints. Time
    spent evaluating the test error is excluded from the clock.
    """
    if config.system is None:
        raise ValueError("the offline baseline needs a synthetic system")
    splits, _, _ = _load_streams(config)
    train, test = splits[split]
    cfg = config.learner_config("coloke", hyper or config.learners.get("coloke", {}), split=split)
    d = train[0].shape[1]
    model = LiftedModel.create(d, cfg.m, cfg.hidden, seed=cfg.seed)
    opt = AdamWState.fresh(len(model.params), lr=cfg.lr, weight_decay=cfg.weight_decay)
    trace = []
    clock = {"elapsed": 0.0, "tick": time.perf_counter()}

    def checkpoint(epoch, loss):
        now = time.perf_counter()
        clock["elapsed"] += now - clock["tick"]
        stop = clock["elapsed"] >= budget_seconds or (max_epochs is not None and epoch + 1 >= max_epochs)
        if epoch % eval_every == 0 or stop:
            trace.append((clock["elapsed"], epoch + 1, generalization_error(model.predict, test)))
        clock["tick"] = time.perf_counter()
        return stop

    epochs = max_epochs if max_epochs is not None else 10 ** 9
    train_offline(model, train, cfg.w, epochs, opt, callback=checkpoint)
    return trace
