"""Evaluation quantities: online and held-out errors, split aggregation,
trigger statistics, threshold growth and eigenvalue tracking."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SINGLE_ATTRACTOR_EIGS = (-1.0, -0.05, -0.1)


def online_error(per_step_sq_errors, t0=None):
    """Mean over trajectories of each trajectory's temporal mean error.

    ``per_step_sq_errors`` is one sequence per trajectory (or a single flat
    sequence) already restricted to the steps after ``t0``; ``t0`` is accepted
    for symmetry with the data layout and only used to validate lengths.
    """
    series = per_step_sq_errors
    if len(series) == 0:
        raise ValueError("no errors to average")
    if np.ndim(series[0]) == 0:
        series = [series]
    means = []
    for s in series:
        s = np.asarray(s, dtype=float)
        if s.size == 0:
            raise ValueError("empty per-trajectory error series")
        means.append(s.mean())
    return float(np.mean(means))


def one_step_errors(predict, states):
    """Squared one-step errors ``||x_t - predict(x_{t-1})||^2`` for t = 2..T of one trajectory."""
    states = np.asarray(states, dtype=float)
    pred = predict(states[:-1])
    return np.sum((pred - states[1:]) ** 2, axis=1)


def generalization_error(predict, test_trajectories):
    """Mean over test trajectories of the mean one-step error of a frozen model."""
    if not test_trajectories:
        raise ValueError("no test trajectories")
    errs = []
    for traj in test_trajectories:
        states = getattr(traj, "states", traj)
        errs.append(one_step_errors(predict, states).mean())
    return float(np.mean(errs))


@dataclass
class UpdateStats:
    count: int
    fraction: float
    mean_interval: float
    max_interval: int


def update_stats(flags):
    """Trigger count, fraction and the mean/max gap between consecutive triggers."""
    flags = np.asarray(flags, dtype=int).ravel()
    if flags.size == 0:
        raise ValueError("empty trigger series")
    idx = np.flatnonzero(flags)
    gaps = np.diff(idx)
    return UpdateStats(
        count=int(idx.size),
        fraction=float(idx.size / flags.size),
        mean_interval=float(gaps.mean()) if gaps.size else 0.0,
        max_interval=int(gaps.max()) if gaps.size else 0,
    )


def shifted_thresholds(q):
    """Shift by ``min(0, min q)`` so the series is nonnegative; returns (series, shift)."""
    q = np.asarray(q, dtype=float).ravel()
    shift = min(0.0, float(q.min())) if q.size else 0.0
    return q - shift, shift


def threshold_growth(q):
    """Log-log slope of the cumulative thresholds over the second half of the run."""
    qs, _ = shifted_thresholds(q)
    if qs.size < 2 or not np.any(qs > 0):
        return 0.0
    cum = np.cumsum(qs)
    T = np.arange(1, qs.size + 1)
    half = qs.size // 2
    keep = (T > half) & (cum > 0)
    if keep.sum() < 2:
        return 0.0
    slope, _ = np.polyfit(np.log(T[keep]), np.log(cum[keep]), 1)
    return float(slope)


def match_eigenvalues(estimate, truth):
    """Greedy nearest-real-part assignment; returns the matched estimates in truth order."""
    est = list(np.asarray(estimate, dtype=complex).ravel())
    if len(est) < len(truth):
        raise ValueError(f"{len(est)} eigenvalues cannot be matched to {len(truth)} targets")
    out = []
    for target in truth:
        gaps = [abs(e.real - target) for e in est]
        k = int(np.argmin(gaps))
        out.append(est.pop(k))
    return np.array(out)


def eigenvalue_error(spectra, truth=SINGLE_ATTRACTOR_EIGS):
    """``|lambda_hat_i - lambda_i|`` per checkpoint (rows) and eigenvalue (columns)."""
    spectra = [spectra] if np.ndim(spectra[0]) == 0 else spectra
    return np.array([np.abs(match_eigenvalues(s, truth) - np.asarray(truth)) for s in spectra])


def mean_and_sem(values):
    """Mean and standard deviation of the mean (unbiased variance over sqrt(n))."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class LearnerResult:
    """One learner's results on one split."""

    online_error: float | None = None
    generalization_error: float | None = None
    wall_time: float = 0.0
    update_stats: dict | None = None
    growth_exponent: float | None = None
    cap_hits: int = 0
    total_inner_iters: int = 0
    spectrum: list | None = None
    failure: str | None = None


@dataclass
class BenchmarkReport:
    system: str
    seed: int
    learners: list
    splits: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    eigen_errors: dict = field(default_factory=dict)

    def add_split(self, results: dict):
        self.splits.append({name: asdict(r) for name, r in results.items()})

    def aggregate(self):
        summary = {}
        for name in self.learners:
            cells = [s[name] for s in self.splits if name in s]
            ok = [c for c in cells if c["failure"] is None]
            entry = {"n_splits": len(ok), "failures": [c["failure"] for c in cells if c["failure"]]}
            for key in ("online_error", "generalization_error", "wall_time"):
                vals = [c[key] for c in ok if c[key] is not None]
                if vals:
                    entry[key], entry[key + "_sem"] = mean_and_sem(vals)
            summary[name] = entry
        self.summary = summary
        return summary

    def to_dict(self):
        return {
            "system": self.system,
            "seed": self.seed,
            "learners": list(self.learners),
            "splits": self.splits,
            "summary": self.summary,
        }

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(_jsonable(self.to_dict()), indent=2))
        _write_series(out / "thresholds.csv", self.thresholds, "q")
        _write_series(out / "eigen_errors.csv", self.eigen_errors, "err")
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _write_series(path, series: dict, value_name):
    """Long-format CSV: key, step index, value columns."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        header_done = False
        for key, rows in series.items():
            rows = np.atleast_1d(np.asarray(rows, dtype=float))
            if rows.ndim == 1:
                rows = rows[:, None]
            if not header_done:
                writer.writerow(["series", "step"] + [f"{value_name}{i}" for i in range(rows.shape[1])])
                header_done = True
            for i, r in enumerate(rows):
                writer.writerow([key, i] + [repr(float(v)) for v in r])
        if not header_done:
            writer.writerow(["series", "step", value_name])
