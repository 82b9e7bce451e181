"""Benchmark ODE systems, fixed-step RK4 simulation, datasets and CSV trajectories."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DataFormatError, NonFiniteError

N_SPLITS = 5
TRAIN_FRACTION = 0.8
SPLIT_SEED_OFFSET = 1000


@dataclass(frozen=True)
class OdeSystem:
    name: str
    dim: int
    vector_field: Callable
    params: dict
    init_box: tuple
    dt: float
    horizon: int

    def f(self, x):
        return self.vector_field(x, **self.params)


@dataclass
class Trajectory:
    states: np.ndarray
    dt: float = 1.0
    id: str = ""

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if not np.all(np.isfinite(self.states)):
            raise NonFiniteError(f"trajectory {self.id!r} has non-finite states")

    def __len__(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[1]


@dataclass
class Dataset:
    system: str
    trajectories: list
    splits: list
    t0: int
    seed: int = 0

    def split(self, k):
        train_idx, test_idx = self.splits[k]
        return ([self.trajectories[i] for i in train_idx],
                [self.trajectories[i] for i in test_idx])


def _single_attractor(x, a, b):
    u, v = x
    return np.array([a * u, b * (v - u * u)])


def _duffing(x, delta, beta, mu):
    u, du = x
    return np.array([du, -delta * du - u * (beta + mu * u * u)])


def _van_der_pol(x, mu):
    u, v = x
    return np.array([v, mu * (1.0 - u * u) * v - u])


def _lorenz(x, sigma, rho, beta):
    u, v, w = x
    return np.array([sigma * (v - u), u * (rho - w) - v, u * v - beta * w])


SYSTEMS = {
    "single_attractor": OdeSystem(
        "single_attractor", 2, _single_attractor, {"a": -0.05, "b": -1.0},
        ((-2.0, 2.0), (-2.0, 2.0)), 0.01, 100),
    "duffing": OdeSystem(
        "duffing", 2, _duffing, {"delta": 0.5, "beta": -1.0, "mu": 1.0},
        ((-2.0, 2.0), (-2.0, 2.0)), 0.025, 100),
    "vdp": OdeSystem(
        "vdp", 2, _van_der_pol, {"mu": 0.2},
        ((-4.0, 4.0), (-4.0, 4.0)), 0.01, 100),
    "lorenz": OdeSystem(
        "lorenz", 3, _lorenz, {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0},
        ((-10.0, 10.0),) * 3, 0.01, 500),
}


def get_system(name):
    try:
        return SYSTEMS[name]
    except KeyError:
        raise KeyError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None


def rk4_step(f, x, dt):
    """Classical fourth-order Runge-Kutta step."""
    x = np.asarray(x, dtype=float)
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not (np.all(np.isfinite(k4)) and np.all(np.isfinite(out))):
        raise NonFiniteError(f"non-finite RK4 stage from state {x}", state=x)
    return out


def simulate(system: OdeSystem, x0, horizon=None, traj_id=""):
    """``horizon`` states starting with ``x0``, spaced ``system.dt`` apart."""
    T = system.horizon if horizon is None else int(horizon)
    states = np.empty((T, system.dim))
    states[0] = x0
    for t in range(1, T):
        states[t] = rk4_step(system.f, states[t - 1], system.dt)
    return Trajectory(states, system.dt, traj_id)


def warmup_length(horizon):
    return horizon // 5


def make_splits(n_traj, seed, n_splits=N_SPLITS, train_fraction=TRAIN_FRACTION):
    n_train = int(round(train_fraction * n_traj))
    if n_traj > 1:
        n_train = min(max(n_train, 1), n_traj - 1)
    splits = []
    for k in range(n_splits):
        perm = np.random.default_rng(seed + SPLIT_SEED_OFFSET + k).permutation(n_traj)
        splits.append((np.sort(perm[:n_train]).tolist(), np.sort(perm[n_train:]).tolist()))
    return splits


def generate_dataset(system: OdeSystem, n_traj, seed, n_splits=N_SPLITS,
                     train_fraction=TRAIN_FRACTION, horizon=None):
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in system.init_box])
    hi = np.array([b[1] for b in system.init_box])
    x0s = rng.uniform(lo, hi, size=(n_traj, system.dim))
    trajs = [simulate(system, x0, horizon, traj_id=f"{system.name}-{i:05d}")
             for i, x0 in enumerate(x0s)]
    T = len(trajs[0])
    return Dataset(system.name, trajs, make_splits(n_traj, seed, n_splits, train_fraction),
                   warmup_length(T), seed)


def _is_number(field_):
    try:
        float(field_)
    except ValueError:
        return False
    return True


def load_csv(path, dt=None):
    """Read one state per row; a single non-numeric first row is taken as a header."""
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and not all(_is_number(c) for c in row):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                raise DataFormatError(f"{path}: non-numeric field in row {lineno}", row=lineno) from None
            if rows and len(values) != len(rows[0]):
                raise DataFormatError(
                    f"{path}: row {lineno} has {len(values)} fields, expected {len(rows[0])}",
                    row=lineno)
            rows.append(values)
    if len(rows) < 2:
        raise DataFormatError(f"{path}: need at least 2 rows, found {len(rows)}")
    return Trajectory(np.array(rows), 1.0 if dt is None else float(dt), path.stem)


def save_csv(traj: Trajectory, path, header=None):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(header)
        for row in traj.states:
            writer.writerow([repr(float(v)) for v in row])
    return path
