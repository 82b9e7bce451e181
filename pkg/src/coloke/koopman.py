"""Lifted Koopman model: feature map, multistep loss, conformity score, spectra."""
from __future__ import annotations

import json
import math
import warnings
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .autodiff import ParamVector, Tape
from .errors import DimensionError, NotWarmError
from .linalg import eig
from .nn import MlpSpec, init_mlp, mlp_apply, mlp_forward

DEFAULT_WINDOW = 5
LOG_FLOOR = 1e-12


def default_lifted_dim(d):
    return d + math.ceil(d / 2)


def default_hidden(d, real_data=False):
    return (64, 32, 16) if real_data else (32, 16, 8)


@dataclass
class LiftedModel:
    """Feature network plus Koopman matrix, parameters stored in one flat vector.

    The flat layout is the MLP layers in order followed by ``K`` (row-major),
    which is what the compiled kernel expects.
    """

    spec: MlpSpec
    params: ParamVector
    d: int
    m: int
    seed: int = 0

    @classmethod
    def create(cls, d, m=None, hidden=None, seed=0):
        m = default_lifted_dim(d) if m is None else int(m)
        if m <= d:
            raise ValueError(f"lifted dimension {m} must exceed state dimension {d}")
        hidden = default_hidden(d) if hidden is None else tuple(hidden)
        spec = MlpSpec((d, *hidden, m - d))
        rng = np.random.default_rng(seed)
        arrays = init_mlp(spec, rng)
        arrays["K"] = np.eye(m)
        return cls(spec, ParamVector.from_arrays(arrays), d, m, seed)

    @property
    def K(self):
        return self.params.view("K")

    @property
    def widths(self):
        return np.asarray(self.spec.layer_widths, dtype=np.int64)

    def copy(self):
        return LiftedModel(self.spec, self.params.copy(), self.d, self.m, self.seed)

    def predict(self, x):
        return predict_next(self, x)


class Buffer:
    """Rolling window of the last ``w + 1`` observations.

    An observation is one state ``(d,)`` or a synchronised batch ``(N, d)``
    holding the same time step of N trajectories.
    """

    def __init__(self, w=DEFAULT_WINDOW):
        if w < 1:
            raise ValueError("window size must be >= 1")
        self.w = int(w)
        self._states = deque(maxlen=self.w + 1)

    def push(self, x):
        x = np.array(x, dtype=float)
        if self._states and x.shape != self._states[-1].shape:
            raise DimensionError(f"observation shape {x.shape} != {self._states[-1].shape}")
        self._states.append(x)

    def extend(self, xs):
        for x in xs:
            self.push(x)

    def reset(self):
        self._states.clear()

    @property
    def is_warm(self):
        return len(self._states) == self.w + 1

    def __len__(self):
        return len(self._states)

    def array(self):
        return np.array(self._states)

    @property
    def window(self):
        return list(self._states)

    @property
    def n_streams(self):
        return 1 if not self._states or self._states[0].ndim == 1 else self._states[0].shape[0]

    def rows(self):
        """States stacked stream-major: rows ``k(w+1) .. k(w+1)+w`` are stream k's window."""
        A = self.array()
        if A.ndim == 2:
            return A
        return np.ascontiguousarray(A.transpose(1, 0, 2).reshape(-1, A.shape[2]))

    @classmethod
    def from_states(cls, states):
        states = np.asarray(states, dtype=float)
        buf = cls(len(states) - 1)
        buf.extend(states)
        return buf


def _check_state(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.d:
        raise DimensionError(f"state dimension {x.shape[-1]} != model dimension {model.d}")
    return x


def lift(model: LiftedModel, x):
    """``[x, net(x)]`` for one state or a batch of row states."""
    x = _check_state(model, x)
    return np.concatenate([x, mlp_apply(model.spec, model.params, x)], axis=-1)


def lift_node(tape: Tape, model: LiftedModel, X):
    X = _check_state(model, X)
    return tape.concat([tape.constant(X), mlp_forward(tape, model.spec, X)], axis=-1)


def predict_next(model: LiftedModel, x):
    """State block of ``K Phi(x)``."""
    phi = lift(model, x)
    return (phi @ model.K.T)[..., :model.d]


def index_pairs(w):
    """All ``(s, tau)`` with ``0 <= s < s + tau <= w`` (window-relative)."""
    return [(s, tau) for s in range(w) for tau in range(1, w - s + 1)]


def window_weights(w):
    """Loss weight of residual (source ``b``, power ``j``) for a single window.

    Term ``(b, j)`` appears once for each start ``s <= b``, i.e. ``b + 1`` times.
    """
    W = np.zeros((w + 1, w))
    for b in range(w + 1):
        for j in range(1, w - b + 1):
            W[b, j - 1] = b + 1
    return W


def score_weights(w):
    W = np.zeros((w + 1, w))
    for j in range(1, w + 1):
        W[w - j, j - 1] = 1.0
    return W


def prefix_weights(n, w):
    """Weights for the sum of window losses over every warm window of an ``n``-state segment."""
    if n < w + 1:
        raise NotWarmError(f"segment of {n} states is shorter than one window of {w + 1}")
    W = np.zeros((n, w))
    base = window_weights(w)
    for end in range(w, n):
        W[end - w:end + 1] += base
    return W


def multistep_loss(model: LiftedModel, buffer: Buffer, tape: Tape | None = None):
    """Tape-recorded multistep loss, enumerated literally over the index set.

    For a batched buffer the per-stream losses are averaged.
    """
    if not buffer.is_warm:
        raise NotWarmError(f"buffer holds {len(buffer)} of {buffer.w + 1} states")
    tape = Tape(model.params) if tape is None else tape
    w = buffer.w
    n_streams = buffer.n_streams
    phi = lift_node(tape, model, buffer.rows())
    K = tape.param("K")
    rows = {}
    powers = {}

    def row(i):
        if i not in rows:
            rows[i] = phi[i]
        return rows[i]

    def power(b, j):
        if j == 0:
            return row(b)
        if (b, j) not in powers:
            powers[b, j] = K @ power(b, j - 1)
        return powers[b, j]

    total = None
    for k in range(n_streams):
        base = k * (w + 1)
        for s, tau in index_pairs(w):
            for j in range(1, tau + 1):
                a = base + s + tau
                term = tape.sqnorm(row(a) - power(a - j, j))
                total = term if total is None else total + term
    return total if n_streams == 1 else tape.scale(total, 1.0 / n_streams)


def batch_weights(base, n_streams):
    """Tile per-window weights over streams, averaging across them."""
    return np.tile(base, (n_streams, 1)) / n_streams


def objective(model: LiftedModel, X, loss_weights, score_w=None, grad=None):
    """Compiled weighted residual; fills ``grad`` (flat) when given. Returns (loss, score)."""
    X = np.ascontiguousarray(X, dtype=float)
    if score_w is None:
        score_w = np.zeros_like(loss_weights)
    need = grad is not None
    g = grad if need else np.empty(0)
    loss, score = _kernels.objective(model.params.values, model.widths, X,
                                     loss_weights, score_w, g, need)
    return loss, score


def residual_sum(model: LiftedModel, X, weights):
    """Numpy reference for the weighted residual (no gradient)."""
    phi = lift(model, X)
    K = model.K
    n, w = weights.shape
    total = 0.0
    Z = phi.copy()
    for j in range(1, w + 1):
        Z = Z @ K.T
        r = phi[j:] - Z[:n - j]
        total += np.sum(weights[:n - j, j - 1] * np.sum(r * r, axis=1))
    return total


def conformity_score(model: LiftedModel, buffer: Buffer):
    """Residual of the newest lifted state against ``K^tau`` of each earlier one (stream mean)."""
    if not buffer.is_warm:
        raise NotWarmError(f"buffer holds {len(buffer)} of {buffer.w + 1} states")
    return residual_sum(model, buffer.rows(), batch_weights(score_weights(buffer.w), buffer.n_streams))


def spectrum(K, dt):
    """Continuous-time eigenvalues ``log(lambda) / dt``, descending real part."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    lam = eig(K).eigenvalues
    keep = np.abs(lam) > LOG_FLOOR
    if not np.all(keep):
        warnings.warn(f"dropping {np.sum(~keep)} eigenvalue(s) with modulus <= {LOG_FLOOR}")
    cont = np.log(lam[keep].astype(complex)) / dt
    order = np.lexsort((-cont.imag, -cont.real))
    return cont[order]


def eigenfunction_eval(model: LiftedModel, grid):
    """Values ``w_i^H Phi(x)`` on the grid; returns (discrete eigenvalues, values[n, m])."""
    dec = eig(model.K)
    if dec.is_defective:
        lam = dec.eigenvalues
        close = [i for i in range(len(lam)) for k in range(len(lam))
                 if k != i and abs(lam[i] - lam[k]) < 1e-6 * max(1.0, abs(lam[i]))]
        raise ValueError(f"Koopman matrix is defective at eigen-indices {sorted(set(close))}")
    phi = lift(model, np.atleast_2d(grid))
    return dec.eigenvalues, phi @ dec.left.conj()


def save_snapshot(model: LiftedModel, path, w=DEFAULT_WINDOW, seed=None):
    mlp = np.concatenate([model.params.view(n).ravel() for n in model.params.layout if n != "K"])
    doc = {
        "spec": {"layer_widths": list(model.spec.layer_widths), "activation": model.spec.activation},
        "d": model.d,
        "m": model.m,
        "params": mlp.tolist(),
        "K": model.K.ravel().tolist(),
        "w": int(w),
        "seed": int(model.seed if seed is None else seed),
    }
    Path(path).write_text(json.dumps(doc))
    return path


def load_snapshot(path):
    """Returns ``(model, w)``."""
    doc = json.loads(Path(path).read_text())
    for key in ("spec", "d", "m", "params", "K"):
        if key not in doc:
            raise KeyError(f"snapshot missing field {key!r}")
    spec = MlpSpec(tuple(doc["spec"]["layer_widths"]), doc["spec"].get("activation", "tanh"))
    d, m = int(doc["d"]), int(doc["m"])
    if spec.layer_widths[0] != d or d + spec.layer_widths[-1] != m:
        raise DimensionError("snapshot spec inconsistent with d and m")
    model = LiftedModel.create(d, m, spec.layer_widths[1:-1], seed=int(doc.get("seed", 0)))
    flat = np.concatenate([np.asarray(doc["params"], dtype=float), np.asarray(doc["K"], dtype=float)])
    if flat.size != len(model.params):
        raise DimensionError(f"snapshot has {flat.size} values, expected {len(model.params)}")
    model.params.values[:] = flat
    return model, int(doc.get("w", DEFAULT_WINDOW))
