"""Streaming learners sharing one interface.

Every learner is initialised on a warm-up prefix, then fed one state at a time
through :meth:`step`. :meth:`begin_stream` starts a new trajectory: buffers
and lagged states are reset and refilled from the given states without any
parameter update. :meth:`predict` never mutates the learner.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import ParamVector, Tape, backward
from .conformal import ConformalController, init_threshold, pi_update, should_update
from .errors import DimensionError, NotWarmError, SingularUpdateError
from .koopman import (
    DEFAULT_WINDOW, Buffer, LiftedModel, batch_weights, default_lifted_dim, objective,
    predict_next, prefix_weights, score_weights, window_weights,
)
from .linalg import ridge_reconstruction, sherman_morrison_update
from .nn import AdamWState, MlpSpec, adamw_step, init_mlp, mlp_apply, mlp_forward

ODMD_COND_LIMIT = 1e12


@dataclass
class LearnerConfig:
    """Hyperparameters for all learners; each learner reads the fields it needs."""

    w: int = DEFAULT_WINDOW
    alpha: float = 0.5
    gamma: float = 0.1
    c_sat: float = 5.0
    k_i: float | None = None
    log_threshold: bool = True
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 4000
    max_inner_iters: int = 500
    n_iter: int = 100
    hidden: tuple | None = None
    m: int | None = None
    seed: int = 0
    rho: float = 1e-6
    degree: int = 2

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise KeyError(f"unknown learner fields: {sorted(unknown)}")
        doc = dict(doc)
        if doc.get("hidden") is not None:
            doc["hidden"] = tuple(doc["hidden"])
        return cls(**doc)

    def to_dict(self):
        out = asdict(self)
        if out["hidden"] is not None:
            out["hidden"] = list(out["hidden"])
        return out


@dataclass
class StepStats:
    t: int
    score: float | None = None
    threshold: float | None = None
    e_t: int | None = None
    inner_iters: int = 0
    cap_hit: bool = False
    online_sq_error: float | None = None
    final_score: float | None = None


class OnlineLearner:
    name = "base"

    def predict(self, x):
        raise NotImplementedError

    def begin_stream(self, warm_states):
        raise NotImplementedError

    def step(self, x) -> StepStats:
        raise NotImplementedError


# -- stream shapes -------------------------------------------------------------


def as_streams(states):
    """``(T, d)`` -> ``(1, T, d)``; a ``(N, T, d)`` stack of synchronised streams passes through."""
    states = np.asarray(states, dtype=float)
    if states.ndim == 2:
        return states[None]
    if states.ndim != 3:
        raise DimensionError(f"expected (T, d) or (N, T, d) states, got shape {states.shape}")
    return states


def time_slices(states):
    """Per-step observations: rows of a ``(T, d)`` array or ``(N, d)`` slices of ``(N, T, d)``."""
    states = np.asarray(states, dtype=float)
    if states.ndim == 2:
        return list(states)
    return [states[:, t] for t in range(states.shape[1])]


# -- deep Koopman learners ---------------------------------------------------


def train_offline(model: LiftedModel, segments, w, epochs, opt: AdamWState, callback=None):
    """Full-batch AdamW on the window losses of every segment, averaged over segments.

    Segments are stacked row-wise; their weight blocks never couple states of
    different segments. ``callback(epoch, loss)`` may return True to stop early.
    """
    segments = [np.asarray(s, dtype=float) for s in segments]
    X = np.ascontiguousarray(np.vstack(segments))
    W = np.vstack([prefix_weights(len(s), w) for s in segments]) / len(segments)
    grad = model.params.zeros_like()
    losses = []
    for epoch in range(epochs):
        loss, _ = objective(model, X, W, None, grad.values)
        losses.append(loss)
        adamw_step(model.params, grad, opt)
        if callback is not None and callback(epoch, loss):
            break
    return losses


def window_scores(model, states, w):
    """Stream-mean score of every warm window, indexed by its last time step."""
    S = as_streams(states)
    n, T, d = S.shape
    Ws = batch_weights(score_weights(w), n)
    zero = np.zeros_like(Ws)
    out = []
    for end in range(w, T):
        X = S[:, end - w:end + 1].reshape(-1, d)
        out.append(objective(model, X, zero, Ws)[1])
    return out


class KoopmanLearner(OnlineLearner):
    """Shared machinery of COLoKe and OLoKe."""

    def __init__(self, model: LiftedModel, opt: AdamWState, config: LearnerConfig):
        self.model = model
        self.opt = opt
        self.config = config
        self.buffer = Buffer(config.w)
        self._weights = {}
        self._grad = model.params.zeros_like()
        self.t = 0
        self.stats: list[StepStats] = []

    @classmethod
    def _initialised(cls, prefix, config: LearnerConfig):
        S = as_streams(prefix)
        if S.shape[1] < config.w + 1:
            raise NotWarmError(f"warm-up prefix of {S.shape[1]} states needs at least {config.w + 1}")
        model = LiftedModel.create(S.shape[2], config.m, config.hidden, seed=config.seed)
        opt = AdamWState.fresh(len(model.params), lr=config.lr, weight_decay=config.weight_decay)
        train_offline(model, list(S), config.w, config.epochs, opt)
        learner = cls(model, opt, config)
        learner.begin_stream(prefix)
        learner.t = S.shape[1]
        return learner

    @classmethod
    def from_model(cls, model: LiftedModel, opt: AdamWState, config: LearnerConfig, prefix):
        """Wrap an already trained model (copied), e.g. to share one warm-up across learners."""
        learner = cls(model.copy(), AdamWState(**{k: (v.copy() if isinstance(v, np.ndarray) else v)
                                                   for k, v in vars(opt).items()}), config)
        learner.begin_stream(prefix)
        learner.t = as_streams(prefix).shape[1]
        return learner

    def predict(self, x):
        return predict_next(self.model, x)

    def begin_stream(self, warm_states):
        self.buffer.reset()
        self.buffer.extend(time_slices(warm_states)[-(self.config.w + 1):])

    def _batch_weights(self):
        n = self.buffer.n_streams
        if n not in self._weights:
            w = self.config.w
            self._weights[n] = (batch_weights(window_weights(w), n), batch_weights(score_weights(w), n))
        return self._weights[n]

    def _evaluate(self):
        wl, ws = self._batch_weights()
        return objective(self.model, self.buffer.rows(), wl, ws, self._grad.values)

    def _descend(self):
        adamw_step(self.model.params, self._grad, self.opt)

    def current_score(self):
        _, ws = self._batch_weights()
        return objective(self.model, self.buffer.rows(), np.zeros_like(ws), ws)[1]


class ColokeLearner(KoopmanLearner):
    """Updates only while the conformity score exceeds the calibrated threshold."""

    name = "coloke"

    def __init__(self, model, opt, config, ctrl: ConformalController | None = None):
        super().__init__(model, opt, config)
        self.ctrl = ctrl
        self.init_scores: list[float] = []

    def calibrate(self, prefix):
        cfg = self.config
        scores = window_scores(self.model, prefix, cfg.w)
        if not scores:
            raise NotWarmError("warm-up prefix yields no calibration windows")
        q = init_threshold(scores, cfg.alpha)
        self.ctrl = ConformalController(
            q, alpha=cfg.alpha, gamma=cfg.gamma, c_sat=cfg.c_sat, k_i=cfg.k_i,
            log_domain=cfg.log_threshold)
        self.init_scores = scores
        return q

    @classmethod
    def initialise(cls, prefix, config: LearnerConfig | None = None):
        learner = cls._initialised(prefix, config or LearnerConfig())
        learner.calibrate(prefix)
        return learner

    @classmethod
    def from_model(cls, model, opt, config, prefix):
        learner = super().from_model(model, opt, config, prefix)
        learner.calibrate(prefix)
        return learner

    def step(self, x):
        self.t += 1
        self.buffer.push(x)
        st = StepStats(self.t)
        if not self.buffer.is_warm:
            self.stats.append(st)
            return st
        _, s = self._evaluate()
        q_t = self.ctrl.q
        e = should_update(self.ctrl, s)
        pi_update(self.ctrl, e, s)
        st.score, st.threshold, st.e_t = s, q_t, e
        iters = 0
        cap = self.config.max_inner_iters
        while s > q_t and iters < cap:
            self._descend()
            iters += 1
            _, s = self._evaluate()
        st.final_score = s
        st.inner_iters = iters
        st.cap_hit = bool(s > q_t)
        self.stats.append(st)
        return st


def coloke_init(prefix, config: LearnerConfig | None = None) -> ColokeLearner:
    return ColokeLearner.initialise(prefix, config)


class OlokeLearner(KoopmanLearner):
    """Fixed number of gradient steps per arriving state."""

    name = "oloke"

    @classmethod
    def initialise(cls, prefix, config: LearnerConfig | None = None):
        return cls._initialised(prefix, config or LearnerConfig())

    def step(self, x, n_iter=None):
        n_iter = self.config.n_iter if n_iter is None else int(n_iter)
        self.t += 1
        self.buffer.push(x)
        st = StepStats(self.t)
        if not self.buffer.is_warm:
            self.stats.append(st)
            return st
        _, s = self._evaluate()
        st.score = s
        for i in range(n_iter):
            if i:
                self._evaluate()
            self._descend()
        st.inner_iters = n_iter
        self.stats.append(st)
        return st


def oloke_step(learner: OlokeLearner, x, n_iter):
    return learner.step(x, n_iter)


# -- autoencoder baseline ----------------------------------------------------


class OnlineAELearner(OnlineLearner):
    """Encoder/decoder pair with a linear latent propagator."""

    name = "onlineae"

    def __init__(self, d, config: LearnerConfig):
        self.config = config
        self.d = d
        self.m = default_lifted_dim(d) if config.m is None else int(config.m)
        hidden = (32, 16, 8) if config.hidden is None else tuple(config.hidden)
        self.enc = MlpSpec((d, *hidden, self.m))
        self.dec = MlpSpec((self.m, *reversed(hidden), d))
        rng = np.random.default_rng(config.seed)
        arrays = init_mlp(self.enc, rng, "enc.")
        arrays.update(init_mlp(self.dec, rng, "dec."))
        arrays["K"] = np.eye(self.m)
        self.params = ParamVector.from_arrays(arrays)
        self.opt = AdamWState.fresh(len(self.params), lr=config.lr, weight_decay=config.weight_decay)
        self.buffer = Buffer(config.w)
        self.t = 0
        self.stats: list[StepStats] = []

    def loss(self, tape: Tape, X):
        """Prediction, autoencoding and latent-prediction terms over consecutive time steps.

        ``X`` is ``(T, d)`` or time-major ``(T, N, d)``; the sum is averaged over the N streams.
        """
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[:, None]
        T, n, d = X.shape
        rows = X.reshape(T * n, d)
        E = mlp_forward(tape, self.enc, rows, "enc.")
        KT = tape.transpose(tape.param("K"))
        ahead = tape.index(E, slice(None, -n)) @ KT
        pred = mlp_forward(tape, self.dec, ahead, "dec.") - rows[n:]
        recon = mlp_forward(tape, self.dec, E, "dec.") - rows
        latent = ahead - tape.index(E, slice(n, None))
        total = tape.sqnorm(pred) + tape.sqnorm(recon) + tape.sqnorm(latent)
        return total if n == 1 else tape.scale(total, 1.0 / n)

    def _train(self, X, n):
        for _ in range(n):
            tape = Tape(self.params)
            root = self.loss(tape, X)
            adamw_step(self.params, backward(tape, root), self.opt)

    @classmethod
    def initialise(cls, prefix, config: LearnerConfig | None = None):
        config = config or LearnerConfig()
        S = as_streams(prefix)
        learner = cls(S.shape[2], config)
        learner._train(S.transpose(1, 0, 2), config.epochs)
        learner.begin_stream(prefix)
        learner.t = S.shape[1]
        return learner

    def encode(self, x):
        return mlp_apply(self.enc, self.params, x, "enc.")

    def predict(self, x):
        z = self.encode(np.asarray(x, dtype=float)) @ self.params.view("K").T
        return mlp_apply(self.dec, self.params, z, "dec.")

    def begin_stream(self, warm_states):
        self.buffer.reset()
        self.buffer.extend(time_slices(warm_states)[-(self.config.w + 1):])

    def step(self, x, n_iter=None):
        n_iter = self.config.n_iter if n_iter is None else int(n_iter)
        self.t += 1
        self.buffer.push(x)
        st = StepStats(self.t)
        if len(self.buffer) >= 2:
            self._train(self.buffer.array(), n_iter)
            st.inner_iters = n_iter
        self.stats.append(st)
        return st


def onlineae_step(state: OnlineAELearner, x, n_iter):
    return state.step(x, n_iter)


# -- recursive DMD baselines ---------------------------------------------------


@dataclass
class OdmdState:
    Q: np.ndarray
    P: np.ndarray
    K: np.ndarray


def _rls_init(Xf, Yf, ridge=0.0):
    G = Xf @ Xf.T
    if ridge:
        G = G + ridge * np.eye(G.shape[0])
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > ODMD_COND_LIMIT:
        raise SingularUpdateError(f"snapshot Gram matrix is singular (cond={cond:.3e})")
    P = np.linalg.inv(G)
    P = 0.5 * (P + P.T)
    Q = Yf @ Xf.T
    return OdmdState(Q, P, Q @ P)


def _rls_update(state: OdmdState, f_prev, f_new):
    state.Q = state.Q + np.outer(f_new, f_prev)
    state.P = sherman_morrison_update(state.P, f_prev)
    state.K = state.Q @ state.P
    return state


def _snapshot_pairs(prefix):
    S = as_streams(prefix)
    d = S.shape[2]
    return S[:, :-1].reshape(-1, d), S[:, 1:].reshape(-1, d)


def odmd_init(prefix) -> OdmdState:
    X, Y = _snapshot_pairs(prefix)
    d = X.shape[1]
    if len(X) < d:
        raise NotWarmError(f"need at least {d} snapshot pairs, got {len(X)}")
    return _rls_init(X.T, Y.T)


def odmd_step(state: OdmdState, x_prev, x_t) -> OdmdState:
    """Rank-one update per pair; ``(N, d)`` arguments apply N updates in stream order."""
    for a, b in zip(np.atleast_2d(np.asarray(x_prev, dtype=float)),
                    np.atleast_2d(np.asarray(x_t, dtype=float))):
        _rls_update(state, a, b)
    return state


class OdmdLearner(OnlineLearner):
    name = "odmd"

    def __init__(self, state: OdmdState, last):
        self.state = state
        self.last = last
        self.t = 0
        self.stats: list[StepStats] = []

    @classmethod
    def initialise(cls, prefix, config: LearnerConfig | None = None):
        learner = cls(odmd_init(prefix), None)
        learner.begin_stream(prefix)
        learner.t = as_streams(prefix).shape[1]
        return learner

    def predict(self, x):
        return np.asarray(x, dtype=float) @ self.state.K.T

    def begin_stream(self, warm_states):
        self.last = time_slices(warm_states)[-1].copy()

    def step(self, x):
        x = np.asarray(x, dtype=float)
        self.t += 1
        if self.last is not None:
            odmd_step(self.state, self.last, x)
        self.last = x.copy()
        st = StepStats(self.t)
        self.stats.append(st)
        return st


def poly_dict(x, degree=2):
    """All monomials of total degree <= ``degree``, graded-lex, constant first."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    d = X.shape[1]
    cols = [np.ones(len(X))]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            cols.append(np.prod(X[:, list(combo)], axis=1))
    out = np.stack(cols, axis=1)
    return out[0] if single else out


def dictionary_size(d, degree=2):
    return math.comb(d + degree, degree)


@dataclass
class OedmdState:
    degree: int
    Q: np.ndarray
    P: np.ndarray
    K: np.ndarray
    C: np.ndarray
    rho: float


class OedmdLearner(OnlineLearner):
    """Recursive EDMD on a polynomial dictionary with a buffer-refit ridge decoder."""

    name = "oedmd"

    def __init__(self, state: OedmdState, w, last):
        self.state = state
        self.buffer = Buffer(w)
        self.last = last
        self.t = 0
        self.stats: list[StepStats] = []

    @classmethod
    def initialise(cls, prefix, config: LearnerConfig | None = None):
        config = config or LearnerConfig()
        X, Y = _snapshot_pairs(prefix)
        rls = _rls_init(poly_dict(X, config.degree).T, poly_dict(Y, config.degree).T, ridge=config.rho)
        state = OedmdState(config.degree, rls.Q, rls.P, rls.K, None, config.rho)
        learner = cls(state, config.w, None)
        learner.begin_stream(prefix)
        learner.t = as_streams(prefix).shape[1]
        return learner

    def predict(self, x):
        f = poly_dict(x, self.state.degree)
        return (f @ self.state.K.T) @ self.state.C.T

    def begin_stream(self, warm_states):
        steps = time_slices(warm_states)
        self.last = steps[-1].copy()
        self.buffer.reset()
        self.buffer.extend(steps[-(self.buffer.w + 1):])
        self._refit()

    def _refit(self):
        Z = self.buffer.rows()
        self.state.C = ridge_reconstruction(Z.T, poly_dict(Z, self.state.degree).T, self.state.rho)

    def step(self, x):
        x = np.asarray(x, dtype=float)
        self.t += 1
        if self.last is not None:
            rls = OdmdState(self.state.Q, self.state.P, self.state.K)
            deg = self.state.degree
            for a, b in zip(np.atleast_2d(self.last), np.atleast_2d(x)):
                _rls_update(rls, poly_dict(a, deg), poly_dict(b, deg))
            self.state.Q, self.state.P, self.state.K = rls.Q, rls.P, rls.K
        self.last = x.copy()
        self.buffer.push(x)
        self._refit()
        st = StepStats(self.t)
        self.stats.append(st)
        return st


def oedmd_step(state: OedmdLearner, x):
    return state.step(x)


LEARNERS = {
    "coloke": ColokeLearner,
    "oloke": OlokeLearner,
    "onlineae": OnlineAELearner,
    "odmd": OdmdLearner,
    "oedmd": OedmdLearner,
}
