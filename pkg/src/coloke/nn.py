"""Tanh multilayer perceptrons and the AdamW optimizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, ParamVector, Tape
from .errors import DimensionError, NonFiniteError


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output; tanh on every layer but the last."""

    layer_widths: tuple
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {self.layer_widths}")
        if self.activation != "tanh":
            raise ValueError("only tanh activations are supported")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def n_params(self):
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(self.n_layers))


def layer_names(prefix, i):
    return f"{prefix}{i}.weight", f"{prefix}{i}.bias"


def init_mlp(spec: MlpSpec, rng, prefix="mlp."):
    """Glorot-uniform weights, zero biases, as an ordered dict of arrays."""
    arrays = {}
    w = spec.layer_widths
    for i in range(spec.n_layers):
        fan_in, fan_out = w[i], w[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        wn, bn = layer_names(prefix, i)
        arrays[wn] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        arrays[bn] = np.zeros(fan_out)
    return arrays


def mlp_forward(tape: Tape, spec: MlpSpec, x, prefix="mlp."):
    """Tape-recorded forward pass; ``x`` is one state or a batch of row states."""
    x = x if isinstance(x, Node) else tape.constant(x)
    if x.shape[-1] != spec.layer_widths[0]:
        raise DimensionError(f"input width {x.shape[-1]} != {spec.layer_widths[0]}")
    h = x
    for i in range(spec.n_layers):
        wn, bn = layer_names(prefix, i)
        h = h @ tape.transpose(tape.param(wn)) + tape.param(bn)
        if i < spec.n_layers - 1:
            h = tape.tanh(h)
    return h


def mlp_apply(spec: MlpSpec, params: ParamVector, x, prefix="mlp."):
    """Plain numpy forward pass (no tape)."""
    h = np.asarray(x, dtype=float)
    if h.shape[-1] != spec.layer_widths[0]:
        raise DimensionError(f"input width {h.shape[-1]} != {spec.layer_widths[0]}")
    for i in range(spec.n_layers):
        wn, bn = layer_names(prefix, i)
        h = h @ params.view(wn).T + params.view(bn)
        if i < spec.n_layers - 1:
            h = np.tanh(h)
    return h


@dataclass
class AdamWState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def fresh(cls, n, **hyper):
        return cls(np.zeros(n), np.zeros(n), **hyper)


def adamw_step(params: ParamVector, grad: ParamVector, state: AdamWState):
    """One AdamW update with decoupled weight decay.

    Updates ``params`` and ``state`` in place and returns both.
    """
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad)
    p = params.values
    if g.shape != p.shape:
        raise DimensionError(f"gradient length {g.size} != parameter length {p.size}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient")
    state.step_count += 1
    t = state.step_count
    if state.weight_decay:
        p *= 1.0 - state.lr * state.weight_decay
    m, v = state.first_moment, state.second_moment
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * (g * g)
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    p -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state
