"""Conformal PI threshold control."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError

TAN_MARGIN = 1e-3


def init_threshold(scores, alpha):
    """The ceil((1 - alpha) n)-th order statistic of the scores."""
    scores = np.sort(np.asarray(scores, dtype=float).ravel())
    n = scores.size
    if n == 0:
        raise ValueError("cannot calibrate a threshold from zero scores")
    k = min(max(math.ceil((1.0 - alpha) * n - 1e-12), 1), n)
    return float(scores[k - 1])


def saturation(err_sum, t, c_sat, k_i):
    """Tangent integrator ``k_i tan(x log(t+1) / (c_sat (t+1)))`` with a clamped argument."""
    if k_i == 0:
        return 0.0
    arg = err_sum * math.log(t + 1) / (c_sat * (t + 1))
    lim = math.pi / 2 - TAN_MARGIN
    return k_i * math.tan(min(max(arg, -lim), lim))


@dataclass
class ConformalController:
    """Threshold state for one stream.

    With ``log_domain`` the update acts on ``log q``: the proportional and
    integral terms become relative changes, so the threshold follows scores
    across orders of magnitude and never crosses zero. The trigger rule
    ``s > q`` is unaffected since log is monotone.
    """

    q: float
    alpha: float = 0.5
    gamma: float = 0.1
    c_sat: float = 5.0
    k_i: float | None = None
    err_sum: float = 0.0
    t: int = 0
    log_domain: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not math.isfinite(self.q):
            raise NonFiniteError(f"initial threshold {self.q}")
        if self.k_i is None:
            self.k_i = 1.0 if self.log_domain else float(self.q)


def should_update(ctrl: ConformalController, s_t):
    return 1 if s_t > ctrl.q else 0


def pi_update(ctrl: ConformalController, e_t, s_t=None):
    """Advance the threshold by one observed error indicator and return the new value.

    In log mode a non-positive threshold has no scale to move relative to: it
    is held on conforming steps and restarted at ``s_t`` (when given) on the
    first violation.
    """
    if e_t not in (0, 1):
        raise ValueError("error indicator must be 0 or 1")
    ctrl.t += 1
    ctrl.err_sum += e_t - ctrl.alpha
    step = ctrl.gamma * (e_t - ctrl.alpha) + saturation(ctrl.err_sum, ctrl.t, ctrl.c_sat, ctrl.k_i)
    if not ctrl.log_domain:
        q = ctrl.q + step
    elif ctrl.q > 0:
        q = ctrl.q * math.exp(step)
    elif e_t and s_t is not None and s_t > 0:
        q = float(s_t)
    else:
        q = ctrl.q
    if not math.isfinite(q):
        raise NonFiniteError(f"threshold became {q}")
    ctrl.q = q
    return q
