"""SGD and L-BFGS over a network's flat parameter registry."""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]
LineSearch = Callable[[LossFn, np.ndarray, float, np.ndarray, np.ndarray], "tuple[float, float, np.ndarray] | None"]

CURVATURE_EPS = 1e-10


@dataclass
class SgdState:
    lr: float = 0.05
    momentum: float = 0.0
    velocity: list[np.ndarray] | None = None
    clip_norm: float = 0.0  # rescale g when its global 2-norm exceeds this; 0 disables
    clipped_steps: int = 0


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], state: SgdState) -> list[np.ndarray]:
    """In-place update ``w -= lr * g``, or with momentum ``v = mu*v + g; w -= lr * v``."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if state.clip_norm:
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if norm > state.clip_norm:
            state.clipped_steps += 1
            grads = [g * (state.clip_norm / norm) for g in grads]
    if state.momentum:
        if state.velocity is None:
            state.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, state.velocity):
            v *= state.momentum
            v += g
            p -= state.lr * v
    else:
        for p, g in zip(params, grads):
            p -= state.lr * g
    return params


@dataclass
class LbfgsState:
    history_size: int = 10
    c1: float = 1e-4
    max_trials: int = 30
    fallback_lr: float = 1e-3
    pairs: deque = field(default_factory=deque)
    iterations: int = 0
    nondescent_steps: int = 0
    line_search_failures: int = 0
    rejected_pairs: int = 0
    last_step_size: float = float("nan")
    # (f, g) at the point returned by the latest successful step
    last_eval: tuple | None = None

    @property
    def gamma(self) -> float:
        if not self.pairs:
            return 1.0
        s, y, _ = self.pairs[-1]
        return float(s @ y) / float(y @ y)

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        sy = float(s @ y)
        if not sy > CURVATURE_EPS:
            self.rejected_pairs += 1
            return False
        self.pairs.append((s, y, 1.0 / sy))
        while len(self.pairs) > self.history_size:
            self.pairs.popleft()
        return True

    def clear(self) -> None:
        self.pairs.clear()


def lbfgs_direction(grad: np.ndarray, state: LbfgsState) -> np.ndarray:
    """Two-loop recursion: ``-H g`` with ``H0 = gamma * I``."""
    q = np.array(grad, dtype=np.float64, copy=True)
    alphas = []
    for s, y, rho in reversed(state.pairs):
        alpha = rho * float(s @ q)
        q -= alpha * y
        alphas.append(alpha)
    r = state.gamma * q
    for (s, y, rho), alpha in zip(state.pairs, reversed(alphas)):
        beta = rho * float(y @ r)
        r += (alpha - beta) * s
    return -r


def armijo_backtracking(loss_fn: LossFn, w: np.ndarray, f0: float, g0: np.ndarray, d: np.ndarray,
                        c1: float = 1e-4, max_trials: int = 30, c2: float = 0.9):
    """Halve the step from 1 until ``f(w + t d) <= f0 + c1 t g0.d``.

    When the unit step is accepted but the slope along ``d`` is still steep
    (``g.d < c2 g0.d``), the step is doubled while the sufficient-decrease
    test keeps holding and the loss keeps dropping; otherwise the new
    curvature pair would fail the ``s.y > 0`` admission test. All trials
    count towards ``max_trials``.

    Returns ``(t, f, g)`` at the accepted point, or ``None``.
    """
    slope = float(g0 @ d)
    t = 1.0
    trials = 0
    while True:
        if trials == max_trials:
            return None
        f, g = _safe_eval(loss_fn, w + t * d)
        trials += 1
        if f <= f0 + c1 * t * slope:
            break
        t *= 0.5
    if t == 1.0:
        while trials < max_trials and float(g @ d) < c2 * slope:
            t2 = 2.0 * t
            f2, g2 = _safe_eval(loss_fn, w + t2 * d)
            trials += 1
            if not (f2 <= f0 + c1 * t2 * slope and f2 < f):
                break
            t, f, g = t2, f2, g2
    return t, f, g


def _safe_eval(loss_fn: LossFn, w: np.ndarray):
    try:
        f, g = loss_fn(w)
    except FloatingPointError:
        return math.inf, None
    return (f, g) if math.isfinite(f) else (math.inf, None)


def lbfgs_step(loss_fn: LossFn, params: np.ndarray, state: LbfgsState,
               line_search: LineSearch | None = None,
               start: tuple[float, np.ndarray] | None = None) -> tuple[np.ndarray, float]:
    """One L-BFGS iteration on a deterministic closure ``loss_fn(w) -> (f, g)``.

    ``start`` may carry ``(f, g)`` already known at ``params``. If the line
    search fails, a short normalized gradient step is taken and the history is
    dropped; the failure is counted in ``state`` rather than raised.
    """
    w = np.asarray(params, dtype=np.float64)
    f0, g0 = start if start is not None else loss_fn(w)
    state.iterations += 1
    gnorm = float(np.linalg.norm(g0))
    if gnorm == 0.0:
        state.last_step_size = 0.0
        state.last_eval = (f0, g0)
        return w.copy(), f0
    d = lbfgs_direction(g0, state)
    if not float(g0 @ d) < 0.0:
        state.nondescent_steps += 1
        log.warning("L-BFGS direction is not a descent direction; resetting history")
        state.clear()
        d = -g0
    if line_search is None:
        found = armijo_backtracking(loss_fn, w, f0, g0, d, state.c1, state.max_trials)
    else:
        found = line_search(loss_fn, w, f0, g0, d)
    if found is None:
        state.line_search_failures += 1
        log.warning("L-BFGS line search failed after %d trials; taking a bounded gradient step", state.max_trials)
        state.clear()
        w_new = w - state.fallback_lr * g0 / max(1.0, gnorm)
        f_new, g_new = loss_fn(w_new)
        state.last_step_size = state.fallback_lr
        state.last_eval = (f_new, g_new)
        return w_new, f_new
    t, f_new, g_new = found
    state.last_step_size = t
    s = t * d
    state.push(s, g_new - g0)
    state.last_eval = (f_new, g_new)
    return w + s, f_new


def lbfgs_minimize(loss_fn: LossFn, w0: np.ndarray, state: LbfgsState | None = None, gtol: float = 1e-6,
                   max_iter: int = 200, line_search: LineSearch | None = None):
    """Iterate :func:`lbfgs_step` on a fixed function until ``|g| < gtol``.

    Returns ``(w, f, iterations, state)``.
    """
    state = state if state is not None else LbfgsState()
    w = np.asarray(w0, dtype=np.float64).copy()
    f, g = loss_fn(w)
    for it in range(max_iter):
        if np.linalg.norm(g) < gtol:
            return w, f, it, state
        w, f = lbfgs_step(loss_fn, w, state, line_search, start=(f, g))
        f, g = state.last_eval
    return w, f, max_iter, state


def epoch_schedule(optimizer: str, n_samples: int, unit_size: int,
                   rng: np.random.Generator | int | None = None) -> list[np.ndarray]:
    """Index blocks for one epoch.

    SGD gets minibatches, L-BFGS gets megabatches (one iteration each); a unit
    larger than the dataset is clamped to the whole dataset. The last block
    may be short.
    """
    if optimizer not in ("sgd", "lbfgs"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if unit_size < 1:
        raise ValueError("unit size must be positive")
    rng = np.random.default_rng(rng)
    order = rng.permutation(n_samples)
    size = min(unit_size, n_samples)
    return [order[i:i + size] for i in range(0, n_samples, size)]
