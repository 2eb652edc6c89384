"""Time grids, grid transfers and the residual systems MGRIT solves.

A sequence is an array whose axis 0 is the time index 0..T. Index 0 is the
anchor (the initial state, zero for hidden states); the unknowns live at
indices 1..T.

A *level* is one time grid of the hierarchy together with its one-step map
``Phi_k``. MGRIT only talks to levels through ``level.step(k, u_prev)``, so
the same relaxation and cycle code drives the forward GRU, the time-reversed
adjoint and the demo ODE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .gru_cell import IMPLICIT, StackSpec, input_projection, stack_step, stack_vjp

MIN_COARSE_STEPS = 4


@dataclass(frozen=True)
class TimeGridLevel:
    index: int
    gamma: float
    n_steps: int


@dataclass(frozen=True)
class Hierarchy:
    c_f: int
    levels: tuple[TimeGridLevel, ...]

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def lengths(self) -> list[int]:
        return [lv.n_steps for lv in self.levels]


def build_hierarchy(T: int, c_f: int, max_levels: int, base_gamma: float = 1.0) -> Hierarchy:
    """Fine-to-coarse grids; a level is added only while the next one is an
    exact coarsening with at least ``MIN_COARSE_STEPS`` steps."""
    if T < MIN_COARSE_STEPS:
        raise ValueError(f"sequence length {T} is below the minimum of {MIN_COARSE_STEPS}")
    if c_f < 2:
        raise ValueError(f"coarsening factor must be >= 2, got {c_f}")
    if max_levels < 1:
        raise ValueError("max_levels must be >= 1")
    levels = [TimeGridLevel(0, base_gamma, T)]
    n = T
    while len(levels) < max_levels and n % c_f == 0 and n // c_f >= MIN_COARSE_STEPS:
        n //= c_f
        l = len(levels)
        levels.append(TimeGridLevel(l, base_gamma * c_f**l, n))
    return Hierarchy(c_f, tuple(levels))


def padded_length(T: int, c_f: int, levels: int) -> int:
    """Smallest multiple of c_f**(levels-1) that is >= T."""
    m = c_f ** max(levels - 1, 0)
    return -(-T // m) * m


def restrict(u: np.ndarray, c_f: int) -> np.ndarray:
    """Coarse sub-sequence u_0 (anchor), u_{c_f}, u_{2 c_f}, ..."""
    T = u.shape[0] - 1
    if c_f < 1 or T % c_f:
        raise ShapeError(f"length {T} is not divisible by c_f={c_f}")
    return u[::c_f].copy()


def prolong(U: np.ndarray, c_f: int, T_fine: int) -> np.ndarray:
    """Fine sequence with u_t = U_{floor(t / c_f)} (replicate the prior coarse point)."""
    if c_f < 1 or T_fine % c_f or U.shape[0] - 1 != T_fine // c_f:
        raise ShapeError(f"coarse length {U.shape[0] - 1} incompatible with T={T_fine}, c_f={c_f}")
    return np.repeat(U, c_f, axis=0)[: T_fine + 1]


class GruLevel:
    """Forward GRU stack on one grid: Phi_k(u) = stack_step(gamma, x_k, u)."""

    def __init__(self, stack: StackSpec, gamma: float, x: np.ndarray, method: str = IMPLICIT):
        self.stack = stack
        self.gamma = float(gamma)
        self.x = x
        self.method = method
        self.n_steps = x.shape[0] - 1
        self._proj: dict[int, np.ndarray] = {}

    def projection(self, k: int) -> np.ndarray:
        gi = self._proj.get(k)
        if gi is None:
            gi = self._proj[k] = input_projection(self.stack.layers[0], self.x[k])
        return gi

    def step(self, k: int, u_prev: np.ndarray) -> np.ndarray:
        return stack_step(self.stack, self.gamma, self.x[k], u_prev, self.method, self.projection(k))

    def taped_step(self, k: int, u_prev: np.ndarray):
        return stack_step(self.stack, self.gamma, self.x[k], u_prev, self.method,
                          self.projection(k), keep_tape=True)


class AdjointGruLevel:
    """Time-reversed adjoint of a GRU level, linearised about ``h_lin``.

    Reversed index s corresponds to forward index T - s; the step
    ``v_s = J_t^T v_{s-1}`` uses the Jacobian of the forward step
    t = T - s + 1 evaluated at (x_t, h_lin[t-1]).
    """

    def __init__(self, stack: StackSpec, gamma: float, x: np.ndarray, h_lin: np.ndarray,
                 method: str = IMPLICIT):
        if x.shape[0] != h_lin.shape[0]:
            raise ShapeError("inputs and linearisation states must have equal length")
        self.forward = GruLevel(stack, gamma, x, method)
        self.h_lin = h_lin
        self.n_steps = x.shape[0] - 1
        self.gamma = self.forward.gamma
        self._tapes: dict[int, list] = {}

    def tapes(self, t: int):
        tp = self._tapes.get(t)
        if tp is None:
            _, tp = self.forward.taped_step(t, self.h_lin[t - 1])
            self._tapes[t] = tp
        return tp

    def step(self, s: int, v_prev: np.ndarray) -> np.ndarray:
        w_prev, _ = stack_vjp(self.tapes(self.n_steps - s + 1), v_prev, param_grads=False)
        return w_prev

    def param_grads(self, t: int, w_t: np.ndarray):
        """Per-layer parameter cotangent of forward step t weighted by w_t."""
        _, grads = stack_vjp(self.tapes(t), w_t, param_grads=True)
        return grads


def level_residual(level, u: np.ndarray, forcing: np.ndarray | None = None,
                   lo: int = 1, hi: int | None = None, offset: int = 0) -> np.ndarray:
    """r_k = u_k - Phi_k(u_{k-1}) - g_k for k in lo..hi.

    ``u`` (and ``forcing``) may be a local window whose first row is global
    index ``offset``; the result is aligned the same way, rows outside
    lo..hi left at zero.
    """
    hi = level.n_steps if hi is None else hi
    r = np.zeros_like(u)
    for k in range(lo, hi + 1):
        i = k - offset
        rk = u[i] - level.step(k, u[i - 1])
        if forcing is not None:
            rk = rk - forcing[i]
        r[i] = rk
    return r


def residual(stack: StackSpec, gamma: float, x: np.ndarray, h: np.ndarray,
             method: str = IMPLICIT) -> np.ndarray:
    """f(h)_t = h_t - Phi_gamma(x_t, h_{t-1}) for t = 1..T; entry 0 is zero."""
    if x.shape[0] != h.shape[0]:
        raise ShapeError(f"x has {x.shape[0] - 1} steps but h has {h.shape[0] - 1}")
    return level_residual(GruLevel(stack, gamma, x, method), h)


def serial_propagate(level, anchor: np.ndarray, forcing: np.ndarray | None = None) -> np.ndarray:
    """Exact forward substitution u_k = Phi_k(u_{k-1}) + g_k from the anchor."""
    u = np.empty((level.n_steps + 1, *anchor.shape))
    u[0] = anchor
    cur = anchor
    for k in range(1, level.n_steps + 1):
        cur = level.step(k, cur)
        if forcing is not None:
            cur = cur + forcing[k]
        u[k] = cur
    return u
