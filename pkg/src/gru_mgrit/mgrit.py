"""Multigrid-reduction-in-time for forward and adjoint propagation.

The single-lane code in this module is the reference path: the parallel
runtime reuses :func:`relax_chunk`, :func:`restricted_residual` and the
reductions below, so both paths perform identical floating-point work.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .grid import (AdjointGruLevel, GruLevel, Hierarchy, build_hierarchy, level_residual,
                   prolong, restrict, serial_propagate)
from .gru_cell import IMPLICIT, GruParams, StackSpec
from .numerics import squared_terms, tree_sum

F_RELAX = "F"
FCF_RELAX = "FCF"


@dataclass
class CycleConfig:
    c_f: int = 4
    levels: int = 3
    fwd_iters: int = 2
    bwd_iters: int = 1
    fine_relax: str = FCF_RELAX

    def __post_init__(self):
        if self.c_f < 2:
            raise ValueError(f"c_f must be >= 2, got {self.c_f}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.fwd_iters < 1 or self.bwd_iters < 1:
            raise ValueError("fwd_iters and bwd_iters must be >= 1")
        if self.fine_relax not in (F_RELAX, FCF_RELAX):
            raise ValueError(f"fine_relax must be 'F' or 'FCF', got {self.fine_relax!r}")

    def hierarchy(self, T: int, base_gamma: float = 1.0) -> Hierarchy:
        return build_hierarchy(T, self.c_f, self.levels, base_gamma)


@dataclass
class ConvergenceReport:
    num_levels: int = 0
    forward: list[float] = field(default_factory=list)
    backward: list[float] = field(default_factory=list)
    level_seconds: dict[int, float] = field(default_factory=dict)
    wall: list[float] = field(default_factory=list)

    def add_time(self, level: int, seconds: float) -> None:
        self.level_seconds[level] = self.level_seconds.get(level, 0.0) + seconds

    def records(self):
        n = max(len(self.forward), len(self.backward))
        for i in range(n):
            yield {
                "levels": self.num_levels,
                "iteration": i + 1,
                "fwd_residual": self.forward[i] if i < len(self.forward) else None,
                "bwd_residual": self.backward[i] if i < len(self.backward) else None,
                "wall_time": self.wall[i] if i < len(self.wall) else None,
            }

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.records())


@dataclass
class ForcedResidualSystem:
    """u_k = Phi_k(u_{k-1}) + g_k on one level, anchored at ``anchor``."""

    level: object
    forcing: np.ndarray | None
    anchor: np.ndarray


# -- relaxation ---------------------------------------------------------------

def relax_chunk(level, src, dst, start: int, stop: int, forcing=None, offset: int = 0) -> None:
    """Propagate from ``src[start]`` and write indices start+1..stop of ``dst``."""
    cur = src[start - offset]
    for k in range(start + 1, stop + 1):
        cur = level.step(k, cur)
        if forcing is not None:
            cur = cur + forcing[k - offset]
        dst[k - offset] = cur


def relax_range(level, u, c_f: int, include_c: bool, forcing=None, lo: int = 0,
                hi: int | None = None, offset: int = 0):
    """One F- or FC-sweep over the chunks starting at C-points lo, lo+c_f, ..< hi.

    Every chunk starts from the *input* value of its C-point, so chunks are
    independent and may run on separate lanes.
    """
    hi = level.n_steps if hi is None else hi
    out = u.copy()
    for start in range(lo, hi, c_f):
        stop = start + c_f if include_c else start + c_f - 1
        relax_chunk(level, u, out, start, stop, forcing, offset)
    return out


def _check_len(level, u, c_f):
    if u.shape[0] != level.n_steps + 1 or level.n_steps % c_f:
        raise ValueError(f"sequence of length {u.shape[0] - 1} incompatible with "
                         f"{level.n_steps} steps and c_f={c_f}")


def f_relax(level, u, c_f: int, forcing=None):
    _check_len(level, u, c_f)
    return relax_range(level, u, c_f, False, forcing)


def fc_relax(level, u, c_f: int, forcing=None):
    _check_len(level, u, c_f)
    return relax_range(level, u, c_f, True, forcing)


def fcf_relax(level, u, c_f: int, forcing=None):
    return f_relax(level, fc_relax(level, u, c_f, forcing), c_f, forcing)


def coarse_solve(system: ForcedResidualSystem) -> np.ndarray:
    return serial_propagate(system.level, system.anchor, system.forcing)


# -- coarse-grid correction ---------------------------------------------------

def restricted_residual(level, u, c_f: int, forcing=None, lo: int = 0, hi: int | None = None,
                        offset: int = 0) -> dict[int, np.ndarray]:
    """Fine residual f(u) - g at the C-points in (lo, hi], keyed by coarse index.

    Only C-point entries survive restriction, so F-points are never evaluated.
    """
    hi = level.n_steps if hi is None else hi
    out = {}
    for k in range(lo + c_f, hi + 1, c_f):
        i = k - offset
        rk = u[i] - level.step(k, u[i - 1])
        if forcing is not None:
            rk = rk - forcing[i]
        out[k // c_f] = rk
    return out


def coarse_forcing(coarse_level, uc, r_c: dict[int, np.ndarray], lo: int = 0,
                   hi: int | None = None, offset: int = 0) -> np.ndarray:
    """g_c = f_c(R u) - R(f(u) - g) on coarse indices (lo, hi]."""
    hi = coarse_level.n_steps if hi is None else hi
    g = np.zeros_like(uc)
    for K in range(lo + 1, hi + 1):
        i = K - offset
        g[i] = (uc[i] - coarse_level.step(K, uc[i - 1])) - r_c[K]
    return g


def v_cycle(levels: list, c_f: int, u, forcing=None, l: int = 0, fine_relax: str = FCF_RELAX,
            report: ConvergenceReport | None = None):
    """One MGRIT V-cycle on ``levels[l:]``; the coarsest level is solved exactly."""
    lev = levels[l]
    t0 = time.perf_counter()
    if l == len(levels) - 1:
        out = serial_propagate(lev, u[0], forcing)
        if report is not None:
            report.add_time(l, time.perf_counter() - t0)
        return out
    _check_len(lev, u, c_f)
    if l == 0 and fine_relax == F_RELAX:
        u1 = relax_range(lev, u, c_f, False, forcing)
    else:
        u1 = relax_range(lev, relax_range(lev, u, c_f, True, forcing), c_f, False, forcing)
    r_c = restricted_residual(lev, u1, c_f, forcing)
    uc = restrict(u1, c_f)
    gc = coarse_forcing(levels[l + 1], uc, r_c)
    if report is not None:
        report.add_time(l, time.perf_counter() - t0)
    uc_star = v_cycle(levels, c_f, uc, gc, l + 1, fine_relax, report)
    t0 = time.perf_counter()
    u2 = u1 + prolong(uc_star - uc, c_f, lev.n_steps)
    out = relax_range(lev, u2, c_f, False, forcing)
    if report is not None:
        report.add_time(l, time.perf_counter() - t0)
    return out


def residual_norm(level, u, forcing=None) -> float:
    return float(np.sqrt(tree_sum(squared_terms(level_residual(level, u, forcing)))))


# -- GRU forward / adjoint ----------------------------------------------------

def restrict_levels(seq: np.ndarray, hierarchy: Hierarchy) -> list[np.ndarray]:
    out = [seq]
    for _ in hierarchy.levels[1:]:
        out.append(restrict(out[-1], hierarchy.c_f))
    return out


def build_gru_levels(stack: StackSpec, x: np.ndarray, hierarchy: Hierarchy,
                     method: str = IMPLICIT) -> list[GruLevel]:
    xs = restrict_levels(x, hierarchy)
    return [GruLevel(stack, lv.gamma, xl, method) for lv, xl in zip(hierarchy.levels, xs)]


def build_adjoint_levels(stack: StackSpec, x: np.ndarray, h_stored: np.ndarray,
                         hierarchy: Hierarchy, method: str = IMPLICIT) -> list[AdjointGruLevel]:
    xs = restrict_levels(x, hierarchy)
    hs = restrict_levels(h_stored, hierarchy)
    return [AdjointGruLevel(stack, lv.gamma, xl, hl, method)
            for lv, xl, hl in zip(hierarchy.levels, xs, hs)]


def mgprop(config: CycleConfig, levels: list, h, forcing=None,
           report: ConvergenceReport | None = None):
    """One forward MGRIT cycle (relax, coarse correction, final F-sweep)."""
    return v_cycle(levels, config.c_f, h, forcing, 0, config.fine_relax, report)


def to_reversed(seq: np.ndarray) -> np.ndarray:
    return seq[::-1].copy()


def mgbackprop(config: CycleConfig, adj_levels: list, w, sources=None,
               report: ConvergenceReport | None = None):
    """One adjoint MGRIT cycle in natural time order.

    ``w[T]`` carries the terminal cotangent; ``sources[t]`` (optional) adds
    loss sensitivities at interior indices. Relaxation runs right-to-left.
    """
    v = to_reversed(w)
    g = None if sources is None else to_reversed(sources)
    v = v_cycle(adj_levels, config.c_f, v, g, 0, config.fine_relax, report)
    return to_reversed(v)


def adjoint_residual_norm(adj_level, w, sources=None) -> float:
    return residual_norm(adj_level, to_reversed(w), None if sources is None else to_reversed(sources))


def chunk_gradient(adj_level: AdjointGruLevel, w, start: int, stop: int, offset: int = 0):
    """Sum over t = start+1..stop of the parameter cotangents, left to right."""
    acc = None
    for t in range(start + 1, stop + 1):
        g = adj_level.param_grads(t, w[t - offset])
        acc = g if acc is None else [a + b for a, b in zip(acc, g)]
    return acc


def reduce_chunk_gradients(chunks: list[list[GruParams]]) -> list[GruParams]:
    L = len(chunks[0])
    return [tree_sum([c[l] for c in chunks]) for l in range(L)]


def assemble_gradient(adj_level: AdjointGruLevel, w, c_f: int) -> list[GruParams]:
    """Parameter gradient sum_t w_t dPhi_t/dTheta, chunk-local then tree-reduced."""
    T = adj_level.n_steps
    if w.shape[0] != T + 1:
        raise ValueError(f"adjoint has {w.shape[0] - 1} steps, tapes cover {T}")
    chunks = [chunk_gradient(adj_level, w, s, min(s + c_f, T)) for s in range(0, T, c_f)]
    return reduce_chunk_gradients(chunks)


def cost_model(T: float, P: float, c_f: int, L: int) -> tuple[float, float]:
    """Per-cycle run-time model: (sum over levels of T/(P c_f^l), geometric bound)."""
    if T <= 0 or P <= 0 or L < 1:
        raise ValueError("T, P and L must be positive")
    if c_f < 2:
        raise ValueError("c_f must be >= 2")
    total = sum(T / (P * c_f**l) for l in range(L))
    return total, (T / P) * c_f / (c_f - 1)


class SerialMgrit:
    """Single-lane reference engine; same interface as the parallel controller."""

    def __init__(self, config: CycleConfig):
        self.config = config

    def forward(self, stack, x, method=IMPLICIT, iters=None, h0=None, monitor=True,
                report: ConvergenceReport | None = None):
        cfg = self.config
        T = x.shape[0] - 1
        hier = cfg.hierarchy(T)
        levels = build_gru_levels(stack, x, hier, method)
        h = np.zeros((T + 1, *stack.state_shape(x.shape[1:-1]))) if h0 is None else h0
        residuals = []
        for _ in range(iters or cfg.fwd_iters):
            h = mgprop(cfg, levels, h, None, report)
            if monitor:
                residuals.append(residual_norm(levels[0], h))
            if report is not None:
                report.wall.append(time.perf_counter())
        if report is not None:
            report.num_levels = hier.num_levels
            report.forward.extend(residuals)
        return h, residuals

    def backward(self, stack, x, h_stored, w_terminal, sources=None, method=IMPLICIT,
                 iters=None, monitor=True, report: ConvergenceReport | None = None,
                 gradient=True, w0=None):
        cfg = self.config
        T = x.shape[0] - 1
        hier = cfg.hierarchy(T)
        adj = build_adjoint_levels(stack, x, h_stored, hier, method)
        w = np.zeros_like(h_stored) if w0 is None else np.array(w0, dtype=np.float64)
        w[T] = w_terminal
        residuals = []
        for _ in range(iters or cfg.bwd_iters):
            w = mgbackprop(cfg, adj, w, sources, report)
            if monitor:
                residuals.append(adjoint_residual_norm(adj[0], w, sources))
        if report is not None:
            report.backward.extend(residuals)
        grads = assemble_gradient(adj[0], w, cfg.c_f) if gradient else None
        return w, residuals, grads
