"""Time-domain decomposition of MGRIT across worker lanes.

Each worker owns a contiguous, C-point aligned window of every distributed
level and keeps its state between stages. Neighbouring workers exchange
only boundary states (one :class:`BoundaryMessage` per interior boundary
per sweep); grid transfers and reductions go through the controller, which
assembles them in global index order so that results do not depend on the
number of workers.

The transport is an in-process channel (``queue.Queue``) between threads.
All numerical kernels are shared with :mod:`gru_mgrit.mgrit`, so for any
worker count the iterates are bitwise identical to the single-lane path.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolFault
from .grid import Hierarchy, MIN_COARSE_STEPS, level_residual
from .mgrit import (CycleConfig, ConvergenceReport, F_RELAX, assemble_gradient,
                    build_adjoint_levels, build_gru_levels, chunk_gradient, coarse_forcing,
                    reduce_chunk_gradients, relax_range, residual_norm, restricted_residual,
                    to_reversed, v_cycle)
from .numerics import squared_terms, tree_sum

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
SWEEP_TAGS = ("FC", "F", "final-F")
TRANSPORTS = ("thread",)


@dataclass(frozen=True)
class BoundaryMessage:
    level: int
    iteration: int
    sweep: str
    sender: int
    seq: int
    payload: np.ndarray
    version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class TimePartition:
    """Lane layout per level.

    ``ranges[l]`` lists the owned index windows (lo, hi] of level ``l``;
    lane i is run by ``owners[i]``. Levels >= ``gather_level`` are solved
    whole on worker 0.
    """

    P: int
    c_f: int
    lengths: tuple[int, ...]
    ranges: tuple[tuple[tuple[int, int], ...], ...]
    owners: tuple[int, ...]
    gather_level: int

    def lanes(self, level: int):
        return list(zip(self.owners, self.ranges[level]))

    def reversed_owners(self) -> "TimePartition":
        """Same windows, with lane i run by worker P-1-i (for time-reversed sweeps)."""
        return TimePartition(self.P, self.c_f, self.lengths, self.ranges,
                             tuple(self.P - 1 - i for i in range(self.P)), self.gather_level)


def _split(n_chunks: int, parts: int, c_f: int):
    base, extra = divmod(n_chunks, parts)
    out, lo = [], 0
    for i in range(parts):
        n = base + (1 if i < extra else 0)
        out.append((lo * c_f, (lo + n) * c_f))
        lo += n
    return tuple(out)


_clamp_warned: set[tuple[int, int]] = set()


def partition(T: int, P: int, hierarchy: Hierarchy) -> TimePartition:
    """Balanced, C-point aligned windows for P workers (clamped to T // c_f)."""
    c_f = hierarchy.c_f
    if P < 1:
        raise ValueError("worker count must be >= 1")
    if T != hierarchy.levels[0].n_steps:
        raise ValueError(f"hierarchy is for {hierarchy.levels[0].n_steps} steps, not {T}")
    P_eff = min(P, max(T // c_f, 1))
    if P_eff < P and (T, P) not in _clamp_warned:
        _clamp_warned.add((T, P))
        log.warning("reducing worker count from %d to %d: each worker needs a full "
                    "coarse interval of the %d-step grid", P, P_eff, T)
    L = hierarchy.num_levels
    ranges = []
    gather = L - 1
    for l, lv in enumerate(hierarchy.levels):
        if l == L - 1:
            break
        N = lv.n_steps
        if l > 0 and (N < MIN_COARSE_STEPS * P_eff or N // c_f < P_eff):
            gather = l
            break
        ranges.append(_split(N // c_f, P_eff, c_f))
    if L == 1:
        gather = 0
    return TimePartition(P_eff, c_f, tuple(hierarchy.lengths), tuple(ranges),
                         tuple(range(P_eff)), gather)


class Channel:
    """Ordered point-to-point link; every message must be the one expected next."""

    def __init__(self, src: int, dst: int, abort: threading.Event, timeout: float):
        self.src, self.dst = src, dst
        self._q: queue.Queue = queue.Queue()
        self._abort = abort
        self._timeout = timeout
        self._sent = 0
        self._received = 0
        self.count = 0

    def send(self, level: int, iteration: int, sweep: str, payload: np.ndarray) -> None:
        self._sent += 1
        data = np.array(payload, copy=True)
        data.setflags(write=False)
        self._q.put(BoundaryMessage(level, iteration, sweep, self.src, self._sent, data))
        self.count += 1

    def inject(self, msg: BoundaryMessage) -> None:
        self._q.put(msg)

    def recv(self, level: int, iteration: int, sweep: str) -> np.ndarray:
        deadline = time.monotonic() + self._timeout
        while True:
            if self._abort.is_set():
                raise ProtocolFault(f"exchange {self.src}->{self.dst} aborted")
            try:
                msg = self._q.get(timeout=0.05)
                break
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise ProtocolFault(
                        f"watchdog: no boundary message {self.src}->{self.dst} for "
                        f"level {level} iteration {iteration} sweep {sweep}") from None
        expected = self._received + 1
        if msg.version != PROTOCOL_VERSION:
            raise ProtocolFault(f"protocol version {msg.version} != {PROTOCOL_VERSION}")
        if msg.seq != expected or msg.sender != self.src or \
                (msg.level, msg.iteration, msg.sweep) != (level, iteration, sweep):
            raise ProtocolFault(
                f"channel {self.src}->{self.dst}: expected #{expected} "
                f"({level}, {iteration}, {sweep}), got #{msg.seq} "
                f"({msg.level}, {msg.iteration}, {msg.sweep}) from {msg.sender}")
        self._received = expected
        return msg.payload

    def drain(self) -> None:
        self._sent = self._received = 0
        while True:
            try:
                self._q.get_nowait()
            except queue.Empty:
                return


@dataclass
class _Window:
    lo: int
    hi: int
    u: np.ndarray
    g: np.ndarray | None = None


@dataclass
class _Problem:
    levels: list
    part: TimePartition
    windows: dict[int, _Window] = field(default_factory=dict)


class _Worker(threading.Thread):
    def __init__(self, wid: int, pool: "WorkerPool"):
        super().__init__(name=f"mgrit-worker-{wid}", daemon=True)
        self.wid = wid
        self.pool = pool
        self.commands: queue.Queue = queue.Queue()
        self.results: queue.Queue = queue.Queue()
        self.problems: dict[str, _Problem] = {}

    def run(self) -> None:
        while True:
            item = self.commands.get()
            if item is None:
                return
            name, args = item
            try:
                self.results.put(("ok", getattr(self, "do_" + name)(*args)))
            except BaseException as exc:  # handed to the controller
                self.pool.abort.set()
                self.results.put(("err", exc))

    # -- commands ----------------------------------------------------------

    def do_load(self, key, factory, part):
        self.problems[key] = _Problem(factory(), part)

    def do_drop(self, key):
        self.problems.pop(key, None)

    def do_set_window(self, key, level, lo, hi, u, g):
        self.problems[key].windows[level] = _Window(lo, hi, u.copy(), None if g is None else g)

    def do_set_coarse(self, key, level, lo, hi, uc, rc):
        prob = self.problems[key]
        gc = coarse_forcing(prob.levels[level], uc, rc, lo, hi, offset=lo)
        prob.windows[level] = _Window(lo, hi, uc.copy(), gc)

    def _lane(self, part: TimePartition, level: int) -> int:
        return part.owners.index(self.wid)

    def do_sweep(self, key, level, iteration, tag, include_c):
        prob = self.problems[key]
        win = prob.windows[level]
        part = prob.part
        lane = self._lane(part, level)
        n = len(part.ranges[level])
        if lane + 1 < n:
            self.pool.channel(self.wid, part.owners[lane + 1]).send(level, iteration, tag,
                                                                    win.u[-1])
        if lane > 0:
            win.u[0] = self.pool.channel(part.owners[lane - 1], self.wid).recv(level, iteration,
                                                                               tag)
        lev = prob.levels[level]
        win.u = relax_range(lev, win.u, part.c_f, include_c, win.g, win.lo, win.hi, win.lo)

    def do_restrict(self, key, level):
        prob = self.problems[key]
        win = prob.windows[level]
        c_f = prob.part.c_f
        rc = restricted_residual(prob.levels[level], win.u, c_f, win.g, win.lo, win.hi, win.lo)
        uc = {K: win.u[K * c_f - win.lo].copy() for K in rc}
        return uc, rc

    def do_solve_gathered(self, key, level, uc, rc, fine_relax):
        prob = self.problems[key]
        gc = coarse_forcing(prob.levels[level], uc, rc)
        return v_cycle(prob.levels, prob.part.c_f, uc, gc, level, fine_relax)

    def do_solve_whole(self, key, u, g, fine_relax):
        prob = self.problems[key]
        return v_cycle(prob.levels, prob.part.c_f, u, g, 0, fine_relax)

    def do_whole_residual(self, key, u, g):
        return residual_norm(self.problems[key].levels[0], u, g)

    def do_whole_gradient(self, key, v):
        prob = self.problems[key]
        return assemble_gradient(prob.levels[0], to_reversed(v), prob.part.c_f)

    def do_correct(self, key, level, corr):
        win = self.problems[key].windows[level]
        c_f = self.problems[key].part.c_f
        idx = np.arange(win.lo, win.hi + 1) // c_f - win.lo // c_f
        win.u = win.u + corr[idx]

    def do_collect(self, key, level):
        win = self.problems[key].windows[level]
        return win.u[1:].copy()

    def do_residual_terms(self, key, level):
        prob = self.problems[key]
        win = prob.windows[level]
        r = level_residual(prob.levels[level], win.u, win.g, win.lo + 1, win.hi, win.lo)
        return squared_terms(r, 1, win.hi - win.lo)

    def do_chunk_gradients(self, key):
        prob = self.problems[key]
        win = prob.windows[0]
        T = prob.levels[0].n_steps
        c_f = prob.part.c_f
        # reversed window lo..hi holds w_t for t = T-hi .. T-lo
        w_nat = win.u[::-1]
        t_lo, t_hi = T - win.hi, T - win.lo
        out = {}
        for s in range(t_lo, t_hi, c_f):
            out[s // c_f] = chunk_gradient(prob.levels[0], w_nat, s, s + c_f, offset=t_lo)
        return out


class WorkerPool:
    """P worker lanes connected to their neighbours in both directions."""

    def __init__(self, P: int, transport: str = "thread", timeout: float = 60.0):
        if P < 1:
            raise ValueError("worker count must be >= 1")
        if transport not in TRANSPORTS:
            raise ValueError(f"unknown transport {transport!r}; available: {TRANSPORTS}")
        self.P = P
        self.abort = threading.Event()
        self._channels: dict[tuple[int, int], Channel] = {}
        for i in range(P - 1):
            for a, b in ((i, i + 1), (i + 1, i)):
                self._channels[(a, b)] = Channel(a, b, self.abort, timeout)
        self.workers = [_Worker(i, self) for i in range(P)]
        for w in self.workers:
            w.start()

    def channel(self, src: int, dst: int) -> Channel:
        try:
            return self._channels[(src, dst)]
        except KeyError:
            raise ProtocolFault(f"no channel between workers {src} and {dst}") from None

    @property
    def message_count(self) -> int:
        return sum(c.count for c in self._channels.values())

    def call_all(self, calls):
        """Run ``(wid, name, args)`` commands concurrently; results in call order."""
        for wid, name, args in calls:
            self.workers[wid].commands.put((name, args))
        results, error = [], None
        for wid, _, _ in calls:
            status, value = self.workers[wid].results.get()
            if status == "err" and error is None:
                error = value
            results.append(value)
        if error is not None:
            self._reset()
            raise error
        return results

    def call(self, wid, name, *args):
        return self.call_all([(wid, name, args)])[0]

    def broadcast(self, name, *args):
        return self.call_all([(w.wid, name, args) for w in self.workers])

    def _reset(self):
        for c in self._channels.values():
            c.drain()
        self.abort.clear()

    def close(self) -> None:
        for w in self.workers:
            w.commands.put(None)
        for w in self.workers:
            w.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def exchange_and_sweep(pool: WorkerPool, key: str, part: TimePartition, level: int,
                       kind: str, iteration: int = 0) -> None:
    """One relaxation sweep of ``kind`` ('F', 'FC' or 'final-F') on every lane."""
    if kind not in SWEEP_TAGS:
        raise ValueError(f"unknown sweep kind {kind!r}")
    pool.call_all([(wid, "sweep", (key, level, iteration, kind, kind == "FC"))
                   for wid, _ in part.lanes(level)])


class ParallelMgrit:
    """Controller for distributed MGRIT cycles on a :class:`WorkerPool`."""

    def __init__(self, pool: WorkerPool, config: CycleConfig):
        self.pool = pool
        self.config = config

    # -- generic distributed cycle --------------------------------------

    def _load(self, key, factory, part):
        self.pool.broadcast("load", key, factory, part)

    def _scatter(self, key, part, level, u, g=None):
        calls = []
        for wid, (lo, hi) in part.lanes(level):
            calls.append((wid, "set_window",
                          (key, level, lo, hi, u[lo:hi + 1], None if g is None else g[lo:hi + 1])))
        self.pool.call_all(calls)

    def _gather(self, key, part, level, anchor):
        parts = self.pool.call_all([(wid, "collect", (key, level)) for wid, _ in part.lanes(level)])
        return np.concatenate([anchor[None]] + parts)

    def _cycle(self, key, part, level, iteration, anchor, report):
        cfg = self.config
        c_f = part.c_f
        t0 = time.perf_counter()
        if level == 0 and cfg.fine_relax == F_RELAX:
            exchange_and_sweep(self.pool, key, part, level, "F", iteration)
        else:
            exchange_and_sweep(self.pool, key, part, level, "FC", iteration)
            exchange_and_sweep(self.pool, key, part, level, "F", iteration)
        pieces = self.pool.call_all([(wid, "restrict", (key, level)) for wid, _ in part.lanes(level)])
        Nc = part.lengths[level + 1]
        uc = np.empty((Nc + 1, *anchor.shape))
        uc[0] = anchor
        rc = {}
        for vals, res in pieces:
            for K, v in vals.items():
                uc[K] = v
            rc.update(res)
        if report is not None:
            report.add_time(level, time.perf_counter() - t0)
        if level + 1 >= part.gather_level:
            t1 = time.perf_counter()
            uc_star = self.pool.call(0, "solve_gathered", key, level + 1, uc, rc, cfg.fine_relax)
            if report is not None:
                report.add_time(level + 1, time.perf_counter() - t1)
        else:
            calls = []
            for wid, (lo, hi) in part.lanes(level + 1):
                sub = {K: rc[K] for K in range(lo + 1, hi + 1)}
                calls.append((wid, "set_coarse", (key, level + 1, lo, hi, uc[lo:hi + 1], sub)))
            self.pool.call_all(calls)
            self._cycle(key, part, level + 1, iteration, anchor, report)
            uc_star = self._gather(key, part, level + 1, anchor)
        t0 = time.perf_counter()
        corr = uc_star - uc
        self.pool.call_all([(wid, "correct", (key, level, corr[lo // c_f:hi // c_f + 1]))
                            for wid, (lo, hi) in part.lanes(level)])
        exchange_and_sweep(self.pool, key, part, level, "final-F", iteration)
        if report is not None:
            report.add_time(level, time.perf_counter() - t0)

    def _residual_norm(self, key, part):
        terms = self.pool.call_all([(wid, "residual_terms", (key, 0)) for wid, _ in part.lanes(0)])
        return float(np.sqrt(tree_sum([t for lane in terms for t in lane])))

    def _iterate(self, key, part, u0, g, iters, anchor, monitor, report, residuals):
        self._scatter(key, part, 0, u0, g)
        for it in range(1, iters + 1):
            self._cycle(key, part, 0, it, anchor, report)
            if monitor:
                residuals.append(self._residual_norm(key, part))
            if report is not None:
                report.wall.append(time.perf_counter())
        return self._gather(key, part, 0, anchor)

    # -- public API -------------------------------------------------------

    def forward(self, stack, x, method, iters=None, h0=None, monitor=True,
                report: ConvergenceReport | None = None):
        """``iters`` forward cycles from ``h0`` (zeros); returns (h, residual norms)."""
        cfg = self.config
        T = x.shape[0] - 1
        hier = cfg.hierarchy(T)
        part = partition(T, self.pool.P, hier)
        state_shape = stack.state_shape(x.shape[1:-1])
        h0 = np.zeros((T + 1, *state_shape)) if h0 is None else h0
        x = _readonly(x)
        if report is not None:
            report.num_levels = hier.num_levels
        self._load("fwd", lambda: build_gru_levels(stack, x, hier, method), part)
        residuals: list[float] = []
        try:
            h = self._run(key="fwd", part=part, hier=hier, u0=h0, g=None,
                          iters=iters or cfg.fwd_iters, monitor=monitor, report=report,
                          residuals=residuals)
        finally:
            self.pool.broadcast("drop", "fwd")
        if report is not None:
            report.forward.extend(residuals)
        return h, residuals

    def backward(self, stack, x, h_stored, w_terminal, sources=None, method="implicit",
                 iters=None, monitor=True, report: ConvergenceReport | None = None,
                 gradient=True, w0=None):
        """Adjoint cycles; returns (w, residual norms, per-layer gradient or None)."""
        cfg = self.config
        T = x.shape[0] - 1
        hier = cfg.hierarchy(T)
        part = partition(T, self.pool.P, hier).reversed_owners()
        x = _readonly(x)
        h_stored = _readonly(h_stored)
        w0 = np.zeros_like(h_stored) if w0 is None else np.array(w0, dtype=np.float64)
        w0[T] = w_terminal
        v0 = to_reversed(w0)
        g = None if sources is None else to_reversed(sources)
        self._load("adj", lambda: build_adjoint_levels(stack, x, h_stored, hier, method), part)
        residuals: list[float] = []
        grads = None
        try:
            v = self._run(key="adj", part=part, hier=hier, u0=v0, g=g,
                          iters=iters or cfg.bwd_iters, monitor=monitor, report=report,
                          residuals=residuals)
            if gradient:
                grads = self._gradient("adj", part, v)
        finally:
            self.pool.broadcast("drop", "adj")
        if report is not None:
            report.backward.extend(residuals)
        return to_reversed(v), residuals, grads

    def _run(self, key, part, hier, u0, g, iters, monitor, report, residuals):
        anchor = u0[0].copy()
        if part.gather_level == 0:
            out = u0
            for _ in range(iters):
                out = self.pool.call(0, "solve_whole", key, out, g, self.config.fine_relax)
                if monitor:
                    residuals.append(self.pool.call(0, "whole_residual", key, out, g))
            return out
        return self._iterate(key, part, u0, g, iters, anchor, monitor, report, residuals)

    def _gradient(self, key, part, v):
        if part.gather_level == 0:
            return self.pool.call(0, "whole_gradient", key, v)
        pieces = self.pool.call_all([(wid, "chunk_gradients", (key,)) for wid, _ in part.lanes(0)])
        merged = {}
        for p in pieces:
            merged.update(p)
        return reduce_chunk_gradients([merged[k] for k in sorted(merged)])


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a
