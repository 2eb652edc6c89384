"""Reference ODE for the two-level MGRIT demo and the error-spectrum report.

    dh/dt = -h/2 + alpha * sigmoid(A h + B d(t) + b)

discretized with forward Euler. The data signal is channel j of
d(t) = sin(2 pi (j+1) t / T), sampled at the fine step index t.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

from .grid import restrict, serial_propagate
from .mgrit import ConvergenceReport, FCF_RELAX, relax_range, residual_norm, v_cycle
from .numerics import dft_magnitudes, seq_l2_norm, sigmoid

HEADER = "Two Level MG"
LINE_FORMAT = "  error = %.4e, residual = %.4e"


@dataclass
class DemoOdeParams:
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    T: int = 128
    dt: float = 0.05
    alpha: float = 1.0
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def data_dim(self) -> int:
        return self.B.shape[1]

    @classmethod
    def make(cls, dim: int = 10, T: int = 128, dt: float = 0.05, seed: int = 0,
             alpha: float = 1.0, data_dim: int = 3) -> "DemoOdeParams":
        if dim < 1 or data_dim < 1 or T < 1 or not dt > 0:
            raise ValueError("dim, data_dim, T and dt must be positive")
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        B = rng.standard_normal((dim, data_dim))
        b = rng.standard_normal(dim)
        return cls(A, B, b, T, dt, alpha, seed)

    def data(self, t) -> np.ndarray:
        j = np.arange(1, self.data_dim + 1)
        return np.sin(2 * np.pi * j * np.asarray(t, dtype=np.float64)[..., None] / self.T)


def demo_rhs(p: DemoOdeParams, h, t) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    return -0.5 * h + p.alpha * sigmoid(h @ p.A.T + p.data(t) @ p.B.T + p.b)


class DemoLevel:
    """Forward Euler for the demo ODE on a grid with every ``stride``-th data sample."""

    def __init__(self, p: DemoOdeParams, stride: int = 1):
        if p.T % stride:
            raise ValueError(f"T={p.T} is not divisible by {stride}")
        self.p = p
        self.stride = stride
        self.gamma = p.dt * stride
        self.n_steps = p.T // stride
        self._drive = p.data(np.arange(self.n_steps + 1) * stride) @ p.B.T + p.b

    def step(self, k: int, u_prev: np.ndarray) -> np.ndarray:
        p = self.p
        return u_prev + self.gamma * (-0.5 * u_prev + p.alpha * sigmoid(p.A @ u_prev + self._drive[k]))


def demo_levels(p: DemoOdeParams, c_f: int, levels: int = 2) -> list[DemoLevel]:
    out = [DemoLevel(p)]
    while len(out) < levels:
        stride = out[-1].stride * c_f
        if p.T % stride:
            raise ValueError(f"T={p.T} does not support {levels} levels with c_f={c_f}")
        out.append(DemoLevel(p, stride))
    return out


def exact_solution(p: DemoOdeParams) -> np.ndarray:
    return serial_propagate(DemoLevel(p), np.zeros(p.dim))


def random_guess(p: DemoOdeParams, seed: int | None = None) -> np.ndarray:
    """Random values at every time point, zero anchor."""
    rng = np.random.default_rng(p.seed + 1 if seed is None else seed)
    h = rng.standard_normal((p.T + 1, p.dim))
    h[0] = 0.0
    return h


@dataclass
class DemoResult:
    report: ConvergenceReport
    errors: list[float] = field(default_factory=list)

    @property
    def residuals(self) -> list[float]:
        return self.report.forward


def run_demo(p: DemoOdeParams, c_f: int = 4, max_iters: int = 10, levels: int = 2,
             tol: float = 1e-13, h0: np.ndarray | None = None, out=sys.stdout) -> DemoResult:
    """MGRIT from a random guess against the serial solution; prints one line per iteration.

    Stops early once the residual norm drops below ``tol``. ``out=None``
    suppresses printing.
    """
    if c_f < 2 or p.T % c_f:
        raise ValueError(f"T={p.T} must be divisible by c_f={c_f} >= 2")
    lv = demo_levels(p, c_f, levels)
    exact = exact_solution(p)
    h = random_guess(p) if h0 is None else np.array(h0, dtype=np.float64)
    result = DemoResult(ConvergenceReport(num_levels=len(lv)))
    if out is not None:
        print(HEADER, file=out)
    for _ in range(max_iters):
        h = v_cycle(lv, c_f, h, None, 0, FCF_RELAX, result.report)
        res = residual_norm(lv[0], h)
        err = seq_l2_norm(h - exact)
        result.report.forward.append(res)
        result.errors.append(err)
        if out is not None:
            print(LINE_FORMAT % (err, res), file=out)
        if res < tol:
            break
    return result


def demo_records(result: DemoResult):
    for i, (e, r) in enumerate(zip(result.errors, result.residuals)):
        yield {"iteration": i + 1, "error": e, "residual": r}


# -- spectrum --------------------------------------------------------------------

def fcf_sweeps(p: DemoOdeParams, h: np.ndarray, c_f: int, sweeps: int) -> np.ndarray:
    lv = DemoLevel(p)
    for _ in range(sweeps):
        h = relax_range(lv, relax_range(lv, h, c_f, True), c_f, False)
    return h


def spectrum_report(p: DemoOdeParams, sweeps: int = 4, c_f: int = 4,
                    h0: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """|DFT| of the error per component: initial, after ``sweeps`` FCF sweeps, and restricted.

    Spectra are taken over time indices 1..T (coarse: 1..T/c_f); each entry is
    an array (wavenumbers, dim).
    """
    exact = exact_solution(p)
    h = random_guess(p) if h0 is None else np.array(h0, dtype=np.float64)
    e0 = h - exact
    e1 = fcf_sweeps(p, h, c_f, sweeps) - exact
    ec = restrict(e1, c_f)
    return {
        "initial": dft_magnitudes(e0[1:]),
        "relaxed": dft_magnitudes(e1[1:]),
        "coarse": dft_magnitudes(ec[1:]),
        "error_relaxed": e1,
    }


def high_band_energy(spectrum: np.ndarray) -> float:
    """Energy in the top half of the wavenumbers 0..N/2, summed over components."""
    K = spectrum.shape[0] - 1
    return float(np.sum(np.square(spectrum[K // 2 + 1:])))


def spectrum_records(spec: dict[str, np.ndarray]):
    for name in ("initial", "relaxed", "coarse"):
        mags = spec[name]
        for k in range(mags.shape[0]):
            yield {"stage": name, "wavenumber": k, "magnitudes": mags[k].tolist()}
