"""GRU propagators: classic (forward Euler) and implicit steps, their
vector-Jacobian products, and multi-layer stacking.

Both steps advance the GRU-ODE

    dh/dt = -(1 - z) * h + (1 - z) * n

by one step of size ``gamma`` with the gates evaluated at ``(x_t, h_{t-1})``:

    classic:  h_t = h_{t-1} + gamma * (1 - z) * (n - h_{t-1})
    implicit: h_t = (h_{t-1} + gamma * (1 - z) * n) / (1 + gamma * (1 - z))

The implicit form only needs a diagonal solve, so its cost matches the
classic step while removing the step-size restriction of the stiff term.

Arrays may carry any number of leading batch axes; the last axis is the
feature axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ShapeError
from .numerics import sigmoid

CLASSIC = "classic"
IMPLICIT = "implicit"
METHODS = (CLASSIC, IMPLICIT)

# fixed tensor order of the checkpoint format
TENSOR_NAMES = (
    "W_ir", "W_iz", "W_in", "W_hr", "W_hz", "W_hn",
    "b_ir", "b_hr", "b_iz", "b_hz", "b_in", "b_hn",
)
CHECKPOINT_VERSION = 1


@dataclass
class GruParams:
    """Weights of one GRU layer, stored gate-stacked in (r, z, n) order.

    ``w_ih`` is (3H, I), ``w_hh`` is (3H, H); the twelve named tensors are
    views into these blocks. Construction checks shapes only, so gradient
    accumulators may carry non-finite values up to the training guard;
    :meth:`validate` adds the finiteness check for loaded parameters.
    """

    w_ih: np.ndarray
    w_hh: np.ndarray
    b_ih: np.ndarray
    b_hh: np.ndarray

    def __post_init__(self):
        self.w_ih = np.asarray(self.w_ih, dtype=np.float64)
        self.w_hh = np.asarray(self.w_hh, dtype=np.float64)
        self.b_ih = np.asarray(self.b_ih, dtype=np.float64)
        self.b_hh = np.asarray(self.b_hh, dtype=np.float64)
        H3 = self.w_hh.shape[0]
        if H3 % 3 or self.w_hh.shape != (H3, H3 // 3):
            raise ShapeError(f"w_hh must be (3H, H), got {self.w_hh.shape}")
        if self.w_ih.ndim != 2 or self.w_ih.shape[0] != H3:
            raise ShapeError(f"w_ih must be (3H, I), got {self.w_ih.shape}")
        if self.b_ih.shape != (H3,) or self.b_hh.shape != (H3,):
            raise ShapeError("biases must have length 3H")

    def validate(self) -> "GruParams":
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise ValueError("GRU parameters contain non-finite entries")
        return self

    @property
    def hidden_dim(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_ih.shape[1]

    def _blk(self, a, k):
        H = self.hidden_dim
        return a[k * H:(k + 1) * H]

    W_ir = property(lambda s: s._blk(s.w_ih, 0))
    W_iz = property(lambda s: s._blk(s.w_ih, 1))
    W_in = property(lambda s: s._blk(s.w_ih, 2))
    W_hr = property(lambda s: s._blk(s.w_hh, 0))
    W_hz = property(lambda s: s._blk(s.w_hh, 1))
    W_hn = property(lambda s: s._blk(s.w_hh, 2))
    b_ir = property(lambda s: s._blk(s.b_ih, 0))
    b_iz = property(lambda s: s._blk(s.b_ih, 1))
    b_in = property(lambda s: s._blk(s.b_ih, 2))
    b_hr = property(lambda s: s._blk(s.b_hh, 0))
    b_hz = property(lambda s: s._blk(s.b_hh, 1))
    b_hn = property(lambda s: s._blk(s.b_hh, 2))

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "GruParams":
        H3 = 3 * hidden_dim
        return cls(np.zeros((H3, input_dim)), np.zeros((H3, hidden_dim)), np.zeros(H3), np.zeros(H3))

    @classmethod
    def init_uniform(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "GruParams":
        k = 1.0 / math.sqrt(hidden_dim)
        H3 = 3 * hidden_dim
        return cls(
            rng.uniform(-k, k, (H3, input_dim)),
            rng.uniform(-k, k, (H3, hidden_dim)),
            rng.uniform(-k, k, H3),
            rng.uniform(-k, k, H3),
        )

    @classmethod
    def from_named(cls, **t) -> "GruParams":
        return cls(
            np.concatenate([t["W_ir"], t["W_iz"], t["W_in"]]),
            np.concatenate([t["W_hr"], t["W_hz"], t["W_hn"]]),
            np.concatenate([t["b_ir"], t["b_iz"], t["b_in"]]),
            np.concatenate([t["b_hr"], t["b_hz"], t["b_hn"]]),
        ).validate()

    def named(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def arrays(self) -> list[np.ndarray]:
        return [self.w_ih, self.w_hh, self.b_ih, self.b_hh]

    def copy(self) -> "GruParams":
        return GruParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "GruParams":
        return GruParams(*(np.zeros_like(a) for a in self.arrays()))

    def __add__(self, other: "GruParams") -> "GruParams":
        return GruParams(*(a + b for a, b in zip(self.arrays(), other.arrays())))


class GateActivations(NamedTuple):
    r: np.ndarray
    z: np.ndarray
    n: np.ndarray


@dataclass
class StepTape:
    """Everything a step's VJP needs, cached from the forward evaluation."""

    params: GruParams
    method: str
    gamma: float
    x: np.ndarray
    h_prev: np.ndarray
    r: np.ndarray
    z: np.ndarray
    n: np.ndarray
    hn: np.ndarray  # W_hn h_prev + b_hn, the term the reset gate multiplies


class StepVjp(NamedTuple):
    w_prev: np.ndarray
    grads: GruParams | None
    w_x: np.ndarray | None


def input_projection(p: GruParams, x: np.ndarray) -> np.ndarray:
    """x @ W_i^T + b_i for all three gates; reusable across sweeps."""
    if x.shape[-1] != p.input_dim:
        raise ShapeError(f"input has dim {x.shape[-1]}, layer expects {p.input_dim}")
    return x @ p.w_ih.T + p.b_ih


def _gate_terms(p: GruParams, x, h_prev, gi=None):
    if h_prev.shape[-1] != p.hidden_dim:
        raise ShapeError(f"hidden state has dim {h_prev.shape[-1]}, layer expects {p.hidden_dim}")
    if gi is None:
        gi = input_projection(p, x)
    H = p.hidden_dim
    gh = h_prev @ p.w_hh.T + p.b_hh
    rz = sigmoid(gi[..., :2 * H] + gh[..., :2 * H])
    r, z = rz[..., :H], rz[..., H:]
    hn = gh[..., 2 * H:]
    n = np.tanh(gi[..., 2 * H:] + r * hn)
    return r, z, n, hn


def gates(p: GruParams, x_t, h_prev) -> GateActivations:
    r, z, n, _ = _gate_terms(p, np.asarray(x_t, float), np.asarray(h_prev, float))
    return GateActivations(r, z, n)


def _advance(method: str, gamma: float, h_prev, z, n):
    a = gamma * (1.0 - z)
    if method == IMPLICIT:
        return (h_prev + a * n) / (1.0 + a)
    if method == CLASSIC:
        return h_prev + a * (n - h_prev)
    raise ValueError(f"unknown propagator {method!r}")


def _check_gamma(gamma):
    if not gamma > 0:
        raise ValueError(f"step size must be positive, got {gamma}")


def step(p: GruParams, gamma: float, x_t, h_prev, method: str = IMPLICIT, gi=None,
         keep_tape: bool = False):
    """Advance one step; returns ``h_t`` or ``(h_t, tape)``."""
    _check_gamma(gamma)
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    r, z, n, hn = _gate_terms(p, x_t, h_prev, gi)
    h = _advance(method, gamma, h_prev, z, n)
    if keep_tape:
        return h, StepTape(p, method, gamma, x_t, h_prev, r, z, n, hn)
    return h


def step_classic(p: GruParams, gamma: float, x_t, h_prev) -> np.ndarray:
    return step(p, gamma, x_t, h_prev, CLASSIC)


def step_implicit(p: GruParams, gamma: float, x_t, h_prev) -> np.ndarray:
    return step(p, gamma, x_t, h_prev, IMPLICIT)


def rhs(p: GruParams, x_t, h) -> np.ndarray:
    """Right-hand side of the GRU-ODE with gates evaluated at (x_t, h)."""
    _, z, n = gates(p, x_t, h)
    return -(1.0 - z) * h + (1.0 - z) * n


def stable_step_bound_explicit(z: float) -> float:
    """Largest stable forward-Euler step for dh/dt = -(1 - z) h; inf when z = 1."""
    if not 0.0 <= z <= 1.0:
        raise ValueError(f"z must lie in [0, 1], got {z}")
    if z == 1.0:
        return math.inf
    return 2.0 / (1.0 - z)


def _flat2(a):
    return a.reshape(-1, a.shape[-1])


def step_vjp(tape: StepTape, w_t, param_grads: bool = True, input_grad: bool = False) -> StepVjp:
    """Reverse-mode derivative of one step.

    Returns ``w_prev = (dh_t/dh_{t-1})^T w_t`` and, on request, the
    parameter cotangent and the input cotangent ``(dh_t/dx_t)^T w_t``.
    """
    if tape.method not in METHODS:
        raise ValueError(f"tape recorded with unknown propagator {tape.method!r}")
    w = np.asarray(w_t, dtype=np.float64)
    if w.shape != tape.h_prev.shape:
        raise ShapeError(f"cotangent shape {w.shape} does not match tape {tape.h_prev.shape}")
    p, g = tape.params, tape.gamma
    r, z, n, hn, h_prev = tape.r, tape.z, tape.n, tape.hn, tape.h_prev
    a = g * (1.0 - z)
    if tape.method == IMPLICIT:
        inv = 1.0 / (1.0 + a)
        direct = inv
        dn = a * inv
        da = (n - h_prev) * inv * inv
    else:
        direct = 1.0 - a
        dn = a
        da = n - h_prev
    g_pn = w * dn * (1.0 - n * n)
    g_pz = -g * (w * da) * z * (1.0 - z)
    g_hn = g_pn * r
    g_pr = g_pn * hn * r * (1.0 - r)

    g_h3 = np.concatenate([g_pr, g_pz, g_hn], axis=-1)
    w_prev = w * direct + g_h3 @ p.w_hh

    grads = None
    w_x = None
    if param_grads or input_grad:
        g_i3 = np.concatenate([g_pr, g_pz, g_pn], axis=-1)
        if input_grad:
            w_x = g_i3 @ p.w_ih
        if param_grads:
            gi2, gh2 = _flat2(g_i3), _flat2(g_h3)
            grads = GruParams(
                gi2.T @ _flat2(tape.x),
                gh2.T @ _flat2(h_prev),
                gi2.sum(axis=0),
                gh2.sum(axis=0),
            )
    return StepVjp(w_prev, grads, w_x)


@dataclass
class StackSpec:
    """A stack of GRU layers; layer l > 0 reads layer l-1's new state."""

    layers: list[GruParams] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a stack needs at least one layer")
        H = self.layers[0].hidden_dim
        for l, p in enumerate(self.layers):
            if p.hidden_dim != H:
                raise ShapeError("all layers must share the hidden dimension")
            if l > 0 and p.input_dim != H:
                raise ShapeError(f"layer {l} input dim {p.input_dim} != hidden dim {H}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].hidden_dim

    @classmethod
    def init_uniform(cls, input_dim: int, hidden_dim: int, num_layers: int,
                     rng: np.random.Generator) -> "StackSpec":
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        return cls([GruParams.init_uniform(d, hidden_dim, rng) for d in dims])

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int, num_layers: int) -> "StackSpec":
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        return cls([GruParams.zeros(d, hidden_dim) for d in dims])

    def copy(self) -> "StackSpec":
        return StackSpec([p.copy() for p in self.layers])

    def state_shape(self, batch: tuple[int, ...] = ()) -> tuple[int, ...]:
        return (self.num_layers, *batch, self.hidden_dim)


def stack_step(s: StackSpec, gamma: float, x_t, h_prev, method: str = IMPLICIT, gi0=None,
               keep_tape: bool = False):
    """One time step through every layer.

    ``h_prev`` has the layer axis first: (num_layers, ..., hidden). ``gi0``
    optionally carries the cached input projection of the first layer.
    """
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if h_prev.shape[0] != s.num_layers:
        raise ShapeError(f"expected {s.num_layers} layer states, got {h_prev.shape[0]}")
    out = np.empty_like(h_prev)
    tapes = []
    inp = x_t
    for l, p in enumerate(s.layers):
        res = step(p, gamma, inp, h_prev[l], method, gi0 if l == 0 else None, keep_tape)
        if keep_tape:
            res, tape = res
            tapes.append(tape)
        out[l] = res
        inp = res
    return (out, tapes) if keep_tape else out


def stack_vjp(tapes: list[StepTape], w_t, param_grads: bool = True):
    """Transpose of one stack step: returns (w_prev, per-layer grads or None)."""
    w_t = np.asarray(w_t, dtype=np.float64)
    L = len(tapes)
    w_prev = np.empty_like(w_t)
    grads: list[GruParams | None] = [None] * L
    carry = None
    for l in range(L - 1, -1, -1):
        cot = w_t[l] if carry is None else w_t[l] + carry
        res = step_vjp(tapes[l], cot, param_grads=param_grads, input_grad=l > 0)
        w_prev[l] = res.w_prev
        grads[l] = res.grads
        carry = res.w_x
    return w_prev, (grads if param_grads else None)


def save_checkpoint(path, stack: StackSpec, extra: dict[str, np.ndarray] | None = None,
                    meta: dict[str, str] | None = None) -> None:
    """Write ``stack`` (and optional extra tensors) to an ``.npz`` container.

    Layout: ``dims`` = [version, num_layers, input_dim, hidden_dim], then
    ``layer{l}.{name}`` for every layer in ``TENSOR_NAMES`` order, then
    ``extra.{key}`` tensors and ``meta.{key}`` strings.
    """
    arrays: dict[str, np.ndarray] = {
        "dims": np.array([CHECKPOINT_VERSION, stack.num_layers, stack.input_dim, stack.hidden_dim],
                         dtype=np.int64)
    }
    for l, p in enumerate(stack.layers):
        for name, t in p.named().items():
            arrays[f"layer{l}.{name}"] = t
    for k, v in (extra or {}).items():
        arrays[f"extra.{k}"] = np.asarray(v)
    for k, v in (meta or {}).items():
        arrays[f"meta.{k}"] = np.array(str(v))
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (stack, extra, meta)."""
    with np.load(Path(path), allow_pickle=False) as data:
        version, L, _, _ = (int(v) for v in data["dims"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        layers = [
            GruParams.from_named(**{name: data[f"layer{l}.{name}"] for name in TENSOR_NAMES})
            for l in range(L)
        ]
        extra = {k[6:]: data[k].copy() for k in data.files if k.startswith("extra.")}
        meta = {k[5:]: str(data[k]) for k in data.files if k.startswith("meta.")}
    return StackSpec(layers), extra, meta
