"""Classifier head, Adam, exact BPTT and the MGRIT training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import LabeledSequenceSet
from .errors import DataFormatError, DivergenceError, ShapeError
from .grid import GruLevel, serial_propagate
from .gru_cell import (CLASSIC, IMPLICIT, GruParams, StackSpec, load_checkpoint, save_checkpoint,
                       stack_step, stack_vjp)
from .mgrit import CycleConfig, SerialMgrit

log = logging.getLogger(__name__)

SERIAL_CLASSIC = "serial-classic"
SERIAL_IMPLICIT = "serial-implicit"
MGRIT = "mgrit"
MODES = (SERIAL_CLASSIC, SERIAL_IMPLICIT, MGRIT)
LR_FLOOR = 1.25e-4


@dataclass
class ClassifierHead:
    weight: np.ndarray   # (classes, hidden)
    bias: np.ndarray     # (classes,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"head weight {self.weight.shape} and bias {self.bias.shape} "
                             "do not conform")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("head has non-finite entries")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init_uniform(cls, hidden_dim: int, num_classes: int, rng: np.random.Generator):
        k = 1.0 / math.sqrt(hidden_dim)
        return cls(rng.uniform(-k, k, (num_classes, hidden_dim)), rng.uniform(-k, k, num_classes))

    @classmethod
    def zeros(cls, hidden_dim: int, num_classes: int):
        return cls(np.zeros((num_classes, hidden_dim)), np.zeros(num_classes))

    def logits(self, h: np.ndarray) -> np.ndarray:
        return h @ self.weight.T + self.bias


@dataclass
class GruClassifier:
    stack: StackSpec
    head: ClassifierHead
    method: str = IMPLICIT

    @classmethod
    def init(cls, input_dim, hidden_dim, num_layers, num_classes, seed, method=IMPLICIT):
        rng = np.random.default_rng(seed)
        stack = StackSpec.init_uniform(input_dim, hidden_dim, num_layers, rng)
        return cls(stack, ClassifierHead.init_uniform(hidden_dim, num_classes, rng), method)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for p in self.stack.layers:
            out.extend(p.arrays())
        return out + [self.head.weight, self.head.bias]

    def with_parameters(self, arrays: list[np.ndarray]) -> "GruClassifier":
        it = iter(arrays)
        layers = [GruParams(next(it), next(it), next(it), next(it)) for _ in self.stack.layers]
        return GruClassifier(StackSpec(layers), ClassifierHead(next(it), next(it)), self.method)


def flat_gradients(stack_grads: list[GruParams], head_grads: tuple) -> list[np.ndarray]:
    out = []
    for g in stack_grads:
        out.extend(g.arrays())
    return out + list(head_grads)


# -- loss -----------------------------------------------------------------------

def loss_and_terminal_cotangent(head: ClassifierHead, h_T, label):
    """Mean softmax cross-entropy of ``head(h_T)``.

    ``h_T`` is (hidden,) with a scalar label or (B, hidden) with B labels.
    Returns (loss, dloss/dh_T, (dW, db)).
    """
    h = np.asarray(h_T, dtype=np.float64)
    single = h.ndim == 1
    h2 = h[None] if single else h
    y = np.atleast_1d(np.asarray(label))
    if y.shape != (h2.shape[0],):
        raise ShapeError(f"{y.size} labels for {h2.shape[0]} states")
    if np.any(y < 0) or np.any(y >= head.num_classes) or np.any(y != np.round(y)):
        raise ValueError(f"labels must be integers in [0, {head.num_classes})")
    y = y.astype(np.int64)
    logits = head.logits(h2)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    B = h2.shape[0]
    loss = float(np.mean(lse - shifted[np.arange(B), y]))
    dlogits = np.exp(shifted - lse[:, None])
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    w_T = dlogits @ head.weight
    grads = (dlogits.T @ h2, dlogits.sum(axis=0))
    return loss, (w_T[0] if single else w_T), grads


def _final_states(h, lengths):
    """Top-layer state at each sample's last unpadded index; h is (T+1, L, B, H)."""
    return h[lengths, -1, np.arange(len(lengths))]


def _sources(h, lengths, w_last):
    src = np.zeros_like(h)
    src[lengths, -1, np.arange(len(lengths))] = w_last
    return src


# -- optimizer ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray], lr: float):
    """Bias-corrected Adam update; advances ``state`` and returns new parameters."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter, gradient and state lists differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        out.append(p - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    return out


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 100
    epochs: int = 10
    schedule: bool = False
    fwd_iters: int = 2
    bwd_iters: int = 1
    seed: int = 0
    monitor: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be positive")
        if self.fwd_iters < 1 or self.bwd_iters < 1:
            raise ValueError("fwd/bwd iterations must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: halved every 5 epochs down to the floor."""
        if not self.schedule:
            return self.lr
        return max(self.lr * 0.5 ** (epoch // 5), min(self.lr, LR_FLOOR))


# -- propagation ---------------------------------------------------------------------

def serial_forward(stack: StackSpec, x, method=IMPLICIT, keep_tapes=False):
    """Exact propagation of (T+1, ..., d) inputs from a zero state; h is (T+1, L, ..., H)."""
    T = x.shape[0] - 1
    h = np.zeros((T + 1, *stack.state_shape(x.shape[1:-1])))
    if not keep_tapes:
        return serial_propagate(GruLevel(stack, 1.0, x, method), h[0]), None
    tapes = [None]
    for t in range(1, T + 1):
        h[t], tp = stack_step(stack, 1.0, x[t], h[t - 1], method, keep_tape=True)
        tapes.append(tp)
    return h, tapes


def serial_bptt(stack: StackSpec, head: ClassifierHead, x, labels, lengths=None, method=IMPLICIT):
    """Exact loss and gradients by forward propagation and a reverse sweep.

    Returns (loss, per-layer GruParams gradients, (dW_head, db_head)).
    """
    T = x.shape[0] - 1
    B = x.shape[1]
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    h, tapes = serial_forward(stack, x, method, keep_tapes=True)
    loss, w_last, head_grads = loss_and_terminal_cotangent(head, _final_states(h, lengths), labels)
    src = _sources(h, lengths, w_last)
    grads = [p.zeros_like() for p in stack.layers]
    w = src[T]
    for t in range(T, 0, -1):
        w_prev, g = stack_vjp(tapes[t], w)
        grads = [a + b for a, b in zip(grads, g)]
        w = w_prev + src[t - 1]
    return loss, grads, head_grads


def mgrit_loss_and_grad(engine, model: GruClassifier, x, labels, lengths=None,
                        fwd_iters=None, bwd_iters=None, monitor=True):
    """Inexact loss and gradients: fwd_iters forward cycles from zero, then bwd_iters adjoint cycles.

    Returns (loss, stack grads, head grads, final-state logits, fwd residuals, bwd residuals).
    """
    T = x.shape[0] - 1
    B = x.shape[1]
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    h, fres = engine.forward(model.stack, x, model.method, iters=fwd_iters, monitor=monitor)
    hT = _final_states(h, lengths)
    loss, w_last, head_grads = loss_and_terminal_cotangent(model.head, hT, labels)
    src = _sources(h, lengths, w_last)
    w_T = src[T].copy()
    interior = None
    if np.any(lengths < T):
        interior = src
        interior[T] = 0.0
    _, bres, grads = engine.backward(model.stack, x, h, w_T, interior, model.method,
                                     iters=bwd_iters, monitor=monitor)
    return loss, grads, head_grads, model.head.logits(hT), fres, bres


def infer(model: GruClassifier, x, lengths=None, mode: str = "serial", engine=None,
          iters: int | None = None):
    """Class labels and logits; ``mode`` is 'serial' (exact) or 'mgrit' (``iters`` cycles from 0)."""
    T = x.shape[0] - 1
    lengths = np.full(x.shape[1], T) if lengths is None else np.asarray(lengths)
    if mode == "serial":
        h, _ = serial_forward(model.stack, x, model.method)
    elif mode == "mgrit":
        if engine is None:
            engine = SerialMgrit(CycleConfig())
        h, _ = engine.forward(model.stack, x, model.method, iters=iters, monitor=False)
    else:
        raise ValueError(f"unknown inference mode {mode!r}")
    logits = model.head.logits(_final_states(h, lengths))
    return np.argmax(logits, axis=1), logits


def evaluate(model, ds: LabeledSequenceSet, mode="serial", engine=None, iters=None,
             batch_size=100) -> float:
    if len(ds) == 0:
        return float("nan")
    correct = 0
    for lo in range(0, len(ds), batch_size):
        x, lens, y = ds.batch(np.arange(lo, min(lo + batch_size, len(ds))))
        pred, _ = infer(model, x, lens, mode, engine, iters)
        correct += int(np.sum(pred == y))
    return correct / len(ds)


# -- training loop -----------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float | None = None
    fwd_residual: float | None = None
    bwd_residual: float | None = None
    test_acc_serial: float | None = None
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    model: GruClassifier
    metrics: list[EpochMetrics] = field(default_factory=list)


def _mean(values):
    return float(np.mean(values)) if values else None


def train(model: GruClassifier, config: TrainConfig, train_set: LabeledSequenceSet,
          test_set: LabeledSequenceSet | None = None, mode: str = MGRIT, engine=None,
          on_epoch=None) -> TrainResult:
    """Mini-batch Adam training.

    ``mode`` selects exact serial BPTT with the classic or implicit cell, or
    inexact MGRIT propagation through ``engine`` (single-lane by default).
    Every MGRIT forward solve restarts from a zero hidden state.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if train_set.T < 4:
        raise ValueError(f"sequence length {train_set.T} is too short for a time grid")
    method = CLASSIC if mode == SERIAL_CLASSIC else IMPLICIT
    model = GruClassifier(model.stack, model.head, method)
    if mode == MGRIT and engine is None:
        engine = SerialMgrit(CycleConfig(fwd_iters=config.fwd_iters, bwd_iters=config.bwd_iters))
    rng = np.random.default_rng(config.seed)
    adam = AdamState.fresh(model.parameters())
    result = TrainResult(model)
    t_start = time.perf_counter()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(train_set))
        losses, fres_all, bres_all = [], [], []
        correct = 0
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            x, lens, y = train_set.batch(idx)
            if mode == MGRIT:
                loss, g_stack, g_head, logits, fres, bres = mgrit_loss_and_grad(
                    engine, model, x, y, lens, config.fwd_iters, config.bwd_iters, config.monitor)
                fres_all.extend(fres[-1:])
                bres_all.extend(bres[-1:])
            else:
                loss, g_stack, g_head = serial_bptt(model.stack, model.head, x, y, lens, method)
                logits = None
            grads = flat_gradients(g_stack, g_head)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise DivergenceError(
                    f"non-finite loss or gradient at epoch {epoch + 1}, batch {b + 1}",
                    {"epoch": epoch + 1, "batch": b + 1, "lr": lr, "loss": loss,
                     "fwd_residuals": fres_all[-3:], "bwd_residuals": bres_all[-3:]})
            if logits is None:
                _, logits = infer(model, x, lens, "serial")
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
            losses.append(loss)
            model = model.with_parameters(adam_step(adam, model.parameters(), grads, lr))
        rec = EpochMetrics(epoch + 1, lr, float(np.mean(losses)), correct / len(train_set))
        if test_set is not None:
            if mode == MGRIT:
                rec.test_acc = evaluate(model, test_set, "mgrit", engine, config.fwd_iters)
                rec.test_acc_serial = evaluate(model, test_set, "serial")
            else:
                rec.test_acc = evaluate(model, test_set, "serial")
        rec.fwd_residual = _mean(fres_all)
        rec.bwd_residual = _mean(bres_all)
        rec.wall_time = time.perf_counter() - t_start
        result.metrics.append(rec)
        result.model = model
        log.info("epoch %d loss %.4f train %.3f test %.3f", rec.epoch, rec.train_loss,
                 rec.train_acc, rec.test_acc)
        if on_epoch is not None:
            on_epoch(rec)
    return result


def mgrit_training(config: TrainConfig, cycle: CycleConfig, train_set: LabeledSequenceSet,
                   test_set=None, hidden_dim=32, num_layers=2, engine=None, on_epoch=None):
    """Initialize a classifier from ``config.seed`` and train it with MGRIT propagation."""
    if engine is None:
        engine = SerialMgrit(CycleConfig(cycle.c_f, cycle.levels, config.fwd_iters,
                                         config.bwd_iters, cycle.fine_relax))
    model = GruClassifier.init(train_set.dim, hidden_dim, num_layers, train_set.num_classes,
                               config.seed)
    return train(model, config, train_set, test_set, MGRIT, engine, on_epoch)


# -- checkpoints ---------------------------------------------------------------------

def save_model(path, model: GruClassifier, norm: tuple | None = None, meta: dict | None = None):
    extra = {"head.weight": model.head.weight, "head.bias": model.head.bias}
    if norm is not None:
        extra["norm.mean"], extra["norm.std"] = norm
    save_checkpoint(path, model.stack, extra, {"method": model.method, **(meta or {})})


def load_model(path):
    """Returns (model, (mean, std) or None, meta)."""
    stack, extra, meta = load_checkpoint(path)
    if "head.weight" not in extra or "head.bias" not in extra:
        raise DataFormatError(f"{path} holds no classifier head")
    head = ClassifierHead(extra["head.weight"], extra["head.bias"])
    norm = (extra["norm.mean"], extra["norm.std"]) if "norm.mean" in extra else None
    return GruClassifier(stack, head, meta.get("method", IMPLICIT)), norm, meta
