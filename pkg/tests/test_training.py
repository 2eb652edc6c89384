import json
import math

import numpy as np
import pytest

from gru_mgrit.data import synth_generate, train_test_split
from gru_mgrit.errors import DataFormatError, DivergenceError, ShapeError
from gru_mgrit.gru_cell import GruParams, StackSpec, save_checkpoint
from gru_mgrit.mgrit import CycleConfig, SerialMgrit
from gru_mgrit.training import (LR_FLOOR, MGRIT, SERIAL_CLASSIC, SERIAL_IMPLICIT, AdamState,
                                ClassifierHead, GruClassifier, TrainConfig, adam_step, evaluate,
                                flat_gradients, infer, load_model, loss_and_terminal_cotangent,
                                mgrit_loss_and_grad, mgrit_training, save_model, serial_bptt, train)
import oracles


def small_problem(seed=0, T=32, B=3, d=3, H=8, L=2, C=4):
    rng = np.random.default_rng(seed)
    model = GruClassifier.init(d, H, L, C, seed)
    x = np.zeros((T + 1, B, d))
    x[1:] = rng.normal(size=(T, B, d))
    y = rng.integers(0, C, B)
    return model, x, y


@pytest.fixture(scope="module")
def tiny_task():
    ds = synth_generate(3, 16, 2, 12, seed=5)
    return train_test_split(ds, 9, seed=5)


# -- loss -----------------------------------------------------------------------

def test_loss_uniform_logits():
    head = ClassifierHead.zeros(5, 6)
    loss, w, (dW, db) = loss_and_terminal_cotangent(head, np.ones(5), 2)
    assert math.isclose(loss, math.log(6), rel_tol=1e-15)
    assert np.array_equal(w, np.zeros(5))
    assert np.allclose(db, np.full(6, 1 / 6) - np.eye(6)[2], atol=1e-16)


def test_loss_saturated_correct_prediction():
    W = np.zeros((3, 2))
    W[1, 0] = 30.0
    loss, w, _ = loss_and_terminal_cotangent(ClassifierHead(W, np.zeros(3)), np.array([1.0, 0]), 1)
    assert loss <= 1e-12
    assert np.max(np.abs(w)) <= 1e-11


def test_loss_two_class_closed_form():
    head = ClassifierHead(np.array([[1.0], [0.0]]), np.zeros(2))
    loss, w, _ = loss_and_terminal_cotangent(head, np.array([1.0]), 0)
    assert abs(loss - math.log(1 + math.exp(-1))) < 1e-15
    assert abs(loss - 0.313262) < 1e-6


def test_loss_gradients_match_finite_differences(rng):
    head = ClassifierHead.init_uniform(4, 3, rng)
    h = rng.normal(size=(5, 4))
    y = np.array([0, 2, 1, 1, 0])
    _, w, (dW, db) = loss_and_terminal_cotangent(head, h, y)
    f = lambda hh: loss_and_terminal_cotangent(head, hh, y)[0]
    assert oracles.rel_err(w, oracles.central_difference(f, h)) < 1e-8
    fW = lambda W: loss_and_terminal_cotangent(ClassifierHead(W, head.bias), h, y)[0]
    assert oracles.rel_err(dW, oracles.central_difference(fW, head.weight)) < 1e-8
    fb = lambda b: loss_and_terminal_cotangent(ClassifierHead(head.weight, b), h, y)[0]
    assert oracles.rel_err(db, oracles.central_difference(fb, head.bias)) < 1e-8


@pytest.mark.parametrize("label", [-1, 6, 1.5])
def test_loss_rejects_bad_label(label):
    with pytest.raises(ValueError):
        loss_and_terminal_cotangent(ClassifierHead.zeros(2, 6), np.zeros(2), label)


def test_head_validation():
    with pytest.raises(ShapeError):
        ClassifierHead(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        ClassifierHead(np.full((1, 1), np.nan), np.zeros(1))


# -- Adam -----------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0]), np.ones((2, 2))]
    st = AdamState.fresh(p)
    out = adam_step(st, p, [np.zeros(2), np.zeros((2, 2))], 0.1)
    assert all(np.array_equal(a, b) for a, b in zip(out, p))
    assert st.step == 1


def test_adam_first_step_is_lr_sized():
    p = [np.zeros(3)]
    g = [np.array([0.5, -3.0, 1e3])]
    out = adam_step(AdamState.fresh(p), p, g, 1e-3)[0]
    assert np.allclose(out, -1e-3 * np.sign(g[0]), rtol=1e-6)


def scalar_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**k)) / (math.sqrt(v / (1 - b2**k)) + eps)
    return p


def test_adam_matches_scalar_hand_computation():
    st = AdamState.fresh([np.zeros(1)])
    p = [np.array([0.7])]
    for _ in range(2):
        p = adam_step(st, p, [np.array([0.25])], 0.01)
    assert abs(p[0][0] - scalar_adam(0.7, [0.25, 0.25], 0.01)) <= 1e-12
    st = AdamState.fresh([np.zeros(1)])
    p = [np.array([0.0])]
    gs = [1.0, -0.3, 2.0, 0.01]
    for g in gs:
        p = adam_step(st, p, [np.array([g])], 0.05)
    assert abs(p[0][0] - scalar_adam(0.0, gs, 0.05)) <= 1e-12


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(AdamState.fresh([np.zeros(2)]), [np.zeros(2)], [np.zeros(3)], 0.1)
    with pytest.raises(ShapeError):
        adam_step(AdamState.fresh([np.zeros(2)]), [np.zeros(2)], [], 0.1)


# -- config -----------------------------------------------------------------------

def test_train_config_defaults_and_schedule():
    c = TrainConfig()
    assert (c.lr, c.batch_size, c.fwd_iters, c.bwd_iters) == (1e-3, 100, 2, 1)
    s = TrainConfig(schedule=True)
    assert [s.lr_at(e) for e in (0, 4, 5, 10, 15)] == [1e-3, 1e-3, 5e-4, 2.5e-4, 1.25e-4]
    assert all(s.lr_at(e) >= LR_FLOOR for e in range(200))
    assert TrainConfig(lr=1e-5, schedule=True).lr_at(50) == 1e-5
    assert c.lr_at(30) == 1e-3
    for bad in ({"lr": 0}, {"batch_size": 0}, {"epochs": 0}, {"fwd_iters": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- gradients ----------------------------------------------------------------------

def full_loss(model, x, y, lengths=None):
    """Loss through the oracle propagation, one sample at a time."""
    T = x.shape[0] - 1
    lengths = np.full(x.shape[1], T) if lengths is None else lengths
    hs = []
    for b in range(x.shape[1]):
        h = oracles.propagate(model.stack.layers, 1.0, x[:, b, :], model.method)
        hs.append(h[lengths[b], -1])
    return loss_and_terminal_cotangent(model.head, np.array(hs), y)[0]


@pytest.mark.parametrize("method", ["implicit", "classic"])
def test_bptt_matches_finite_differences(method):
    model, x, y = small_problem(1, T=32, B=2, d=2, H=8)
    model = GruClassifier(model.stack, model.head, method)
    lengths = np.array([32, 27])
    _, grads, head_grads = serial_bptt(model.stack, model.head, x, y, lengths, method)
    got = flat_gradients(grads, head_grads)
    params = model.parameters()
    for i in (0, 1, 3, 5, 8, 9):
        def f(a, i=i):
            ps = list(params)
            ps[i] = a
            return full_loss(model.with_parameters(ps), x, y, lengths)
        assert oracles.rel_err(got[i], oracles.central_difference(f, params[i])) <= 1e-4, i


def test_padding_does_not_leak_into_gradients():
    model, x, y = small_problem(2, T=16, B=1)
    lengths = np.array([10])
    _, g1, h1 = serial_bptt(model.stack, model.head, x, y, lengths)
    x2 = x.copy()
    x2[11:] = 99.0
    _, g2, h2 = serial_bptt(model.stack, model.head, x2, y, lengths)
    for a, b in zip(flat_gradients(g1, h1), flat_gradients(g2, h2)):
        assert np.array_equal(a, b)


def test_zero_learning_signal_gives_zero_gradient():
    model, x, y = small_problem(3)
    model = GruClassifier(model.stack, ClassifierHead.zeros(8, 4))
    _, grads, _ = serial_bptt(model.stack, model.head, x, y)
    for g in grads:
        assert all(np.all(a == 0) for a in g.arrays())


@pytest.mark.parametrize("padded", [False, True])
def test_converged_mgrit_gradient_equals_bptt(padded):
    model, x, y = small_problem(4, T=32, B=3)
    lengths = np.array([32, 20, 9]) if padded else None
    eng = SerialMgrit(CycleConfig(c_f=4, levels=3))
    loss, grads, hg, _, fres, bres = mgrit_loss_and_grad(eng, model, x, y, lengths, 15, 15)
    ref_loss, ref_grads, ref_hg = serial_bptt(model.stack, model.head, x, y, lengths)
    assert fres[-1] < 1e-12 and bres[-1] < 1e-12
    assert abs(loss - ref_loss) < 1e-12
    for a, b in zip(flat_gradients(grads, hg), flat_gradients(ref_grads, ref_hg)):
        assert np.max(np.abs(a - b)) <= 1e-10


def test_inexact_mgrit_gradient_is_close_but_not_exact():
    model, x, y = small_problem(5, T=64, B=2)
    eng = SerialMgrit(CycleConfig(c_f=4, levels=3))
    _, grads, hg, _, _, _ = mgrit_loss_and_grad(eng, model, x, y)
    _, rg, rhg = serial_bptt(model.stack, model.head, x, y)
    err = oracles.rel_err(np.concatenate([a.ravel() for a in flat_gradients(grads, hg)]),
                          np.concatenate([a.ravel() for a in flat_gradients(rg, rhg)]))
    assert 0 < err < 0.1


# -- inference ---------------------------------------------------------------------

def test_zero_model_gives_uniform_logits():
    model = GruClassifier(StackSpec.zeros(3, 4, 2), ClassifierHead.zeros(4, 5))
    x = np.random.default_rng(0).normal(size=(17, 2, 3))
    for mode in ("serial", "mgrit"):
        pred, logits = infer(model, x, mode=mode)
        assert np.array_equal(logits, np.zeros((2, 5)))


def test_converged_mgrit_inference_matches_serial():
    model, x, _ = small_problem(6, T=64, B=4)
    eng = SerialMgrit(CycleConfig(c_f=4, levels=3))
    p1, l1 = infer(model, x, mode="serial")
    p2, l2 = infer(model, x, mode="mgrit", engine=eng, iters=15)
    assert np.max(np.abs(l1 - l2)) <= 1e-8
    assert np.array_equal(p1, p2)
    with pytest.raises(ValueError):
        infer(model, x, mode="fast")


# -- training loop ----------------------------------------------------------------

def test_mgrit_training_is_deterministic(tiny_task):
    tr, te = tiny_task
    cfg = TrainConfig(lr=5e-3, batch_size=9, epochs=2, seed=3)
    cyc = CycleConfig(c_f=2, levels=2)
    a = mgrit_training(cfg, cyc, tr, te, hidden_dim=6, num_layers=1)
    b = mgrit_training(cfg, cyc, tr, te, hidden_dim=6, num_layers=1)
    assert [m.train_loss for m in a.metrics] == [m.train_loss for m in b.metrics]
    for u, v in zip(a.model.parameters(), b.model.parameters()):
        assert np.array_equal(u, v)


def test_converged_mgrit_training_tracks_bptt(tiny_task):
    tr, _ = tiny_task
    cfg = TrainConfig(lr=1e-2, batch_size=9, epochs=2, seed=1, fwd_iters=12, bwd_iters=12)
    start = GruClassifier.init(tr.dim, 5, 2, tr.num_classes, 1)
    eng = SerialMgrit(CycleConfig(c_f=2, levels=3, fwd_iters=12, bwd_iters=12))
    a = train(start, cfg, tr, mode=MGRIT, engine=eng)
    b = train(start, cfg, tr, mode=SERIAL_IMPLICIT)
    for u, v in zip(a.model.parameters(), b.model.parameters()):
        assert np.max(np.abs(u - v)) <= 1e-6


def test_loss_decreases_over_first_epochs():
    ds = synth_generate(6, 32, 3, 20, seed=2)
    cfg = TrainConfig(lr=1e-2, batch_size=30, epochs=5, seed=0)
    res = mgrit_training(cfg, CycleConfig(c_f=4, levels=2), ds, hidden_dim=12, num_layers=1)
    losses = [m.train_loss for m in res.metrics]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_metrics_records(tiny_task):
    tr, te = tiny_task
    seen = []
    res = mgrit_training(TrainConfig(batch_size=9, epochs=2), CycleConfig(c_f=2, levels=2), tr, te,
                         hidden_dim=4, num_layers=1, on_epoch=seen.append)
    assert seen == res.metrics
    rec = json.loads(res.metrics[-1].to_json())
    assert rec["epoch"] == 2 and rec["lr"] == 1e-3
    assert 0 <= rec["test_acc"] <= 1 and 0 <= rec["test_acc_serial"] <= 1
    assert rec["fwd_residual"] > 0 and rec["bwd_residual"] > 0
    m = train(GruClassifier.init(tr.dim, 4, 1, 3, 0), TrainConfig(batch_size=9, epochs=1), tr,
              mode=SERIAL_CLASSIC)
    assert m.metrics[0].fwd_residual is None and m.metrics[0].test_acc is None
    with pytest.raises(ValueError):
        train(m.model, TrainConfig(), tr, mode="sgd")


def test_divergence_guard(tiny_task):
    tr, _ = tiny_task
    model = GruClassifier.init(tr.dim, 4, 1, 3, 0)

    class Blowup(SerialMgrit):
        def forward(self, stack, x, *args, **kw):
            h, res = super().forward(stack, x, *args, **kw)
            return np.full_like(h, np.nan), res

    eng = Blowup(CycleConfig(c_f=2, levels=2))
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        train(model, TrainConfig(batch_size=9, epochs=3), tr, mode=MGRIT, engine=eng)
    assert info.value.diagnostics["epoch"] == 1
    assert info.value.diagnostics["batch"] == 1


def test_evaluate_accuracy_in_unit_interval(tiny_task):
    tr, te = tiny_task
    model = GruClassifier.init(tr.dim, 4, 1, 3, 0)
    acc = evaluate(model, te)
    assert 0 <= acc <= 1
    assert acc == evaluate(model, te, batch_size=2)


# -- checkpoints -------------------------------------------------------------------

def test_model_checkpoint_round_trip(tmp_path):
    model, x, _ = small_problem(7)
    norm = (np.arange(3.0), np.ones(3))
    path = tmp_path / "m.npz"
    save_model(path, model, norm, {"epochs": 3})
    back, n2, meta = load_model(path)
    for a, b in zip(model.parameters(), back.parameters()):
        assert np.array_equal(a, b)
    assert np.array_equal(n2[0], norm[0]) and meta["epochs"] == "3"
    assert np.array_equal(infer(model, x)[1], infer(back, x)[1])


def test_checkpoint_without_head_is_rejected(tmp_path):
    path = tmp_path / "stack.npz"
    save_checkpoint(path, StackSpec([GruParams.zeros(2, 3)]))
    with pytest.raises(DataFormatError):
        load_model(path)
