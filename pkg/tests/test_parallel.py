import logging

import numpy as np
import pytest

from gru_mgrit.demo_ode import DemoOdeParams, demo_levels, random_guess
from gru_mgrit.errors import ProtocolFault
from gru_mgrit.grid import build_hierarchy
from gru_mgrit.gru_cell import StackSpec
from gru_mgrit.mgrit import CycleConfig, SerialMgrit, build_gru_levels, mgprop
from gru_mgrit.parallel import (BoundaryMessage, ParallelMgrit, WorkerPool, exchange_and_sweep,
                                partition)


def instance(seed, T=64, B=2, d=3, H=8, L=2):
    rng = np.random.default_rng(seed)
    s = StackSpec.init_uniform(d, H, L, rng)
    x = np.zeros((T + 1, B, d))
    x[1:] = rng.normal(size=(T, B, d))
    return s, x


@pytest.fixture(scope="module")
def pools():
    made = {P: WorkerPool(P, timeout=20.0) for P in (1, 2, 4)}
    yield made
    for p in made.values():
        p.close()


def check_partition(part, hier):
    for l, ranges in enumerate(part.ranges):
        N = hier.levels[l].n_steps
        assert ranges[0][0] == 0 and ranges[-1][1] == N
        for (a, b), (c, d) in zip(ranges, ranges[1:]):
            assert b == c
        sizes = [b - a for a, b in ranges]
        assert all(a % part.c_f == 0 and b % part.c_f == 0 for a, b in ranges)
        assert max(sizes) - min(sizes) <= part.c_f


def test_partition_even_split():
    hier = build_hierarchy(16, 4, 2)
    part = partition(16, 4, hier)
    assert part.ranges[0] == ((0, 4), (4, 8), (8, 12), (12, 16))
    assert part.lengths == (16, 4)
    check_partition(part, hier)


def test_partition_single_worker():
    hier = build_hierarchy(128, 4, 3)
    part = partition(128, 1, hier)
    assert part.ranges[0] == ((0, 128),)
    assert part.owners == (0,)


def test_partition_clamps_with_warning(caplog):
    hier = build_hierarchy(128, 4, 3)
    with caplog.at_level(logging.WARNING):
        part = partition(128, 64, hier)
    assert part.P == 32
    assert len(part.ranges[0]) == 32
    assert "reducing worker count" in caplog.text


@pytest.mark.parametrize("T,P,c_f,L", [(128, 3, 4, 3), (1024, 8, 4, 4), (96, 5, 2, 6), (64, 2, 8, 2)])
def test_partition_invariants(T, P, c_f, L):
    hier = build_hierarchy(T, c_f, L)
    part = partition(T, P, hier)
    check_partition(part, hier)
    assert 1 <= part.gather_level <= hier.num_levels - 1 or hier.num_levels == 1
    rev = part.reversed_owners()
    assert rev.ranges == part.ranges and rev.owners == tuple(reversed(part.owners))


def test_partition_rejects_bad_input():
    hier = build_hierarchy(64, 4, 2)
    with pytest.raises(ValueError):
        partition(64, 0, hier)
    with pytest.raises(ValueError):
        partition(32, 2, hier)


@pytest.mark.parametrize("T,levels", [(128, 3), (32, 2), (64, 1)])
def test_bitwise_worker_invariance(pools, T, levels):
    s, x = instance(1, T=T)
    cfg = CycleConfig(c_f=4, levels=levels, fwd_iters=2, bwd_iters=1)
    ref = SerialMgrit(cfg)
    h_ref, fr_ref = ref.forward(s, x)
    w_T = np.random.default_rng(2).normal(size=h_ref.shape[1:])
    w_ref, br_ref, g_ref = ref.backward(s, x, h_ref, w_T)
    for P, pool in pools.items():
        eng = ParallelMgrit(pool, cfg)
        h, fr = eng.forward(s, x, "implicit")
        w, br, g = eng.backward(s, x, h, w_T)
        assert np.array_equal(h, h_ref) and fr == fr_ref, P
        assert np.array_equal(w, w_ref) and br == br_ref, P
        for a, b in zip(g, g_ref):
            for u, v in zip(a.arrays(), b.arrays()):
                assert np.array_equal(u, v), P


def test_one_message_per_interior_boundary_per_sweep(pools):
    pool = pools[4]
    s, x = instance(3, T=64)
    cfg = CycleConfig(c_f=4, levels=2)
    hier = cfg.hierarchy(64)
    part = partition(64, 4, hier)
    eng = ParallelMgrit(pool, cfg)
    eng._load("probe", lambda: build_gru_levels(s, x, hier), part)
    try:
        eng._scatter("probe", part, 0, np.zeros((65, *s.state_shape((2,)))))
        before = pool.message_count
        for i, kind in enumerate(("FC", "F", "final-F")):
            exchange_and_sweep(pool, "probe", part, 0, kind, iteration=1)
            assert pool.message_count - before == (i + 1) * 3
        with pytest.raises(ValueError):
            exchange_and_sweep(pool, "probe", part, 0, "C")
    finally:
        pool.broadcast("drop", "probe")


def test_message_count_per_forward_cycle(pools):
    pool = pools[4]
    s, x = instance(4, T=128)
    eng = ParallelMgrit(pool, CycleConfig(c_f=4, levels=3))
    before = pool.message_count
    eng.forward(s, x, "implicit", iters=2)
    # level 0 (128 steps) and level 1 (32 steps) are distributed; 3 sweeps each
    assert pool.message_count - before == 2 * 2 * 3 * 3


def test_injected_bad_message_raises_protocol_fault():
    s, x = instance(5, T=32)
    with WorkerPool(2, timeout=5.0) as pool:
        eng = ParallelMgrit(pool, CycleConfig(c_f=4, levels=2))
        pool.channel(0, 1).inject(BoundaryMessage(0, 1, "FC", 0, 7, np.zeros(1)))
        with pytest.raises(ProtocolFault, match="expected #1"):
            eng.forward(s, x, "implicit")
        # the pool recovers once the fault is cleared
        h, _ = eng.forward(s, x, "implicit")
        h_ref, _ = SerialMgrit(eng.config).forward(s, x)
        assert np.array_equal(h, h_ref)


def test_wrong_protocol_version_raises():
    s, x = instance(5, T=32)
    with WorkerPool(2, timeout=5.0) as pool:
        eng = ParallelMgrit(pool, CycleConfig(c_f=4, levels=2))
        pool.channel(0, 1).inject(BoundaryMessage(0, 1, "FC", 0, 1, np.zeros(1), version=99))
        with pytest.raises(ProtocolFault, match="protocol version"):
            eng.forward(s, x, "implicit")


def test_watchdog_fires_on_missing_neighbour():
    s, x = instance(6, T=32)
    cfg = CycleConfig(c_f=4, levels=2)
    hier = cfg.hierarchy(32)
    part = partition(32, 2, hier)
    with WorkerPool(2, timeout=0.3) as pool:
        eng = ParallelMgrit(pool, cfg)
        eng._load("w", lambda: build_gru_levels(s, x, hier), part)
        eng._scatter("w", part, 0, np.zeros((33, *s.state_shape((2,)))))
        with pytest.raises(ProtocolFault, match="watchdog"):
            pool.call(1, "sweep", "w", 0, 1, "FC", True)


def test_unknown_transport_and_channel():
    with pytest.raises(ValueError):
        WorkerPool(2, transport="tcp")
    with WorkerPool(3) as pool:
        with pytest.raises(ProtocolFault):
            pool.channel(0, 2)


def test_fixed_point_through_parallel_runtime(pools):
    s, x = instance(7, T=64)
    cfg = CycleConfig(c_f=4, levels=3)
    h_exact, _ = SerialMgrit(CycleConfig(c_f=4, levels=1)).forward(s, x)
    eng = ParallelMgrit(pools[4], cfg)
    h, res = eng.forward(s, x, "implicit", h0=h_exact, iters=1)
    assert np.max(np.abs(h - h_exact)) <= 1e-13
    assert res[0] <= 1e-13


def test_demo_ode_through_parallel_runtime(pools):
    p = DemoOdeParams.make()
    cfg = CycleConfig(c_f=4, levels=2)
    hier = cfg.hierarchy(p.T)
    lv = demo_levels(p, 4, 2)
    u0 = random_guess(p)
    ref = u0
    for _ in range(3):
        ref = mgprop(cfg, lv, ref)
    eng = ParallelMgrit(pools[4], cfg)
    part = partition(p.T, 4, hier)
    eng._load("demo", lambda: demo_levels(p, 4, 2), part)
    try:
        res = []
        out = eng._run("demo", part, hier, u0, None, 3, True, None, res)
    finally:
        pools[4].broadcast("drop", "demo")
    assert np.array_equal(out, ref)
    assert res[-1] < res[0]
