"""Command-line entry point: demo, train, infer, bench, convergence.

Exit codes: 0 success, 1 I/O or data error, 2 usage error, 3 numerical failure.

Every subcommand accepts ``--config FILE``: plain ``key = value`` lines
(``#`` comments allowed) whose keys are long flag names without the leading
dashes. Flags given on the command line take precedence over the file.
The default worker count comes from ``GRU_MGRIT_WORKERS`` (else 1).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .data import channel_stats, load_csv, standardize, synth_generate, train_test_split
from .demo_ode import (DemoOdeParams, demo_records, high_band_energy, run_demo,
                       spectrum_records, spectrum_report)
from .errors import DataFormatError, DivergenceError, ProtocolFault
from .gru_cell import IMPLICIT, StackSpec
from .mgrit import FCF_RELAX, F_RELAX, CycleConfig, SerialMgrit
from .parallel import ParallelMgrit, WorkerPool
from .training import (MGRIT, MODES, GruClassifier, TrainConfig, infer,
                       load_model, mgrit_loss_and_grad, save_model, serial_bptt, serial_forward,
                       train)

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
WORKERS_ENV = "GRU_MGRIT_WORKERS"


class UsageError(Exception):
    pass


# -- argument helpers -----------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _cf(text):
    v = int(text)
    if v < 2:
        raise argparse.ArgumentTypeError(f"coarsening factor must be >= 2, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _default_workers():
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        return _positive_int(raw)
    except (ValueError, argparse.ArgumentTypeError):
        raise UsageError(f"{WORKERS_ENV}={raw!r} is not a positive integer") from None


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; keys use dashes or underscores interchangeably."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _cycle_flags(p, levels=3):
    p.add_argument("--cf", type=_cf, default=4, help="coarsening factor c_f (default 4)")
    p.add_argument("--levels", type=_positive_int, default=levels,
                   help=f"maximum number of grid levels (default {levels})")
    p.add_argument("--fwd-iters", type=_positive_int, default=2,
                   help="forward MGRIT cycles (default 2)")
    p.add_argument("--bwd-iters", type=_positive_int, default=1,
                   help="adjoint MGRIT cycles (default 1)")
    p.add_argument("--fine-relax", choices=(FCF_RELAX, F_RELAX), default=FCF_RELAX,
                   help="relaxation on the finest level (default FCF)")


def _worker_flags(p):
    p.add_argument("--workers", type=_positive_int, default=None,
                   help=f"worker lanes (default ${WORKERS_ENV} or 1)")
    p.add_argument("--transport", choices=("thread",), default="thread",
                   help="worker transport (default thread)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gru-mgrit", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file merged under command-line flags")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo", parents=[common], help="two-level MGRIT on the reference ODE")
    p.add_argument("--steps", type=_positive_int, default=128, help="time steps T (default 128)")
    p.add_argument("--dim", type=_positive_int, default=10, help="state dimension (default 10)")
    p.add_argument("--cf", type=_cf, default=4, help="coarsening factor (default 4)")
    p.add_argument("--levels", type=_positive_int, default=2, help="grid levels (default 2)")
    p.add_argument("--iters", type=_positive_int, default=10, help="maximum cycles (default 10)")
    p.add_argument("--dt", type=_positive_float, default=0.05, help="fine time step (default 0.05)")
    p.add_argument("--alpha", type=float, default=1.0, help="scale of the sigmoid term (default 1)")
    p.add_argument("--target", type=_positive_float, default=1e-12,
                   help="residual norm required for exit code 0 (default 1e-12)")
    p.add_argument("--spectrum", action="store_true", help="also print the error spectra")
    p.add_argument("--sweeps", type=_positive_int, default=4,
                   help="FCF sweeps before the relaxed spectrum (default 4)")
    p.add_argument("--records", help="write JSON-lines records to this file")

    p = sub.add_parser("train", parents=[common], help="train a GRU classifier")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="training CSV")
    src.add_argument("--synthetic", action="store_true", help="use the synthetic 6-class task")
    p.add_argument("--test-data", help="test CSV (with --data)")
    p.add_argument("--mode", choices=MODES, default=MGRIT, help="propagation (default mgrit)")
    p.add_argument("--hidden", type=_positive_int, default=100, help="hidden size (default 100)")
    p.add_argument("--layers", type=_positive_int, default=2, help="GRU layers (default 2)")
    p.add_argument("--lr", type=_positive_float, default=1e-3, help="learning rate (default 0.001)")
    p.add_argument("--batch", type=_positive_int, default=100, help="batch size (default 100)")
    p.add_argument("--epochs", type=_positive_int, default=10, help="epochs (default 10)")
    p.add_argument("--schedule", action="store_true",
                   help="halve the learning rate every 5 epochs, floor 1.25e-4")
    p.add_argument("--no-standardize", dest="standardize", action="store_false",
                   help="skip per-channel standardization")
    p.add_argument("--synth-classes", type=_positive_int, default=6)
    p.add_argument("--synth-steps", type=_positive_int, default=128)
    p.add_argument("--synth-dim", type=_positive_int, default=9)
    p.add_argument("--synth-train", type=_positive_int, default=600)
    p.add_argument("--synth-test", type=_positive_int, default=120)
    p.add_argument("--synth-noise", type=float, default=1.5)
    p.add_argument("--checkpoint", default="model.npz", help="output checkpoint (default model.npz)")
    p.add_argument("--metrics", default="-", help="JSON-lines metrics file (default stdout)")
    _cycle_flags(p)
    _worker_flags(p)

    p = sub.add_parser("infer", parents=[common], help="classify sequences with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="CSV to classify (labels used for accuracy)")
    p.add_argument("--mode", choices=("serial", "mgrit"), default="serial")
    p.add_argument("--output", default="-", help="prediction CSV (default stdout)")
    _cycle_flags(p)
    _worker_flags(p)

    p = sub.add_parser("bench", parents=[common], help="serial vs MGRIT wall-clock grid")
    p.add_argument("--lengths", type=_int_list, default=[8, 16, 32, 64, 128])
    p.add_argument("--workers-list", type=_int_list, default=[1, 2, 4])
    p.add_argument("--hidden", type=_positive_int, default=32)
    p.add_argument("--layers", type=_positive_int, default=2)
    p.add_argument("--batch", type=_positive_int, default=16)
    p.add_argument("--input-dim", type=_positive_int, default=9)
    p.add_argument("--repeats", type=_positive_int, default=1, help="timing repeats, best kept")
    p.add_argument("--output", default="-", help="CSV destination (default stdout)")
    _cycle_flags(p)
    p.add_argument("--transport", choices=("thread",), default="thread")

    p = sub.add_parser("convergence", parents=[common],
                       help="residual per cycle for several coarsening factors")
    p.add_argument("--cf-list", type=_int_list, default=[2, 4, 8])
    p.add_argument("--steps", type=_positive_int, default=128)
    p.add_argument("--levels", type=_positive_int, default=32,
                   help="maximum levels; the hierarchy stops at 4 coarse steps (default 32)")
    p.add_argument("--iters", type=_positive_int, default=10)
    p.add_argument("--hidden", type=_positive_int, default=32)
    p.add_argument("--layers", type=_positive_int, default=2)
    p.add_argument("--batch", type=_positive_int, default=4)
    p.add_argument("--input-dim", type=_positive_int, default=9)
    p.add_argument("--floor", type=_positive_float, default=1e-13,
                   help="stop a curve once its residual falls below this (default 1e-13)")
    p.add_argument("--output", default="-", help="CSV destination (default stdout)")
    _worker_flags(p)
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = read_config(args.config)
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {args.config}: {exc}") from exc
        sub = parser._subparsers._group_actions[0].choices[args.command]
        # a key names either a long flag (a switch key means "flag given") or a destination
        by_key = {}
        for action in sub._actions:
            for opt in action.option_strings:
                if opt.startswith("--"):
                    by_key[opt[2:].replace("-", "_")] = (action, True)
            by_key.setdefault(action.dest, (action, False))
        unknown = sorted(set(cfg) - set(by_key) - {"config", "help"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        # re-parse with the file as defaults so explicit flags win and types are checked
        defaults = {}
        for key, text in cfg.items():
            if key in ("config", "help"):
                continue
            action, is_flag = by_key[key]
            if action.nargs == 0:
                on = text.lower() in ("1", "true", "yes", "on")
                if not on and text.lower() not in ("0", "false", "no", "off"):
                    raise UsageError(f"config key {key}: expected true or false, got {text!r}")
                defaults[action.dest] = (on == action.const) if is_flag else on
            else:
                try:
                    val = action.type(text) if action.type else text
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"config key {key}: {exc}") from None
                if action.choices and val not in action.choices:
                    raise UsageError(f"config key {key}: {val!r} not in {list(action.choices)}")
                defaults[action.dest] = val
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if getattr(args, "workers", 0) is None:
        args.workers = _default_workers()
    return args


@contextlib.contextmanager
def _open_out(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


@contextlib.contextmanager
def engine_for(cycle: CycleConfig, workers: int, transport: str = "thread"):
    """Single-lane engine for one worker, else a controller over a worker pool."""
    if workers <= 1:
        yield SerialMgrit(cycle)
        return
    with WorkerPool(workers, transport) as pool:
        yield ParallelMgrit(pool, cycle)


def _cycle(args) -> CycleConfig:
    return CycleConfig(args.cf, args.levels, args.fwd_iters, args.bwd_iters, args.fine_relax)


# -- commands ------------------------------------------------------------------------

def cmd_demo(args) -> int:
    if args.steps % args.cf:
        raise UsageError(f"--steps {args.steps} must be divisible by --cf {args.cf}")
    if args.steps % (args.cf ** (args.levels - 1)):
        raise UsageError(f"--steps {args.steps} does not support {args.levels} levels")
    p = DemoOdeParams.make(args.dim, args.steps, args.dt, args.seed, args.alpha)
    result = run_demo(p, args.cf, args.iters, args.levels, out=sys.stdout)
    if args.records:
        with open(args.records, "w", encoding="utf-8") as fh:
            for rec in demo_records(result):
                fh.write(json.dumps(rec) + "\n")
    if args.spectrum:
        spec = spectrum_report(p, args.sweeps, args.cf)
        ratio = high_band_energy(spec["relaxed"]) / max(high_band_energy(spec["initial"]), 1e-300)
        print(f"spectrum after {args.sweeps} FCF sweeps: high-band energy ratio = {ratio:.4e}")
        for rec in spectrum_records(spec):
            print(json.dumps(rec))
    final = result.residuals[-1]
    if not final < args.target:
        print(f"residual {final:.4e} did not reach {args.target:.1e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _load_training_data(args):
    if args.synthetic or not args.data:
        n_per = -(-(args.synth_train + args.synth_test) // args.synth_classes)
        ds = synth_generate(args.synth_classes, args.synth_steps, args.synth_dim, n_per,
                            args.seed, args.synth_noise)
        n_test = len(ds) - args.synth_train
        if n_test < 1:
            raise UsageError("--synth-train leaves no test sequences")
        train_set, test_set = train_test_split(ds, n_test, args.seed)
    else:
        train_set = load_csv(args.data)
        test_set = load_csv(args.test_data, train_set.num_classes) if args.test_data else None
        if test_set is not None and test_set.dim != train_set.dim:
            raise DataFormatError(f"test data has {test_set.dim} features, training data "
                                  f"{train_set.dim}")
    T = max(train_set.T, test_set.T if test_set is not None else 0)
    train_set = train_set.padded(T).pad_to_grid(args.cf, args.levels)
    if test_set is not None:
        test_set = test_set.padded(train_set.T)
    norm = None
    if args.standardize:
        norm = channel_stats(train_set)
        train_set = standardize(train_set, *norm)
        if test_set is not None:
            test_set = standardize(test_set, *norm)
    return train_set, test_set, norm


def cmd_train(args) -> int:
    train_set, test_set, norm = _load_training_data(args)
    cfg = TrainConfig(args.lr, args.batch, args.epochs, args.schedule, args.fwd_iters,
                      args.bwd_iters, args.seed)
    model = GruClassifier.init(train_set.dim, args.hidden, args.layers, train_set.num_classes,
                               args.seed)
    with _open_out(args.metrics) as out, engine_for(_cycle(args), args.workers,
                                                    args.transport) as engine:
        def emit(rec):
            out.write(rec.to_json() + "\n")
            out.flush()
        result = train(model, cfg, train_set, test_set, args.mode,
                       engine if args.mode == MGRIT else None, emit)
    save_model(args.checkpoint, result.model, norm, {"mode": args.mode})
    print(f"checkpoint written to {args.checkpoint}", file=sys.stderr)
    return EXIT_OK


def cmd_infer(args) -> int:
    model, norm, _ = load_model(args.checkpoint)
    ds = load_csv(args.data, model.head.num_classes)
    if ds.dim != model.stack.input_dim:
        raise DataFormatError(f"data has {ds.dim} features, model expects {model.stack.input_dim}")
    if args.mode == "mgrit":
        ds = ds.pad_to_grid(args.cf, args.levels)
    if norm is not None:
        ds = standardize(ds, *norm)
    correct = 0
    with _open_out(args.output) as out, engine_for(_cycle(args), args.workers,
                                                   args.transport) as engine:
        w = csv.writer(out)
        w.writerow(["seq_index", "label", "predicted"] +
                   [f"logit{k}" for k in range(model.head.num_classes)])
        for lo in range(0, len(ds), 100):
            idx = np.arange(lo, min(lo + 100, len(ds)))
            x, lens, y = ds.batch(idx)
            pred, logits = infer(model, x, lens, args.mode, engine, args.fwd_iters)
            correct += int(np.sum(pred == y))
            for i, yi, pi, li in zip(idx, y, pred, logits):
                w.writerow([int(i), int(yi), int(pi)] + [repr(float(v)) for v in li])
    print(f"accuracy = {correct / len(ds):.4f} ({correct}/{len(ds)})", file=sys.stderr)
    return EXIT_OK


def _timed(fn, repeats):
    best, out = float("inf"), None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_rows(args):
    """Yield one dict per feasible (T, P): best-of-repeats seconds per forward+backward pass."""
    rng = np.random.default_rng(args.seed)
    num_classes = 6
    for T in args.lengths:
        if T < 4:
            print(f"note: skipping T={T} (below 4 steps)", file=sys.stderr)
            continue
        model = GruClassifier.init(args.input_dim, args.hidden, args.layers, num_classes, args.seed)
        x = np.zeros((T + 1, args.batch, args.input_dim))
        x[1:] = rng.standard_normal((T, args.batch, args.input_dim))
        y = rng.integers(0, num_classes, args.batch)
        t_serial, (loss_s, _, _) = _timed(
            lambda: serial_bptt(model.stack, model.head, x, y), args.repeats)
        cycle = _cycle(args)
        levels = cycle.hierarchy(T).num_levels
        for P in args.workers_list:
            if P > 1 and P > T // args.cf:
                print(f"note: skipping T={T}, P={P} (needs {P * args.cf} steps)", file=sys.stderr)
                continue
            with WorkerPool(P, args.transport) as pool:
                eng = ParallelMgrit(pool, cycle)
                t_mg, out = _timed(lambda: mgrit_loss_and_grad(eng, model, x, y, monitor=False),
                                   args.repeats)
            yield {"T": T, "P": P, "levels": levels, "serial_seconds": t_serial,
                   "mgrit_seconds": t_mg, "speedup": t_serial / t_mg,
                   "serial_loss": loss_s, "mgrit_loss": out[0]}


BENCH_FIELDS = ["T", "P", "levels", "serial_seconds", "mgrit_seconds", "speedup",
                "serial_loss", "mgrit_loss"]


def cmd_bench(args) -> int:
    with _open_out(args.output) as out:
        w = csv.DictWriter(out, BENCH_FIELDS)
        w.writeheader()
        for row in bench_rows(args):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
            out.flush()
    return EXIT_OK


def convergence_rows(args):
    """Forward and adjoint residual per cycle on a random implicit-GRU instance, per c_f."""
    rng = np.random.default_rng(args.seed)
    stack = StackSpec.init_uniform(args.input_dim, args.hidden, args.layers, rng)
    T = args.steps
    x = np.zeros((T + 1, args.batch, args.input_dim))
    x[1:] = rng.standard_normal((T, args.batch, args.input_dim))
    h_exact, _ = serial_forward(stack, x, IMPLICIT)
    w_T = rng.standard_normal(h_exact.shape[1:])
    for c_f in args.cf_list:
        if c_f < 2:
            raise UsageError("coarsening factors must be >= 2")
        cycle = CycleConfig(c_f, args.levels, 1, 1)
        depth = cycle.hierarchy(T).num_levels
        with engine_for(cycle, args.workers, args.transport) as eng:
            fwd, bwd = [], []
            h = None
            for _ in range(args.iters):
                h, r = eng.forward(stack, x, IMPLICIT, iters=1, h0=h)
                fwd.append(r[-1])
                if r[-1] < args.floor:
                    break
            w = None
            for _ in range(args.iters):
                w, r, _ = _adjoint_once(eng, stack, x, h_exact, w_T, w)
                bwd.append(r[-1])
                if r[-1] < args.floor:
                    break
        for i in range(max(len(fwd), len(bwd))):
            yield {"cf": c_f, "levels": depth, "iteration": i + 1,
                   "fwd_residual": fwd[i] if i < len(fwd) else "",
                   "bwd_residual": bwd[i] if i < len(bwd) else ""}


def _adjoint_once(eng, stack, x, h, w_T, w_prev):
    """One adjoint cycle continuing from ``w_prev`` (or from zero with terminal ``w_T``)."""
    if w_prev is None:
        return eng.backward(stack, x, h, w_T, None, IMPLICIT, iters=1, gradient=False)
    return eng.backward(stack, x, h, w_T, None, IMPLICIT, iters=1, gradient=False, w0=w_prev)


def cmd_convergence(args) -> int:
    with _open_out(args.output) as out:
        w = csv.DictWriter(out, ["cf", "levels", "iteration", "fwd_residual", "bwd_residual"])
        w.writeheader()
        for row in convergence_rows(args):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return EXIT_OK


COMMANDS = {"demo": cmd_demo, "train": cmd_train, "infer": cmd_infer, "bench": cmd_bench,
            "convergence": cmd_convergence}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"gru-mgrit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"gru-mgrit: error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"gru-mgrit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DataFormatError) as exc:
        print(f"gru-mgrit: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"gru-mgrit: numerical failure: {exc}; diagnostics: "
              f"{json.dumps(exc.diagnostics, default=str)}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"gru-mgrit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ProtocolFault as exc:
        print(f"gru-mgrit: worker protocol fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
