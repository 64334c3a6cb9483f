"""Command-line front end.

Subcommands: gen, train, eval, sweep, study, preset-check, grad-check,
inspect. Every command takes --seed and --out. Exit codes: 0 success,
1 check/experiment failure, 2 usage error, 3 file/format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines, datasets, harness, units
from .datasets import IdxFormatError, TargetKind
from .harness import ExperimentConfig, TrainingDiverged, VersionError
from .ndcore import SetBatch, Tensor, grad_check, mul, tsum


def _target_arg(text: str) -> str:
    try:
        TargetKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got '{text}'")
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one value")
    return vals


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _write_report(out, text: str) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    kind = TargetKind.parse(args.target)
    samples = datasets.gen_scalar_train(kind, args.n, args.M, args.seed)
    datasets.save_scalar_samples(samples, args.out)
    print(f"wrote {len(samples)} sets to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train / eval / sweep


def _config_from_args(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            return ExperimentConfig.from_dict(json.load(fh))
    return ExperimentConfig(
        model=args.model, task=args.task, target=args.target, units=args.units,
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        seed=args.seed, train_size=args.train_size, val_size=args.val_size,
        test_size=getattr(args, "per_m_n", None) or 10000,
        sweep=tuple(getattr(args, "Ms", None) or (5, 10, 20, 30, 50)),
    )


def _build_model(config: ExperimentConfig):
    rng = np.random.default_rng([config.seed, 808])
    if config.task == "mnist":
        return harness.build_mnist_model(config.model, rng, config.units)
    return harness.build_scalar_model(config.model, rng, config.units)


def _load_task_data(config: ExperimentConfig):
    kind = config.kind()
    train = datasets.gen_scalar_train(kind, config.train_size, 10, config.seed)
    val = list(datasets.gen_scalar_test(kind, config.val_size, 10, config.seed + 1))
    if config.task == "mnist":
        train_split, _test_split = datasets.ensure_mnist()
        train = datasets.mnist_setify(train, train_split, config.seed, "train")
        val = datasets.mnist_setify(val, train_split, config.seed + 1, "train")
    return train, val


def _run_training(config: ExperimentConfig, out_dir) -> harness.RunRecord:
    model = _build_model(config)
    train_data, val_data = _load_task_data(config)
    record = harness.train(model, train_data, val_data, config)
    os.makedirs(out_dir, exist_ok=True)
    harness.persist(record, out_dir)
    harness.save_weights(model.store, os.path.join(out_dir, "weights.npz"))
    return record


def cmd_train(args) -> int:
    config = _config_from_args(args)
    record = _run_training(config, args.out)
    final = record.val_losses[-1] if record.val_losses else float("nan")
    print(f"trained {config.model} on {config.target} ({config.task}); "
          f"best val MAE {min(record.val_losses, default=final):.6g}; "
          f"run written to {args.out}")
    return 0


def _reload_run(run_dir):
    record = harness.load(run_dir)
    model = _build_model(record.config)
    harness.load_weights(model.store, os.path.join(run_dir, "weights.npz"))
    return record, model


def cmd_eval(args) -> int:
    record, model = _reload_run(args.run)
    sweep = args.Ms or list(record.config.sweep)
    target = record.config.kind()
    record.test_mae = harness.evaluate_sweep(model, target, sweep,
                                             args.per_m_n, args.seed)
    out_dir = args.out or args.run
    os.makedirs(out_dir, exist_ok=True)
    text = harness.results_csv_text(record)
    harness._atomic_write(os.path.join(out_dir, "results.csv"), text)
    for M in sorted(record.test_mae):
        print(f"M={M}: mae={record.test_mae[M]:.6g}")
    return 0


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    record = _run_training(config, args.out)
    model = _build_model(config)
    harness.load_weights(model.store, os.path.join(args.out, "weights.npz"))
    record.test_mae = harness.evaluate_sweep(model, config.kind(),
                                             list(config.sweep),
                                             config.test_size, config.seed)
    harness.persist(record, args.out)
    for M in sorted(record.test_mae):
        print(f"M={M}: mae={record.test_mae[M]:.6g}")
    print(f"run written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# study


def cmd_study(args) -> int:
    target = TargetKind.parse(args.target)
    config = ExperimentConfig(
        model="laf", task="scalar", target=args.target, units=max(args.units),
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        seed=args.seed, train_size=args.train_size, val_size=args.val_size,
        test_size=args.test_size)
    tasks = [(target.label(), u, r, config.to_dict())
             for u in args.units for r in range(args.restarts)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_study_star, tasks))
    else:
        rows = [harness.study_one(*t) for t in tasks]

    os.makedirs(args.out, exist_ok=True)
    lines = ["target,units,restart,mae,seed"]
    for row in rows:
        lines.append(f"{target.label()},{row.units},{row.restart},"
                     f"{repr(row.mae)},{args.seed}")
    harness._atomic_write(os.path.join(args.out, "study.csv"), "\n".join(lines) + "\n")

    doc = {"version": 1, "target": target.label(), "config": config.to_dict(),
           "rows": [{"units": r.units, "restart": r.restart, "mae": r.mae,
                     "params": r.params.tolist(),
                     "head_w": None if r.head_w is None else r.head_w.tolist(),
                     "head_b": r.head_b} for r in rows]}
    harness._atomic_write(os.path.join(args.out, "study.json"),
                          json.dumps(doc, indent=2, sort_keys=True) + "\n")

    for u in args.units:
        maes = np.array([r.mae for r in rows if r.units == u])
        q1, q3 = np.percentile(maes, [25, 75])
        print(f"units={u}: median mae={np.median(maes):.6g} iqr={q3 - q1:.6g}")
    print(f"study written to {args.out}")
    return 0


def _study_star(t):
    return harness.study_one(*t)


# ---------------------------------------------------------------------------
# preset-check


def run_preset_check(seed: int, preset_fn=units.preset_params):
    """Verify every preset row against brute-force aggregators on random
    sets. Exact rows must agree to 1e-9; the soft max/min rows must sit
    within their analytic N^(1/r) envelopes (checked away from the domain
    corners, where those envelopes are meaningful)."""
    rng = np.random.default_rng([seed, 909])
    lines = []
    ok_all = True

    def draw(lo):
        n = int(rng.integers(2, 11))
        return rng.uniform(lo, 0.99, size=n)

    def check_exact(name, preset, ref, trials=400, tol=1e-9, lo=0.01):
        nonlocal ok_all
        p = preset_fn(preset)
        worst = 0.0
        for _ in range(trials):
            xs = draw(lo)
            worst = max(worst, abs(units.laf_forward(xs, p) - ref(xs)))
        good = worst <= tol
        ok_all &= good
        lines.append(f"{name:<24} max_err={worst:.3e}  tol={tol:.0e}  "
                     f"{'ok' if good else 'FAIL'}")

    def check_bounded(name, preset, ref, bound_fn, trials=400, lo=0.01):
        nonlocal ok_all
        p = preset_fn(preset)
        worst_slack = -np.inf
        good = True
        for _ in range(trials):
            xs = draw(lo)
            err = abs(units.laf_forward(xs, p) - ref(xs))
            slack = err - bound_fn(xs)
            worst_slack = max(worst_slack, slack)
            good &= slack <= 1e-12
        ok_all &= good
        lines.append(f"{name:<24} worst_err_minus_bound={worst_slack:.3e}  "
                     f"{'ok' if good else 'FAIL'}")

    r = 40.0
    env = lambda xs: xs.size ** (1.0 / r) - 1.0

    check_exact("constant(2.5)", units.Preset("constant", kappa=2.5), lambda xs: 2.5)
    check_exact("sum", units.Preset("sum"), lambda xs: float(np.sum(xs)), tol=1e-9)
    check_exact("nonzero_count", units.Preset("nonzero_count"),
                lambda xs: float(np.count_nonzero(xs)))
    check_exact("mean", units.Preset("mean"), lambda xs: float(np.mean(xs)))
    for k in (2, 3, 4):
        check_exact(f"moment(k={k})", units.Preset("kth_moment", k=k),
                    lambda xs, k=k: float(np.mean(xs ** k)))
    for l, k in ((2, 1), (2, 2), (3, 2)):
        check_exact(f"power_moment(l={l},k={k})",
                    units.Preset("lth_power_kth_moment", l=l, k=k),
                    lambda xs, l=l, k=k: float(np.mean(xs ** k) ** l))
    check_bounded("max(r=40)", units.Preset("max", r=r),
                  lambda xs: float(np.max(xs)),
                  lambda xs: float(np.max(xs)) * env(xs))
    check_bounded("min(r=40)", units.Preset("min", r=r),
                  lambda xs: float(np.min(xs)),
                  lambda xs: float(np.max(1.0 - xs)) * env(xs))

    def check_ratio(name, preset, num_ref, den_ref, eps_num_fn, eps_den_fn,
                    trials=400):
        nonlocal ok_all
        p = preset_fn(preset)
        good = True
        worst_slack = -np.inf
        for _ in range(trials):
            xs = draw(0.2)  # stay away from corners so the soft limits bind
            val = units.laf_forward(xs, p)
            n_t, d_t = num_ref(xs), den_ref(xs)
            # the perturbed denominator is reconstructible: val = n^/d^ and
            # both hats deviate from truth by at most their envelope
            d_hat_min = d_t - eps_den_fn(xs)
            assert d_hat_min > 0, "check regime keeps the denominator positive"
            err = abs(val - n_t / d_t)
            bound = (eps_num_fn(xs) * d_t + n_t * eps_den_fn(xs)) / (d_hat_min * d_t)
            slack = err - bound
            worst_slack = max(worst_slack, slack)
            good &= slack <= 1e-12
        ok_all &= good
        lines.append(f"{name:<24} worst_err_minus_bound={worst_slack:.3e}  "
                     f"{'ok' if good else 'FAIL'}")

    check_ratio("min_over_max(r=s=40)",
                units.Preset("min_over_max", r=r, s=r),
                lambda xs: float(np.min(xs)), lambda xs: float(np.max(xs)),
                lambda xs: float(np.max(1.0 - xs)) * env(xs),
                lambda xs: float(np.max(xs)) * env(xs))
    check_ratio("max_over_min(r=s=40)",
                units.Preset("max_over_min", r=r, s=r),
                lambda xs: float(np.max(xs)), lambda xs: float(np.min(xs)),
                lambda xs: float(np.max(xs)) * env(xs),
                lambda xs: float(np.max(1.0 - xs)) * env(xs))

    return ok_all, "\n".join(lines) + "\n"


def cmd_preset_check(args) -> int:
    ok, text = run_preset_check(args.seed)
    print(text, end="")
    _write_report(args.out, text)
    if not ok:
        print("preset-check: FAIL", file=sys.stderr)
        return 1
    print("preset-check: ok")
    return 0


# ---------------------------------------------------------------------------
# grad-check


def run_grad_check(seed: int, n_unit: int = 60, n_pool: int = 20,
                   n_e2e: int = 5):
    """Finite-difference verification of every analytic gradient path:
    single units, both fixed pools, and a small end-to-end scalar model.

    Instances whose denominator sits near the den -> 0 pole are resampled:
    there the central difference measures the ratio's curvature rather than
    its slope, so a mismatch says nothing about the analytic gradient.
    """
    rng = np.random.default_rng([seed, 1010])
    lines = []
    ok_all = True

    def report(name, worst, tol):
        nonlocal ok_all
        good = worst < tol
        ok_all &= good
        lines.append(f"{name:<28} max_rel_err={worst:.3e}  tol={tol:.0e}  "
                     f"{'ok' if good else 'FAIL'}")

    # single units: gradients w.r.t. elements and all 12 parameters
    worst = 0.0
    done = 0
    while done < n_unit:
        n = int(rng.integers(2, 9))
        xs = rng.uniform(0.05, 0.95, size=n)
        P = units.init_param_array(rng, 1)[0]
        P[:8] = rng.uniform(0.2, 2.0, size=8)
        P[8:] = rng.normal(0.0, 1.0, size=4)
        p = units.LafParams.from_array(P)
        if abs(p.gamma * units.l_ab(xs, p.e, p.f)
               + p.delta * units.l_ab(1.0 - xs, p.g, p.h)) < 1e-2:
            continue
        done += 1
        gx, gp = units.laf_backward(xs, p)
        h = 1e-6
        for i in range(n):
            pert = xs.copy()
            pert[i] += h
            hi = units.laf_forward(pert, p)
            pert[i] -= 2 * h
            lo = units.laf_forward(pert, p)
            fd = (hi - lo) / (2 * h)
            worst = max(worst, abs(gx[i] - fd) / max(1e-8, abs(gx[i]) + abs(fd)))
        for j in range(12):
            q = P.copy()
            q[j] += h
            hi = units.laf_forward(xs, units.LafParams.from_array(q))
            q[j] -= 2 * h
            lo = units.laf_forward(xs, units.LafParams.from_array(q))
            fd = (hi - lo) / (2 * h)
            worst = max(worst, abs(gp[j] - fd) / max(1e-8, abs(gp[j]) + abs(fd)))
    report("laf unit", worst, 1e-5)

    # fixed pools through the tape against FD on a weighted read-out
    for kind in ("deepsets9", "pna7"):
        worst = 0.0
        for _ in range(n_pool):
            sets = [rng.uniform(0.1, 0.9, size=rng.integers(3, 7)) for _ in range(3)]
            batch = SetBatch.from_sets(sets)
            w = rng.normal(size=(batch.n_sets, baselines.pool_width(kind)))

            def f(v, kind=kind, batch=batch, w=w):
                pooled = baselines.fixed_pool(v, batch.offsets, kind)
                return tsum(mul(pooled, Tensor(w)))

            worst = max(worst, grad_check(f, batch.values, h=1e-6))
        report(f"fixed pool {kind}", worst, 1e-5)

    # end-to-end scalar model, all parameter blocks; unit coefficients are
    # redrawn at O(1) scale (init's tiny normals put most denominators next
    # to the pole), conditioned on |den| >= 1e-2 like the unit check and on
    # predictions off the |pred - label| = 0 loss kink. h = 1e-5: roundoff
    # on the ~O(10) loss swamps 1e-6 steps for near-zero gradients.
    worst = 0.0
    done = attempt = 0
    while done < n_e2e and attempt < 60 * n_e2e:
        attempt += 1
        mrng = np.random.default_rng([seed, 1111, attempt])
        model = harness.build_scalar_model("laf", mrng, 3)
        P = model.store["laf"].data
        P[:, :8] = mrng.uniform(0.2, 2.0, size=P[:, :8].shape)
        P[:, 8:] = mrng.normal(0.0, 1.0, size=P[:, 8:].shape)
        samples = datasets.gen_scalar_train(TargetKind("sum"), 4, 6, seed + attempt)
        values, offsets, labels = harness.flatten_samples(samples, "scalar")
        digits = values[:, 0].astype(np.int64)
        act = 1.0 / (1.0 + np.exp(-model.store["embed"].data[digits]))
        if np.abs(units.pool_denominators(act, offsets, P)).min() < 1e-2:
            continue
        batch = SetBatch(values, offsets)
        if np.abs(model.forward(batch).data - labels).min() < 1e-3:
            continue
        done += 1
        worst = max(worst, harness.model_grad_check(model, batch, labels, h=1e-5))
    report("scalar model end-to-end", worst, 1e-4)

    return ok_all, "\n".join(lines) + "\n"


def cmd_grad_check(args) -> int:
    ok, text = run_grad_check(args.seed)
    print(text, end="")
    _write_report(args.out, text)
    if not ok:
        print("grad-check: FAIL", file=sys.stderr)
        return 1
    print("grad-check: ok")
    return 0


# ---------------------------------------------------------------------------
# inspect


def cmd_inspect(args) -> int:
    record = harness.load(args.run)
    lines = [f"run: {args.run}",
             f"model={record.config.model} task={record.config.task} "
             f"target={record.config.target} seed={record.config.seed}"]
    if record.test_mae:
        for M in sorted(record.test_mae):
            lines.append(f"  M={M}: mae={record.test_mae[M]:.6g}")
    if record.laf_params is None:
        lines.append("no learnable pool in this run")
    else:
        P = np.asarray(record.laf_params)
        for i in range(P.shape[0]):
            lines.append(f"unit{i + 1}: {units.format_unit(units.LafParams.from_array(P[i]))}")
        wpath = os.path.join(args.run, "weights.npz")
        if os.path.exists(wpath):
            with np.load(wpath) as npz:
                if "head_w" in npz.files and npz["head_w"].shape[0] == P.shape[0]:
                    w = npz["head_w"][:, 0]
                    b = float(npz["head_b"][0])
                    combo = " + ".join(f"({w[i]:.2f}*unit{i + 1})" for i in range(len(w)))
                    lines.append(f"linear: {b:.2f} + {combo}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    _write_report(args.out, text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="laf",
        description="Learnable set aggregation: data generation, training, "
                    "sweeps, restart studies and self-checks.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master RNG seed")

    p = sub.add_parser("gen", parents=[common], help="generate a scalar dataset file")
    p.add_argument("--task", choices=["scalar"], default="scalar")
    p.add_argument("--target", type=_target_arg, required=True)
    p.add_argument("--M", type=_positive, default=10, help="max cardinality")
    p.add_argument("-n", "--n", type=_positive, required=True, help="number of sets")
    p.add_argument("--out", required=True, help="output file")
    p.set_defaults(func=cmd_gen)

    def add_train_flags(p, with_sweep: bool):
        p.add_argument("--task", choices=list(harness.TASKS), default="scalar")
        p.add_argument("--target", type=_target_arg, default="sum")
        p.add_argument("--model", choices=list(harness.MODEL_KINDS), default="laf")
        p.add_argument("--units", type=_positive, default=9)
        p.add_argument("--epochs", type=int, default=30)
        p.add_argument("--batch-size", type=_positive, default=64)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--train-size", type=_positive, default=10000)
        p.add_argument("--val-size", type=_positive, default=2000)
        p.add_argument("--config", help="JSON config file (overrides flags)")
        p.add_argument("--out", required=True, help="run directory")
        if with_sweep:
            p.add_argument("--Ms", type=_int_list, default=None,
                           help="test cardinalities, e.g. 5,10,50")
            p.add_argument("--per-m-n", type=_positive, default=10000,
                           dest="per_m_n", help="test sets per cardinality")

    p = sub.add_parser("train", parents=[common], help="train one model")
    add_train_flags(p, with_sweep=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a saved run across cardinalities")
    p.add_argument("--run", required=True, help="run directory to load")
    p.add_argument("--Ms", type=_int_list, default=None)
    p.add_argument("--per-m-n", type=_positive, default=10000, dest="per_m_n")
    p.add_argument("--out", default=None, help="output directory (default: run dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common],
                       help="train then evaluate across cardinalities")
    add_train_flags(p, with_sweep=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("study", parents=[common],
                       help="restart study: solution spread per unit count")
    p.add_argument("--target", type=_target_arg, default="count")
    p.add_argument("--units", type=_int_list, default=[1, 3, 6, 9])
    p.add_argument("--restarts", type=_positive, default=20)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=_positive, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--train-size", type=_positive, default=2000)
    p.add_argument("--val-size", type=_positive, default=500)
    p.add_argument("--test-size", type=_positive, default=1000)
    p.add_argument("--jobs", type=_positive, default=1)
    p.add_argument("--out", required=True, help="study directory")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("preset-check", parents=[common],
                       help="verify preset parameterizations against brute force")
    p.add_argument("--out", default=None, help="optional report file")
    p.set_defaults(func=cmd_preset_check)

    p = sub.add_parser("grad-check", parents=[common],
                       help="finite-difference check of analytic gradients")
    p.add_argument("--out", default=None, help="optional report file")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("inspect", parents=[common],
                       help="print the learned aggregators of a saved run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None, help="optional report file")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    except (OSError, IdxFormatError, VersionError, json.JSONDecodeError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
