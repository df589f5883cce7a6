"""``lkgp`` command line: fit, predict, eval, bench, synth.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import tracemalloc
from contextlib import contextmanager

import numpy as np

from . import data_io
from .model import FitConfig, fit, gaussian_metrics, predict, resolve_backend
from .structured_linalg import CgConfig, DenseCapError, NumericalBreakdownError

logger = logging.getLogger("lkgp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

BENCH_COLUMNS = ["size", "backend", "fit_seconds", "predict_seconds", "peak_tracked_bytes", "status"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


@contextmanager
def track_peak_bytes():
    """Peak bytes allocated inside the block, numpy buffers included.

    Yields a dict whose ``peak`` entry is filled when the block exits.
    """
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    base, _ = tracemalloc.get_traced_memory()
    tracemalloc.reset_peak()
    out = {"peak": 0}
    try:
        yield out
    finally:
        _, peak = tracemalloc.get_traced_memory()
        out["peak"] = max(peak - base, 0)
        if started:
            tracemalloc.stop()


def _fit_config(args):
    return FitConfig(
        backend=args.backend,
        cg=CgConfig(args.cg_tol, args.cg_max_iters),
        num_probes=args.probes,
        max_lbfgs_iters=args.lbfgs_iters,
        restarts=args.restarts,
        seed=args.seed,
    )


def cmd_fit(args):
    ds = data_io.read_csv(args.data)
    data, scalers = data_io.to_training_data(ds)
    model = fit(data, _fit_config(args), scalers=scalers)
    data_io.save_model(model, args.out)
    report = dict(model.fit_report)
    report.update({"n": data.n, "m": data.m, "d": data.d, "p": data.mask.count,
                   "params": model.params.to_vector().tolist()})
    text = json.dumps(report, indent=1)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_predict(args):
    model = data_io.load_model(args.model)
    ids, X, steps_by_id = data_io.read_targets(args.targets)
    if X.shape[1] != model.data.d:
        raise data_io.DataError(
            f"targets have {X.shape[1]} hyperparameters, model expects {model.data.d}"
        )
    if model.data.steps is not None:
        grid = model.data.steps
    elif model.scalers is not None:
        grid = model.scalers.progression.inverse_transform(model.data.t)
    else:
        grid = model.data.t
    if steps_by_id is not None:
        grid = np.unique(np.concatenate([np.asarray(s, dtype=float) for s in steps_by_id.values()]))

    result = predict(model, X, grid, num_samples=args.samples, seed=args.seed,
                     keep_samples=args.write_samples)
    rows, sample_rows = [], []
    for i, cid in enumerate(ids):
        wanted = grid if steps_by_id is None else steps_by_id[cid]
        for step in wanted:
            j = int(np.searchsorted(grid, step))
            rows.append((cid, grid[j], result.mean[i, j], result.variance[i, j]))
            if args.write_samples:
                sample_rows.append(result.samples.samples[:, i, j])
    data_io.write_predictions(args.out, rows, sample_rows if args.write_samples else None)
    logger.info("wrote %d predictions to %s", len(rows), args.out)
    return EXIT_OK


def cmd_eval(args):
    preds = data_io.read_predictions(args.pred)
    truth = data_io.read_truth(args.truth)
    by_key = {(cid, step): (mean, var) for cid, step, mean, var in preds}
    final = {}
    for cid, step, mean, var in preds:
        if cid not in final or step > final[cid][0]:
            final[cid] = (step, mean, var)

    means, variances, values, missing = [], [], [], []
    for cid, step, value in truth:
        if step is None:
            hit = final.get(cid)
            hit = None if hit is None else hit[1:]
        else:
            hit = by_key.get((cid, step))
        if hit is None:
            missing.append(cid if step is None else f"{cid}@{step!r}")
            continue
        means.append(hit[0])
        variances.append(hit[1])
        values.append(value)
    if missing:
        raise data_io.DataError(f"truth rows without predictions: {', '.join(missing)}")
    mse, llh = gaussian_metrics(means, variances, values)
    print(json.dumps({"mse": mse, "llh": llh, "count": len(values)}))
    return EXIT_OK


def _bench_cell(size, d, backend, args, ds_seed):
    ds = data_io.synth_benchmark(size, size, d, seed=ds_seed)
    config = FitConfig(
        backend=backend, cg=CgConfig(args.cg_tol, args.cg_max_iters), num_probes=args.probes,
        max_lbfgs_iters=args.lbfgs_iters, seed=args.seed,
    )
    if backend == "exact" and size * size > config.dense_cap:
        return {"fit_seconds": "", "predict_seconds": "", "peak_tracked_bytes": "",
                "status": f"refused: p={size * size} exceeds dense cap {config.dense_cap}"}

    with track_peak_bytes() as fit_mem:
        start = time.perf_counter()
        data, scalers = data_io.to_training_data(ds)
        model = fit(data, config, scalers=scalers)
        fit_seconds = time.perf_counter() - start

    rng = np.random.default_rng(args.seed + 1)
    n_test = args.test_configs
    if args.max_seconds is not None:
        probe_X = rng.uniform(0.0, 1.0, size=(min(16, n_test), d))
        start = time.perf_counter()
        predict(model, probe_X, ds.grid, num_samples=args.samples, seed=args.seed)
        per_config = (time.perf_counter() - start) / probe_X.shape[0]
        budget = max(args.max_seconds - fit_seconds, 0.0)
        if per_config * n_test > budget:
            n_test = max(int(budget / max(per_config, 1e-12)), 2)
            logger.warning("size %d: scaling test configs down to %d for the time budget", size, n_test)
    test_X = rng.uniform(0.0, 1.0, size=(n_test, d))
    with track_peak_bytes() as pred_mem:
        start = time.perf_counter()
        predict(model, test_X, ds.grid, num_samples=args.samples, seed=args.seed)
        predict_seconds = time.perf_counter() - start

    status = "ok" if n_test == args.test_configs else f"ok: {n_test} test configs"
    if model.fit_report.get("cg_nonconverged_evaluations"):
        status += "; cg non-convergence during fit"
    return {
        "fit_seconds": f"{fit_seconds:.4f}",
        "predict_seconds": f"{predict_seconds:.4f}",
        "peak_tracked_bytes": max(fit_mem["peak"], pred_mem["peak"]),
        "status": status,
    }


def run_bench(args, out):
    sizes = args.sizes
    if sizes != sorted(sizes):
        raise data_io.DataError("--sizes must be ascending")
    writer = csv.DictWriter(out, BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    rows = []
    for size in sizes:
        for backend in args.backends:
            resolve_backend(backend, 1)
            logger.info("bench size=%d backend=%s", size, backend)
            try:
                cell = _bench_cell(size, args.d, backend, args, args.seed)
            except (DenseCapError, MemoryError, NumericalBreakdownError, np.linalg.LinAlgError) as exc:
                cell = {"fit_seconds": "", "predict_seconds": "", "peak_tracked_bytes": "",
                        "status": f"failed: {type(exc).__name__}: {exc}"}
            row = {"size": size, "backend": backend, **cell}
            writer.writerow(row)
            out.flush()
            rows.append(row)
    return rows


def cmd_bench(args):
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            run_bench(args, fh)
    else:
        run_bench(args, sys.stdout)
    return EXIT_OK


def cmd_synth(args):
    if args.kind == "curves":
        ds, truth = data_io.synth_curves(
            args.n, args.m, args.d, noise=args.noise, missing_fraction=args.missing_fraction,
            seed=args.seed,
        )
        if args.truth:
            data_io.write_truth(args.truth, truth)
    else:
        ds = data_io.synth_benchmark(args.n, args.m, args.d, seed=args.seed)
    data_io.write_csv(ds, args.out)
    return EXIT_OK


def _add_fit_flags(p):
    p.add_argument("--backend", choices=["auto", "exact", "iterative"], default="auto")
    p.add_argument("--cg-tol", type=float, default=0.01)
    p.add_argument("--cg-max-iters", type=int, default=10000)
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--lbfgs-iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = _Parser(prog="lkgp", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a model to a curves CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="also write the fit report JSON here")
    p.add_argument("--restarts", type=int, default=0, help="extra randomized L-BFGS starts")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict curves for target configs")
    p.add_argument("--model", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--write-samples", action="store_true", help="add s0..s{S-1} columns")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="MSE and log-likelihood of predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time/memory scaling benchmark on synthetic data")
    p.add_argument("--sizes", type=_int_list, default=[16, 32, 64, 128, 256])
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--backends", type=_str_list, default=["exact", "iterative"])
    p.add_argument("--test-configs", type=int, default=512)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--max-seconds", type=float, default=None)
    p.add_argument("--out")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic curves CSV")
    p.add_argument("kind", choices=["curves", "benchmark"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--missing-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="write hidden final values (curves only)")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except data_io.DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalBreakdownError, DenseCapError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
