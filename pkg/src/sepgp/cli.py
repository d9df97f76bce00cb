"""Command-line interface: ``sepgp {train,predict,eval,benchmark,distributed}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on bad usage.
Options given on the command line override those in ``--config``, which
override the built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds
from .distributed import DistributedError, SocketPool, distributed_train, run_worker, PROTOCOL
from .kernel import KernelError
from .predictor import predict_latent
from .probit import phi
from .trainer import CheckpointError, TrainConfig, checkpoint, restore, train

RUNTIME_ERRORS = (OSError, ValueError, ds.DataError, CheckpointError, KernelError,
                  DistributedError, np.linalg.LinAlgError)

# config-file/flag keys that feed TrainConfig
TRAIN_KEYS = ("mode", "m", "iterations", "damping", "batch_size", "seed", "optimizer", "tol",
              "checkpoint_every", "scheme", "max_sweeps", "early_stop", "learning_rate",
              "eval_every", "refresh", "workers", "threads", "freeze", "standardize")
EXTRA_KEYS = ("m_fraction", "test_fraction")


class UsageError(Exception):
    pass


def load_data(spec: str, label_col: int | None, seed: int = 0) -> ds.Dataset:
    """``builtin:pima``, ``builtin:blobs:N`` or a CSV path."""
    if spec == "builtin:pima":
        return ds.load_pima()
    if spec.startswith("builtin:blobs"):
        parts = spec.split(":")
        n = int(parts[2]) if len(parts) > 2 else 1000
        return ds.make_blobs(n, seed=seed)
    if spec.startswith("builtin:"):
        raise UsageError(f"unknown builtin dataset {spec!r}")
    if not Path(spec).is_file():
        raise FileNotFoundError(f"data file not found: {spec}")
    return ds.load_csv(spec, -1 if label_col is None else label_col)


def _add_train_flags(p, required=True):
    p.add_argument("--data", required=required, help="CSV path, builtin:pima or builtin:blobs:N")
    p.add_argument("--label-col", type=int, default=None, help="label column (default: last)")
    p.add_argument("--test", default=None, help="held-out CSV (same layout as --data)")
    p.add_argument("--test-fraction", type=float, default=None,
                   help="hold out this fraction of --data for evaluation")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--m", type=int, default=None, help="number of inducing points")
    g.add_argument("--m-fraction", type=float, default=None,
                   help="inducing points as a fraction of training rows")
    p.add_argument("--mode", choices=("batch", "stochastic", "distributed"), default=None)
    p.add_argument("--iters", dest="iterations", type=int, default=None,
                   help="iterations (epochs in stochastic mode)")
    p.add_argument("--damping", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--optimizer", choices=("adaptive", "adadelta"), default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--scheme", choices=("inner", "outer"), default=None)
    p.add_argument("--refresh", choices=("stale", "exact"), default=None)
    p.add_argument("--workers", "--k", dest="workers", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--freeze", default=None,
                   help="comma-separated groups: lengthscales,amplitude,noise,inducing")
    p.add_argument("--early-stop", action="store_true", default=None)
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--config", default=None, help="JSON file with training options")
    p.add_argument("--out", required=required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepgp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    _add_train_flags(sub.add_parser("train", help="fit a model and write model.json, curve.csv"))

    p = sub.add_parser("predict", help="class probabilities for new inputs")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="CSV of inputs (unlabeled unless --label-col is given)")
    src.add_argument("--grid", help="xmin,xmax,ymin,ymax,steps for 2-D inputs")
    p.add_argument("--label-col", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="error rate and negative log-likelihood on labeled data")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label-col", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("benchmark", help="repeated random splits over several m fractions")
    p.add_argument("--data", default="builtin:pima")
    p.add_argument("--label-col", type=int, default=None)
    p.add_argument("--fractions", default="0.15,0.25,0.5")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--iters", type=int, default=250)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0, help="repetition r uses seed + r")
    p.add_argument("--out", required=True)

    p = sub.add_parser("distributed", help="master/worker training")
    p.add_argument("--role", choices=("local-pool", "master", "worker"), required=True)
    p.add_argument("--listen", default="127.0.0.1:0", help="master address host:port")
    p.add_argument("--connect", default=None, help="worker: master address host:port")
    p.add_argument("--protocol", default=PROTOCOL, help=argparse.SUPPRESS)
    p.add_argument("--timeout", type=float, default=None, help="per-round timeout in seconds")
    _add_train_flags(p, required=False)
    return parser


def _parse_addr(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"address must look like host:port, got {text!r}")
    return host, int(port)


def resolve_config(args) -> tuple[dict, dict]:
    """Merge defaults, the JSON config file and explicit flags."""
    doc = {}
    extra = {}
    if args.config:
        with open(args.config) as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(loaded) - set(TRAIN_KEYS) - set(EXTRA_KEYS)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
        for k, v in loaded.items():
            (doc if k in TRAIN_KEYS else extra)[k] = v
    for key in TRAIN_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    if isinstance(doc.get("freeze"), str):
        doc["freeze"] = [g for g in doc["freeze"].split(",") if g]
    for key in EXTRA_KEYS:
        if getattr(args, key, None) is not None:
            extra[key] = getattr(args, key)
    if getattr(args, "no_standardize", False):
        doc["standardize"] = False
    return doc, extra


def _prepare_run(args):
    doc, extra = resolve_config(args)
    seed = doc.get("seed", 0)
    data = load_data(args.data, args.label_col, seed)
    test = None
    if args.test:
        test = load_data(args.test, args.label_col, seed + 1)
    elif extra.get("test_fraction"):
        data, test = ds.split(data, extra["test_fraction"], seed)
    if "m" not in doc:
        frac = extra.get("m_fraction")
        doc["m"] = max(1, int(round(frac * data.n))) if frac else min(data.n, 50)
    try:
        config = TrainConfig(**doc)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    return config, data, test


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report(model, curve, test):
    print(f"iterations: {model.metadata.get('iterations')}")
    print(f"final log Z_q: {model.metadata.get('final_log_zq'):.6f}")
    if test is not None:
        rep = model.evaluate(test)
        print(f"test error: {rep.error_rate:.4f}")
        print(f"test NLL: {rep.avg_neg_log_likelihood:.4f}")


def cmd_train(args) -> int:
    config, data, test = _prepare_run(args)
    out = _out_dir(args.out)
    config.checkpoint_path = str(out / "model.json")
    model, curve = train(data, config, test=test)
    checkpoint(model, out / "model.json")
    curve.to_csv(out / "curve.csv")
    _report(model, curve, test)
    return 0


def _grid(spec):
    try:
        x0, x1, y0, y1, steps = spec.split(",")
        steps = int(steps)
        xs = np.linspace(float(x0), float(x1), steps)
        ys = np.linspace(float(y0), float(y1), steps)
    except ValueError:
        raise UsageError("--grid expects xmin,xmax,ymin,ymax,steps") from None
    if steps < 1:
        raise UsageError("--grid needs at least one step")
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def cmd_predict(args) -> int:
    if args.grid:
        X = _grid(args.grid)
    elif args.label_col is not None:
        X = ds.load_csv(args.data, args.label_col).X
    else:
        X = ds.load_features(args.data)
    model = restore(args.model)
    if X.shape[1] != model.hyper.d:
        raise ds.DataError(f"inputs have {X.shape[1]} columns, the model expects {model.hyper.d}")
    out = _out_dir(args.out)
    pred = predict_latent(model.standardization.apply(X), model)
    p_plus = phi(pred.mean / np.sqrt(pred.variance + 1.0))
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["index", "p_plus", "label_pred", "m_star", "s_star"]
        if args.grid:
            cols += ["x0", "x1"]
        w.writerow(cols)
        for i in range(X.shape[0]):
            row = [i, repr(float(p_plus[i])), 1 if pred.mean[i] >= 0 else -1,
                   repr(float(pred.mean[i])), repr(float(pred.variance[i]))]
            if args.grid:
                row += [repr(float(X[i, 0])), repr(float(X[i, 1]))]
            w.writerow(row)
    print(f"wrote {X.shape[0]} predictions to {out / 'predictions.csv'}")
    return 0


def cmd_eval(args) -> int:
    model = restore(args.model)
    data = load_data(args.data, args.label_col)
    rep = model.evaluate(data)
    print(f"n: {rep.n_test}")
    print(f"error rate: {rep.error_rate:.4f}")
    print(f"avg NLL: {rep.avg_neg_log_likelihood:.4f}")
    if args.out:
        out = _out_dir(args.out)
        with open(out / "eval.json", "w") as fh:
            json.dump({"error_rate": rep.error_rate, "avg_nll": rep.avg_neg_log_likelihood,
                       "n_test": rep.n_test}, fh, indent=2)
    return 0


def run_benchmark(data, fractions, reps, iterations, test_fraction, seed0):
    """Rows ``(repetition, seed, m_fraction, test_nll, test_error, seconds)``."""
    rows = []
    for frac in fractions:
        for r in range(reps):
            seed = seed0 + r
            train_set, test_set = ds.split(data, test_fraction, seed)
            m = max(1, int(round(frac * train_set.n)))
            config = TrainConfig(m=m, iterations=iterations, seed=seed)
            t0 = time.perf_counter()
            model, _ = train(train_set, config)
            secs = time.perf_counter() - t0
            rep = model.evaluate(test_set)
            rows.append((r, seed, frac, rep.avg_neg_log_likelihood, rep.error_rate, secs))
    return rows


def cmd_benchmark(args) -> int:
    try:
        fractions = [float(f) for f in args.fractions.split(",") if f]
    except ValueError:
        raise UsageError("--fractions expects comma-separated numbers") from None
    if args.reps < 1:
        raise UsageError("--reps must be positive")
    data = load_data(args.data, args.label_col, args.seed)
    out = _out_dir(args.out)
    rows = run_benchmark(data, fractions, args.reps, args.iters, args.test_fraction, args.seed)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["repetition", "seed", "m_fraction", "test_nll", "test_error", "seconds"])
        for row in rows:
            w.writerow([row[0], row[1], row[2], repr(row[3]), repr(row[4]), f"{row[5]:.3f}"])
    for frac in fractions:
        nll = [r[3] for r in rows if r[2] == frac]
        err = [r[4] for r in rows if r[2] == frac]
        print(f"m={frac:.0%}: NLL {np.mean(nll):.3f} +- {np.std(nll):.3f}, "
              f"error {np.mean(err):.3f}")
    return 0


def cmd_distributed(args) -> int:
    if args.role == "worker":
        if not args.connect:
            raise UsageError("--role worker needs --connect host:port")
        host, port = _parse_addr(args.connect)
        run_worker(host, port, protocol=args.protocol)
        return 0
    if not args.data or not args.out:
        raise UsageError(f"--role {args.role} needs --data and --out")
    config, data, test = _prepare_run(args)
    config.mode = "distributed"
    out = _out_dir(args.out)
    config.checkpoint_path = str(out / "model.json")
    transport = None
    if args.role == "master":
        host, port = _parse_addr(args.listen)
        transport = SocketPool(config.workers, host, port, timeout=args.timeout)
        print(f"listening on {transport.address[0]}:{transport.address[1]}", flush=True)
    try:
        model, curve = distributed_train(data, config, test=test, transport=transport,
                                         timeout=args.timeout)
    finally:
        if transport is not None:
            transport.close()
    checkpoint(model, out / "model.json")
    curve.to_csv(out / "curve.csv")
    _report(model, curve, test)
    return 0


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "benchmark": cmd_benchmark, "distributed": cmd_distributed}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sepgp: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"sepgp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
