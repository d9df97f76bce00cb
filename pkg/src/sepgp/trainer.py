"""Training loops: batch, minibatch-stochastic and (via ``distributed``) multi-worker.

Batch training interleaves one damped parallel sweep over all sites with one
hyper-parameter step per iteration. Stochastic training refines one minibatch
of sites at a time and takes an ADADELTA step on a scaled gradient estimate.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import dataset as ds
from .ep import (
    PosteriorApprox,
    SiteFactors,
    cavities,
    init_sites,
    parallel_sweep,
    posterior_from_aggregates,
    reconstruct,
    run_ep,
    site_update,
)
from .kernel import Hyperparameters, KernelError, build_bundle, initial_hyperparameters
from .objective import log_Zq, objective_and_gradient, stochastic_grad
from .optimizer import make_optimizer, optimizer_from_dict
from .predictor import EvalReport, evaluate, predict_latent, predict_proba

__all__ = [
    "TrainConfig",
    "Model",
    "LearningCurve",
    "CheckpointError",
    "train",
    "train_batch",
    "train_stochastic",
    "checkpoint",
    "restore",
    "FREEZE_GROUPS",
]

CHECKPOINT_VERSION = 1
FREEZE_GROUPS = ("lengthscales", "amplitude", "noise", "inducing")


class CheckpointError(ValueError):
    """A checkpoint file is unreadable, truncated or from another format version."""


@dataclass
class TrainConfig:
    mode: str = "batch"
    m: int = 10
    iterations: int = 250
    damping: float | None = None
    batch_size: int | None = None
    seed: int = 0
    optimizer: str | None = None
    tol: float = 1e-5
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    # "inner": one sweep per hyper-step; "outer": run EP to convergence before each step
    scheme: str = "inner"
    max_sweeps: int = 500
    learn_hyper: bool = True
    freeze: tuple = ()
    early_stop: bool = False
    standardize: bool = True
    learning_rate: float = 1e-2
    eval_every: int = 1
    # stochastic mode: "stale" keeps each site's projection from when it was refined,
    # "exact" rebuilds all site aggregates under the current kernel every minibatch
    refresh: str = "stale"
    workers: int = 1
    threads: int | None = None

    def __post_init__(self):
        self.freeze = tuple(self.freeze)
        self.validate()

    def validate(self):
        if self.mode not in ("batch", "stochastic", "distributed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.m < 1:
            raise ValueError("need at least one inducing point")
        if self.damping is not None and not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if self.scheme not in ("inner", "outer"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.refresh not in ("stale", "exact"):
            raise ValueError(f"unknown refresh policy {self.refresh!r}")
        if self.optimizer not in (None, "adaptive", "adadelta"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        bad = set(self.freeze) - set(FREEZE_GROUPS)
        if bad:
            raise ValueError(f"unknown freeze groups {sorted(bad)}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")

    @property
    def rho(self) -> float:
        if self.damping is not None:
            return self.damping
        return 0.9 if self.mode == "stochastic" else 0.5

    @property
    def optimizer_kind(self) -> str:
        if self.optimizer is not None:
            return self.optimizer
        return "adadelta" if self.mode == "stochastic" else "adaptive"

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["freeze"] = list(self.freeze)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown configuration keys {sorted(unknown)}")
        return cls(**doc)


@dataclass(eq=False)
class Model:
    """Everything needed to predict: kernel, sites, posterior and input scaling.

    ``bundle`` carries the inducing-point factorization the posterior was built
    with; prediction functions in :mod:`sepgp.predictor` expect standardized
    inputs, the methods here accept raw ones.
    """

    hyper: Hyperparameters
    sites: SiteFactors
    posterior: PosteriorApprox
    standardization: ds.Standardization
    bundle: object
    metadata: dict = field(default_factory=dict)
    optimizer_state: dict | None = None

    def predict_latent(self, X):
        return predict_latent(self.standardization.apply(np.atleast_2d(X)), self)

    def predict_proba(self, X):
        return predict_proba(self.standardization.apply(np.atleast_2d(X)), self)

    def evaluate(self, test: ds.Dataset) -> EvalReport:
        return evaluate(self, self.standardization.apply(test.X), test.y)

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "hyper": self.hyper.to_dict(),
            "sites": self.sites.to_dict(),
            "standardization": self.standardization.to_dict(),
            "metadata": self.metadata,
            "aggregates": {"precision": self.posterior.precision.tolist(),
                           "linear": self.posterior.linear.tolist()},
            "optimizer": self.optimizer_state,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Model":
        if not isinstance(doc, dict) or "version" not in doc:
            raise CheckpointError("not a model checkpoint")
        if doc["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {doc['version']} is not supported "
                f"(expected {CHECKPOINT_VERSION})")
        try:
            hyper = Hyperparameters.from_dict(doc["hyper"])
            sites = SiteFactors.from_dict(doc["sites"])
            st = ds.Standardization.from_dict(doc["standardization"])
            A = np.asarray(doc["aggregates"]["precision"], dtype=float)
            b = np.asarray(doc["aggregates"]["linear"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from None
        if A.shape != (hyper.m, hyper.m) or b.shape != (hyper.m,):
            raise CheckpointError("aggregate shapes do not match the inducing set")
        return _assemble(hyper, sites, A, b, st, doc.get("metadata") or {}, doc.get("optimizer"))


def _assemble(hyper, sites, A, b, standardization, metadata, optimizer_state=None) -> Model:
    bundle = build_bundle(np.empty((0, hyper.d)), hyper)
    post = posterior_from_aggregates(bundle, A, b)
    return Model(hyper, sites, post, standardization, bundle, metadata, optimizer_state)


def checkpoint(model: Model, path) -> None:
    """Write ``model`` as a single JSON document, atomically."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(model.to_dict(), fh)
    os.replace(tmp, path)


def restore(path) -> Model:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc.msg})") from None
    return Model.from_dict(doc)


@dataclass
class LearningCurve:
    iteration: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    log_zq: list = field(default_factory=list)
    test_error: list = field(default_factory=list)
    test_nll: list = field(default_factory=list)

    HEADER = ("iteration", "seconds", "log_zq", "test_error", "test_nll")

    def __len__(self):
        return len(self.iteration)

    def append(self, iteration, seconds, log_zq, test_error=None, test_nll=None):
        if self.iteration and iteration <= self.iteration[-1]:
            raise ValueError("learning-curve iterations must increase")
        self.iteration.append(int(iteration))
        self.seconds.append(float(seconds))
        self.log_zq.append(float(log_zq))
        self.test_error.append(math.nan if test_error is None else float(test_error))
        self.test_nll.append(math.nan if test_nll is None else float(test_nll))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for row in zip(self.iteration, self.seconds, self.log_zq, self.test_error,
                           self.test_nll):
                w.writerow([row[0]] + ["" if math.isnan(v) else repr(v) for v in row[1:]])

    @classmethod
    def from_csv(cls, path) -> "LearningCurve":
        curve = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            if tuple(next(reader)) != cls.HEADER:
                raise ValueError(f"{path}: unexpected learning-curve header")
            for row in reader:
                vals = [float(v) if v else None for v in row[1:]]
                curve.append(int(row[0]), *vals)
        return curve


# ---------------------------------------------------------------------------


def _freeze_mask(hyper: Hyperparameters, groups) -> np.ndarray:
    mask = np.ones(hyper.size, dtype=bool)
    d = hyper.d
    if "lengthscales" in groups:
        mask[:d] = False
    if "amplitude" in groups:
        mask[hyper.amplitude_index] = False
    if "noise" in groups:
        mask[hyper.noise_index] = False
    if "inducing" in groups:
        mask[d + 2:] = False
    return mask


def _initial_rates(hyper: Hyperparameters, X, rate: float) -> np.ndarray:
    sd = X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.ones(hyper.d)
    sd = np.where(sd > 0, sd, 1.0)
    return np.concatenate([np.full(hyper.d + 2, rate), np.tile(rate * sd, hyper.m)])


def _prepare(data: ds.Dataset, config: TrainConfig, init: Model | None):
    """Standardized training data, starting hyper-parameters, sites and optimizer."""
    if init is not None:
        st = init.standardization
        train = ds.Dataset(st.apply(data.X), data.y)
        hyper = init.hyper.copy()
        if init.sites.n != data.n:
            raise ValueError(f"model has {init.sites.n} sites but the data has {data.n} rows")
        sites = init.sites.copy()
    else:
        train, st = ds.standardize(data, config.standardize)
        if config.m > train.n:
            raise ValueError(f"m={config.m} exceeds the number of training rows {train.n}")
        Z = ds.init_inducing(train, config.m, config.seed)
        hyper = initial_hyperparameters(train.X, Z, seed=config.seed)
        sites = init_sites(train.n)
    opt = None
    if init is not None and init.optimizer_state is not None:
        if init.optimizer_state.get("kind") == config.optimizer_kind:
            opt = optimizer_from_dict(init.optimizer_state)
    if opt is None:
        rates = _initial_rates(hyper, train.X, config.learning_rate)
        opt = make_optimizer(config.optimizer_kind, hyper.size, rates=rates)
    return train, st, hyper, sites, opt


def _snapshot(hyper, sites, post, bundle, st, metadata, opt) -> Model:
    inducing = bundle.with_rows(np.empty((0, hyper.d)))
    return Model(hyper, sites, post, st, inducing, dict(metadata), opt.to_dict())


def _test_metrics(model: Model, test):
    if test is None:
        return None, None
    rep = evaluate(model, test.X, test.y)
    return rep.error_rate, rep.avg_neg_log_likelihood


def _standardize_test(test, st):
    if test is None:
        return None
    return ds.Dataset(st.apply(test.X), test.y)


def train(data: ds.Dataset, config: TrainConfig, test=None, init=None, callback=None):
    """Dispatch on ``config.mode``."""
    if config.mode == "batch":
        return train_batch(data, config, test, init, callback)
    if config.mode == "stochastic":
        return train_stochastic(data, config, test, init, callback)
    from .distributed import distributed_train
    return distributed_train(data, config, test, init, callback)


def train_batch(data: ds.Dataset, config: TrainConfig, test: ds.Dataset | None = None,
                init: Model | None = None, callback=None):
    """Batch training; returns ``(Model, LearningCurve)``.

    ``test`` (raw features) enables held-out metrics every ``config.eval_every``
    iterations. ``callback(iteration, curve)`` may return True to stop early.
    """
    train_set, st, hyper, sites, opt = _prepare(data, config, init)
    test_std = _standardize_test(test, st)
    X, y = train_set.X, train_set.y.astype(float)
    mask = _freeze_mask(hyper, config.freeze)
    rho = config.rho
    bundle = build_bundle(X, hyper)
    post = reconstruct(bundle, sites)
    curve = LearningCurve()
    meta = {"mode": "batch", "scheme": config.scheme, "seed": config.seed, "m": hyper.m,
            "n_sweeps": 0, "iterations": 0, "final_log_zq": None}
    elapsed = 0.0
    for it in range(1, config.iterations + 1):
        t0 = time.perf_counter()
        if config.scheme == "outer":
            sites, post, n, _ = run_ep(bundle, y, sites, rho, config.tol, config.max_sweeps)
            meta["n_sweeps"] += n
            change = 0.0
        else:
            res = parallel_sweep(bundle, sites, post, y, rho)
            sites, post, change = res.sites, res.posterior, res.max_change
            meta["n_sweeps"] += 1
        report, grad = objective_and_gradient(bundle, sites, post, y)
        grad = np.where(mask, grad, 0.0)
        if config.learn_hyper:
            step = opt.step(grad)
            new_hyper = hyper.with_vector(hyper.to_vector() + step)
            try:
                bundle = build_bundle(X, new_hyper)
            except KernelError:
                meta.update(iterations=it - 1, final_log_zq=report.log_Zq, failed=True)
                if config.checkpoint_path:
                    checkpoint(_snapshot(hyper, sites, post, bundle, st, meta, opt),
                               config.checkpoint_path)
                raise
            hyper = new_hyper
            post = reconstruct(bundle, sites)
        assert post.bundle_version == bundle.version
        elapsed += time.perf_counter() - t0

        meta.update(iterations=it, final_log_zq=report.log_Zq)
        last = it == config.iterations
        err = nll = None
        if test_std is not None and (it % config.eval_every == 0 or last):
            err, nll = _test_metrics(_snapshot(hyper, sites, post, bundle, st, meta, opt),
                                     test_std)
        curve.append(it, elapsed, report.log_Zq, err, nll)
        if config.checkpoint_every and config.checkpoint_path and it % config.checkpoint_every == 0:
            checkpoint(_snapshot(hyper, sites, post, bundle, st, meta, opt),
                       config.checkpoint_path)
        stop = callback is not None and callback(it, curve)
        gnorm = np.linalg.norm(grad) if config.learn_hyper else 0.0
        if config.early_stop and change < config.tol and gnorm < config.tol:
            stop = True
        if stop:
            break
    meta["seconds"] = elapsed
    return _snapshot(hyper, sites, post, bundle, st, meta, opt), curve


def train_stochastic(data: ds.Dataset, config: TrainConfig, test: ds.Dataset | None = None,
                     init: Model | None = None, callback=None):
    """Minibatch training; ``config.iterations`` counts epochs.

    All ``n`` site triples stay resident. With ``refresh="stale"`` each site
    remembers the projection vector ``Kmm^{-1} k_i`` from the kernel it was
    last refined under, and the posterior is rebuilt in O(m^3) from running
    sums of those rank-one terms. Learning-curve rows are indexed by minibatch.
    """
    train_set, st, hyper, sites, opt = _prepare(data, config, init)
    test_std = _standardize_test(test, st)
    X, y = train_set.X, train_set.y.astype(float)
    n = train_set.n
    mask = _freeze_mask(hyper, config.freeze)
    rho = config.rho
    bsize = config.batch_size or min(n, hyper.m)
    sched = ds.MinibatchSchedule(n, bsize, seed=config.seed, n_inducing=hyper.m)
    exact = config.refresh == "exact"

    # stale projection vectors, one row per site, and their weighted sums
    if init is not None and np.any(sites.nu):
        U = build_bundle(X, hyper).upsilon.T.copy()
    else:
        U = np.zeros((n, hyper.m))
    P = U.T @ (sites.nu[:, None] * U)
    h = U.T @ sites.mu

    curve = LearningCurve()
    meta = {"mode": "stochastic", "refresh": config.refresh, "seed": config.seed, "m": hyper.m,
            "batch_size": bsize, "epochs": 0, "iterations": 0, "final_log_zq": None}
    elapsed = 0.0
    step_no = 0
    stop = False
    bundle = None
    for epoch in range(config.iterations):
        for B in sched.batches():
            t0 = time.perf_counter()
            step_no += 1
            if exact:
                full = build_bundle(X, hyper)
                bundle = full.with_rows(X[B])
                post = reconstruct(full, sites)
                removal = None
            else:
                bundle = build_bundle(X[B], hyper)
                K = bundle.Kmm
                post = posterior_from_aggregates(bundle, K @ P @ K, K @ h)
                removal = U[B].T
            local = sites.subset(B)
            cav = cavities(bundle, post, local, removal=removal)
            up = site_update(cav, y[B], rho, local.nu, local.mu, local.log_s)
            if not exact:
                Ub = bundle.upsilon.T
                P += Ub.T @ (up.nu[:, None] * Ub) - U[B].T @ (local.nu[:, None] * U[B])
                h += Ub.T @ up.mu - U[B].T @ local.mu
                U[B] = Ub
            sites.nu[B], sites.mu[B], sites.log_s[B] = up.nu, up.mu, up.log_s
            batch_sites = sites.subset(B)
            if exact:
                post = reconstruct(full, sites)
            else:
                P = 0.5 * (P + P.T)
                post = posterior_from_aggregates(bundle, K @ P @ K, K @ h)
            rep = log_Zq(bundle, batch_sites, post, y[B])
            proxy = rep.prior_terms + n / len(B) * float(np.sum(rep.per_site_log_Ztilde))
            grad = np.where(mask, stochastic_grad(bundle, batch_sites, post, y[B], n), 0.0)
            if config.learn_hyper:
                new_hyper = hyper.with_vector(hyper.to_vector() + opt.step(grad))
                try:
                    build_bundle(np.empty((0, hyper.d)), new_hyper)
                except KernelError:
                    meta.update(iterations=step_no - 1, failed=True)
                    if config.checkpoint_path:
                        model = _final_stochastic(hyper, sites, P, h, X, exact, st, meta, opt)
                        checkpoint(model, config.checkpoint_path)
                    raise
                hyper = new_hyper
            elapsed += time.perf_counter() - t0

            meta.update(iterations=step_no, final_log_zq=proxy, epochs=epoch + 1)
            err = nll = None
            if test_std is not None and step_no % config.eval_every == 0:
                model = _final_stochastic(hyper, sites, P, h, X, exact, st, meta, opt)
                err, nll = _test_metrics(model, test_std)
            curve.append(step_no, elapsed, proxy, err, nll)
            if config.checkpoint_every and config.checkpoint_path \
                    and step_no % config.checkpoint_every == 0:
                checkpoint(_final_stochastic(hyper, sites, P, h, X, exact, st, meta, opt),
                           config.checkpoint_path)
            if callback is not None and callback(step_no, curve):
                stop = True
                break
        if stop:
            break
        if not exact:
            # drop accumulated rounding from the incremental updates
            P = U.T @ (sites.nu[:, None] * U)
            h = U.T @ sites.mu
    meta["seconds"] = elapsed
    return _final_stochastic(hyper, sites, P, h, X, exact, st, meta, opt), curve


def _final_stochastic(hyper, sites, P, h, X, exact, st, meta, opt) -> Model:
    if exact:
        full = build_bundle(X, hyper)
        post = reconstruct(full, sites)
        return _snapshot(hyper, sites.copy(), post, full, st, meta, opt)
    bundle = build_bundle(np.empty((0, hyper.d)), hyper)
    K = bundle.Kmm
    post = posterior_from_aggregates(bundle, K @ P @ K, K @ h)
    return Model(hyper, sites.copy(), post, st, bundle, dict(meta), opt.to_dict())
