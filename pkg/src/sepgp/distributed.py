"""Bulk-synchronous master/worker training.

Each worker owns the sites of one partition of the data. Every iteration runs
three rounds, each a broadcast followed by a barrier:

``sweep``
    workers refine their sites against the broadcast posterior and return the
    new site aggregates;
``grad``
    workers return their share of the log-likelihood estimate and of the
    gradient under the combined posterior;
``refresh``
    after the master's hyper-parameter step, workers return their aggregates
    under the new kernel.

Aggregates travel in the kernel-column basis (``sum nu_j k_j k_j'`` and
``sum mu_j k_j``), so combining them is a plain sum and the master's posterior
is built exactly as in single-node reconstruction.

Two transports share one message schema: an in-process thread pool and TCP
sockets carrying length-prefixed JSON.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field

import numpy as np

from . import dataset as ds
from .ep import (
    SiteFactors,
    cavities,
    init_sites,
    posterior_from_aggregates,
    site_aggregates,
    site_update,
)
from .kernel import Hyperparameters, KernelError, build_bundle, contract_gradient
from .objective import _log_ztilde, _prior_terms, _site_quantities, prior_gradient
from .objective import site_gradient_weights

__all__ = [
    "PROTOCOL",
    "DistributedError",
    "ProtocolError",
    "Partition",
    "PartitionMessage",
    "Worker",
    "LocalPool",
    "SocketPool",
    "partition",
    "worker_round",
    "master_combine",
    "distributed_train",
    "run_worker",
    "send_msg",
    "recv_msg",
]

PROTOCOL = "sep/1"
MAX_FRAME = 1 << 30


class DistributedError(RuntimeError):
    """A round could not be completed."""


class ProtocolError(DistributedError):
    """A peer spoke an incompatible or malformed protocol."""


class _Hang(Exception):
    pass


@dataclass
class Partition:
    worker_id: int
    indices: np.ndarray
    X: np.ndarray
    y: np.ndarray

    @property
    def n(self) -> int:
        return self.indices.size


def partition(data: ds.Dataset, K: int, seed: int = 0) -> list[Partition]:
    """Split the rows into ``K`` disjoint random parts whose sizes differ by at most one."""
    n = data.n
    if not 1 <= K <= n:
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    parts = []
    for wid, chunk in enumerate(np.array_split(perm, K)):
        idx = np.sort(chunk)
        parts.append(Partition(wid, idx, data.X[idx], data.y[idx].astype(float)))
    return parts


@dataclass
class PartitionMessage:
    worker_id: int
    epoch: int
    phase: str
    precision: np.ndarray
    linear: np.ndarray
    log_ztilde_sum: float = 0.0
    gradient: np.ndarray | None = None
    site_deltas: list = field(default_factory=list)
    n_skipped: int = 0
    max_change: float = 0.0

    def __post_init__(self):
        self.precision = np.asarray(self.precision, dtype=float)
        self.linear = np.asarray(self.linear, dtype=float)
        if self.gradient is not None:
            self.gradient = np.asarray(self.gradient, dtype=float)
        P = self.precision
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] != self.linear.size:
            raise ProtocolError("aggregate shapes are inconsistent")
        if not np.allclose(P, P.T, rtol=0, atol=1e-12 * max(1.0, np.abs(P).max(initial=0.0))):
            raise ProtocolError(f"worker {self.worker_id} sent a non-symmetric precision")

    def to_dict(self) -> dict:
        return {
            "type": "reply",
            "worker_id": self.worker_id,
            "epoch": self.epoch,
            "phase": self.phase,
            "precision": self.precision.tolist(),
            "linear": self.linear.tolist(),
            "log_ztilde_sum": self.log_ztilde_sum,
            "gradient": None if self.gradient is None else self.gradient.tolist(),
            "site_deltas": [list(r) for r in self.site_deltas],
            "n_skipped": self.n_skipped,
            "max_change": self.max_change,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PartitionMessage":
        try:
            return cls(int(doc["worker_id"]), int(doc["epoch"]), str(doc["phase"]),
                       doc["precision"], doc["linear"], float(doc["log_ztilde_sum"]),
                       doc["gradient"], [tuple(r) for r in doc["site_deltas"]],
                       int(doc["n_skipped"]), float(doc["max_change"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed reply: {exc}") from None


class Worker:
    """Owns one partition's sites and answers round requests.

    Replies are cached per ``(epoch, phase)``, so a retried request returns
    the original reply instead of refining the sites twice.
    """

    def __init__(self, part: Partition, sites: SiteFactors | None = None, m: int | None = None):
        self.part = part
        self.sites = init_sites(part.n) if sites is None else sites
        if self.sites.n != part.n:
            raise ValueError("site count does not match the partition")
        self._bundle = None
        self._bundle_key = None
        self._cache = {}
        self._lock = threading.Lock()
        self.fail_next = None
        self.hang_seconds = 1.0

    def _kernel(self, hyper_doc):
        key = json.dumps(hyper_doc, sort_keys=True)
        if key != self._bundle_key:
            self._bundle = build_bundle(self.part.X, Hyperparameters.from_dict(hyper_doc))
            self._bundle_key = key
        return self._bundle

    def handle(self, req: dict) -> PartitionMessage:
        try:
            with self._lock:
                key = (int(req["epoch"]), req["phase"])
                if key in self._cache:
                    return self._cache[key]
                reply = self._handle(req)
                self._cache = {key: reply}
                return reply
        except _Hang:
            # the reply is lost; sleep outside the lock so a retry can proceed
            time.sleep(self.hang_seconds)
            raise DistributedError(f"worker {self.part.worker_id} hung (injected)") from None

    def _handle(self, req):
        phase, epoch = req["phase"], int(req["epoch"])
        hyper_doc = req["hyper"]
        m = len(hyper_doc["inducing_points"])
        wid = self.part.worker_id
        if phase == "gather":
            rows = [(int(i), float(a), float(b), float(c)) for i, a, b, c in
                    zip(self.part.indices, self.sites.nu, self.sites.mu, self.sites.log_s)]
            return PartitionMessage(wid, epoch, phase, np.zeros((m, m)), np.zeros(m),
                                    site_deltas=rows)
        bundle = self._kernel(hyper_doc)
        y = self.part.y
        if phase == "refresh":
            A, b = site_aggregates(bundle.Knm, self.sites.nu, self.sites.mu)
            return PartitionMessage(wid, epoch, phase, A, b)
        post = posterior_from_aggregates(bundle, np.asarray(req["precision"], float),
                                         np.asarray(req["linear"], float))
        if phase == "sweep":
            old = self.sites
            cav = cavities(bundle, post, old)
            up = site_update(cav, y, float(req["rho"]), old.nu, old.mu, old.log_s)
            new = SiteFactors(up.nu, up.mu, up.log_s)
            change = np.abs(new.nu - old.nu) + np.abs(new.mu - old.mu)
            A, b = site_aggregates(bundle.Knm, new.nu, new.mu)
            self._maybe_fail(epoch)
            self.sites = new
            return PartitionMessage(wid, epoch, phase, A, b, n_skipped=int(up.skipped.sum()),
                                    max_change=float(change.max(initial=0.0)))
        if phase == "grad":
            grad = np.zeros(Hyperparameters.from_dict(hyper_doc).size)
            total = 0.0
            if self.part.n:
                idx = np.arange(self.part.n)
                q = _site_quantities(bundle, self.sites, post, y, idx)
                total = float(np.sum(_log_ztilde(q)))
                G_nm, g_diag, B = site_gradient_weights(bundle, self.sites, post, y, idx, q=q)
                grad = contract_gradient(bundle, G_nm, g_diag, B)
            self._maybe_fail(epoch)
            return PartitionMessage(wid, epoch, phase, np.zeros((m, m)), np.zeros(m),
                                    log_ztilde_sum=total, gradient=grad)
        raise ProtocolError(f"unknown phase {phase!r}")

    def _maybe_fail(self, epoch):
        if self.fail_next is not None and epoch >= self.fail_next[0]:
            mode = self.fail_next[1]
            self.fail_next = None
            if mode == "hang":
                raise _Hang
            else:
                raise DistributedError(f"worker {self.part.worker_id} crashed (injected)")


def worker_round(worker: Worker, hyper: Hyperparameters, precision, linear, rho: float,
                 epoch: int) -> PartitionMessage:
    """One sweep of ``worker``'s sites against the posterior given by the aggregates."""
    return worker.handle({"phase": "sweep", "epoch": epoch, "hyper": hyper.to_dict(),
                          "precision": np.asarray(precision).tolist(),
                          "linear": np.asarray(linear).tolist(), "rho": rho})


def _combine_aggregates(messages, K=None, epoch=None):
    ids = sorted(m.worker_id for m in messages)
    expected = list(range(K)) if K is not None else sorted(set(ids))
    if ids != expected:
        missing = sorted(set(expected) - set(ids))
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DistributedError(f"bad message set: missing workers {missing}, duplicates {dup}")
    if epoch is not None:
        stale = [m.worker_id for m in messages if m.epoch != epoch]
        if stale:
            raise DistributedError(f"stale epoch from workers {stale}")
    ordered = sorted(messages, key=lambda m: m.worker_id)
    A = np.zeros_like(ordered[0].precision)
    b = np.zeros_like(ordered[0].linear)
    for msg in ordered:
        A = A + msg.precision
        b = b + msg.linear
    return ordered, A, b


def master_combine(messages, bundle, K=None, epoch=None):
    """Posterior from the prior in ``bundle`` and one message per worker, reduced by worker id."""
    _, A, b = _combine_aggregates(messages, K, epoch)
    return posterior_from_aggregates(bundle, A, b)


# -- transports ---------------------------------------------------------------


class LocalPool:
    """Workers in this process, called concurrently from a thread pool.

    ``faults`` maps ``worker_id -> (epoch, "crash" | "hang")`` to inject one
    failure for testing the retry path.
    """

    def __init__(self, partitions, sites=None, threads=None, timeout=None, faults=None,
                 hang_seconds=1.0):
        self.workers = []
        for part in partitions:
            w = Worker(part, None if sites is None else sites.subset(part.indices))
            w.hang_seconds = hang_seconds
            if faults and part.worker_id in faults:
                w.fail_next = faults[part.worker_id]
            self.workers.append(w)
        self.K = len(self.workers)
        self.timeout = timeout
        # spare threads let a retry run while an injected hang is still sleeping
        self._pool = ThreadPoolExecutor(max_workers=threads or 2 * self.K)

    def submit(self, wid, req):
        return self._pool.submit(self.workers[wid].handle, req)

    def close(self):
        self._pool.shutdown(wait=True)


def send_msg(sock, obj) -> None:
    body = json.dumps(obj).encode()
    sock.sendall(struct.pack(">I", len(body)) + body)


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


def recv_msg(sock):
    (size,) = struct.unpack(">I", _recv_exact(sock, 4))
    if size > MAX_FRAME:
        raise ProtocolError(f"frame of {size} bytes exceeds the limit")
    try:
        return json.loads(_recv_exact(sock, size))
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed frame: {exc}") from None


class SocketPool:
    """Master side of the TCP transport.

    Listens on ``(host, port)``, accepts ``K`` workers, checks each one's
    protocol version and ships it its partition.
    """

    def __init__(self, K: int, host="127.0.0.1", port=0, timeout=None, accept_timeout=60.0):
        self.K = K
        self.timeout = timeout
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()
        self._parts = None
        self._sites = None
        self._conns = [None] * self.K
        self._locks = [threading.Lock() for _ in range(self.K)]
        self._pool = ThreadPoolExecutor(max_workers=self.K)
        self._accept_timeout = accept_timeout

    @property
    def started(self) -> bool:
        return self._conns[-1] is not None

    def start(self, partitions, sites, m: int, d: int, epoch: int = 0):
        """Accept ``K`` workers and send each its partition."""
        if len(partitions) != self.K:
            raise ValueError(f"{len(partitions)} partitions for {self.K} workers")
        self._parts, self._sites = partitions, sites
        self._sock.settimeout(self._accept_timeout)
        wid = 0
        while wid < self.K:
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                raise DistributedError(f"only {wid} of {self.K} workers connected") from None
            conn.settimeout(self._accept_timeout)
            hello = recv_msg(conn)
            if hello.get("type") != "hello" or hello.get("protocol") != PROTOCOL:
                send_msg(conn, {"type": "refuse",
                                "reason": f"protocol {hello.get('protocol')!r} is not {PROTOCOL}"})
                conn.close()
                continue
            part = self._parts[wid]
            sites = None if self._sites is None else self._sites.subset(part.indices).to_dict()
            send_msg(conn, {"type": "setup", "protocol": PROTOCOL, "m": m, "d": d,
                            "epoch": epoch, "worker_id": wid, "indices": part.indices.tolist(),
                            "X": part.X.tolist(), "y": part.y.tolist(), "sites": sites})
            conn.settimeout(self.timeout)
            self._conns[wid] = conn
            wid += 1

    def _call(self, wid, req):
        with self._locks[wid]:
            conn = self._conns[wid]
            send_msg(conn, dict(req, type="request"))
            while True:
                doc = recv_msg(conn)
                if doc.get("type") == "error":
                    raise DistributedError(f"worker {wid}: {doc.get('message')}")
                msg = PartitionMessage.from_dict(doc)
                # a late reply to an earlier, timed-out request is dropped
                if (msg.epoch, msg.phase) == (int(req["epoch"]), req["phase"]):
                    return msg

    def submit(self, wid, req):
        return self._pool.submit(self._call, wid, req)

    def close(self):
        for conn in self._conns:
            if conn is not None:
                try:
                    send_msg(conn, {"type": "shutdown"})
                except OSError:
                    pass
                conn.close()
        self._sock.close()
        self._pool.shutdown(wait=False)


def run_worker(host: str, port: int, protocol: str = PROTOCOL, connect_timeout: float = 30.0):
    """Worker side of the TCP transport; returns after the master's shutdown message."""
    deadline = time.monotonic() + connect_timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=connect_timeout)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.1)
    with sock:
        sock.settimeout(None)
        send_msg(sock, {"type": "hello", "protocol": protocol})
        setup = recv_msg(sock)
        if setup.get("type") == "refuse":
            raise ProtocolError(f"master refused connection: {setup.get('reason')}")
        if setup.get("type") != "setup" or setup.get("protocol") != protocol:
            raise ProtocolError(f"master speaks {setup.get('protocol')!r}, expected {protocol}")
        part = Partition(int(setup["worker_id"]), np.asarray(setup["indices"], dtype=int),
                         np.asarray(setup["X"], dtype=float).reshape(-1, int(setup["d"])),
                         np.asarray(setup["y"], dtype=float))
        sites = SiteFactors.from_dict(setup["sites"]) if setup.get("sites") else None
        worker = Worker(part, sites)
        while True:
            try:
                req = recv_msg(sock)
            except ConnectionError:
                return
            if req.get("type") == "shutdown":
                return
            try:
                reply = worker.handle(req).to_dict()
            except Exception as exc:  # reported to the master, which decides whether to retry
                reply = {"type": "error", "message": f"{type(exc).__name__}: {exc}"}
            send_msg(sock, reply)


# -- master loop --------------------------------------------------------------


class _Master:
    def __init__(self, transport, timeout=None):
        self.transport = transport
        self.K = transport.K
        self.timeout = timeout
        self.epoch = 0
        self.retries = 0

    def round(self, req: dict):
        self.epoch += 1
        req = dict(req, epoch=self.epoch)
        for attempt in range(2):
            futures = [self.transport.submit(w, req) for w in range(self.K)]
            messages, failed = [], []
            for wid, fut in enumerate(futures):
                try:
                    messages.append(fut.result(timeout=self.timeout))
                except (FutureTimeout, DistributedError, OSError) as exc:
                    failed.append((wid, exc))
            if not failed:
                return _combine_aggregates(messages, self.K, self.epoch)
            if attempt == 0:
                self.retries += 1
        detail = "; ".join(f"worker {w}: {type(e).__name__} {e}" for w, e in failed)
        raise DistributedError(f"round {req['phase']} failed after retry ({detail})")


def _request(phase, hyper, A=None, b=None, rho=None):
    req = {"phase": phase, "hyper": hyper.to_dict()}
    if A is not None:
        req["precision"] = A.tolist()
        req["linear"] = b.tolist()
    if rho is not None:
        req["rho"] = rho
    return req


def _gather_sites(master, hyper, n):
    ordered, _, _ = master.round(_request("gather", hyper))
    nu, mu, ls = np.zeros(n), np.zeros(n), np.zeros(n)
    for msg in ordered:
        for i, a, b, c in msg.site_deltas:
            nu[int(i)], mu[int(i)], ls[int(i)] = a, b, c
    return SiteFactors(nu, mu, ls)


def distributed_train(data: ds.Dataset, config, test=None, init=None, callback=None,
                      transport=None, timeout=None, faults=None):
    """Batch training with the site sweep and gradient sums spread over ``config.workers``.

    ``transport`` defaults to an in-process :class:`LocalPool`; pass a connected
    :class:`SocketPool` for multi-process runs. Returns ``(Model, LearningCurve)``
    plus the run's retry count in ``model.metadata["retries"]``.
    """
    from .trainer import (LearningCurve, Model, _freeze_mask, _prepare, _standardize_test,
                          _test_metrics, checkpoint)

    if config.scheme != "inner":
        raise ValueError("distributed training supports the inner scheme only")
    train_set, st, hyper, sites, opt = _prepare(data, config, init)
    test_std = _standardize_test(test, st)
    parts = partition(train_set, config.workers, config.seed)
    own = transport is None
    if own:
        transport = LocalPool(parts, sites, threads=config.threads, faults=faults)
    elif isinstance(transport, SocketPool) and not transport.started:
        transport.start(parts, sites, hyper.m, hyper.d)
    master = _Master(transport, timeout)
    mask = _freeze_mask(hyper, config.freeze)
    rho = config.rho
    empty = np.empty((0, hyper.d))
    curve = LearningCurve()
    meta = {"mode": "distributed", "workers": config.workers, "seed": config.seed, "m": hyper.m,
            "n_sweeps": 0, "iterations": 0, "final_log_zq": None}

    def model_now(A, b, with_sites=False):
        bundle = build_bundle(empty, hyper)
        post = posterior_from_aggregates(bundle, A, b)
        s = _gather_sites(master, hyper, train_set.n) if with_sites else init_sites(0)
        return Model(hyper, s, post, st, bundle, dict(meta), opt.to_dict())

    try:
        elapsed = 0.0
        t0 = time.perf_counter()
        _, A, b = master.round(_request("refresh", hyper))
        elapsed += time.perf_counter() - t0
        for it in range(1, config.iterations + 1):
            t0 = time.perf_counter()
            bundle = build_bundle(empty, hyper)
            ordered, A, b = master.round(_request("sweep", hyper, A, b, rho))
            change = max(m.max_change for m in ordered)
            meta["n_sweeps"] += 1
            post = posterior_from_aggregates(bundle, A, b)
            ordered, _, _ = master.round(_request("grad", hyper, A, b))
            log_zq = _prior_terms(bundle, post)
            grad = prior_gradient(bundle, post)
            for msg in ordered:
                log_zq += msg.log_ztilde_sum
                grad = grad + msg.gradient
            grad = np.where(mask, grad, 0.0)
            if config.learn_hyper:
                new_hyper = hyper.with_vector(hyper.to_vector() + opt.step(grad))
                try:
                    build_bundle(empty, new_hyper)
                except KernelError:
                    meta.update(iterations=it - 1, final_log_zq=log_zq, failed=True)
                    if config.checkpoint_path:
                        checkpoint(model_now(A, b, True), config.checkpoint_path)
                    raise
                hyper = new_hyper
                _, A, b = master.round(_request("refresh", hyper))
            elapsed += time.perf_counter() - t0

            meta.update(iterations=it, final_log_zq=log_zq, retries=master.retries)
            err = nll = None
            last = it == config.iterations
            if test_std is not None and (it % config.eval_every == 0 or last):
                err, nll = _test_metrics(model_now(A, b), test_std)
            curve.append(it, elapsed, log_zq, err, nll)
            if config.checkpoint_every and config.checkpoint_path \
                    and it % config.checkpoint_every == 0:
                checkpoint(model_now(A, b, True), config.checkpoint_path)
            stop = callback is not None and callback(it, curve)
            gnorm = np.linalg.norm(grad) if config.learn_hyper else 0.0
            if config.early_stop and change < config.tol and gnorm < config.tol:
                stop = True
            if stop:
                break
        meta["seconds"] = elapsed
        meta["retries"] = master.retries
        return model_now(A, b, True), curve
    finally:
        if own:
            transport.close()
