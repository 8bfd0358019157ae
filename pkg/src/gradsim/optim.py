"""Distributed optimizer algorithms and parameter-server drivers.

Pure update rules (SGD, EASGD, LARS, learning-rate and batch-size
schedules) plus two simulator-driven training loops: synchronous SGD
with backup workers (first-N-of-M aggregation) and asynchronous
parameter-server SGD with n-softsync staleness control.

Weight math runs on float64 arrays; vectors cross the simulated wire in
the serialized format from protocol.md.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import simnet
from .errors import CollectiveFailedError, ConfigError, OverflowSignal, ShapeError
from .tensor import GradientVector, decode_vector, encode_vector

_PAIRING_SALT = 3299  # gossip peer matching; keeps draws out of other seed spaces


# ---------------------------------------------------------------------------
# configuration containers


@dataclass
class Hyperparams:
    """Shared optimizer knobs; validation happens on construction."""

    eta: float = 0.1
    batch_size: int = 1
    momentum: float = 0.0
    weight_decay: float = 0.0
    rho: float = 0.0
    tau: int = 1
    trust: float = 0.5
    gamma: float = 1.0
    k: int = 1
    warmup_epochs: int = 5

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigError("eta", f"learning rate must be > 0, got {self.eta}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum", f"must be in [0, 1), got {self.momentum}")
        if self.rho < 0:
            raise ConfigError("rho", f"elastic coefficient must be >= 0, got {self.rho}")
        if self.tau < 1:
            raise ConfigError("tau", f"communication period must be >= 1, got {self.tau}")
        if not 0.0 < self.trust < 1.0:
            raise ConfigError("trust", f"must be in (0, 1), got {self.trust}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")


@dataclass
class ModelState:
    """Weights plus optional EASGD center and momentum velocity.

    ``version`` counts applied updates; every apply bumps it by exactly 1.
    """

    weights: GradientVector
    center: GradientVector | None = None
    velocity: GradientVector | None = None
    version: int = 0

    def apply(self, new_values: np.ndarray) -> None:
        self.weights = replace(self.weights, values=np.asarray(new_values, dtype=np.float64))
        self.version += 1


@dataclass(frozen=True)
class AsyncConfig:
    """n-softsync shape: lambda learners, updates every c = floor(lambda/n) arrivals."""

    learners: int
    softsync_n: int

    def __post_init__(self):
        if self.learners < 1:
            raise ConfigError("learners", f"must be >= 1, got {self.learners}")
        if not 1 <= self.softsync_n <= self.learners:
            raise ConfigError(
                "softsync_n",
                f"must be in [1, {self.learners}], got {self.softsync_n}",
            )

    @property
    def c(self) -> int:
        return self.learners // self.softsync_n


# ---------------------------------------------------------------------------
# pure update rules


def _gradient_stack(grads) -> np.ndarray:
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim == 1:
        g = g[np.newaxis, :]
    if g.ndim != 2:
        raise ShapeError(f"expected a gradient or a stack of gradients, got ndim={g.ndim}")
    return g


def sgd_step(weights: np.ndarray, grads, eta: float, n: int | None = None) -> np.ndarray:
    """One mini-batch step: w - eta * (1/n) * sum of the batch gradients.

    ``grads`` is a single gradient or a stack of per-example gradients;
    ``n`` defaults to the number of gradients supplied.
    """
    w = np.asarray(weights, dtype=np.float64)
    g = _gradient_stack(grads)
    if g.shape[1] != w.shape[0]:
        raise ShapeError(f"gradient width {g.shape[1]} != weight width {w.shape[0]}")
    if not np.all(np.isfinite(g)):
        raise OverflowSignal("non-finite gradient in mini batch")
    if n is None:
        n = g.shape[0]
    return w - eta * (g.sum(axis=0) / n)


def momentum_step(
    weights: np.ndarray, velocity: np.ndarray, grad: np.ndarray, eta: float, momentum: float
) -> tuple[np.ndarray, np.ndarray]:
    """Momentum SGD: v <- m*v + g, w <- w - eta*v.  Returns (weights, velocity)."""
    v = momentum * np.asarray(velocity, dtype=np.float64) + np.asarray(grad, dtype=np.float64)
    return np.asarray(weights, dtype=np.float64) - eta * v, v


def easgd_worker_update(
    x: np.ndarray, grad: np.ndarray, center: np.ndarray, eta: float, rho: float
) -> np.ndarray:
    """Elastic worker step: x - eta * (g + rho * (x - center))."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    if x.shape != g.shape or x.shape != c.shape:
        raise ShapeError(
            f"shape mismatch: x {x.shape}, gradient {g.shape}, center {c.shape}"
        )
    return x - eta * (g + rho * (x - c))


def easgd_center_update(center: np.ndarray, workers, eta: float, rho: float) -> np.ndarray:
    """Elastic center step: center + eta * sum_i rho * (x_i - center)."""
    c = np.asarray(center, dtype=np.float64)
    pull = np.zeros_like(c)
    for x in workers:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != c.shape:
            raise ShapeError(f"shape mismatch: worker {x.shape}, center {c.shape}")
        pull = pull + rho * (x - c)
    return c + eta * pull


def easgd_run(
    grad_fn,
    w0_workers,
    center0: np.ndarray,
    eta: float,
    rho: float,
    tau: int,
    steps: int,
    objective_fn=None,
):
    """Run p elastic-averaging workers for ``steps`` local iterations.

    Workers take plain SGD steps; every tau-th iteration is a communication
    step where workers and center update simultaneously from pre-update
    values (the worker sees the old center, the center sees old workers).
    ``grad_fn(i, x)`` returns worker i's gradient at x.  ``objective_fn``,
    when given, maps (workers, center) to a float recorded per step.

    Returns (workers, center, history).
    """
    if tau < 1:
        raise ConfigError("tau", f"communication period must be >= 1, got {tau}")
    if rho < 0:
        raise ConfigError("rho", f"elastic coefficient must be >= 0, got {rho}")
    xs = [np.asarray(x, dtype=np.float64).copy() for x in w0_workers]
    center = np.asarray(center0, dtype=np.float64).copy()
    history = []
    for t in range(steps):
        if (t + 1) % tau == 0:
            pre = [x.copy() for x in xs]
            xs = [
                easgd_worker_update(x, grad_fn(i, x), center, eta, rho)
                for i, x in enumerate(xs)
            ]
            center = easgd_center_update(center, pre, eta, rho)
        else:
            xs = [sgd_step(x, grad_fn(i, x), eta) for i, x in enumerate(xs)]
        if objective_fn is not None:
            history.append(float(objective_fn(xs, center)))
    return xs, center, history


def gossip_round(weights, seed: int, round_index: int = 0):
    """One symmetric gossip exchange: random pairing, each pair averages.

    Nodes are matched by a seeded permutation; both members of a pair set
    their weights to the pair mean, so the pair sum (and hence the global
    mean, up to float association) is preserved.  With an odd node count
    the leftover node sits the round out and its array is returned as-is.
    """
    rng = np.random.default_rng((seed, _PAIRING_SALT, round_index))
    order = rng.permutation(len(weights))
    out = list(weights)
    for a, b in zip(order[0::2], order[1::2]):
        avg = (weights[a] + weights[b]) / 2.0
        out[a] = avg
        out[b] = avg.copy()
    return out


def lars_local_lr(
    weights: np.ndarray, grad: np.ndarray, trust: float, beta: float = 0.0, eps: float = 1e-12
) -> float:
    """Layer-adaptive local rate: trust * |w| / (|g| + beta * |w|).

    The denominator is floored at eps so zero-gradient layers never divide
    by zero.  Computed as trust * (|w| / denom) so the ratio-1 case returns
    trust exactly.
    """
    if not 0.0 < trust < 1.0:
        raise ConfigError("trust", f"must be in (0, 1), got {trust}")
    if beta < 0:
        raise ConfigError("weight_decay", f"must be >= 0, got {beta}")
    nw = float(np.linalg.norm(weights))
    ng = float(np.linalg.norm(grad))
    denom = ng + beta * nw
    return trust * (nw / max(denom, eps))


def lars_step(
    weights: np.ndarray,
    grad: np.ndarray,
    gamma: float,
    trust: float,
    beta: float = 0.0,
    layers: list[tuple[int, int]] | None = None,
    eps: float = 1e-12,
) -> np.ndarray:
    """Apply per-layer LARS updates: w_l <- w_l - gamma * lambda_l * g_l."""
    w = np.asarray(weights, dtype=np.float64).copy()
    g = np.asarray(grad, dtype=np.float64)
    if w.shape != g.shape:
        raise ShapeError(f"shape mismatch: weights {w.shape}, gradient {g.shape}")
    if layers is None:
        layers = [(0, w.shape[0])]
    for start, stop in layers:
        if stop <= start:
            continue
        lam = lars_local_lr(w[start:stop], g[start:stop], trust, beta, eps)
        w[start:stop] -= gamma * lam * g[start:stop]
    return w


def linear_scaling_schedule(
    base_eta: float, k: int, epoch: float, warmup_epochs: int = 5
) -> float:
    """Warmed-up linear scaling: ramp from base_eta to k*base_eta over warmup.

    Interpolation is linear in the epoch: eta = base * (1 + (k-1) * t/T)
    with t clamped to [0, T]; after warmup the rate holds at k * base_eta.
    """
    if warmup_epochs < 0:
        raise ConfigError("warmup_epochs", f"must be >= 0, got {warmup_epochs}")
    if warmup_epochs == 0:
        return k * base_eta
    t = min(float(epoch), float(warmup_epochs))
    return base_eta * (1.0 + (k - 1.0) * (t / warmup_epochs))


def batch_size_schedule(
    base_b: int,
    factor: float,
    interval_epochs: int,
    epoch: float,
    max_b: int,
    dataset_size: int | None = None,
) -> int:
    """Stepwise batch growth: min(base * factor^floor(epoch/interval), max_b).

    The learning rate is held constant under this schedule; the cap must
    stay well below the dataset (max_b <= dataset/10) when a size is given.
    """
    if factor <= 1:
        raise ConfigError("factor", f"growth factor must be > 1, got {factor}")
    if interval_epochs < 1:
        raise ConfigError("interval_epochs", f"must be >= 1, got {interval_epochs}")
    if dataset_size is not None and max_b > dataset_size / 10:
        raise ConfigError(
            "max_b",
            f"cap {max_b} exceeds dataset/10 = {dataset_size / 10:g}; "
            "the schedule requires a cap well below the dataset size",
        )
    doublings = int(np.floor(epoch / interval_epochs))
    return int(min(base_b * factor**doublings, max_b))


# ---------------------------------------------------------------------------
# synchronous SGD with backup workers


@dataclass(frozen=True)
class RoundRecord:
    step: int
    sim_time: float
    elapsed: float
    loss: float
    grad_norm: float
    contributors: tuple
    late_discarded: int
    extra_discarded: int


def _encode_stack(stack: np.ndarray) -> bytes:
    return encode_vector(GradientVector(stack.ravel()))


def _decode_stack(blob: bytes, rows: int) -> np.ndarray:
    return decode_vector(blob).values.reshape(rows, -1)


class _SyncWorker(simnet.Actor):
    def __init__(self, cluster, node: int, index: int):
        self.cluster = cluster
        self.node = node
        self.index = index
        self.pending: dict[int, np.ndarray] = {}

    def on_message(self, sim, src, payload):
        _, step, blob = payload
        self.pending[step] = decode_vector(blob).values
        sim.schedule_compute(self.node, self.cluster.compute_time, step)

    def on_compute(self, sim, tag):
        step = tag
        weights = self.pending.pop(step)
        stack = self.cluster.grad_fn(self.index, step, weights)
        blob = _encode_stack(np.asarray(stack, dtype=np.float64))
        sim.schedule_send(self.node, self.cluster.server_node, ("grad", step, blob),
                          nbytes=len(blob), draw_key=(step, self.node, 0, 1))


class _SyncServer(simnet.Actor):
    def __init__(self, cluster):
        self.cluster = cluster

    def on_message(self, sim, src, payload):
        self.cluster._on_gradient(sim, src, payload)


class SyncCluster:
    """Synchronous data-parallel SGD: first-N-of-M gradient aggregation.

    ``worker_count`` machines (nodes 1..M, server at node 0) all compute a
    gradient stack for every step; the server averages per-example gradients
    over the first ``worker_count - backup_count`` arrivals, sorted by
    worker id, and discards the rest of that step's gradients.  With
    backup_count=0 the trajectory is bit-identical to single-machine SGD
    on the per-step concatenation of the worker batches.

    ``grad_fn(worker_index, step, weights)`` returns a
    (batch_per_worker, dim) stack; ``loss_fn(weights)`` is recorded per
    round.  Message delay draws are keyed by (step, src, dst, channel) so
    paired configurations over the same latency model share draws.

    A round fails when workers crash: if fewer than N are alive when a
    step is broadcast the cluster raises CollectiveFailedError; a crash
    that starves an already-broadcast step drains the event queue and
    surfaces as DeadlockError naming the stuck step.
    """

    def __init__(
        self,
        sim: simnet.Simulator,
        grad_fn,
        loss_fn,
        w0: np.ndarray,
        eta: float,
        worker_count: int,
        backup_count: int = 0,
        batch_per_worker: int = 1,
        compute_time: float = 1.0,
    ):
        if worker_count < 1:
            raise ConfigError("worker_count", f"must be >= 1, got {worker_count}")
        if not 0 <= backup_count < worker_count:
            raise ConfigError(
                "backup_count", f"must be in [0, {worker_count - 1}], got {backup_count}"
            )
        if batch_per_worker < 1:
            raise ConfigError("batch_per_worker", f"must be >= 1, got {batch_per_worker}")
        if compute_time < 0:
            raise ConfigError("compute_time", f"must be >= 0, got {compute_time}")
        self.sim = sim
        self.grad_fn = grad_fn
        self.loss_fn = loss_fn
        self.eta = eta
        self.worker_count = worker_count
        self.need = worker_count - backup_count
        self.batch_per_worker = batch_per_worker
        self.compute_time = compute_time
        self.server_node = 0
        self.worker_nodes = list(range(1, worker_count + 1))
        self.state = ModelState(GradientVector(np.asarray(w0, dtype=np.float64)))
        self.step = 0
        self.rounds = 0
        self.done = False
        self.history: list[RoundRecord] = []
        self._bucket: dict[int, np.ndarray] = {}
        self._bcast_time = 0.0
        self._late = 0
        self._extra = 0
        sim.add_node(self.server_node, _SyncServer(self))
        for i, node in enumerate(self.worker_nodes):
            sim.add_node(node, _SyncWorker(self, node, i))
        sim.register_watcher(self._describe_wait)

    def _describe_wait(self):
        if self.done:
            return []
        return [
            f"sync server waiting on step {self.step}: "
            f"{len(self._bucket)}/{self.need} gradients collected"
        ]

    def _broadcast(self):
        live = [n for n in self.worker_nodes if self.sim.alive.get(n, False)]
        if len(live) < self.need:
            dead = next(n for n in self.worker_nodes if not self.sim.alive.get(n, False))
            raise CollectiveFailedError(
                dead,
                f"sync step {self.step} needs {self.need} workers, only {len(live)} alive",
            )
        self._bcast_time = self.sim.now
        blob = encode_vector(self.state.weights)
        for node in self.worker_nodes:
            self.sim.schedule_send(self.server_node, node, ("weights", self.step, blob),
                                   nbytes=len(blob), draw_key=(self.step, 0, node, 0))

    def _on_gradient(self, sim, src, payload):
        _, step, blob = payload
        if self.done or step != self.step:
            self._late += 1
            return
        if len(self._bucket) >= self.need:
            self._extra += 1
            return
        self._bucket[src] = _decode_stack(blob, self.batch_per_worker)
        if len(self._bucket) < self.need:
            return
        contributors = tuple(sorted(self._bucket))
        grads = np.concatenate([self._bucket[n] for n in contributors], axis=0)
        new_w = sgd_step(self.state.weights.values, grads, self.eta)
        self.state.apply(new_w)
        mean_grad = grads.sum(axis=0) / grads.shape[0]
        self.history.append(RoundRecord(
            step=self.step,
            sim_time=sim.now,
            elapsed=sim.now - self._bcast_time,
            loss=float(self.loss_fn(new_w)),
            grad_norm=float(np.linalg.norm(mean_grad)),
            contributors=contributors,
            late_discarded=self._late,
            extra_discarded=self._extra,
        ))
        self._bucket = {}
        self._late = 0
        self._extra = 0
        self.step += 1
        if self.step < self.rounds:
            self._broadcast()
        else:
            self.done = True

    def run(self, rounds: int, max_time: float | None = None) -> list[RoundRecord]:
        """Run ``rounds`` synchronous steps; returns the per-round records."""
        if rounds < 1:
            return self.history
        self.rounds = self.step + rounds
        self.done = False
        self._broadcast()
        self.sim.run_until(lambda: self.done, max_time=max_time)
        return self.history

    @property
    def weights(self) -> np.ndarray:
        return self.state.weights.values


# ---------------------------------------------------------------------------
# asynchronous n-softsync parameter server


@dataclass(frozen=True)
class UpdateRecord:
    update: int
    sim_time: float
    loss: float
    grad_norm: float
    staleness_mean: float
    staleness_max: int


class _Learner(simnet.Actor):
    def __init__(self, cluster, node: int, index: int):
        self.cluster = cluster
        self.node = node
        self.index = index
        self.read_version = 0
        self.weights: np.ndarray | None = None
        self.local_step = 0

    def on_message(self, sim, src, payload):
        _, version, blob = payload
        self.read_version = version
        self.weights = decode_vector(blob).values
        sim.schedule_compute(self.node, self.cluster.compute_time, None)

    def on_compute(self, sim, tag):
        stack = self.cluster.grad_fn(self.index, self.local_step, self.weights)
        self.local_step += 1
        blob = _encode_stack(np.asarray(stack, dtype=np.float64))
        sim.schedule_send(self.node, self.cluster.server_node,
                          ("grad", self.read_version, blob), nbytes=len(blob))


class _SoftsyncServer(simnet.Actor):
    def __init__(self, cluster):
        self.cluster = cluster

    def on_message(self, sim, src, payload):
        self.cluster._on_gradient(sim, src, payload)


class SoftsyncCluster:
    """Asynchronous parameter server with n-softsync staleness control.

    The server applies an update once every c = floor(lambda/n) gradient
    arrivals; each contribution is discounted by eta / (1 + staleness)
    where staleness counts server updates since the learner read its
    weights.  Contributors receive the fresh weights when their batch is
    applied, so with softsync_n = 1 (c = lambda) the loop degenerates to a
    synchronous barrier and every recorded staleness is zero.  Stale
    gradients are never dropped: they land in a later batch with their
    discount and are counted in ``stale_applied``.
    """

    def __init__(
        self,
        sim: simnet.Simulator,
        grad_fn,
        loss_fn,
        w0: np.ndarray,
        eta: float,
        config: AsyncConfig,
        batch_per_learner: int = 1,
        compute_time: float = 1.0,
    ):
        if batch_per_learner < 1:
            raise ConfigError("batch_per_learner", f"must be >= 1, got {batch_per_learner}")
        if compute_time < 0:
            raise ConfigError("compute_time", f"must be >= 0, got {compute_time}")
        self.sim = sim
        self.grad_fn = grad_fn
        self.loss_fn = loss_fn
        self.eta = eta
        self.config = config
        self.batch_per_learner = batch_per_learner
        self.compute_time = compute_time
        self.server_node = 0
        self.learner_nodes = list(range(1, config.learners + 1))
        self.state = ModelState(GradientVector(np.asarray(w0, dtype=np.float64)))
        self.updates = 0
        self.target = 0
        self.stale_applied = 0
        self.ignored_after_target = 0
        self.history: list[UpdateRecord] = []
        self._buffer: list[tuple[int, int, np.ndarray]] = []
        sim.add_node(self.server_node, _SoftsyncServer(self))
        for i, node in enumerate(self.learner_nodes):
            sim.add_node(node, _Learner(self, node, i))
        sim.register_watcher(self._describe_wait)

    def _describe_wait(self):
        if self.updates >= self.target:
            return []
        return [
            f"softsync server at update {self.updates}/{self.target}: "
            f"{len(self._buffer)}/{self.config.c} gradients buffered"
        ]

    def _weights_blob(self) -> bytes:
        return encode_vector(self.state.weights)

    def _on_gradient(self, sim, src, payload):
        _, read_version, blob = payload
        if self.updates >= self.target:
            self.ignored_after_target += 1
            return
        staleness = self.state.version - read_version
        stack = _decode_stack(blob, self.batch_per_learner)
        self._buffer.append((src, staleness, stack))
        if len(self._buffer) < self.config.c:
            return
        batch, self._buffer = self._buffer, []
        c, n = self.config.c, self.batch_per_learner
        total = np.zeros_like(self.state.weights.values)
        stales = []
        for _, tau, st in batch:
            total = total + (self.eta / (1.0 + tau)) * st.sum(axis=0)
            stales.append(tau)
            if tau > 0:
                self.stale_applied += 1
        new_w = self.state.weights.values - total / (c * n)
        self.state.apply(new_w)
        self.updates += 1
        self.history.append(UpdateRecord(
            update=self.updates,
            sim_time=sim.now,
            loss=float(self.loss_fn(new_w)),
            grad_norm=float(np.linalg.norm(total / (c * n))),
            staleness_mean=float(np.mean(stales)),
            staleness_max=int(max(stales)),
        ))
        blob = self._weights_blob()
        for node, _, _ in batch:
            self.sim.schedule_send(self.server_node, node,
                                   ("weights", self.state.version, blob), nbytes=len(blob))

    def run(self, updates: int, max_time: float | None = None) -> list[UpdateRecord]:
        """Run until ``updates`` server updates have been applied (single-shot)."""
        if self.target:
            # learners idle out once the target is hit; a restarted loop would
            # double-send their weight pulls, so continuation is not supported
            raise ValueError("softsync cluster runs once; build a new cluster to continue")
        self.target = updates
        blob = self._weights_blob()
        for node in self.learner_nodes:
            self.sim.schedule_send(self.server_node, node,
                                   ("weights", self.state.version, blob), nbytes=len(blob))
        self.sim.run_until(lambda: self.updates >= self.target, max_time=max_time)
        return self.history

    @property
    def weights(self) -> np.ndarray:
        return self.state.weights.values
