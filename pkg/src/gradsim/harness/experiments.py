"""Experiment runners, one per preset.

Each runner takes an ExperimentConfig and returns an ExperimentOutput:
metrics rows, the trace lines of the run's final simulator (training
experiments run exactly one simulator, sweeps keep the last sub-run's
trace), a list of named pass/fail checks, and extra summary keys.  The
final metrics row's bytes_sent always equals the emitted trace's summed
send sizes.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .. import collectives, compress, ftreduce, optim, precision, simnet
from ..errors import ConfigError, GroupUnavailableError
from ..tensor import GradientVector, decode_vector, encode_vector
from .config import ExperimentConfig, take_param
from .metrics import MetricsRecord
from .workloads import generate_workload


@dataclass
class ExperimentOutput:
    records: list = field(default_factory=list)
    trace_lines: list = field(default_factory=list)
    checks: list = field(default_factory=list)       # (name, ok, detail)
    extras: dict = field(default_factory=dict)
    total_bytes: int = 0

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        self.checks.append((name, bool(ok), detail))
        return bool(ok)


def _send_bytes(trace) -> int:
    return sum(rec[5] for rec in trace if rec[2] == "send")


def _cumulative_at(trace, times) -> list:
    """Cumulative traced send bytes at each (ascending) time, inclusive."""
    sends = [(rec[0], rec[5]) for rec in trace if rec[2] == "send"]
    out, i, total = [], 0, 0
    for target in times:
        while i < len(sends) and sends[i][0] <= target:
            total += sends[i][1]
            i += 1
        out.append(total)
    return out


def _workload_from(cfg: ExperimentConfig, kind="quadratic", dim=20, size=4096):
    spec = cfg.workload
    if spec is None:
        return generate_workload(kind, dim, size, cfg.seed)
    return generate_workload(spec.kind, spec.dim, spec.size, spec.seed)


def _shard_fn(workload, total_workers: int, n_per: int):
    """Round-robin sharding: worker i takes every total_workers-th example."""
    def fn(i, step, w):
        base = [(step * n_per + j) * total_workers + i for j in range(n_per)]
        return workload.grad_stack(w, base)
    return fn


# ---------------------------------------------------------------------------
# collective-correctness: five algorithms vs the sequential oracle


def _sequential_sum(vectors):
    acc = vectors[0].copy()
    for v in vectors[1:]:
        acc = acc + v
    return acc


def _run_collective(algo, vectors, sim, group_size, seed):
    if algo == "tolerant":
        return ftreduce.tolerant_all_reduce(
            [v.copy() for v in vectors], replica_factor=3, sim=sim,
            t_hb=2.0, seed=seed, max_time=1_000_000.0)
    if algo == "hierarchical":
        sess = collectives.CollectiveSession(
            sim, "hierarchical", [v.copy() for v in vectors],
            group_size=min(group_size, len(vectors)))
    else:
        sess = collectives.CollectiveSession(sim, algo, [v.copy() for v in vectors])
    return sess.run(max_time=1_000_000.0)


ALL_ALGOS = ("ring", "rhd", "binary-blocks", "hierarchical", "tolerant")


def run_collective_sweep(cfg: ExperimentConfig) -> ExperimentOutput:
    p = cfg.params
    algos = take_param(p, "algorithms", list, list(ALL_ALGOS))
    max_nodes = take_param(p, "max_nodes", int, 33, minimum=1)
    lengths = take_param(p, "lengths", list, [1, 5, 64, 1000])
    group_size = take_param(p, "group_size", int, 4, minimum=1)
    for a in algos:
        if a not in ALL_ALGOS:
            raise ConfigError("params.algorithms", f"unknown algorithm {a!r}")

    out = ExperimentOutput()
    wire = simnet.LatencyModel(startup=0.01, per_byte=1e-6)
    worst_rel = 0.0
    int_fail = float_fail = 0
    case = 0
    trace = []
    for ai, algo in enumerate(algos):
        for nodes in range(1, max_nodes + 1):
            for length in lengths:
                for as_float in (False, True):
                    rng = np.random.default_rng((cfg.seed, 211, ai, nodes, length,
                                                 int(as_float)))
                    if as_float:
                        vecs = [rng.standard_normal(length) for _ in range(nodes)]
                    else:
                        vecs = [rng.integers(-1000, 1001, length).astype(np.float64)
                                for _ in range(nodes)]
                    sim = simnet.Simulator(wire)
                    results = _run_collective(algo, vecs, sim, group_size, cfg.seed)
                    oracle = _sequential_sum(vecs)
                    err = max(float(np.abs(np.asarray(r) - oracle).max())
                              for r in results)
                    if as_float:
                        scale = max(float(np.abs(oracle).max()), 1e-300)
                        rel = err / scale
                        worst_rel = max(worst_rel, rel)
                        if rel > 1e-12:
                            float_fail += 1
                    else:
                        rel = err
                        if err != 0.0:
                            int_fail += 1
                    trace = sim.trace
                    out.records.append(MetricsRecord(
                        step=case, sim_time=float(sim.now), loss=rel,
                        bytes_sent=_send_bytes(sim.trace), effective_batch=nodes))
                    case += 1
    out.trace_lines = [f"{t!r},{seq},{kind},{a},{b},{n}"
                       for t, seq, kind, a, b, n in trace]
    out.total_bytes = _send_bytes(trace)
    out.check("integer_sums_exact", int_fail == 0, f"{int_fail} mismatching cases")
    out.check("float_sums_within_1e-12", float_fail == 0,
              f"worst relative error {worst_rel:.3e}")
    out.extras.update(cases=case, max_float_rel_err=worst_rel)
    return out


# ---------------------------------------------------------------------------
# step-counts: startup-only latency makes phase counts readable as seconds


def run_step_counts(cfg: ExperimentConfig) -> ExperimentOutput:
    p = cfg.params
    ring_max = take_param(p, "ring_max_nodes", int, 33, minimum=2)
    rhd_nodes = take_param(p, "rhd_nodes", list, [2, 4, 8, 16, 32])
    length = take_param(p, "length", int, 64, minimum=1)

    out = ExperimentOutput()
    wire = simnet.LatencyModel(startup=1.0, per_byte=0.0)
    ring_bad = rhd_bad = 0
    case = 0
    trace = []
    for nodes in range(2, ring_max + 1):
        sim = simnet.Simulator(wire)
        collectives.ring_all_reduce([np.ones(length) for _ in range(nodes)], sim=sim)
        expected = 2.0 * (nodes - 1)
        if sim.now != expected:
            ring_bad += 1
        trace = sim.trace
        out.records.append(MetricsRecord(
            step=case, sim_time=float(sim.now), loss=abs(sim.now - expected),
            bytes_sent=_send_bytes(sim.trace), effective_batch=nodes))
        case += 1
    for nodes in rhd_nodes:
        n = take_param({"n": nodes}, "n", int, minimum=2)
        if n & (n - 1):
            raise ConfigError("params.rhd_nodes", f"{n} is not a power of two")
        sim = simnet.Simulator(wire)
        collectives.rhd_all_reduce([np.ones(length) for _ in range(n)], sim=sim)
        expected = 2.0 * int(np.log2(n))
        if sim.now != expected:
            rhd_bad += 1
        trace = sim.trace
        out.records.append(MetricsRecord(
            step=case, sim_time=float(sim.now), loss=abs(sim.now - expected),
            bytes_sent=_send_bytes(sim.trace), effective_batch=n))
        case += 1
    out.trace_lines = [f"{t!r},{seq},{kind},{a},{b},{n}"
                       for t, seq, kind, a, b, n in trace]
    out.total_bytes = _send_bytes(trace)
    out.check("ring_time_is_2p_minus_2", ring_bad == 0, f"{ring_bad} mismatches")
    out.check("rhd_time_is_2log2p", rhd_bad == 0, f"{rhd_bad} mismatches")
    return out


# ---------------------------------------------------------------------------
# binary-blocks structure: decomposition, partition validity, idle audit


def run_blocks_structure(cfg: ExperimentConfig) -> ExperimentOutput:
    p = cfg.params
    max_nodes = take_param(p, "max_nodes", int, 1024, minimum=1)
    out = ExperimentOutput()

    d600 = collectives.binary_blocks_decompose(600)
    ok600 = list(d600.blocks) == [512, 64, 16, 8]
    out.check("decompose_600", ok600, f"blocks {list(d600.blocks)}")
    out.records.append(MetricsRecord(step=0, loss=0.0 if ok600 else 1.0))

    bad = 0
    for nodes in range(1, max_nodes + 1):
        d = collectives.binary_blocks_decompose(nodes)
        blocks = list(d.blocks)
        valid = (sum(blocks) == nodes
                 and all(b & (b - 1) == 0 and b > 0 for b in blocks)
                 and all(a > b for a, b in zip(blocks, blocks[1:]))
                 and sorted(d.assignment) == list(range(nodes)))
        if valid:
            for bi in range(len(blocks)):
                members = d.members(bi)
                if any(d.assignment[m][0] != bi for m in members):
                    valid = False
                    break
        if not valid:
            bad += 1
    out.check("partitions_valid_to_max", bad == 0, f"{bad} invalid of {max_nodes}")
    out.records.append(MetricsRecord(step=1, loss=float(bad)))

    core_phases = ["scatter-reduce", "all-gather"]
    sim_b = simnet.Simulator(simnet.LatencyModel(startup=0.01, per_byte=1e-6))
    sess_b = collectives.CollectiveSession(sim_b, "binary-blocks",
                                           [np.arange(9.0) + i for i in range(7)])
    sess_b.run()
    idle_b = sess_b.idle_nodes(core_phases + ["block-up", "block-down"])
    out.check("blocks_p7_no_idle_nodes", len(idle_b) == 0, f"idle {sorted(idle_b)}")
    out.records.append(MetricsRecord(step=2, sim_time=float(sim_b.now),
                                     loss=float(len(idle_b)),
                                     bytes_sent=_send_bytes(sim_b.trace)))

    sim_r = simnet.Simulator(simnet.LatencyModel(startup=0.01, per_byte=1e-6))
    sess_r = collectives.CollectiveSession(sim_r, "rhd",
                                           [np.arange(9.0) + i for i in range(7)])
    sess_r.run()
    idle_r = sess_r.idle_nodes(core_phases)
    out.check("rhd_p7_idles_three_nodes", len(idle_r) == 3, f"idle {sorted(idle_r)}")
    out.records.append(MetricsRecord(step=3, sim_time=float(sim_r.now),
                                     loss=float(len(idle_r)),
                                     bytes_sent=_send_bytes(sim_r.trace)))

    out.trace_lines = sim_r.trace_lines()
    out.total_bytes = _send_bytes(sim_r.trace)
    return out


# ---------------------------------------------------------------------------
# ft-chaos: seeded kill schedules against the fault-tolerant reduction


def run_ft_chaos(cfg: ExperimentConfig) -> ExperimentOutput:
    p = cfg.params
    schedules = take_param(p, "schedules", int, 100, minimum=1)
    logical = take_param(p, "nodes", int, 6, minimum=1)
    rf = take_param(p, "replica_factor", int, 3, minimum=3)
    length = take_param(p, "length", int, 16, minimum=1)

    out = ExperimentOutput()
    wire = simnet.LatencyModel(startup=0.5, per_byte=0.0001)
    mismatches = audit_failures = conservation_failures = 0
    trace = []
    for seed in range(schedules):
        rng = np.random.default_rng((seed, 991))
        vecs = [rng.standard_normal(length) for _ in range(logical)]
        # one random replica per group (leaders included), at a random time
        failures = [(g * rf + int(rng.integers(rf)), float(rng.uniform(0.0, 10.0)))
                    for g in range(logical)]
        sim = simnet.Simulator(simnet.LatencyModel(**{"startup": wire.startup,
                                                      "per_byte": wire.per_byte}))
        sess = ftreduce.TolerantSession(sim, [v.copy() for v in vecs],
                                        replica_factor=rf, t_hb=2.0, seed=seed)
        for node, at in failures:
            sim.inject_failure(node, at)
        results = sess.run(max_time=10_000.0)
        expected = collectives.binary_blocks_all_reduce([v.copy() for v in vecs])[0]
        exact = all(np.array_equal(np.asarray(r), expected) for r in results)
        if not exact:
            mismatches += 1
        try:
            ftreduce.verify_no_committed_divergence(sess)
            ftreduce.verify_entry_order(sess)
        except AssertionError:
            audit_failures += 1
        counts = simnet.conservation_counts(sim.trace)
        if counts["send"] != counts["deliver"] + counts["drop"] + sim.pending_deliveries():
            conservation_failures += 1
        trace = sim.trace
        err = 0.0 if exact else max(float(np.abs(np.asarray(r) - expected).max())
                                    for r in results)
        out.records.append(MetricsRecord(
            step=seed, sim_time=float(sim.now), loss=err,
            bytes_sent=_send_bytes(sim.trace), effective_batch=logical))

    # killing a majority of one group must fail cleanly, never answer wrongly
    rng = np.random.default_rng((cfg.seed, 997))
    vecs = [rng.standard_normal(length) for _ in range(logical)]
    sim = simnet.Simulator(simnet.LatencyModel(startup=0.5, per_byte=0.0001))
    sess = ftreduce.TolerantSession(sim, [v.copy() for v in vecs],
                                    replica_factor=rf, t_hb=2.0, seed=12345)
    sim.inject_failure(rf + 1, 0.5)
    sim.inject_failure(rf + 2, 1.5)
    clean = False
    detail = "no error raised"
    try:
        sess.run(max_time=10_000.0)
    except GroupUnavailableError as exc:
        clean = exc.logical_node == 1
        detail = str(exc)
    out.check("majority_kill_fails_cleanly", clean, detail)
    trace = sim.trace
    out.records.append(MetricsRecord(
        step=schedules, sim_time=float(sim.now), loss=0.0 if clean else 1.0,
        bytes_sent=_send_bytes(sim.trace), effective_batch=logical))

    out.trace_lines = [f"{t!r},{seq},{kind},{a},{b},{n}"
                       for t, seq, kind, a, b, n in trace]
    out.total_bytes = _send_bytes(trace)
    out.check("all_schedules_bit_exact", mismatches == 0,
              f"{mismatches} of {schedules} schedules diverged")
    out.check("log_audits_pass", audit_failures == 0, f"{audit_failures} failures")
    out.check("message_conservation", conservation_failures == 0,
              f"{conservation_failures} failures")
    out.extras.update(schedules=schedules)
    return out


# ---------------------------------------------------------------------------
# sync-exact: first-N aggregation with no backups vs single-node SGD


def _sync_records(history, trace, eta, batch):
    rows = []
    bytes_at = _cumulative_at(trace, [r.sim_time for r in history])
    for rec, b in zip(history, bytes_at):
        rows.append(MetricsRecord(
            step=rec.step, sim_time=rec.sim_time, loss=rec.loss,
            grad_norm=rec.grad_norm, bytes_sent=b, effective_lr=eta,
            effective_batch=batch))
    return rows


def run_sync_exact(cfg: ExperimentConfig) -> ExperimentOutput:
    p = cfg.params
    workers = take_param(p, "workers", int, 4, minimum=1)
    n_per = take_param(p, "batch_per_worker", int, 2, minimum=1)
    eta = take_param(p, "eta", float, 0.4)
    rounds = take_param(p, "rounds", int, 50, minimum=1)
    wl = _workload_from(cfg)

    sim = simnet.Simulator(simnet.LatencyModel(startup=0.3, per_byte=1e-5,
                                               seed=cfg.seed))
    cluster = optim.SyncCluster(sim, _shard_fn(wl, workers, n_per), wl.loss,
                                wl.initial_weights(), eta, worker_count=workers,
                                backup_count=0, batch_per_worker=n_per)
    history = cluster.run(rounds)

    w = wl.initial_weights()
    shard = _shard_fn(wl, workers, n_per)
    for t in range(rounds):
        stack = np.concatenate([shard(i, t, w) for i in range(workers)], axis=0)
        w = optim.sgd_step(w, stack, eta)

    identical = cluster.weights.tobytes() == w.tobytes()
    out = ExperimentOutput()
    out.records = _sync_records(history, sim.trace, eta, workers * n_per)
    out.trace_lines = sim.trace_lines()
    out.total_bytes = _send_bytes(sim.trace)
    out.check("weights_bit_identical_to_single_node", identical,
              f"max abs diff {np.abs(cluster.weights - w).max():.3e}")
    out.extras["weights_sha256"] = hashlib.sha256(cluster.weights.tobytes()).hexdigest()
    return out


def run_single_node(cfg: ExperimentConfig) -> ExperimentOutput:
    """The union-batch SGD baseline sync-exact compares against."""
    p = cfg.params
    workers = take_param(p, "workers", int, 4, minimum=1)
    n_per = take_param(p, "batch_per_worker", int, 2, minimum=1)
    eta = take_param(p, "eta", float, 0.4)
    rounds = take_param(p, "rounds", int, 50, minimum=1)
    wl = _workload_from(cfg)

    out = ExperimentOutput()
    w = wl.initial_weights()
    shard = _shard_fn(wl, workers, n_per)
    for t in range(rounds):
        stack = np.concatenate([shard(i, t, w) for i in range(workers)], axis=0)
        w = optim.sgd_step(w, stack, eta)
        mean_grad = stack.sum(axis=0) / stack.shape[0]
        out.records.append(MetricsRecord(
            step=t, loss=float(wl.loss(w)),
            grad_norm=float(np.linalg.norm(mean_grad)),
            effective_lr=eta, effective_batch=workers * n_per))
    out.check("ran_to_completion", True, f"{rounds} steps")
    out.extras["weights_sha256"] = hashlib.sha256(w.tobytes()).hexdigest()
    return out


# ---------------------------------------------------------------------------
# straggler-backup: paired seeds, N-of-M strictly faster than M-of-M


def run_straggler_paired(cfg: ExperimentConfig) -> ExperimentOutput:
    p = cfg.params
    seeds = take_param(p, "seeds", int, 100, minimum=1)
    workers = take_param(p, "workers", int, 16, minimum=2)
    backups = take_param(p, "backups", int, 4, minimum=1)
    # 10 rounds keeps both runs descent-dominated; longer budgets sit at the
    # SGD noise floor where the 24- vs 32-example floors differ by ~1/3
    rounds = take_param(p, "rounds", int, 10, minimum=1)
    n_per = take_param(p, "batch_per_worker", int, 2, minimum=1)
    eta = take_param(p, "eta", float, 0.3)
    if backups >= workers:
        raise ConfigError("params.backups", f"must be < workers, got {backups}")
    wl = _workload_from(cfg)
    tail = simnet.Straggler(kind="exponential-tail", rate=0.65, tail_prob=1.0)

    out = ExperimentOutput()
    strict = 0
    worst_gap = 0.0
    trace = []
    for seed in range(seeds):
        finals = {}
        times = {}
        for label, backup in (("full", 0), ("fast", backups)):
            sim = simnet.Simulator(simnet.LatencyModel(
                startup=0.3, per_byte=1e-5, straggler=tail, seed=seed))
            cluster = optim.SyncCluster(sim, _shard_fn(wl, workers, n_per), wl.loss,
                                        wl.initial_weights(), eta,
                                        worker_count=workers, backup_count=backup,
                                        batch_per_worker=n_per)
            history = cluster.run(rounds)
            finals[label] = history[-1].loss
            times[label] = history[-1].sim_time
            trace = sim.trace
            last = (sim, history)
        if times["fast"] < times["full"]:
            strict += 1
        gap = abs(finals["fast"] - finals["full"]) / finals["full"]
        worst_gap = max(worst_gap, gap)
        sim, history = last
        out.records.append(MetricsRecord(
            step=seed, sim_time=times["fast"], loss=finals["fast"],
            grad_norm=history[-1].grad_norm, bytes_sent=_send_bytes(sim.trace),
            effective_lr=eta, effective_batch=(workers - backups) * n_per))
    out.trace_lines = [f"{t!r},{seq},{kind},{a},{b},{n}"
                       for t, seq, kind, a, b, n in trace]
    out.total_bytes = _send_bytes(trace)
    out.check("backup_run_strictly_faster_all_seeds", strict == seeds,
              f"{strict} of {seeds} strictly faster")
    out.check("final_loss_gap_below_5pct", worst_gap < 0.05,
              f"worst relative gap {worst_gap:.4f}")
    out.extras.update(seeds=seeds, worst_loss_gap=worst_gap)
    return out


# ---------------------------------------------------------------------------
# softsync: grouping arithmetic plus the n=1 barrier degeneration


def run_softsync_check(cfg: ExperimentConfig) -> ExperimentOutput:
    p = cfg.params
    learners = take_param(p, "learners", int, 8, minimum=1)
    updates = take_param(p, "updates", int, 50, minimum=1)
    eta = take_param(p, "eta", float, 0.5)
    wl = _workload_from(cfg)

    out = ExperimentOutput()
    for lam, n, want in ((16, 4, 4), (8, 8, 1), (8, 1, 8)):
        got = optim.AsyncConfig(learners=lam, softsync_n=n).c
        out.check(f"group_size_{lam}_{n}", got == want, f"c={got}, expected {want}")

    tail = simnet.Straggler(kind="exponential-tail", rate=1.0, tail_prob=0.3)
    sim = simnet.Simulator(simnet.LatencyModel(startup=0.2, per_byte=1e-5,
                                               straggler=tail, seed=cfg.seed))
    cluster = optim.SoftsyncCluster(sim, _shard_fn(wl, learners, 1), wl.loss,
                                    wl.initial_weights(), eta,
                                    optim.AsyncConfig(learners, softsync_n=1))
    history = cluster.run(updates)
    bytes_at = _cumulative_at(sim.trace, [r.sim_time for r in history])
    for rec, b in zip(history, bytes_at):
        out.records.append(MetricsRecord(
            step=rec.update, sim_time=rec.sim_time, loss=rec.loss,
            grad_norm=rec.grad_norm, bytes_sent=b,
            staleness_mean=rec.staleness_mean, effective_lr=eta,
            effective_batch=learners))
    stale = max(r.staleness_max for r in history)
    out.check("barrier_staleness_identically_zero", stale == 0,
              f"max staleness {stale}")
    out.trace_lines = sim.trace_lines()
    out.total_bytes = _send_bytes(sim.trace)
    return out


# ---------------------------------------------------------------------------
# easgd: hand values at 1e-15, then center convergence for tau in {1,4,16}


def run_easgd_check(cfg: ExperimentConfig) -> ExperimentOutput:
    p = cfg.params
    steps = take_param(p, "steps", int, 600, minimum=1)
    workers = take_param(p, "workers", int, 8, minimum=1)
    eta = take_param(p, "eta", float, 0.3)
    rho = take_param(p, "rho", float, 0.1)
    taus = take_param(p, "taus", list, [1, 4, 16])
    wl = _workload_from(cfg)

    out = ExperimentOutput()
    worker = optim.easgd_worker_update(np.array([2.0]), np.array([0.0]),
                                       np.array([0.0]), eta=0.1, rho=0.5)
    out.check("worker_hand_value", abs(worker[0] - 1.9) <= 1e-15, f"got {worker[0]!r}")
    center = optim.easgd_center_update(np.array([0.0]),
                                       [np.array([1.0]), np.array([3.0])],
                                       eta=0.1, rho=0.5)
    out.check("center_hand_value", abs(center[0] - 0.2) <= 1e-15, f"got {center[0]!r}")
    xs, c, _ = optim.easgd_run(lambda i, x: np.zeros(1),
                               [np.array([1.0]), np.array([3.0])], np.array([0.0]),
                               eta=0.1, rho=0.5, tau=1, steps=1)
    simultaneous = (abs(c[0] - 0.2) <= 1e-15 and abs(xs[0][0] - 0.95) <= 1e-15
                    and abs(xs[1][0] - 2.85) <= 1e-15)
    out.check("exchange_is_simultaneous", simultaneous,
              f"center {c[0]!r}, workers {xs[0][0]!r}/{xs[1][0]!r}")

    ok_all = True
    for i, tau in enumerate(taus):
        tau = take_param({"tau": tau}, "tau", int, minimum=1)
        xs0 = [np.full(wl.param_dim, 2.0 + k) for k in range(workers)]
        _, center, _ = optim.easgd_run(lambda i, x: wl.grad(x), xs0,
                                       np.zeros(wl.param_dim), eta=eta, rho=rho,
                                       tau=tau, steps=steps)
        dist = float(np.abs(center - wl.minimizer).max())
        ok_all &= dist < 1e-3
        out.records.append(MetricsRecord(
            step=tau, loss=float(wl.loss(center)), grad_norm=dist,
            effective_lr=eta, effective_batch=workers))
    out.check("center_within_1e-3_for_all_tau", ok_all,
              "max |center - w*| per tau in grad_norm column")
    return out


# ---------------------------------------------------------------------------
# lars: trust identities, published norm ratio, scale invariance


def run_lars_check(cfg: ExperimentConfig) -> ExperimentOutput:
    out = ExperimentOutput()
    trust = take_param(cfg.params, "trust", float, 0.5)

    lam = optim.lars_local_lr(np.array([3.0, 4.0]), np.array([0.0, 5.0]), trust=0.37)
    out.check("equal_norms_give_trust_exactly", lam == 0.37, f"got {lam!r}")
    out.records.append(MetricsRecord(step=0, effective_lr=lam))

    lam_fc = optim.lars_local_lr(np.array([1345.0, 0.0]), np.array([1.0, 0.0]), trust)
    lam_conv = optim.lars_local_lr(np.array([576.0, 0.0]), np.array([100.0, 0.0]), trust)
    ratio = lam_fc / lam_conv
    out.check("layer_rates_differ_by_norm_ratio", ratio == 1345.0 / 5.76,
              f"ratio {ratio!r}, expected {1345.0 / 5.76!r}")
    out.records.append(MetricsRecord(step=1, effective_lr=lam_fc, loss=ratio))
    out.records.append(MetricsRecord(step=2, effective_lr=lam_conv))

    w = np.array([3.0, -4.0, 1.0])
    g = np.array([0.5, 2.0, -1.5])
    base = optim.lars_local_lr(w, g, trust=trust)
    quad = optim.lars_local_lr(4.0 * w, 4.0 * g, trust=trust)
    trip = optim.lars_local_lr(3.0 * w, 3.0 * g, trust=trust)
    out.check("power_of_two_rescale_exact", quad == base, f"{quad!r} vs {base!r}")
    rel = abs(trip - base) / abs(base)
    out.check("joint_rescale_within_1e-12", rel <= 1e-12, f"relative drift {rel:.2e}")
    out.records.append(MetricsRecord(step=3, effective_lr=base, loss=rel))
    return out


# ---------------------------------------------------------------------------
# linear-scaling: warmup endpoints exact for k in {2, 8, 32}


def run_schedule_check(cfg: ExperimentConfig) -> ExperimentOutput:
    p = cfg.params
    base = take_param(p, "base_eta", float, 0.1)
    ks = take_param(p, "k", list, [2, 8, 32])
    warmup = take_param(p, "warmup_epochs", int, 5, minimum=0)

    out = ExperimentOutput()
    start_ok = plateau_ok = True
    case = 0
    for k in ks:
        k = take_param({"k": k}, "k", int, minimum=1)
        for epoch in range(warmup + 2):
            lr = optim.linear_scaling_schedule(base, k, epoch, warmup_epochs=warmup)
            out.records.append(MetricsRecord(step=case, loss=float(epoch),
                                             effective_lr=lr, effective_batch=k))
            case += 1
            if epoch == 0:
                start_ok &= lr == base
            if epoch >= warmup:
                plateau_ok &= lr == k * base
    out.check("warmup_starts_at_base_exactly", start_ok, f"base {base!r}")
    out.check("warmup_plateaus_at_k_times_base", plateau_ok, f"k in {ks}")

    cap_ok = True
    for epoch in range(0, 31, 5):
        b = optim.batch_size_schedule(16, 2.0, 5, epoch, max_b=512, dataset_size=8192)
        out.records.append(MetricsRecord(step=case, loss=float(epoch),
                                         effective_batch=b))
        case += 1
        cap_ok &= b <= 512
    out.check("batch_growth_respects_cap", cap_ok, "cap 512")
    return out


# ---------------------------------------------------------------------------
# dgc-sweep: momentum-corrected top-k vs the dense pipeline


class _CompressingWorker(simnet.Actor):
    def __init__(self, loop, node, index):
        self.loop = loop
        self.node = node
        self.index = index
        self.state = None
        if loop.sparsity is not None:
            self.state = compress.DgcState(loop.dim, momentum=0.0,
                                           sparsity=loop.sparsity,
                                           warmup=loop.warmup)

    def on_message(self, sim, src, payload):
        _, step, blob = payload
        weights = decode_vector(blob).values
        grad = self.loop.workload.grad(weights) / self.loop.workers
        if self.state is None:
            reply = encode_vector(GradientVector(grad))
        else:
            sg = compress.dgc_step(self.state, grad,
                                   epoch=step // self.loop.steps_per_epoch)
            reply = compress.sparse_encode(sg)
        sim.schedule_send(self.node, 0, ("grad", step, reply), nbytes=len(reply))


class _CompressingServer(simnet.Actor):
    def __init__(self, loop):
        self.loop = loop
        self.bucket = {}

    def on_message(self, sim, src, payload):
        _, step, blob = payload
        self.bucket[src] = blob
        if len(self.bucket) < self.loop.workers:
            return
        loop = self.loop
        order = sorted(self.bucket)
        if loop.sparsity is None:
            acc = None
            for node in order:
                dense = decode_vector(self.bucket[node]).values
                acc = dense.copy() if acc is None else acc + dense
        else:
            parts = [compress.sparse_decode(self.bucket[node]) for node in order]
            acc = compress.sparse_sum(parts, loop.dim).densify()
        grad_bytes = sum(len(b) for b in self.bucket.values())
        self.bucket = {}
        mean = acc / loop.workers
        loop.velocity = loop.momentum * loop.velocity + mean
        loop.weights = loop.weights - loop.eta * loop.velocity
        loop.record(sim, step, mean, grad_bytes)
        if step + 1 < loop.steps:
            loop.broadcast(sim, step + 1)
        else:
            loop.done = True


class _CompressionLoop:
    """One data-parallel run: p workers ship (possibly sparse) gradients."""

    def __init__(self, sim, workload, workers, eta, momentum, steps,
                 steps_per_epoch, sparsity, warmup):
        self.sim = sim
        self.workload = workload
        self.dim = workload.param_dim
        self.workers = workers
        self.eta = eta
        self.momentum = momentum
        self.steps = steps
        self.steps_per_epoch = steps_per_epoch
        self.sparsity = sparsity
        self.warmup = warmup
        self.weights = workload.initial_weights()
        self.velocity = np.zeros(self.dim)
        self.done = False
        self.rows = []           # (step, sim_time, loss, grad_norm, grad_bytes)
        sim.add_node(0, _CompressingServer(self))
        for i in range(workers):
            sim.add_node(i + 1, _CompressingWorker(self, i + 1, i))

    def broadcast(self, sim, step):
        blob = encode_vector(GradientVector(self.weights))
        for node in range(1, self.workers + 1):
            sim.schedule_send(0, node, ("weights", step, blob), nbytes=len(blob))

    def record(self, sim, step, mean, grad_bytes):
        self.rows.append((step, sim.now, float(self.workload.loss(self.weights)),
                          float(np.linalg.norm(mean)), grad_bytes))

    def run(self):
        self.broadcast(self.sim, 0)
        self.sim.run_until(lambda: self.done)
        return self.rows


def run_dgc_sweep(cfg: ExperimentConfig) -> ExperimentOutput:
    p = cfg.params
    workers = take_param(p, "workers", int, 4, minimum=1)
    eta = take_param(p, "eta", float, 0.02)
    momentum = take_param(p, "momentum", float, 0.9)
    steps_per_epoch = take_param(p, "steps_per_epoch", int, 100, minimum=1)
    epochs = take_param(p, "epochs", int, 6, minimum=1)
    warmup_epochs = take_param(p, "warmup_epochs", int, 5, minimum=1)
    levels = take_param(p, "sparsity_levels", list, [0.0, 0.9, 0.99])
    wl = _workload_from(cfg, dim=10_000, size=1)
    steps = steps_per_epoch * epochs

    out = ExperimentOutput()
    dense_msg = 5 + 8 * wl.param_dim
    finals = {}
    grad_totals = {}
    steady = {}
    case = 0
    last_sim = None
    for sparsity in [None] + list(levels):
        if sparsity is not None:
            s = take_param({"s": sparsity}, "s", float)
            if not 0.0 <= s < 1.0:
                raise ConfigError("params.sparsity_levels", f"need 0 <= s < 1, got {s}")
        warmup = None
        if sparsity:
            warmup = compress.WarmupRamp(min(0.75, sparsity), sparsity, warmup_epochs)
        sim = simnet.Simulator(simnet.LatencyModel(startup=0.05, per_byte=1e-7,
                                                   seed=cfg.seed))
        loop = _CompressionLoop(sim, wl, workers, eta, momentum, steps,
                                steps_per_epoch, sparsity, warmup)
        rows = loop.run()
        label = "dense" if sparsity is None else repr(float(sparsity))
        finals[label] = (loop.weights, rows[-1][2])
        grad_totals[label] = sum(r[4] for r in rows)
        steady[label] = sum(r[4] for r in rows if r[0] >= steps - steps_per_epoch)
        times = [r[1] for r in rows]
        bytes_at = _cumulative_at(sim.trace, times)
        for (step, t, loss, gnorm, grad_bytes), b in zip(rows, bytes_at):
            out.records.append(MetricsRecord(
                step=case, sim_time=t, loss=loss, grad_norm=gnorm, bytes_sent=b,
                compression_ratio=workers * dense_msg / grad_bytes,
                effective_lr=eta, effective_batch=workers))
            case += 1
        last_sim = sim

    out.trace_lines = last_sim.trace_lines()
    out.total_bytes = _send_bytes(last_sim.trace)

    if 0.0 in levels:
        same = finals["dense"][0].tobytes() == finals["0.0"][0].tobytes()
        out.check("zero_sparsity_matches_dense_bitwise", same,
                  f"max abs diff {np.abs(finals['dense'][0] - finals['0.0'][0]).max():.3e}")
    ordered = [grad_totals[repr(float(s))] for s in levels]
    decreasing = all(a > b for a, b in zip(ordered, ordered[1:]))
    out.check("gradient_bytes_strictly_decrease_with_sparsity", decreasing,
              f"totals {ordered}")
    top = repr(float(max(levels)))
    ratio = (workers * dense_msg * steps_per_epoch) / steady[top]
    out.check("steady_state_ratio_at_least_50x", ratio >= 50.0,
              f"final-epoch wire ratio {ratio:.1f}x")
    gap = abs(finals[top][1] - finals["dense"][1]) / finals["dense"][1]
    out.check("sparse_loss_within_10pct_of_dense", gap < 0.10,
              f"relative gap {gap:.4f}")
    out.extras.update(steady_ratio=ratio, loss_gap=gap,
                      dense_final_loss=finals["dense"][1],
                      sparse_final_loss=finals[top][1])
    return out


# ---------------------------------------------------------------------------
# error-feedback: residual accumulators conserve mass bit-exactly


def _dyadic_stream(seed, size):
    rng = np.random.default_rng(seed)
    while True:
        yield rng.integers(-1024, 1025, size).astype(np.float64) / 1024.0


def run_error_feedback(cfg: ExperimentConfig) -> ExperimentOutput:
    p = cfg.params
    steps = take_param(p, "steps", int, 1000, minimum=1)
    dim = take_param(p, "dim", int, 64, minimum=1)
    drop_percent = take_param(p, "drop_percent", float, 99.0)

    out = ExperimentOutput()
    stream = _dyadic_stream((cfg.seed, 401), dim)
    res = None
    cum_sent = np.zeros(dim)
    cum_raw = np.zeros(dim)
    sent_bytes = 0
    for t in range(steps):
        g = next(stream)
        sent, res = compress.gradient_drop(g, res, drop_percent)
        cum_sent += sent.densify()
        cum_raw += g
        sent_bytes += sent.encoding_bytes
        if t % 100 == 99:
            out.records.append(MetricsRecord(
                step=t, loss=float(np.abs((cum_sent + res) - cum_raw).max()),
                compression_ratio=(t + 1) * (5 + 8 * dim) / sent_bytes))
    drop_ok = np.array_equal(cum_sent + res, cum_raw)
    out.check("drop_conservation_exact", drop_ok,
              f"{steps} steps at {drop_percent}% drop")

    # length 2 keeps both side-means dyadic, so the identity stays bitwise
    stream = _dyadic_stream((cfg.seed, 403), 2)
    err = None
    cum_sent = np.zeros(2)
    cum_raw = np.zeros(2)
    for t in range(steps):
        g = next(stream)
        q, err = compress.onebit_quantize(g, err)
        cum_sent += q.dequantize()
        cum_raw += g
    onebit_ok = np.array_equal(cum_sent + err, cum_raw)
    out.check("onebit_conservation_exact", onebit_ok, f"{steps} steps")
    out.records.append(MetricsRecord(
        step=steps, loss=float(np.abs((cum_sent + err) - cum_raw).max())))
    return out


# ---------------------------------------------------------------------------
# mixed-precision: codec round-trip, underflow rescue, skip semantics


def run_precision_check(cfg: ExperimentConfig) -> ExperimentOutput:
    out = ExperimentOutput()

    bits = np.arange(65536, dtype=np.uint32).astype(np.uint16)
    finite = bits[(bits & 0x7C00) != 0x7C00]
    back, _ = precision.to_half_array(precision.from_half_array(finite))
    roundtrip = bool(np.array_equal(back, finite)) and finite.size == 63488
    out.check("all_finite_half_patterns_round_trip", roundtrip,
              f"{finite.size} patterns")
    out.records.append(MetricsRecord(step=0, loss=float(finite.size)))

    # eta*g = 1e-4 is below half resolution at w = 1.0 (spacing 2^-10)
    steps = 200
    w_half = precision.HalfValue.from_float(1.0)
    for _ in range(steps):
        delta, _ = precision.to_half(-1e-4)
        w_half = precision.half_add(w_half, delta)
    stagnated = precision.from_half(w_half) == 1.0

    state = precision.LossScaleState(scale=1.0)
    master = np.array([1.0], dtype=np.float32)
    for _ in range(steps):
        gbits, _ = precision.to_half_array(np.array([1e-4]))
        master, _, _ = precision.mixed_update(master, gbits, 1.0, state)
    progressed = float(master[0]) < 1.0
    out.check("pure_half_stagnates_mixed_progresses", stagnated and progressed,
              f"half stayed 1.0: {stagnated}; master {float(master[0]):.6f}")
    out.records.append(MetricsRecord(step=1, loss=float(master[0])))

    rng = np.random.default_rng((cfg.seed, 631))
    grads = 10.0 ** rng.uniform(-9.0, -4.0, 4096)
    plain, _ = precision.to_half_array(grads)
    scaled, _ = precision.to_half_array(grads * 8.0)
    n_plain = int(np.count_nonzero(plain))
    n_scaled = int(np.count_nonzero(scaled))
    out.check("scale_8_strictly_widens_representable_range", n_scaled > n_plain,
              f"{n_plain} -> {n_scaled} nonzero of {grads.size}")
    out.records.append(MetricsRecord(step=2, loss=float(n_scaled - n_plain)))

    state = precision.LossScaleState(scale=8.0)
    master = np.array([0.5, -0.25], dtype=np.float32)
    before = master.copy()
    overflow = np.array([0x7C00, 0x3C00], dtype=np.uint16)  # +inf pattern
    master, _, skipped = precision.mixed_update(master, overflow, 0.1, state)
    untouched = bool(np.array_equal(master, before))
    out.check("overflowed_batch_skipped_weights_untouched",
              skipped and untouched and state.skipped_batches == 1,
              f"skipped={skipped}, weights moved={not untouched}")
    clean, _ = precision.to_half_array(np.array([0.5, 0.5]) * state.scale)
    master2, _, skipped2 = precision.mixed_update(master, clean, 0.1, state)
    out.check("clean_batch_applies_after_skip",
              (not skipped2) and not np.array_equal(master2, master),
              "second batch must land")
    out.records.append(MetricsRecord(step=3, skip_count=state.skipped_batches))
    return out


# ---------------------------------------------------------------------------
# determinism: every other preset, run twice, byte-identical outputs


def run_determinism(cfg: ExperimentConfig) -> ExperimentOutput:
    import os
    import tempfile

    from .presets import PRESETS
    from .runner import run_experiment

    out = ExperimentOutput()
    names = [n for n in PRESETS if n != "determinism"]
    only = cfg.params.get("presets")
    if only is not None:
        only = take_param(cfg.params, "presets", list)
        for n in only:
            if n not in PRESETS or n == "determinism":
                raise ConfigError("params.presets", f"unknown preset {n!r}")
        names = only
    for i, name in enumerate(names):
        blobs = []
        for attempt in range(2):
            with tempfile.TemporaryDirectory() as tmp:
                run_experiment(PRESETS[name].config, out_dir=tmp)
                with open(os.path.join(tmp, "metrics.csv"), "rb") as f:
                    metrics = f.read()
                with open(os.path.join(tmp, "trace.log"), "rb") as f:
                    trace = f.read()
                blobs.append((metrics, trace))
        same_metrics = blobs[0][0] == blobs[1][0]
        same_trace = blobs[0][1] == blobs[1][1]
        out.check(f"{name}_byte_identical", same_metrics and same_trace,
                  f"metrics equal: {same_metrics}, trace equal: {same_trace}")
        out.records.append(MetricsRecord(
            step=i, loss=0.0 if (same_metrics and same_trace) else 1.0,
            bytes_sent=0, effective_batch=len(blobs[0][0])))
    out.extras["presets_checked"] = len(names)
    return out


RUNNERS = {
    "collective-correctness": run_collective_sweep,
    "step-counts": run_step_counts,
    "binary-blocks": run_blocks_structure,
    "ft-chaos": run_ft_chaos,
    "sync-exact": run_sync_exact,
    "single-node": run_single_node,
    "straggler-backup": run_straggler_paired,
    "softsync": run_softsync_check,
    "easgd-quadratic": run_easgd_check,
    "lars-layers": run_lars_check,
    "linear-scaling": run_schedule_check,
    "dgc-sweep": run_dgc_sweep,
    "error-feedback": run_error_feedback,
    "mixed-precision": run_precision_check,
    "determinism": run_determinism,
}
