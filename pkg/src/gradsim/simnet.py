"""Deterministic discrete-event network simulator.

One global event queue ordered by (time, sequence); the sequence number is
assigned at scheduling time, so ties at equal simulated time resolve in
scheduling order and two runs with identical inputs produce identical event
logs.  Virtual time only: nothing here sleeps.

Trace records are (time, seq, kind, from, to, bytes) with kind one of
send, deliver, drop, compute, timer, fail, slow.  Crashed receivers drop
messages silently; the sender can opt into a drop-notification timer.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import DeadlockError, DeadNodeError, SimTimeLimitError

# event codes (heap entries are tuples; smaller tuples compare faster)
_DELIVER = 0
_TIMER = 1
_COMPUTE = 2
_FAIL = 3

_TAIL_SALT = 7919  # keeps straggler draws out of other consumers' seed space


@dataclass(frozen=True)
class Straggler:
    """Extra-delay model for messages.

    kind "none": no extra delay.
    kind "exponential-tail": with probability tail_prob the message gains an
        Exponential(rate) delay (mean 1/rate), else nothing.
    kind "fixed-slow-set": messages to a node in slow_nodes take multiplier
        times the base delay; deterministic, no randomness.
    """

    kind: str = "none"
    rate: float = 1.0
    tail_prob: float = 0.0
    slow_nodes: frozenset = frozenset()
    multiplier: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "exponential-tail", "fixed-slow-set"):
            raise ValueError(f"unknown straggler kind {self.kind!r}")
        if self.kind == "exponential-tail":
            if self.rate <= 0:
                raise ValueError("exponential-tail rate must be > 0")
            if not 0.0 <= self.tail_prob <= 1.0:
                raise ValueError("tail_prob must be in [0, 1]")
        if self.kind == "fixed-slow-set" and self.multiplier < 1.0:
            raise ValueError("fixed-slow-set multiplier must be >= 1")


# Default tail calibration: with 16 senders per round, roughly 80% of rounds
# see the second-last arrival inside 2 s while the last straggles well past it.
DEFAULT_STRAGGLER = Straggler(kind="exponential-tail", rate=0.65, tail_prob=0.2)


def sample_straggler_tail(dist: Straggler, seed: int, draw_key) -> float:
    """Extra delay for one draw; deterministic given (seed, draw_key).

    draw_key is an int or tuple of ints.  Each draw uses its own generator
    derived from the key, so draws are independent of event-loop order.
    """
    if dist.kind != "exponential-tail":
        return 0.0
    if not isinstance(draw_key, tuple):
        draw_key = (int(draw_key),)
    rng = np.random.default_rng((seed, _TAIL_SALT) + tuple(int(k) for k in draw_key))
    if rng.random() < dist.tail_prob:
        return float(rng.exponential(1.0 / dist.rate))
    return 0.0


@dataclass
class LatencyModel:
    """Message delay = startup + per_byte * nbytes, plus straggler effects."""

    startup: float = 1.0
    per_byte: float = 0.0
    straggler: Straggler = field(default_factory=Straggler)
    seed: int = 0

    def __post_init__(self):
        if self.startup < 0 or self.per_byte < 0:
            raise ValueError("latency costs must be >= 0")

    def delay(self, dst: int, nbytes: int, draw_key) -> float:
        base = self.startup + self.per_byte * nbytes
        if self.straggler.kind == "fixed-slow-set" and dst in self.straggler.slow_nodes:
            base *= self.straggler.multiplier
        return base + sample_straggler_tail(self.straggler, self.seed, draw_key)


@dataclass(frozen=True)
class Topology:
    """Cluster shape: node count, replication, and the failure schedule.

    failure_schedule entries are (node, time, kind) or
    (node, time, "slow", multiplier).
    """

    p: int
    replica_factor: int = 0
    failure_schedule: tuple = ()

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("node count must be >= 1")
        if self.replica_factor < 0:
            raise ValueError("replica factor must be >= 0")
        for entry in self.failure_schedule:
            node, at_time, kind = entry[0], entry[1], entry[2]
            if at_time < 0:
                raise ValueError("failure times must be >= 0")
            if kind not in ("crash", "slow"):
                raise ValueError(f"unknown failure kind {kind!r}")

    def apply_failures(self, sim: "Simulator") -> None:
        for entry in self.failure_schedule:
            node, at_time, kind = entry[0], entry[1], entry[2]
            multiplier = entry[3] if len(entry) > 3 else 1.0
            sim.inject_failure(node, at_time, kind, multiplier)


class Actor:
    """Per-node event handlers; drivers subclass what they need."""

    def on_message(self, sim: "Simulator", src: int, payload) -> None:
        pass

    def on_timer(self, sim: "Simulator", tag, payload) -> None:
        pass

    def on_compute(self, sim: "Simulator", tag) -> None:
        pass


class Simulator:
    """The event loop.  All state changes flow through scheduled events."""

    def __init__(self, latency: LatencyModel | None = None, drop_notify_delay: float | None = None):
        self.latency = latency if latency is not None else LatencyModel()
        self.drop_notify_delay = drop_notify_delay
        self.now = 0.0
        self._seq = 0
        self._heap: list = []
        self.actors: dict[int, Actor] = {}
        self.alive: dict[int, bool] = {}
        self.slow: dict[int, float] = {}
        self.trace: list[tuple] = []
        self.on_failure: list = []  # callbacks (node, kind)
        self._watchers: list = []  # callables returning list[str] of waiting parties
        self._draw_counter = 0

    # -- setup ------------------------------------------------------------

    def add_node(self, node_id: int, actor: Actor) -> None:
        self.actors[node_id] = actor
        self.alive[node_id] = True
        self.slow[node_id] = 1.0

    def register_watcher(self, fn) -> None:
        """fn() -> list of human-readable 'who is waiting on what' strings."""
        self._watchers.append(fn)

    # -- scheduling -------------------------------------------------------

    def _next_seq(self) -> int:
        s = self._seq
        self._seq += 1
        return s

    def schedule_send(self, src: int, dst: int, payload, nbytes: int | None = None,
                      draw_key=None) -> None:
        """Send a message; delivery is queued at now + latency.

        payload bytes are measured with len() unless nbytes is given.
        Sending from a crashed node is an error; sending to a crashed node is
        allowed (the message is dropped at delivery time).
        """
        if not self.alive.get(src, False):
            raise DeadNodeError(f"node {src} is crashed and cannot send")
        if nbytes is None:
            nbytes = len(payload)
        if draw_key is None:
            draw_key = (self._draw_counter,)
            self._draw_counter += 1
        delay = self.latency.delay(dst, nbytes, draw_key) * self.slow[src]
        seq = self._next_seq()
        self.trace.append((self.now, seq, "send", src, dst, nbytes))
        heapq.heappush(self._heap, (self.now + delay, self._next_seq(), _DELIVER,
                                    src, dst, nbytes, payload))

    def schedule_timer(self, node: int, delay: float, tag, payload=None) -> None:
        if delay < 0:
            raise ValueError("timer delay must be >= 0")
        heapq.heappush(self._heap, (self.now + delay, self._next_seq(), _TIMER,
                                    node, tag, payload))

    def schedule_compute(self, node: int, duration: float, tag) -> None:
        if not self.alive.get(node, False):
            raise DeadNodeError(f"node {node} is crashed and cannot compute")
        if duration < 0:
            raise ValueError("compute duration must be >= 0")
        duration *= self.slow[node]
        heapq.heappush(self._heap, (self.now + duration, self._next_seq(), _COMPUTE,
                                    node, tag))

    def inject_failure(self, node: int, at_time: float, kind: str = "crash",
                       multiplier: float = 1.0) -> None:
        """Schedule a crash (stop processing) or slow (multiply delays) event."""
        if node not in self.actors:
            raise ValueError(f"unknown node {node}")
        if at_time < self.now:
            raise ValueError("failure time is in the past")
        if kind not in ("crash", "slow"):
            raise ValueError(f"unknown failure kind {kind!r}")
        if kind == "slow" and multiplier < 1.0:
            raise ValueError("slow multiplier must be >= 1")
        heapq.heappush(self._heap, (at_time, self._next_seq(), _FAIL,
                                    node, kind, multiplier))

    # -- run --------------------------------------------------------------

    def pending_deliveries(self) -> int:
        return sum(1 for ev in self._heap if ev[2] == _DELIVER)

    def run_until(self, cond, max_time: float | None = None) -> float:
        """Process events in (time, seq) order until cond() is true.

        Returns the simulated clock (elapsed time for a fresh simulator).
        Raises DeadlockError (naming the waiting parties) if the queue drains
        first, SimTimeLimitError if simulated time would pass max_time.
        """
        if cond():
            return self.now
        while self._heap:
            ev = heapq.heappop(self._heap)
            t = ev[0]
            if max_time is not None and t > max_time:
                heapq.heappush(self._heap, ev)
                raise SimTimeLimitError(
                    f"simulated time limit {max_time} reached at t={t}")
            self.now = t
            self._dispatch(ev)
            if cond():
                return self.now
        waiting = [w for fn in self._watchers for w in fn()]
        detail = "; ".join(waiting) if waiting else "no pending waiters registered"
        raise DeadlockError(f"event queue drained before completion: {detail}")

    def _dispatch(self, ev) -> None:
        code = ev[2]
        if code == _DELIVER:
            _, seq, _, src, dst, nbytes, payload = ev
            if not self.alive.get(dst, False):
                self.trace.append((self.now, seq, "drop", src, dst, nbytes))
                if self.drop_notify_delay is not None and self.alive.get(src, False):
                    self.schedule_timer(src, self.drop_notify_delay,
                                        ("drop-notify", dst), payload)
                return
            self.trace.append((self.now, seq, "deliver", src, dst, nbytes))
            self.actors[dst].on_message(self, src, payload)
        elif code == _TIMER:
            _, seq, _, node, tag, payload = ev
            if not self.alive.get(node, False):
                return
            self.trace.append((self.now, seq, "timer", node, node, 0))
            self.actors[node].on_timer(self, tag, payload)
        elif code == _COMPUTE:
            _, seq, _, node, tag = ev
            if not self.alive.get(node, False):
                return
            self.trace.append((self.now, seq, "compute", node, node, 0))
            self.actors[node].on_compute(self, tag)
        else:  # _FAIL
            _, seq, _, node, kind, multiplier = ev
            if kind == "crash":
                if not self.alive.get(node, False):
                    return  # already dead
                self.alive[node] = False
                self.trace.append((self.now, seq, "fail", node, node, 0))
            else:
                self.slow[node] = multiplier
                self.trace.append((self.now, seq, "slow", node, node, 0))
            for cb in self.on_failure:
                cb(node, kind)

    # -- trace ------------------------------------------------------------

    def trace_lines(self) -> list[str]:
        return [f"{t!r},{seq},{kind},{a},{b},{n}" for t, seq, kind, a, b, n in self.trace]


def conservation_counts(trace: list[tuple]) -> dict[str, int]:
    """Tally message lifecycle records for the conservation audit."""
    counts = {"send": 0, "deliver": 0, "drop": 0}
    for rec in trace:
        kind = rec[2]
        if kind in counts:
            counts[kind] += 1
    return counts
