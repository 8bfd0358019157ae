"""All-reduce algorithms as per-node state machines over the simulated net.

Four algorithms: ring, recursive halving/doubling (rhd), binary blocks, and
hierarchical (grouped masters).  Each node reacts only to messages addressed
to it; out-of-phase arrivals are stashed until the node catches up, so the
machines tolerate arbitrary delivery interleavings.  None of these tolerate
crashes: a participant failure aborts the collective (the replicated path
lives in ftreduce).

Message envelope (see protocol.md): magic, phase, collective id, step,
element range [start, end), then a serialized vector.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import simnet
from .errors import CollectiveFailedError, DecodeError, ShapeError
from .tensor import (
    GradientVector,
    Precision,
    chunk_partition,
    decode_vector,
    encode_vector,
    round_to_half,
)

MAGIC = 0xC7

PHASE_PRE = 0        # odd -> even pre-combine (non-power-of-two rhd)
PHASE_SCATTER = 1    # scatter-reduce
PHASE_GATHER = 2     # all-gather
PHASE_RETURN = 3     # final full vector back to pre-combined nodes
PHASE_UP = 4         # smaller block -> larger block partial sums
PHASE_DOWN = 5       # larger block -> smaller block final chunks
PHASE_COLLECT = 6    # follower -> group master
PHASE_BCAST = 7      # group master -> followers

PHASE_NAMES = {
    PHASE_PRE: "pre-combine",
    PHASE_SCATTER: "scatter-reduce",
    PHASE_GATHER: "all-gather",
    PHASE_RETURN: "return",
    PHASE_UP: "block-up",
    PHASE_DOWN: "block-down",
    PHASE_COLLECT: "gather",
    PHASE_BCAST: "broadcast",
}

_ENVELOPE = struct.Struct("<BBIHII")  # magic, phase, cid, step, start, end


def encode_message(cid: int, phase: int, step: int, start: int, end: int,
                   values: np.ndarray, precision: Precision) -> bytes:
    head = _ENVELOPE.pack(MAGIC, phase, cid, step, start, end)
    return head + encode_vector(GradientVector(np.ascontiguousarray(values), precision))


def decode_message(blob: bytes):
    if len(blob) < _ENVELOPE.size:
        raise DecodeError("collective message shorter than envelope")
    magic, phase, cid, step, start, end = _ENVELOPE.unpack_from(blob)
    if magic != MAGIC:
        raise DecodeError(f"bad collective magic {magic:#x}")
    vec = decode_vector(blob[_ENVELOPE.size:])
    return cid, phase, step, start, end, vec


def peek_cid(blob: bytes) -> int:
    return _ENVELOPE.unpack_from(blob)[2]


class NodeHub(simnet.Actor):
    """Dispatching actor: routes payloads to registered handlers.

    Byte payloads route on their first (magic) byte; object payloads go to
    object_handler; timers route on the first element of a tuple tag.
    """

    def __init__(self, node_id: int | None = None):
        self.node_id = node_id
        self.byte_handlers = {}
        self.object_handler = None
        self.timer_handlers = {}
        self.compute_handler = None
        self.collective_routes = {}

    def on_message(self, sim, src, payload):
        if isinstance(payload, (bytes, bytearray, memoryview)):
            handler = self.byte_handlers.get(payload[0])
            if handler is None:
                raise DecodeError(f"no handler registered for magic {payload[0]:#x}")
            handler(sim, src, bytes(payload))
        else:
            if self.object_handler is None:
                raise DecodeError("no handler registered for object payloads")
            self.object_handler(sim, src, payload)

    def on_timer(self, sim, tag, payload):
        key = tag[0] if isinstance(tag, tuple) and tag else tag
        handler = self.timer_handlers.get(key)
        if handler is not None:
            handler(sim, tag, payload)

    def on_compute(self, sim, tag):
        if self.compute_handler is not None:
            self.compute_handler(sim, tag)


# -- block decomposition ------------------------------------------------------


@dataclass(frozen=True)
class BlockDecomposition:
    """Power-of-two blocks (descending) and the node -> (block, rank) map."""

    blocks: tuple
    assignment: dict

    def members(self, block_index: int) -> list:
        off = sum(self.blocks[:block_index])
        return list(range(off, off + self.blocks[block_index]))


def binary_blocks_decompose(p: int) -> BlockDecomposition:
    """Split p nodes into blocks sized by the set bits of p, largest first."""
    if p < 1:
        raise ValueError("node count must be >= 1")
    blocks = []
    bit = 1 << (p.bit_length() - 1)
    rest = p
    while bit:
        if rest & bit:
            blocks.append(bit)
        bit >>= 1
    assignment = {}
    node = 0
    for bi, size in enumerate(blocks):
        for rank in range(size):
            assignment[node] = (bi, rank)
            node += 1
    return BlockDecomposition(tuple(blocks), assignment)


def _overlaps(lo: int, hi: int, grid: np.ndarray) -> list:
    """Nonempty intersections of [lo, hi) with each grid cell: (cell, a, b)."""
    out = []
    for t in range(len(grid) - 1):
        a = max(lo, int(grid[t]))
        b = min(hi, int(grid[t + 1]))
        if a < b:
            out.append((t, a, b))
    return out


# -- per-node machines --------------------------------------------------------


class CollectiveState:
    """State shared by every algorithm's per-node machine."""

    algorithm = "?"

    def __init__(self, session: "CollectiveSession", node: int, values: np.ndarray):
        self.session = session
        self.node = node
        self.values = np.array(values, dtype=np.float64)
        self.phase = "scatter-reduce"
        self.step = 0
        self.stash = {}
        self.done = False
        self.on_complete = None  # overridden when embedded in another machine
        self.apply_op = True     # embedded machines leave the division to the outer one

    @property
    def p(self) -> int:
        return self.session.p

    def send(self, sim, dst, phase, step, start, end, values=None):
        if values is None:
            values = self.values[start:end]
        self.session._send(sim, self.node, dst, phase, step, start, end, values)

    def reduce_slice(self, start, end, incoming):
        self.values[start:end] += incoming
        if self.session.precision is Precision.HALF:
            self.values[start:end] = round_to_half(self.values[start:end])

    def store_slice(self, start, end, incoming):
        self.values[start:end] = incoming

    def finish(self, sim):
        if self.apply_op and self.session.op == "average":
            self.values /= self.session.p
            if self.session.precision is Precision.HALF:
                self.values = round_to_half(self.values)
        self.phase = "done"
        self.done = True
        if self.on_complete is not None:
            self.on_complete(sim)
        else:
            self.session._note_done(self.node)

    def describe_wait(self) -> str:
        return f"node {self.node} ({self.algorithm}) waiting in {self.phase} step {self.step}"

    # stash plumbing: process only the message the machine expects next

    def feed(self, sim, src, msg):
        self.stash.setdefault(self._key(msg), []).append((src, msg))
        self._drain(sim)

    def _key(self, msg):
        _, phase, step, _, _, _ = msg
        return (phase, step)

    def _drain(self, sim):
        while not self.done:
            key = self.expected_key()
            if key is None or key not in self.stash:
                return
            pending = self.stash[key]
            src, msg = pending.pop(0)
            if not pending:
                del self.stash[key]
            self.handle(sim, src, msg)

    def expected_key(self):
        raise NotImplementedError

    def handle(self, sim, src, msg):
        raise NotImplementedError


class _Ring(CollectiveState):
    """Moves chunk (rank - j) mod p to the right neighbor at each step."""

    algorithm = "ring"

    def __init__(self, session, node, values, members, mode="all-reduce"):
        super().__init__(session, node, values)
        self.members = members
        self.rank = members.index(node)
        self.pr = len(members)
        self.bounds = chunk_partition(len(self.values), self.pr)
        self.mode = mode

    def _chunk_range(self, c):
        return int(self.bounds[c]), int(self.bounds[c + 1])

    def start(self, sim):
        if self.pr == 1:
            self.finish(sim)
            return
        if self.mode == "all-gather":
            self.phase = "all-gather"
            self._send_gather(sim)
        else:
            self._send_scatter(sim)

    def _right(self):
        return self.members[(self.rank + 1) % self.pr]

    def _send_scatter(self, sim):
        c = (self.rank - self.step) % self.pr
        start, end = self._chunk_range(c)
        self.send(sim, self._right(), PHASE_SCATTER, self.step, start, end)

    def _send_gather(self, sim):
        c = (self.rank + 1 - self.step) % self.pr
        start, end = self._chunk_range(c)
        self.send(sim, self._right(), PHASE_GATHER, self.step, start, end)

    def expected_key(self):
        if self.phase == "scatter-reduce":
            return (PHASE_SCATTER, self.step)
        if self.phase == "all-gather":
            return (PHASE_GATHER, self.step)
        return None

    def handle(self, sim, src, msg):
        _, phase, step, start, end, vec = msg
        if phase == PHASE_SCATTER:
            self.reduce_slice(start, end, vec.values)
            self.step += 1
            if self.step < self.pr - 1:
                self._send_scatter(sim)
            elif self.mode == "scatter-reduce":
                self.finish(sim)
            else:
                self.phase = "all-gather"
                self.step = 0
                self._send_gather(sim)
        else:
            self.store_slice(start, end, vec.values)
            self.step += 1
            if self.step < self.pr - 1:
                self._send_gather(sim)
            else:
                self.finish(sim)

    def owned_chunk(self) -> int:
        # after scatter-reduce node rank holds the full sum of this chunk
        return (self.rank + 1) % self.pr


def _core_split(clo, chi, upper):
    mid = clo + (chi - clo) // 2
    if upper:
        return (mid, chi), (clo, mid)  # keep, send
    return (clo, mid), (mid, chi)


class _Rhd(CollectiveState):
    """Recursive halving/doubling with the non-power-of-two pre/return wrap.

    For p = pz + r (pz the largest power of two <= p), the first 2r nodes
    pair up: odds send their vector to the even on their left, evens join the
    core alongside the last p - 2r nodes.  After the core all-gather the
    evens return the finished vector to their odd partner.
    """

    algorithm = "rhd"

    def __init__(self, session, node, values, members):
        super().__init__(session, node, values)
        self.members = members
        p = len(members)
        pz = 1 << (p.bit_length() - 1)
        if pz > p:
            pz >>= 1
        self.pz = pz
        self.r = p - pz
        idx = members.index(node)
        self.idx = idx
        if idx < 2 * self.r:
            self.role = "combiner" if idx % 2 == 0 else "idle"
        else:
            self.role = "core"
        # core rank c maps to member index 2c for c < r, c + r otherwise
        self.core_members = [members[2 * c] if c < self.r else members[c + self.r]
                             for c in range(pz)]
        self.core_rank = (idx // 2) if idx < 2 * self.r else idx - self.r
        self.k = pz.bit_length() - 1
        self.bounds = chunk_partition(len(self.values), pz)
        self.range = (0, pz)  # chunk-space range held during scatter
        self.phase = "pre-combine" if self.r else "scatter-reduce"

    def start(self, sim):
        if len(self.members) == 1:
            self.finish(sim)
            return
        if self.role == "idle":
            n = len(self.values)
            self.send(sim, self.members[self.idx - 1], PHASE_PRE, 0, 0, n)
            self.phase = "await-return"
            return
        if self.role == "core":
            self._begin_core(sim)
        # combiners wait for the pre-combine message before entering the core

    def _begin_core(self, sim):
        self.phase = "scatter-reduce"
        self.step = 0
        if self.k == 0:
            self._scatter_done(sim)
        else:
            self._send_scatter(sim)

    def _partner(self, dist):
        return self.core_members[self.core_rank ^ dist]

    def _send_scatter(self, sim):
        dist = self.pz >> (self.step + 1)
        upper = bool(self.core_rank & dist)
        keep, out = _core_split(*self.range, upper)
        start, end = int(self.bounds[out[0]]), int(self.bounds[out[1]])
        self.send(sim, self._partner(dist), PHASE_SCATTER, self.step, start, end)
        self.range = keep

    def _send_gather(self, sim):
        dist = 1 << self.step
        start, end = int(self.bounds[self.range[0]]), int(self.bounds[self.range[1]])
        self.send(sim, self._partner(dist), PHASE_GATHER, self.step, start, end)

    def expected_key(self):
        if self.phase == "pre-combine":
            return (PHASE_PRE, 0)
        if self.phase == "scatter-reduce":
            return (PHASE_SCATTER, self.step)
        if self.phase == "all-gather":
            return (PHASE_GATHER, self.step)
        if self.phase == "await-return":
            return (PHASE_RETURN, 0)
        return None

    def handle(self, sim, src, msg):
        _, phase, step, start, end, vec = msg
        if phase == PHASE_PRE:
            self.reduce_slice(start, end, vec.values)
            self._begin_core(sim)
        elif phase == PHASE_SCATTER:
            self.reduce_slice(start, end, vec.values)
            self.step += 1
            if self.step < self.k:
                self._send_scatter(sim)
            else:
                self._scatter_done(sim)
        elif phase == PHASE_GATHER:
            self.store_slice(start, end, vec.values)
            dist = 1 << self.step
            clo, chi = self.range
            width = chi - clo
            if self.core_rank & dist:
                self.range = (clo - width, chi)
            else:
                self.range = (clo, chi + width)
            self.step += 1
            if self.step < self.k:
                self._send_gather(sim)
            else:
                self._gather_done(sim)
        elif phase == PHASE_RETURN:
            self.store_slice(start, end, vec.values)
            self.finish(sim)

    def _scatter_done(self, sim):
        self.phase = "all-gather"
        self.step = 0
        if self.k == 0:
            self._gather_done(sim)
        else:
            self._send_gather(sim)

    def _gather_done(self, sim):
        if self.role == "combiner":
            n = len(self.values)
            self.send(sim, self.members[self.idx + 1], PHASE_RETURN, 0, 0, n)
        self.finish(sim)


class _Blocks(CollectiveState):
    """Binary blocks: per-block rhd core plus the up/down chunk chain.

    Partial sums flow from the smallest block up to the largest; the largest
    block then owns the global reduction chunk-wise and the finished chunks
    cascade back down.  Chunk grids differ between blocks, so transfers
    re-slice by element index (order-independent: ranges are disjoint).
    """

    algorithm = "binary-blocks"

    def __init__(self, session, node, values, decomp: BlockDecomposition):
        super().__init__(session, node, values)
        self.decomp = decomp
        self.bi, self.rank = decomp.assignment[node]
        self.block_members = decomp.members(self.bi)
        size = decomp.blocks[self.bi]
        self.size = size
        self.k = size.bit_length() - 1
        self.bounds = chunk_partition(len(self.values), size)
        self.range = (0, size)
        n = len(self.values)
        self.my_lo, self.my_hi = int(self.bounds[self.rank]), int(self.bounds[self.rank + 1])
        last = len(decomp.blocks) - 1
        # inbound partial sums from the next smaller block
        if self.bi < last:
            smaller = chunk_partition(n, decomp.blocks[self.bi + 1])
            self.up_expected = len(_overlaps(self.my_lo, self.my_hi, smaller))
        else:
            self.up_expected = 0
        # inbound finished chunks from the next larger block
        if self.bi > 0:
            larger = chunk_partition(n, decomp.blocks[self.bi - 1])
            self.down_expected = len(_overlaps(self.my_lo, self.my_hi, larger))
        else:
            self.down_expected = 0
        self.up_buffer = []
        self.down_seen = 0
        self.scatter_complete = False

    def start(self, sim):
        if self.p == 1:
            self.finish(sim)
            return
        self.step = 0
        if self.k == 0:
            self._scatter_done(sim)
        else:
            self._send_scatter(sim)

    def _partner(self, dist):
        return self.block_members[self.rank ^ dist]

    def _send_scatter(self, sim):
        dist = self.size >> (self.step + 1)
        keep, out = _core_split(*self.range, bool(self.rank & dist))
        start, end = int(self.bounds[out[0]]), int(self.bounds[out[1]])
        self.send(sim, self._partner(dist), PHASE_SCATTER, self.step, start, end)
        self.range = keep

    def _send_gather(self, sim):
        dist = 1 << self.step
        start, end = int(self.bounds[self.range[0]]), int(self.bounds[self.range[1]])
        self.send(sim, self._partner(dist), PHASE_GATHER, self.step, start, end)

    def expected_key(self):
        if self.phase == "scatter-reduce":
            return (PHASE_SCATTER, self.step)
        if self.phase == "await-up":
            return (PHASE_UP, 0)
        if self.phase == "await-down":
            return (PHASE_DOWN, 0)
        if self.phase == "all-gather":
            return (PHASE_GATHER, self.step)
        return None

    def handle(self, sim, src, msg):
        _, phase, step, start, end, vec = msg
        if phase == PHASE_SCATTER:
            self.reduce_slice(start, end, vec.values)
            self.step += 1
            if self.step < self.k:
                self._send_scatter(sim)
            else:
                self._scatter_done(sim)
        elif phase == PHASE_UP:
            self.up_buffer.append((start, end, vec.values))
            if self.scatter_complete and len(self.up_buffer) == self.up_expected:
                self._apply_up(sim)
        elif phase == PHASE_DOWN:
            self.store_slice(start, end, vec.values)
            self.down_seen += 1
            if self.down_seen == self.down_expected:
                self._down_complete(sim)
        elif phase == PHASE_GATHER:
            self.store_slice(start, end, vec.values)
            dist = 1 << self.step
            clo, chi = self.range
            width = chi - clo
            if self.rank & dist:
                self.range = (clo - width, chi)
            else:
                self.range = (clo, chi + width)
            self.step += 1
            if self.step < self.k:
                self._send_gather(sim)
            else:
                self.finish(sim)

    def _scatter_done(self, sim):
        self.scatter_complete = True
        self.phase = "await-up"
        if len(self.up_buffer) == self.up_expected:
            self._apply_up(sim)

    def _apply_up(self, sim):
        # fixed application order keeps float sums independent of arrival order
        for start, end, vals in sorted(self.up_buffer, key=lambda t: (t[0], t[1])):
            self.reduce_slice(start, end, vals)
        self.up_buffer = []
        if self.bi > 0:
            larger = chunk_partition(len(self.values), self.decomp.blocks[self.bi - 1])
            targets = self.decomp.members(self.bi - 1)
            for t, a, b in _overlaps(self.my_lo, self.my_hi, larger):
                self.send(sim, targets[t], PHASE_UP, 0, a, b)
            if self.down_expected == 0:
                self._down_complete(sim)  # empty chunk: nothing owed to us
            else:
                self.phase = "await-down"
        else:
            self._down_complete(sim)  # largest block already holds the result

    def _down_complete(self, sim):
        last = len(self.decomp.blocks) - 1
        if self.bi < last:
            smaller = chunk_partition(len(self.values), self.decomp.blocks[self.bi + 1])
            targets = self.decomp.members(self.bi + 1)
            for t, a, b in _overlaps(self.my_lo, self.my_hi, smaller):
                self.send(sim, targets[t], PHASE_DOWN, 0, a, b)
        self.phase = "all-gather"
        self.step = 0
        if self.k == 0:
            self.finish(sim)
        else:
            self._send_gather(sim)


class _Hierarchical(CollectiveState):
    """Followers feed a group master; masters ring-reduce; masters broadcast."""

    algorithm = "hierarchical"

    def __init__(self, session, node, values, members, group_size):
        super().__init__(session, node, values)
        self.members = members
        idx = members.index(node)
        g = group_size
        lo = (idx // g) * g
        self.group = members[lo:lo + g]
        self.master = self.group[0]
        self.is_master = node == self.master
        self.masters = [members[i] for i in range(0, len(members), g)]
        self.collect_buffer = {}
        self.expected = len(self.group) - 1 if self.is_master else 0
        self.ring = None
        self.pre_ring = []  # ring traffic arriving before this master's group is in
        self.phase = "gather"

    def start(self, sim):
        if not self.is_master:
            n = len(self.values)
            self.send(sim, self.master, PHASE_COLLECT, 0, 0, n)
            self.phase = "await-broadcast"
            return
        if self.expected == 0:
            self._group_reduced(sim)

    def expected_key(self):
        # masters accept collect/ring traffic in any order; route in handle
        return None

    def feed(self, sim, src, msg):
        # no lockstep at this level; the inner ring keeps its own stash
        self.handle(sim, src, msg)

    def handle(self, sim, src, msg):
        _, phase, step, start, end, vec = msg
        if phase == PHASE_COLLECT:
            self.collect_buffer[src] = vec.values
            if len(self.collect_buffer) == self.expected:
                for s in sorted(self.collect_buffer):
                    self.reduce_slice(0, len(self.values), self.collect_buffer[s])
                self.collect_buffer = {}
                self._group_reduced(sim)
        elif phase in (PHASE_SCATTER, PHASE_GATHER):
            if self.ring is None:
                self.pre_ring.append((src, msg))
            else:
                self.ring.feed(sim, src, msg)
        elif phase == PHASE_BCAST:
            self.store_slice(start, end, vec.values)
            self.finish(sim)

    def _group_reduced(self, sim):
        if len(self.masters) == 1:
            self._ring_done(sim)
            return
        self.phase = "master-ring"
        self.ring = _Ring(self.session, self.node, self.values, self.masters)
        self.ring.on_complete = self._ring_done
        self.ring.apply_op = False
        self.ring.start(sim)
        for src, msg in self.pre_ring:
            self.ring.feed(sim, src, msg)
        self.pre_ring = []

    def _ring_done(self, sim):
        if self.ring is not None:
            self.values = self.ring.values
        n = len(self.values)
        for follower in self.group[1:]:
            self.send(sim, follower, PHASE_BCAST, 0, 0, n)
        self.finish(sim)


# -- session driver -----------------------------------------------------------


def _as_values(vectors):
    vals = []
    precision = None
    for v in vectors:
        if isinstance(v, GradientVector):
            vals.append(v.values)
            if precision is None:
                precision = v.precision
            elif precision is not v.precision:
                raise ShapeError("mixed precisions across input vectors")
        else:
            vals.append(np.ascontiguousarray(v, dtype=np.float64))
    lengths = {len(v) for v in vals}
    if len(lengths) > 1:
        raise ShapeError(f"input vectors differ in length: {sorted(lengths)}")
    return vals, (precision or Precision.SINGLE)


class CollectiveSession:
    """Builds per-node machines on a simulator and runs one collective.

    Reusable within a larger simulation: nodes may already carry a NodeHub
    (the optimizer drivers do this); fresh simulators get hubs created here.
    """

    def __init__(self, sim, algorithm, vectors, op="sum", node_ids=None, cid=0,
                 group_size=None, mode="all-reduce"):
        if op not in ("sum", "average"):
            raise ValueError(f"unknown reduction op {op!r}")
        values, precision = _as_values(vectors)
        self.sim = sim
        self.algorithm = algorithm
        self.op = op
        self.cid = cid
        self.precision = precision
        self.p = len(values)
        self.node_ids = list(node_ids) if node_ids is not None else list(range(self.p))
        if len(self.node_ids) != self.p:
            raise ShapeError("one input vector per node required")
        self.machines = {}
        self.activity = {n: {} for n in self.node_ids}
        self._done = 0
        self.failed_node = None
        members = self.node_ids
        for node, vals in zip(members, values):
            if algorithm == "ring":
                m = _Ring(self, node, vals, members, mode=mode)
            elif algorithm == "rhd":
                m = _Rhd(self, node, vals, members)
            elif algorithm == "binary-blocks":
                m = _Blocks(self, node, vals, binary_blocks_decompose(self.p))
            elif algorithm == "hierarchical":
                if not group_size or group_size < 1:
                    raise ValueError("hierarchical needs group_size >= 1")
                m = _Hierarchical(self, node, vals, members, group_size)
            else:
                raise ValueError(f"unknown algorithm {algorithm!r}")
            self.machines[node] = m
            hub = sim.actors.get(node)
            if hub is None:
                hub = NodeHub(node)
                sim.add_node(node, hub)
            elif not isinstance(hub, NodeHub):
                raise TypeError(f"node {node} actor cannot route collective messages")
            hub.node_id = node
            hub.collective_routes[self.cid] = self
            hub.byte_handlers.setdefault(MAGIC, _make_dispatch(hub))
        self._watcher = self._describe_waiters
        sim.register_watcher(self._watcher)
        self._failure_cb = self._on_failure
        sim.on_failure.append(self._failure_cb)
        self._started = False

    def _describe_waiters(self):
        return [m.describe_wait() for m in self.machines.values() if not m.done]

    def _on_failure(self, node, kind):
        if kind == "crash" and node in self.machines and self.failed_node is None:
            if not self.complete:
                self.failed_node = node

    @property
    def complete(self) -> bool:
        return self._done == self.p

    def _note_done(self, node) -> None:
        self._done += 1

    def _count(self, node, phase, direction):
        per_node = self.activity[node]
        key = (PHASE_NAMES[phase], direction)
        per_node[key] = per_node.get(key, 0) + 1

    def _send(self, sim, src, dst, phase, step, start, end, values):
        blob = encode_message(self.cid, phase, step, start, end, values, self.precision)
        sim.schedule_send(src, dst, blob)
        self._count(src, phase, "sent")

    def deliver(self, sim, src, dst, payload):
        msg = decode_message(payload)
        self._count(dst, msg[1], "recv")
        self.machines[dst].feed(sim, src, msg)

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for node in self.node_ids:
            self.machines[node].start(self.sim)

    def run(self, max_time=None) -> list:
        """Drive the simulator until every node finishes; return the results."""
        self.start()
        sim = self.sim
        try:
            sim.run_until(lambda: self.complete or self.failed_node is not None,
                          max_time=max_time)
        finally:
            self._detach(sim)
        if self.failed_node is not None:
            raise CollectiveFailedError(self.failed_node)
        return [self.machines[n].values for n in self.node_ids]

    def _detach(self, sim):
        if self._watcher in sim._watchers:
            sim._watchers.remove(self._watcher)
        if self._failure_cb in sim.on_failure:
            sim.on_failure.remove(self._failure_cb)
        for node in self.node_ids:
            hub = sim.actors.get(node)
            if isinstance(hub, NodeHub):
                hub.collective_routes.pop(self.cid, None)

    def idle_nodes(self, phases) -> set:
        """Nodes with no traffic in the given phase names."""
        idle = set()
        for node, counts in self.activity.items():
            if not any(counts.get((ph, d), 0) for ph in phases for d in ("sent", "recv")):
                idle.add(node)
        return idle


def _make_dispatch(hub: NodeHub):
    def dispatch(sim, src, payload):
        cid = peek_cid(payload)
        session = hub.collective_routes.get(cid)
        if session is None:
            raise DecodeError(f"no collective session with id {cid}")
        session.deliver(sim, src, hub.node_id, payload)
    return dispatch


# -- functional wrappers ------------------------------------------------------


def _fresh_sim(latency=None):
    return simnet.Simulator(latency or simnet.LatencyModel(startup=0.0, per_byte=0.0))


def ring_all_reduce(vectors, op="sum", sim=None, max_time=None):
    sim = sim or _fresh_sim()
    return CollectiveSession(sim, "ring", vectors, op=op).run(max_time=max_time)


def rhd_all_reduce(vectors, op="sum", sim=None, max_time=None):
    sim = sim or _fresh_sim()
    return CollectiveSession(sim, "rhd", vectors, op=op).run(max_time=max_time)


def binary_blocks_all_reduce(vectors, op="sum", sim=None, max_time=None):
    sim = sim or _fresh_sim()
    return CollectiveSession(sim, "binary-blocks", vectors, op=op).run(max_time=max_time)


def hierarchical_all_reduce(vectors, group_size, op="sum", sim=None, max_time=None):
    sim = sim or _fresh_sim()
    return CollectiveSession(sim, "hierarchical", vectors, op=op,
                             group_size=group_size).run(max_time=max_time)


def ring_scatter_reduce(vectors, op="sum", sim=None, max_time=None):
    """Run only the reduce half; returns (owned chunk index, chunk values) per node."""
    sim = sim or _fresh_sim()
    session = CollectiveSession(sim, "ring", vectors, op=op, mode="scatter-reduce")
    session.run(max_time=max_time)
    out = []
    for node in session.node_ids:
        m = session.machines[node]
        c = m.owned_chunk()
        start, end = m._chunk_range(c)
        out.append((c, m.values[start:end].copy()))
    return out


def ring_all_gather(chunks, sim=None, max_time=None):
    """Inverse of ring_scatter_reduce: spread owned chunks to every node.

    chunks: per-node (owned chunk index, values) in node order.
    """
    p = len(chunks)
    sizes = {}
    for c, vals in chunks:
        sizes[c] = len(vals)
    if sorted(sizes) != list(range(p)):
        raise ShapeError("chunk indices must cover 0..p-1 exactly once")
    n = sum(sizes.values())
    bounds = [0]
    for c in range(p):
        bounds.append(bounds[-1] + sizes[c])
    vectors = []
    for i, (c, vals) in enumerate(chunks):
        v = np.zeros(n)
        v[bounds[c]:bounds[c + 1]] = vals
        vectors.append(v)
    sim = sim or _fresh_sim()
    session = CollectiveSession(sim, "ring", vectors, mode="all-gather")
    return session.run(max_time=max_time)
