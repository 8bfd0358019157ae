"""Fault-tolerant all-reduce: binary blocks over replicated logical nodes.

Every logical node is a replica group (3 or 5 members) running a trimmed
Raft: randomized-timeout leader election, full-log replication, and a commit
index.  The group leader drives the logical node's share of a binary-blocks
all-reduce; each reduction/concatenation result becomes a log entry, and an
outbound collective message is released only once the entry it depends on
has committed.  A new leader resumes mid-collective by replaying its log and
re-sending anything the old leader might not have delivered; receivers
deduplicate by message identity and re-acknowledge.

Replication ships the full log in every append (prev_index is always -1).
That is wasteful for long logs but removes log-repair corner cases; election
safety then rests on voters comparing (last log term, log length), which
request_vote carries explicitly.

Replica ids are dense: logical node g maps to sim nodes [g*rf, (g+1)*rf) and
replica 0 of each group is the bootstrap leader at term 1, so a failure-free
run elects nobody.  Wire encodings live in protocol.md.
"""
from __future__ import annotations

import struct

import numpy as np

from . import simnet
from .collectives import (
    PHASE_DOWN,
    PHASE_GATHER,
    PHASE_SCATTER,
    PHASE_UP,
    _core_split,
    _overlaps,
    binary_blocks_decompose,
)
from .errors import ConfigError, DecodeError, GroupUnavailableError
from .tensor import GradientVector, Precision, chunk_partition, decode_vector, encode_vector

PHASE_INPUT = 8  # entry 0: the logical node's input vector snapshot

# shared phase codes; progression order for blocks differs from numeric order
_PHASE_RANK = {PHASE_INPUT: 0, PHASE_SCATTER: 1, PHASE_UP: 2, PHASE_DOWN: 3, PHASE_GATHER: 4}

RAFT_MAGIC = 0xA7
RV, VOTE, APPEND, APPEND_ACK = 0, 1, 2, 3
_RV = struct.Struct("<BBIIiI")            # magic, sub, term, candidate, last_log_index, last_log_term
_VOTE = struct.Struct("<BBIB")            # magic, sub, term, granted
_APPEND_HEAD = struct.Struct("<BBIIiiI")  # magic, sub, term, leader, prev_index, commit_index, count
_ACK = struct.Struct("<BBIi")             # magic, sub, term, match_index

XG_MAGIC = 0xB7
XG_DATA, XG_ACK, XG_REJECT = 0, 1, 2
_XG_HEAD = struct.Struct("<BBiiIBIII")    # magic, sub, src_logical, dst_logical, cid, phase, step, start, end
_XG_REJECT_TAIL = struct.Struct("<Ii")    # term, leader_hint (sim id, -1 unknown)

_ENTRY_HEAD = struct.Struct("<IBIIIiI")   # cid, phase, step, start, end, src_logical, term


class ReductionEntry:
    """One replicated state change: the chunk a reduce/concat step produced."""

    __slots__ = ("cid", "phase", "step", "start", "end", "src_logical", "term", "values")

    def __init__(self, cid, phase, step, start, end, src_logical, term, values):
        self.cid = cid
        self.phase = phase
        self.step = step
        self.start = start
        self.end = end
        self.src_logical = src_logical
        self.term = term
        self.values = np.asarray(values, dtype=np.float64)

    def msg_id(self):
        return (self.src_logical, self.phase, self.step, self.start, self.end)

    def encode(self) -> bytes:
        head = _ENTRY_HEAD.pack(self.cid, self.phase, self.step, self.start,
                                self.end, self.src_logical, self.term)
        return head + encode_vector(GradientVector(self.values, Precision.SINGLE))

    def __eq__(self, other):
        return (isinstance(other, ReductionEntry)
                and self.msg_id() == other.msg_id()
                and self.cid == other.cid and self.term == other.term
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return (f"ReductionEntry(phase={self.phase}, step={self.step}, "
                f"range=[{self.start},{self.end}), src={self.src_logical}, term={self.term})")


def encode_entries(entries) -> bytes:
    return b"".join(e.encode() for e in entries)


def decode_entries(blob: bytes, offset: int, count: int):
    out = []
    for _ in range(count):
        if len(blob) < offset + _ENTRY_HEAD.size:
            raise DecodeError("truncated log entry")
        cid, phase, step, start, end, src, term = _ENTRY_HEAD.unpack_from(blob, offset)
        offset += _ENTRY_HEAD.size
        if len(blob) < offset + 5:
            raise DecodeError("truncated entry payload")
        n = struct.unpack_from("<I", blob, offset + 1)[0]
        size = 5 + 8 * n  # precision byte + u32 count + f64 values
        vec = decode_vector(blob[offset:offset + size])
        offset += size
        out.append(ReductionEntry(cid, phase, step, start, end, src, term, vec.values))
    return out, offset


class ReplicaGroup:
    """Membership and current leadership for one logical node's replica set."""

    def __init__(self, logical: int, members):
        self.logical = logical
        self.members = list(members)
        self.leader = self.members[0]  # updated as elections resolve
        self.term = 1

    @property
    def bootstrap_leader(self) -> int:
        return self.members[0]

    def __repr__(self):
        return (f"ReplicaGroup(logical={self.logical}, members={self.members}, "
                f"leader={self.leader}, term={self.term})")


class RaftState:
    """Read-only snapshot of one replica's consensus state."""

    __slots__ = ("role", "term", "voted_for", "log", "commit_index", "election_timeout")

    def __init__(self, role, term, voted_for, log, commit_index, election_timeout):
        self.role = role
        self.term = term
        self.voted_for = voted_for
        self.log = log
        self.commit_index = commit_index
        self.election_timeout = election_timeout

    def __repr__(self):
        return (f"RaftState(role={self.role!r}, term={self.term}, "
                f"voted_for={self.voted_for}, log={len(self.log)} entries, "
                f"commit_index={self.commit_index}, "
                f"election_timeout={self.election_timeout})")


# -- the replayable per-logical-node collective machine ------------------------


class _ReplicatedBlocks:
    """Binary-blocks participant advanced one log entry at a time.

    ``consume`` turns an inbound logical message into entries (applied on the
    spot); ``apply`` doubles as the replay path, so a leader rebuilt from its
    log lands in exactly the prior leader's state.  Outbound messages derive
    from entry application and carry the log length whose commit releases
    them.  Stashes are volatile: a replayed leader relies on sender retries
    to refill whatever was buffered but never logged.
    """

    def __init__(self, logical: int, p: int, n: int, cid: int):
        self.logical = logical
        self.p = p
        self.n = n
        self.cid = cid
        decomp = binary_blocks_decompose(p)
        self.decomp = decomp
        self.bi, self.rank = decomp.assignment[logical]
        self.size = decomp.blocks[self.bi]
        self.k = self.size.bit_length() - 1
        self.block_members = decomp.members(self.bi)
        self.bounds = chunk_partition(n, self.size)
        self.my_lo = int(self.bounds[self.rank])
        self.my_hi = int(self.bounds[self.rank + 1])
        self.last = len(decomp.blocks) - 1
        if self.bi < self.last:
            smaller = chunk_partition(n, decomp.blocks[self.bi + 1])
            self.up_expected = len(_overlaps(self.my_lo, self.my_hi, smaller))
        else:
            self.up_expected = 0
        if self.bi > 0:
            larger = chunk_partition(n, decomp.blocks[self.bi - 1])
            self.down_expected = len(_overlaps(self.my_lo, self.my_hi, larger))
        else:
            self.down_expected = 0
        self.values = np.zeros(n)
        self.stage = "await-input"
        self.scatter_step = 0
        self.range = (0, self.size)
        self.up_applied = 0
        self.down_applied = 0
        self.gather_step = 0
        self.applied = 0         # entries applied so far
        self.outbound = []       # (required_commit, dst_logical, phase, step, start, end, values)
        self.logged_ids = {}     # wire msg id -> entry index
        self.up_stash = {}       # msg id -> (src, start, end, values) until the batch is whole
        self.inbox = {}          # (phase, step) -> deferred messages

    def input_entry(self, vector, term: int) -> ReductionEntry:
        return ReductionEntry(self.cid, PHASE_INPUT, 0, 0, self.n, -1, term, vector)

    # -- live path ---------------------------------------------------------

    def consume(self, msg, term: int) -> list:
        """Feed one inbound logical message; returns the entries it produced."""
        src, phase, step, start, end, vals = msg
        mid = (src, phase, step, start, end)
        if mid in self.logged_ids or mid in self.up_stash:
            return []
        if phase == PHASE_UP:
            self.up_stash[mid] = (src, start, end, vals)
            return self._try_up_batch(term)
        if phase == PHASE_SCATTER:
            if self.stage != "scatter" or step != self.scatter_step:
                self.inbox.setdefault((phase, step), []).append(msg)
                return []
            entry = ReductionEntry(self.cid, phase, step, start, end, src, term,
                                   self.values[start:end] + vals)
        elif phase == PHASE_DOWN:
            if self.stage != "await-down":
                self.inbox.setdefault((phase, step), []).append(msg)
                return []
            entry = ReductionEntry(self.cid, phase, step, start, end, src, term, vals)
        elif phase == PHASE_GATHER:
            if self.stage != "gather" or step != self.gather_step:
                self.inbox.setdefault((phase, step), []).append(msg)
                return []
            entry = ReductionEntry(self.cid, phase, step, start, end, src, term, vals)
        else:
            raise DecodeError(f"unexpected logical phase {phase}")
        self.apply(entry)
        return [entry] + self._drain(term)

    def _drain(self, term: int) -> list:
        out = []
        progressed = True
        while progressed:
            progressed = False
            for key in list(self.inbox):
                phase, step = key
                due = ((phase == PHASE_SCATTER and self.stage == "scatter"
                        and step == self.scatter_step)
                       or (phase == PHASE_DOWN and self.stage == "await-down")
                       or (phase == PHASE_GATHER and self.stage == "gather"
                           and step == self.gather_step))
                if not due:
                    continue
                pending = self.inbox[key]
                msg = pending.pop(0)
                if not pending:
                    del self.inbox[key]
                out.extend(self.consume(msg, term))
                progressed = True
                break
        out.extend(self._try_up_batch(term))
        return out

    def _try_up_batch(self, term: int) -> list:
        if self.stage != "await-up" or len(self.up_stash) < self.up_expected:
            return []
        entries = []
        # fixed application order keeps float sums independent of arrival
        # order; a committed prefix of the sorted batch is still a prefix of
        # the same sorted batch after failover (senders' ranges are disjoint)
        for mid in sorted(self.up_stash, key=lambda m: (m[3], m[4])):
            src, start, end, vals = self.up_stash[mid]
            entry = ReductionEntry(self.cid, PHASE_UP, mid[2], start, end, src, term,
                                   self.values[start:end] + vals)
            self.apply(entry)
            entries.append(entry)
        self.up_stash = {}
        return entries + self._drain(term)

    # -- shared mutation (live + replay) ------------------------------------

    def apply(self, entry: ReductionEntry) -> None:
        self.logged_ids[entry.msg_id()] = self.applied
        self.applied += 1
        ph = entry.phase
        if ph == PHASE_INPUT:
            self.values = np.array(entry.values)
            self.stage = "scatter"
            if self.k == 0:
                self._scatter_complete()
            else:
                self._send_scatter()
        elif ph == PHASE_SCATTER:
            self.values[entry.start:entry.end] = entry.values
            self.scatter_step += 1
            if self.scatter_step < self.k:
                self._send_scatter()
            else:
                self._scatter_complete()
        elif ph == PHASE_UP:
            self.values[entry.start:entry.end] = entry.values
            self.up_applied += 1
            if self.up_applied == self.up_expected:
                self._up_complete()
        elif ph == PHASE_DOWN:
            self.values[entry.start:entry.end] = entry.values
            self.down_applied += 1
            if self.down_applied == self.down_expected:
                self._down_complete()
        elif ph == PHASE_GATHER:
            self.values[entry.start:entry.end] = entry.values
            dist = 1 << self.gather_step
            clo, chi = self.range
            width = chi - clo
            self.range = (clo - width, chi) if self.rank & dist else (clo, chi + width)
            self.gather_step += 1
            if self.gather_step < self.k:
                self._send_gather()
            else:
                self.stage = "done"
        else:
            raise DecodeError(f"unknown entry phase {ph}")

    def replay(self, entries) -> None:
        for e in entries:
            self.apply(e)

    # -- outbound derivation --------------------------------------------------

    def _queue(self, dst_logical, phase, step, start, end):
        # snapshot now: later entries may overwrite this range before commit
        vals = np.array(self.values[start:end])
        self.outbound.append((self.applied, dst_logical, phase, step, start, end, vals))

    def _send_scatter(self):
        dist = self.size >> (self.scatter_step + 1)
        partner = self.block_members[self.rank ^ dist]
        keep, out = _core_split(*self.range, bool(self.rank & dist))
        self._queue(partner, PHASE_SCATTER, self.scatter_step,
                    int(self.bounds[out[0]]), int(self.bounds[out[1]]))
        self.range = keep

    def _send_gather(self):
        dist = 1 << self.gather_step
        partner = self.block_members[self.rank ^ dist]
        self._queue(partner, PHASE_GATHER, self.gather_step,
                    int(self.bounds[self.range[0]]), int(self.bounds[self.range[1]]))

    def _scatter_complete(self):
        self.stage = "await-up"
        if self.up_expected == 0:
            self._up_complete()

    def _up_complete(self):
        if self.bi > 0:
            larger = chunk_partition(self.n, self.decomp.blocks[self.bi - 1])
            targets = self.decomp.members(self.bi - 1)
            for t, a, b in _overlaps(self.my_lo, self.my_hi, larger):
                self._queue(targets[t], PHASE_UP, 0, a, b)
            if self.down_expected == 0:
                self._down_complete()  # empty chunk: nothing owed to us
            else:
                self.stage = "await-down"
        else:
            self._down_complete()  # largest block already holds the result

    def _down_complete(self):
        if self.bi < self.last:
            smaller = chunk_partition(self.n, self.decomp.blocks[self.bi + 1])
            targets = self.decomp.members(self.bi + 1)
            for t, a, b in _overlaps(self.my_lo, self.my_hi, smaller):
                self._queue(targets[t], PHASE_DOWN, 0, a, b)
        self.stage = "gather"
        self.gather_step = 0
        self.range = (self.rank, self.rank + 1)
        if self.k == 0:
            self.stage = "done"
        else:
            self._send_gather()

    @property
    def done(self) -> bool:
        return self.stage == "done"


# -- replica actor -------------------------------------------------------------


class RaftReplica(simnet.Actor):
    """One group member: election plus replication, and the collective when leading.

    Volatile leader state (machine, retry bookkeeping, ack sets) is rebuilt
    from the log on every election win; only the log, term, and vote survive
    role changes, which is what makes failover a pure replay.
    """

    def __init__(self, session, replica_id: int, group: ReplicaGroup, input_vector):
        self.session = session
        self.me = replica_id
        self.group = group
        self.logical = group.logical
        self.peers = [m for m in group.members if m != replica_id]
        self.majority = len(group.members) // 2 + 1
        # every replica holds the input so an empty-logged leader can seed it
        self.input_vector = np.array(input_vector, dtype=np.float64)
        self.role = "follower"
        self.term = 1
        self.voted_for = None
        self.log = []
        self.commit_index = 0       # count of committed entries
        self.leader_belief = group.bootstrap_leader
        self.votes = set()
        self.election_round = 0
        self.election_timeout = None  # last randomized duration drawn
        self.el_epoch = 0             # stale-timer guards, one per timer family
        self.hb_epoch = 0
        self.elections_started = 0
        # leader-only volatile state
        self.machine = None
        self.match = {}             # follower -> acked log length
        self.released = 0           # prefix of machine.outbound already sent
        self.acked_out = set()      # (dst_logical, phase, step, start, end)
        self.aim = {}               # outbound key -> sim node to target next
        self.pending_acks = []      # (required_commit, reply_to, msg_id)

    @property
    def state(self) -> RaftState:
        return RaftState(self.role, self.term, self.voted_for, list(self.log),
                         self.commit_index, self.election_timeout)

    def start(self, sim):
        if self.me == self.group.bootstrap_leader:
            self._become_leader(sim)
        else:
            self._arm_election_timer(sim)

    # -- timers ----------------------------------------------------------------

    def _arm_election_timer(self, sim):
        self.el_epoch += 1
        self.election_timeout = self.session.timeout_for(self.me, self.election_round)
        sim.schedule_timer(self.me, self.election_timeout, "election", self.el_epoch)

    def _arm_heartbeat(self, sim):
        self.hb_epoch += 1
        sim.schedule_timer(self.me, self.session.t_hb, "heartbeat", self.hb_epoch)

    def on_timer(self, sim, tag, payload):
        if tag == "election":
            if payload == self.el_epoch and self.role != "leader":
                self.elect_leader(sim)
        elif tag == "heartbeat":
            if payload == self.hb_epoch and self.role == "leader":
                self._broadcast_append(sim)
                self._arm_heartbeat(sim)
        elif tag == "retry":
            self._retry_outbound(sim, payload)

    # -- election ----------------------------------------------------------------

    def elect_leader(self, sim):
        """Stand for election: bump the term, vote for self, canvass the group.

        Fires when the election timer lapses without leader contact.  The
        outcome arrives asynchronously: a majority of vote grants makes this
        replica leader; a competing bid or a newer term demotes it.
        """
        self.role = "candidate"
        self.term += 1
        self.voted_for = self.me
        self.votes = {self.me}
        self.election_round += 1
        self.elections_started += 1
        self.session.elections += 1
        last_term = self.log[-1].term if self.log else 0
        req = _RV.pack(RAFT_MAGIC, RV, self.term, self.me, len(self.log), last_term)
        for peer in self.peers:
            sim.schedule_send(self.me, peer, req)
        if len(self.votes) >= self.majority:
            self._become_leader(sim)
        else:
            self._arm_election_timer(sim)  # candidate retry with a fresh draw

    def _become_leader(self, sim):
        self.role = "leader"
        self.leader_belief = self.me
        if self.term >= self.group.term:
            self.group.leader = self.me
            self.group.term = self.term
        self.votes = set()
        self.match = {}
        self.released = 0
        self.acked_out = set()
        self.aim = {}
        self.pending_acks = []
        self.el_epoch += 1  # cancel any armed election timeout
        self.machine = _ReplicatedBlocks(self.logical, self.session.p,
                                         self.session.n, self.session.cid)
        if self.log:
            self.machine.replay(self.log)
        else:
            entry = self.machine.input_entry(self.input_vector, self.term)
            self.machine.apply(entry)
            self.log.append(entry)
        self._broadcast_append(sim)
        self._arm_heartbeat(sim)
        # commit_index survives from follower time: release whatever the old
        # leader had committed but may never have sent
        self._commit_advanced(sim)

    def _step_down(self, sim, term):
        if term > self.term:
            self.term = term
            self.voted_for = None
        self.role = "follower"
        self.votes = set()
        self.machine = None
        self.hb_epoch += 1  # stop any heartbeat chain
        self._arm_election_timer(sim)

    # -- replication ----------------------------------------------------------------

    def replicate_entry(self, sim, entry: ReductionEntry) -> None:
        """Leader-only: append one entry and replicate it to the group.

        The entry commits once a majority (counting the leader) acknowledges
        the append; the commit releases whatever outbound collective message
        the entry gates.
        """
        if self.role != "leader":
            raise ValueError(f"replica {self.me} is {self.role}, not leader")
        self._replicate(sim, [entry])

    def _replicate(self, sim, entries) -> None:
        self.log.extend(entries)
        self._broadcast_append(sim)

    def _broadcast_append(self, sim):
        blob = (_APPEND_HEAD.pack(RAFT_MAGIC, APPEND, self.term, self.me, -1,
                                  self.commit_index, len(self.log))
                + encode_entries(self.log))
        for peer in self.peers:
            sim.schedule_send(self.me, peer, blob)
        self._maybe_commit(sim)

    def _maybe_commit(self, sim):
        counts = sorted([len(self.log)] + list(self.match.values()), reverse=True)
        reachable = counts[self.majority - 1] if len(counts) >= self.majority else 0
        if reachable > self.commit_index:
            self.commit_index = reachable
            self._commit_advanced(sim)

    def _commit_advanced(self, sim):
        if self.role != "leader" or self.machine is None:
            return
        m = self.machine
        # release outbound collective messages whose entries have committed
        while self.released < len(m.outbound):
            required, dst, phase, step, start, end, vals = m.outbound[self.released]
            if required > self.commit_index:
                break
            self.released += 1
            key = (dst, phase, step, start, end)
            if key not in self.acked_out:
                self._send_data(sim, key, vals)
        # acknowledge inbound messages whose entries have committed
        due = [p for p in self.pending_acks if p[0] <= self.commit_index]
        self.pending_acks = [p for p in self.pending_acks if p[0] > self.commit_index]
        for _, reply_to, mid in due:
            self._send_xg_ack(sim, reply_to, mid)
        if m.done and self.commit_index == len(self.log):
            self.session.report_result(self.logical, m.values)

    # -- inter-group sends ----------------------------------------------------------

    def _send_data(self, sim, key, vals):
        dst, phase, step, start, end = key
        members = self.session.groups[dst].members
        target = self.aim.get(key, self.session.groups[dst].bootstrap_leader)
        # pre-cycle for the next attempt; a reject hint may steer it instead
        self.aim[key] = members[(members.index(target) + 1) % len(members)]
        blob = (_XG_HEAD.pack(XG_MAGIC, XG_DATA, self.logical, dst,
                              self.session.cid, phase, step, start, end)
                + encode_vector(GradientVector(vals, Precision.SINGLE)))
        sim.schedule_send(self.me, target, blob)
        self.session.data_sends += 1
        sim.schedule_timer(self.me, self.session.t_retry, "retry", key)

    def _retry_outbound(self, sim, key):
        if self.role != "leader" or self.machine is None or key in self.acked_out:
            return
        match = [o for o in self.machine.outbound
                 if (o[1], o[2], o[3], o[4], o[5]) == key]
        if not match or match[0][0] > self.commit_index:
            return
        self.session.data_retries += 1
        self._send_data(sim, key, match[0][6])

    def _send_xg_ack(self, sim, reply_to, mid):
        src, phase, step, start, end = mid
        blob = _XG_HEAD.pack(XG_MAGIC, XG_ACK, self.logical, src,
                             self.session.cid, phase, step, start, end)
        sim.schedule_send(self.me, reply_to, blob)

    # -- message dispatch --------------------------------------------------------------

    def on_message(self, sim, src, payload):
        if not payload:
            raise DecodeError("empty replica message")
        magic = payload[0]
        if magic == RAFT_MAGIC:
            self._on_raft(sim, src, payload)
        elif magic == XG_MAGIC:
            self._on_xg(sim, src, payload)
        else:
            raise DecodeError(f"unknown magic byte 0x{magic:02X}")

    def _on_raft(self, sim, src, payload):
        sub = payload[1]
        if sub == RV:
            _, _, term, candidate, last_index, last_term = _RV.unpack_from(payload)
            self._on_request_vote(sim, src, term, candidate, last_index, last_term)
        elif sub == VOTE:
            _, _, term, granted = _VOTE.unpack_from(payload)
            self._on_vote(sim, src, term, bool(granted))
        elif sub == APPEND:
            _, _, term, leader, _prev, commit, count = _APPEND_HEAD.unpack_from(payload)
            entries, _ = decode_entries(payload, _APPEND_HEAD.size, count)
            self._on_append(sim, src, term, leader, commit, entries)
        elif sub == APPEND_ACK:
            _, _, term, match = _ACK.unpack_from(payload)
            self._on_append_ack(sim, src, term, match)
        else:
            raise DecodeError(f"unknown raft message kind {sub}")

    def _on_request_vote(self, sim, src, term, candidate, last_index, last_term):
        if term < self.term:
            sim.schedule_send(self.me, src, _VOTE.pack(RAFT_MAGIC, VOTE, self.term, 0))
            return
        if term > self.term:
            self._step_down(sim, term)
        elif self.role == "candidate":
            # a candidate hearing a same-term bid relinquishes its candidacy,
            # but its self-vote stands: one vote per term
            self.role = "follower"
            self._arm_election_timer(sim)
        my_last_term = self.log[-1].term if self.log else 0
        up_to_date = (last_term, last_index) >= (my_last_term, len(self.log))
        grant = up_to_date and self.voted_for in (None, candidate)
        if grant:
            self.voted_for = candidate
            self._arm_election_timer(sim)
        sim.schedule_send(self.me, src,
                          _VOTE.pack(RAFT_MAGIC, VOTE, self.term, 1 if grant else 0))

    def _on_vote(self, sim, src, term, granted):
        if term > self.term:
            self._step_down(sim, term)
            return
        if self.role != "candidate" or term != self.term or not granted:
            return
        self.votes.add(src)
        if len(self.votes) >= self.majority:
            self._become_leader(sim)

    def _on_append(self, sim, src, term, leader, commit, entries):
        if term < self.term:
            sim.schedule_send(self.me, src, _ACK.pack(RAFT_MAGIC, APPEND_ACK, self.term, -1))
            return
        if term > self.term or self.role != "follower":
            self._step_down(sim, term)
        self.leader_belief = leader
        self.log = entries  # full-log replication: replace wholesale
        self.commit_index = min(commit, len(self.log))
        self._arm_election_timer(sim)
        sim.schedule_send(self.me, src,
                          _ACK.pack(RAFT_MAGIC, APPEND_ACK, self.term, len(self.log)))

    def _on_append_ack(self, sim, src, term, match):
        if term > self.term:
            self._step_down(sim, term)
            return
        if self.role != "leader" or term != self.term or match < 0:
            return
        self.match[src] = max(self.match.get(src, 0), match)
        self._maybe_commit(sim)

    # -- inter-group receive --------------------------------------------------------------

    def _on_xg(self, sim, src, payload):
        _, sub, src_logical, dst_logical, cid, phase, step, start, end = \
            _XG_HEAD.unpack_from(payload)
        if sub == XG_ACK:
            # src_logical names the acking group == the dst of our send
            self.acked_out.add((src_logical, phase, step, start, end))
            return
        if sub == XG_REJECT:
            # steer the next retry toward the rejecter's leader; never resend
            # here, or two confused replicas could volley at wire speed
            term, hint = _XG_REJECT_TAIL.unpack_from(payload, _XG_HEAD.size)
            key = (src_logical, phase, step, start, end)
            if (self.role == "leader" and hint >= 0 and key not in self.acked_out
                    and hint in self.session.groups[src_logical].members):
                self.aim[key] = hint
            return
        # XG_DATA
        if self.role != "leader" or self.machine is None:
            hint = self.leader_belief if self.leader_belief != self.me else -1
            blob = (_XG_HEAD.pack(XG_MAGIC, XG_REJECT, dst_logical, src_logical,
                                  cid, phase, step, start, end)
                    + _XG_REJECT_TAIL.pack(self.term, hint))
            sim.schedule_send(self.me, src, blob)
            return
        vec = decode_vector(payload[_XG_HEAD.size:])
        mid = (src_logical, phase, step, start, end)
        produced = ()
        if mid not in self.machine.logged_ids:
            produced = self.machine.consume(
                (src_logical, phase, step, start, end, vec.values), self.term)
        idx = self.machine.logged_ids.get(mid)
        if idx is not None:
            if idx < self.commit_index:
                self._send_xg_ack(sim, src, mid)  # duplicate of a committed step
            else:
                self.pending_acks.append((idx + 1, src, mid))
        # else: stashed for later; the sender's retry will collect the ack
        if produced:
            self._replicate(sim, produced)


# -- session -------------------------------------------------------------------


class _Watchdog(simnet.Actor):
    """Periodic majority check; flags the first group that cannot recover."""

    def __init__(self, session):
        self.session = session

    def on_timer(self, sim, tag, payload):
        if tag != "liveness" or self.session.failed is not None:
            return
        for group in self.session.groups:
            live = sum(1 for m in group.members if sim.alive.get(m, False))
            if live < len(group.members) // 2 + 1:
                self.session.failed = group.logical
                return
        sim.schedule_timer(self.session.watchdog_node, self.session.watchdog_interval,
                           "liveness")


class TolerantSession:
    """One fault-tolerant all-reduce over replica groups on a shared simulator."""

    def __init__(self, sim, vectors, replica_factor=3, op="sum", cid=1,
                 t_hb=2.0, t_retry=None, watchdog_interval=None, seed=0,
                 timeout_source=None):
        if replica_factor < 3 or replica_factor % 2 == 0:
            raise ConfigError("replica_factor",
                              f"must be odd and >= 3, got {replica_factor}")
        if op not in ("sum", "average"):
            raise ConfigError("op", f"unknown reduction op {op!r}")
        if not vectors:
            raise ConfigError("vectors", "need at least one input vector")
        lengths = {len(v) for v in vectors}
        if len(lengths) != 1:
            raise ConfigError("vectors",
                              f"must share a length, got {sorted(lengths)}")
        self.sim = sim
        self.p = len(vectors)
        self.n = lengths.pop()
        self.rf = replica_factor
        self.op = op
        self.cid = cid
        self.t_hb = t_hb
        self.t_retry = t_retry if t_retry is not None else 3.0 * t_hb
        self.watchdog_interval = (watchdog_interval if watchdog_interval is not None
                                  else 5.0 * t_hb)
        self.seed = seed
        self._timeout_source = timeout_source
        self.elections = 0
        self.data_sends = 0
        self.data_retries = 0
        self.failed = None
        self.results = {}
        self.groups = []
        self.replicas = {}
        for g in range(self.p):
            group = ReplicaGroup(g, range(g * replica_factor, (g + 1) * replica_factor))
            self.groups.append(group)
            for m in group.members:
                replica = RaftReplica(self, m, group, vectors[g])
                self.replicas[m] = replica
                sim.add_node(m, replica)
        self.watchdog_node = self.p * replica_factor
        sim.add_node(self.watchdog_node, _Watchdog(self))
        sim.register_watcher(self._describe_waits)

    def timeout_for(self, replica: int, round_: int) -> float:
        if self._timeout_source is not None:
            return self._timeout_source(replica, round_)
        rng = np.random.default_rng((self.seed, 6151, replica, round_))
        return float(rng.uniform(5.0, 10.0)) * self.t_hb

    def report_result(self, logical: int, values) -> None:
        self.results[logical] = np.array(values)

    def _describe_waits(self):
        out = []
        for group in self.groups:
            if group.logical in self.results:
                continue
            for m in group.members:
                r = self.replicas[m]
                if r.role == "leader" and r.machine is not None:
                    out.append(f"logical {group.logical} leader {m} waiting in "
                               f"{r.machine.stage} (commit {r.commit_index}/{len(r.log)})")
        return out

    def run(self, max_time: float = 1_000_000.0):
        for replica in self.replicas.values():
            replica.start(self.sim)
        self.sim.schedule_timer(self.watchdog_node, self.watchdog_interval, "liveness")
        self.sim.run_until(
            lambda: len(self.results) == self.p or self.failed is not None,
            max_time=max_time)
        if self.failed is not None:
            raise GroupUnavailableError(self.failed)
        out = [np.array(self.results[g]) for g in range(self.p)]
        if self.op == "average":
            out = [v / self.p for v in out]
        return out

    def current_leader(self, logical: int):
        """Highest-term live replica claiming leadership, or None."""
        best = None
        for m in self.groups[logical].members:
            r = self.replicas[m]
            if r.role == "leader" and self.sim.alive.get(m, False):
                if best is None or r.term > best.term:
                    best = r
        return best


def tolerant_all_reduce(vectors, replica_factor=3, op="sum", sim=None,
                        failures=(), t_hb=2.0, seed=0, timeout_source=None,
                        max_time: float = 1_000_000.0):
    """All-reduce across replica groups; survives any minority of each group.

    ``failures`` is a sequence of (sim_node, time) crash injections.  Returns
    the per-logical-node results (all equal for a completed reduction).
    """
    if sim is None:
        sim = simnet.Simulator(simnet.LatencyModel(startup=0.0, per_byte=0.0))
    session = TolerantSession(sim, vectors, replica_factor=replica_factor, op=op,
                              t_hb=t_hb, seed=seed, timeout_source=timeout_source)
    for node, at in failures:
        sim.inject_failure(node, at)
    return session.run(max_time=max_time)


# -- audits ----------------------------------------------------------------------


def verify_no_committed_divergence(session: TolerantSession) -> int:
    """Raft safety check: committed prefixes agree pairwise within each group.

    Returns the number of entry pairs compared; raises AssertionError on the
    first divergence.
    """
    compared = 0
    for group in session.groups:
        reps = [session.replicas[m] for m in group.members]
        for i in range(len(reps)):
            for j in range(i + 1, len(reps)):
                a, b = reps[i], reps[j]
                upto = min(a.commit_index, b.commit_index)
                for k in range(upto):
                    if a.log[k] != b.log[k]:
                        raise AssertionError(
                            f"committed logs diverge: logical {group.logical}, "
                            f"replicas {a.me} vs {b.me}, entry {k}: "
                            f"{a.log[k]!r} != {b.log[k]!r}")
                    compared += 1
    return compared


def verify_entry_order(session: TolerantSession) -> None:
    """Entries of each log must progress in collective (phase, step) order."""
    for replica in session.replicas.values():
        ranks = [(_PHASE_RANK[e.phase], e.step) for e in replica.log]
        for a, b in zip(ranks, ranks[1:]):
            if b < a:
                raise AssertionError(
                    f"replica {replica.me} log out of order: {a} then {b}")
