"""Per-replica protocol state machine.

A replica is driven by the simulator through ``start``, ``on_message``,
``on_timer`` and ``on_inject``; each call returns the list of actions it
produced.  The replica never reads a clock or a random source, so identical
inputs always yield identical actions.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Optional

from .certs import (
    GENESIS_QC,
    GENESIS_TC,
    CertRank,
    Params,
    QuorumCertificate,
    TimeoutCertificate,
    certifies_parent,
    form_qc,
    highest_tc,
    locked_block,
    make_tc,
    propose_digest,
    qc_rank,
    status_digest,
    tc_blocks,
    tc_locks,
    validate_qc,
    validate_status,
    validate_tc,
    validate_timeout,
)
from .core import (
    GENESIS,
    Block,
    Propose,
    ProposalTuple,
    QcForward,
    Status,
    StatusSet,
    Timeout,
    TimeoutForward,
    UnknownAncestry,
    Vote,
    conflicts,
    directly_extends,
    externally_valid,
    extends,
    iter_blocks,
    proposal_digest,
    timeout_digest,
    verify,
    vote_digest,
)

ALL = "all"  # Send destination: every replica including the sender
OTHERS = "others"  # every replica except the sender


@dataclass(frozen=True)
class Send:
    dests: object  # ALL, OTHERS or a tuple of replica ids
    msg: object


@dataclass(frozen=True)
class SetTimer:
    fire_time: int
    key: tuple


@dataclass(frozen=True)
class Commit:
    blocks: tuple
    conflicting: bool = False


@dataclass(frozen=True)
class EnterView:
    view: int


@dataclass(frozen=True)
class TraceNote:
    kind: str
    data: dict


def auto_payload(view: int, height: int, rid: int) -> tuple:
    return (f"tx:v{view}:h{height}:r{rid}".encode(),)


class Replica:
    def __init__(self, rid: int, params: Params, delta: int, signer: Callable,
                 predicate: Callable, payload_source: Optional[Callable] = None):
        self.id = rid
        self.params = params
        self.delta = delta
        self.sign = signer
        self.predicate = predicate
        self.payload_source = payload_source

        self.view = 0
        self.view_entry_time = 0
        self.commits_this_view = 0
        self.voted: dict = {}  # (view, height) -> block digest
        self.voted_high: dict = {}  # view -> (ProposalTuple, parent QC) of the highest vote
        self.seen_proposals: dict = {}  # (view, height) -> block digest, first leader-signed seen
        self.high_qc: QuorumCertificate = GENESIS_QC
        self.high_tc: TimeoutCertificate = GENESIS_TC
        self.committed: list = [GENESIS]
        self.blocks: dict = {GENESIS.digest: GENESIS}
        self.qc_for: dict = {GENESIS.digest: GENESIS_QC}  # block digest -> best-ranked QC
        self.known_qcs: set = {(0, GENESIS.digest)}
        self.qc_views: dict = {}  # view -> count of distinct certified blocks
        self.timed_out: set = set()
        self.timeouts: dict = {}  # view -> {sender: Timeout}
        self.triggered: set = set()
        self.view_tcs: dict = {}  # view -> witness TC formed at the view change
        self.statuses: dict = {}  # prev_view -> {sender: Status}
        self.pending_votes: dict = {}  # proposal digest -> {signer: Vote}
        self.future: list = []  # buffered proposals for views not yet entered
        self.retry: list = []  # current-view proposals that failed for lack of blocks
        self.deferred_commits: list = []
        self.mempool: list = []
        self.included: set = set()  # payload batches already committed

        # leader state for the current view
        self.proposed_first: set = set()
        self.last_proposed: Optional[Block] = None
        self.awaiting_payload = False

        self._out: list = []
        self._now = 0
        self._grew = False

    # -- driver entry points -----------------------------------------------------

    def start(self, now: int) -> list:
        self._begin(now)
        self.enter_view(1)
        return self._finish()

    def on_message(self, now: int, src: int, msg) -> list:
        self._begin(now)
        if isinstance(msg, Propose):
            self.on_propose(msg)
        elif isinstance(msg, Vote):
            self.on_vote(msg)
        elif isinstance(msg, QcForward):
            if validate_qc(msg.qc, self.params, self.predicate):
                self.on_qc(msg.qc)
        elif isinstance(msg, Timeout):
            self.on_timeout_msg(msg)
        elif isinstance(msg, TimeoutForward):
            for t in msg.timeouts:
                self.on_timeout_msg(t)
        elif isinstance(msg, Status):
            self.on_status(msg)
        return self._finish()

    def on_timer(self, now: int, key: tuple) -> list:
        self._begin(now)
        if key[0] == "progress":
            self.on_progress_deadline(key[1], key[2])
        return self._finish()

    def on_inject(self, now: int, payload: tuple) -> list:
        self._begin(now)
        if payload not in self.included and payload not in self.mempool:
            self.mempool.append(payload)
        if self.awaiting_payload:
            self.awaiting_payload = False
            qc = self.qc_for.get(self.last_proposed.digest) if self.last_proposed else None
            if qc is not None and qc.view == self.view:
                self.leader_on_progress(qc)
        return self._finish()

    def _begin(self, now: int):
        self._now = now
        self._out = []
        self._grew = False

    def _finish(self) -> list:
        # blocks learned while handling this input may unblock earlier work
        rounds = 0
        while self._grew and rounds < 8:
            self._grew = False
            rounds += 1
            self._retry_pending()
        out, self._out = self._out, []
        return out

    def _emit(self, action):
        self._out.append(action)

    def _note(self, kind: str, **data):
        self._out.append(TraceNote(kind, data))

    # -- bookkeeping -------------------------------------------------------------

    def _learn(self, obj):
        for b in iter_blocks(obj):
            if b.digest not in self.blocks:
                self.blocks[b.digest] = b
                self._grew = True

    def _learn_qc(self, qc: QuorumCertificate) -> bool:
        """Record a validated QC; True when it is new to this replica."""
        key = (qc.view, qc.block.digest)
        if key in self.known_qcs:
            return False
        self.known_qcs.add(key)
        self._learn(qc)
        d = qc.block.digest
        best = self.qc_for.get(d)
        if best is None or qc_rank(qc) > qc_rank(best):
            self.qc_for[d] = qc
        if qc_rank(qc) > qc_rank(self.high_qc):
            self.high_qc = qc
        self.qc_views[qc.view] = self.qc_views.get(qc.view, 0) + 1
        self._grew = True
        return True

    def _parent_qc(self, block: Block) -> Optional[QuorumCertificate]:
        if block == GENESIS:
            return GENESIS_QC
        return self.qc_for.get(block.parent)

    def _retry_pending(self):
        for qc in list(self.deferred_commits):
            self.deferred_commits.remove(qc)
            self._commit(qc.block)
        retry, self.retry = self.retry, []
        for msg in retry:
            if msg.view == self.view and self._consider_vote(msg):
                self.retry.append(msg)
        for v in sorted(self.timeouts):
            self._check_new_view(v)
        self._try_lead()

    # -- view change -------------------------------------------------------------

    def enter_view(self, w: int):
        if w <= self.view:
            return
        self.view = w
        self.view_entry_time = self._now
        self.commits_this_view = self.qc_views.get(w, 0)
        self.retry = []
        self.last_proposed = None
        self.awaiting_payload = False
        self._emit(EnterView(w))
        locked = locked_block(self.high_tc, self.params, self.blocks)
        qc = self._parent_qc(locked) if locked is not None else None
        status = Status(w - 1, qc, self.high_tc, self.sign(status_digest(w - 1, qc, self.high_tc)))
        self._emit(Send((self.params.leader(w),), status))
        self._arm_deadline()
        future, self.future = self.future, []
        for msg in future:
            if msg.view == w:
                self.on_propose(msg)
            elif msg.view > w:
                self.future.append(msg)
        self._try_lead()

    def _arm_deadline(self):
        p = self.commits_this_view + 1
        fire = self.view_entry_time + (2 * p + 2) * self.delta
        self._emit(SetTimer(fire, ("progress", self.view, p)))

    def on_progress_deadline(self, view: int, p: int):
        if view != self.view or view in self.timed_out:
            return
        if self.commits_this_view >= p:
            return
        self._send_timeout(view)

    def _send_timeout(self, view: int):
        if view in self.timed_out:
            return
        self.timed_out.add(view)
        high = self.voted_high.get(view)
        inner, parent_qc = high if high is not None else (None, None)
        t = Timeout(view, inner, parent_qc, self.sign(timeout_digest(view, inner)))
        self._note("timeout", view=view, inner=inner.block.digest.hex() if inner else None)
        self._emit(Send(ALL, t))

    def on_timeout_msg(self, t):
        if not validate_timeout(t, self.params, self.predicate):
            return
        if t.view < self.view - 1:
            return
        self._learn(t)
        if t.parent_qc is not None and t.parent_qc != GENESIS_QC:
            self.on_qc(t.parent_qc)
        got = self.timeouts.setdefault(t.view, {})
        if t.sender not in got:
            got[t.sender] = t
            self._check_new_view(t.view)

    def _pairwise_ok(self, subset) -> bool:
        inners = [t.inner.block for t in subset if t.inner is not None]
        for a, b in combinations(inners, 2):
            if conflicts(a, b, self.blocks):
                return False
        return True

    def _find_witness(self, v: int):
        got = sorted(self.timeouts.get(v, {}).values(), key=lambda t: t.sender)
        q = self.params.quorum
        if len(got) < q:
            return None
        for subset in combinations(got, q):
            if self._pairwise_ok(subset):
                return subset
        leader = self.params.leader(v)
        others = [t for t in got if t.sender != leader]
        if len(others) >= q:
            return tuple(others[:q])
        return None

    def _check_new_view(self, v: int):
        if v in self.triggered or v + 1 <= self.view:
            return
        witness = self._find_witness(v)
        if witness is None:
            return
        self.triggered.add(v)
        self._emit(Send(OTHERS, TimeoutForward(witness)))
        tc = make_tc(v, witness)
        self.view_tcs[v] = tc
        store = self.blocks
        locked = locked_block(tc, self.params, store)
        self._note("tc-formed", view=v, locked=locked.digest.hex() if locked else None,
                   senders=[t.sender for t in witness], cert=tc)
        if locked is not None:
            cur = locked_block(self.high_tc, self.params, store)
            cur_rank = CertRank(self.high_tc.view, cur.height if cur else -1)
            if CertRank(v, locked.height) > cur_rank:
                self.high_tc = tc
        if v >= self.view:
            self._send_timeout(v)
        self.enter_view(v + 1)

    # -- leader ------------------------------------------------------------------

    def on_status(self, s):
        w = s.prev_view + 1
        if self.params.leader(w) != self.id or w < self.view:
            return
        self._learn(s)
        if not validate_status(s, self.params, self.predicate, self.blocks):
            return
        if s.qc is not None and s.qc != GENESIS_QC:
            self.on_qc(s.qc)
        self.statuses.setdefault(s.prev_view, {}).setdefault(s.sender, s)
        self._try_lead()

    def _try_lead(self):
        w = self.view
        if (w < 1 or self.params.leader(w) != self.id or w in self.proposed_first
                or w in self.timed_out):
            return
        got = self.statuses.get(w - 1, {})
        if len(got) < self.params.quorum:
            return
        store = self.blocks
        tcs = [s.high_tc for s in got.values() if s.high_tc.view == w - 1]
        if w - 1 in self.view_tcs:
            tcs.append(self.view_tcs[w - 1])
        if w == 1:
            tcs.append(GENESIS_TC)
        best, best_key = None, None
        for tc in tcs:
            b = locked_block(tc, self.params, store)
            if b is not None and (best_key is None or (b.height, b.digest) > best_key):
                best, best_key = (tc, b), (b.height, b.digest)
        if best is not None:
            proof, block = best
        else:
            chosen = tuple(sorted(got.values(), key=lambda s: s.sender)[:self.params.quorum])
            htc = highest_tc(chosen, self.params, store)
            block = locked_block(htc, self.params, store) if htc is not None else None
            if block is None:
                return
            proof = StatusSet(chosen)
        qc = self._parent_qc(block)
        if qc is None:
            self._note("note", what="missing-parent-qc", view=w, block=block.digest.hex())
            return
        self.proposed_first.add(w)
        self._propose(block, qc, proof)

    def _propose(self, block: Block, qc, proof):
        self.last_proposed = block
        p = ProposalTuple(block, self.view, self.sign(proposal_digest(block, self.view)))
        msg = Propose(p, qc, proof, self.sign(propose_digest(p, qc, proof)))
        self._emit(Send(ALL, msg))

    def leader_on_progress(self, qc: QuorumCertificate):
        w = self.view
        if (self.params.leader(w) != self.id or w in self.timed_out or qc.view != w
                or self.last_proposed is None or qc.block != self.last_proposed):
            return
        payload = self._next_payload(w, qc.block.height + 1)
        if payload is None:
            self.awaiting_payload = True
            return
        block = Block(qc.block.digest, qc.block.height + 1, payload)
        self._propose(block, qc, None)

    def _next_payload(self, view: int, height: int):
        if self.payload_source is not None:
            return self.payload_source(view, height, self.id)
        in_chain = set()
        cur = self.last_proposed
        while cur is not None and cur.height > self.committed[-1].height:
            in_chain.add(cur.payload)
            cur = self.blocks.get(cur.parent)
        for batch in self.mempool:
            if batch not in self.included and batch not in in_chain:
                return batch
        if self.predicate(()):
            return ()
        return None

    # -- steady state ----------------------------------------------------------------

    def on_propose(self, msg):
        p = msg.proposal
        if not isinstance(p, ProposalTuple) or p.view < 1:
            return
        leader = self.params.leader(p.view)
        if not verify(p.leader_sig, p.digest, leader):
            return
        if not verify(msg.sig, propose_digest(p, msg.qc, msg.proof), leader):
            return
        if not externally_valid(p.block, self.predicate):
            return
        self._learn(msg)
        if validate_qc(msg.qc, self.params, self.predicate):
            self.on_qc(msg.qc)
        if p.view > self.view:
            self.future.append(msg)
            return
        if p.view < self.view:
            return
        key = (p.view, p.block.height)
        first = self.seen_proposals.setdefault(key, p.block.digest)
        if first != p.block.digest:
            self._note("note", what="equivocation", view=p.view, height=p.block.height)
        if self._consider_vote(msg):
            self.retry.append(msg)

    def _vote_ok(self, msg) -> Optional[bool]:
        """True/False verdict, or None when missing blocks prevent a decision."""
        p = msg.proposal
        b, w, qc = p.block, p.view, msg.qc
        if not certifies_parent(qc, b) or not validate_qc(qc, self.params, self.predicate):
            return False
        proof = msg.proof
        try:
            if proof is None:
                return qc.view == w and extends(b, self.high_qc.block, self.blocks)
            if isinstance(proof, TimeoutCertificate):
                store = self.blocks
                return (proof.view == w - 1 and validate_tc(proof, self.params, self.predicate)
                        and tc_locks(proof, b, self.params, store))
            if isinstance(proof, StatusSet):
                statuses = proof.statuses
                senders = {s.sender for s in statuses if isinstance(s, Status)}
                if len(senders) != len(statuses) or len(senders) < self.params.quorum:
                    return False
                if not all(s.prev_view == w - 1
                           and validate_status(s, self.params, self.predicate, self.blocks)
                           for s in statuses):
                    return False
                htc = highest_tc(statuses, self.params, self.blocks)
                return htc is not None and locked_block(htc, self.params, self.blocks) == b
        except UnknownAncestry:
            return None
        return False

    def _consider_vote(self, msg) -> bool:
        """Vote if the checks pass.  True means: failed, but may pass once more blocks are known."""
        p = msg.proposal
        w, b = p.view, p.block
        if w != self.view or w in self.timed_out:
            return False
        prior = self.voted.get((w, b.height))
        if prior == b.digest:
            return False
        if prior is not None and self.params.dedup:
            return False
        ok = self._vote_ok(msg)
        if not ok:
            # lock checks treat unknown ancestry as conflicting, so they get another chance
            return ok is None or isinstance(msg.proof, (TimeoutCertificate, StatusSet))
        self.voted[(w, b.height)] = b.digest
        high = self.voted_high.get(w)
        if high is None or b.height > high[0].block.height:
            self.voted_high[w] = (p, msg.qc)
        self._note("vote", view=w, height=b.height, block=b.digest.hex())
        self._emit(Send(ALL, Vote(p, self.sign(vote_digest(p)))))
        return False

    def on_vote(self, v):
        p = v.proposal
        if not isinstance(p, ProposalTuple) or p.view < 1:
            return
        if not verify(p.leader_sig, p.digest, self.params.leader(p.view)):
            return
        if not 1 <= v.sig.signer <= self.params.n or not verify(v.sig, vote_digest(p)):
            return
        if not externally_valid(p.block, self.predicate):
            return
        if (p.view, p.block.digest) in self.known_qcs:
            return
        self._learn(v)
        pend = self.pending_votes.setdefault(p.digest, {})
        if v.sig.signer in pend:
            return
        pend[v.sig.signer] = v
        if len(pend) >= self.params.quorum:
            qc = form_qc(pend.values(), self.params)
            if qc is not None:
                self._note("qc-formed", view=p.view, block=p.block.digest.hex())
                self.on_qc(qc)

    def on_qc(self, qc: QuorumCertificate):
        if qc == GENESIS_QC or not self._learn_qc(qc):
            return
        self._note("qc", view=qc.view, height=qc.height, block=qc.block.digest.hex())
        self._emit(Send(OTHERS, QcForward(qc)))
        self._commit(qc.block)
        if qc.view == self.view:
            self.commits_this_view += 1
            if self.view not in self.timed_out:
                self._arm_deadline()
            self.leader_on_progress(qc)

    def _commit(self, block: Block):
        log = self.committed
        tip = log[-1]
        if block.height <= tip.height:
            if log[block.height] != block:
                self._emit(Commit((block,), conflicting=True))
            return
        chain = []
        cur = block
        while cur.height > tip.height:
            chain.append(cur)
            parent = self.blocks.get(cur.parent)
            if parent is None or parent.height != cur.height - 1:
                if block not in [q.block for q in self.deferred_commits]:
                    self.deferred_commits.append(self.qc_for[block.digest])
                return
            cur = parent
        if cur != tip:
            # a committed height would be rewritten: report every divergent block
            while cur.height > 0 and log[cur.height] != cur:
                chain.append(cur)
                cur = self.blocks.get(cur.parent)
                if cur is None:
                    break
            self._emit(Commit(tuple(reversed(chain)), conflicting=True))
            return
        segment = tuple(reversed(chain))
        log.extend(segment)
        for b in segment:
            self.included.add(b.payload)
            if b.payload in self.mempool:
                self.mempool.remove(b.payload)
        self._emit(Commit(segment))
