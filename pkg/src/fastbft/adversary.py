"""Byzantine strategies for corrupt replicas.

Most strategies run a full honest ``Replica`` as a puppet and rewrite the
actions it produces.  Everything a strategy sends goes through
``AdversaryContext``, which only signs for corrupt ids and audits nested
signatures so honest signatures can be replayed but never invented.
"""

from __future__ import annotations

import random
from typing import Optional

from .certs import GENESIS_QC, GENESIS_TC, propose_digest, status_digest
from .core import (
    GENESIS,
    Block,
    Propose,
    ProposalTuple,
    Status,
    Timeout,
    UnforgeabilityBreach,
    Vote,
    proposal_digest,
    sign,
    timeout_digest,
)
from .replica import EnterView, Replica, Send, SetTimer


class AdversaryContext:
    """What corrupt code may touch: its own keys, the network and the trace."""

    def __init__(self, sim, predicate, payload_source):
        self._sim = sim
        self.params = sim.params
        self.n = sim.params.n
        self.f = sim.params.f
        self.delta = sim.sc.delta
        self.gst = sim.sc.gst
        self.corrupt = tuple(sim.corrupt)
        self.honest = tuple(sim.honest)
        self.predicate = predicate
        self.payload_source = payload_source
        self.rng = random.Random(f"adversary:{sim.sc.seed}")

    @property
    def now(self) -> int:
        return self._sim.now

    def sign(self, rid: int, digest: bytes):
        if rid not in self.corrupt:
            raise UnforgeabilityBreach(f"adversary asked to sign as honest replica {rid}")
        return sign(rid, digest)

    def signer(self, rid: int):
        return lambda d: self.sign(rid, d)

    def send(self, src: int, dests, msg, delay: Optional[int] = None):
        if src not in self.corrupt:
            raise UnforgeabilityBreach(f"adversary tried to send as honest replica {src}")
        self._sim.audit(src, msg)
        self._sim.send(src, dests, msg, delay)

    def set_timer(self, rid: int, fire_time: int, key: tuple):
        self._sim.set_timer(rid, fire_time, key)

    def record(self, rid: int, what: str, **data):
        self._sim._record({"t": self.now, "ev": "adversary-action", "r": rid, "what": what, **data})


class Strategy:
    """Honest-puppet base: behaves correctly unless ``rewrite`` says otherwise."""

    name = "honest"

    def __init__(self, ctx: AdversaryContext, params: Optional[dict] = None, ids=None):
        self.ctx = ctx
        self.opts = dict(params or {})
        self.ids = tuple(ctx.corrupt if ids is None else ids)
        self.puppets = {
            rid: Replica(rid, ctx.params, ctx.delta, ctx.signer(rid), ctx.predicate,
                         ctx.payload_source)
            for rid in self.ids
        }

    def opt(self, key: str, choices):
        """Option value; ``random`` (the default) draws one per use."""
        v = self.opts.get(key, "random")
        if v == "random":
            return self.ctx.rng.choice(choices)
        return v

    # -- simulator hooks ---------------------------------------------------------

    def start(self, rid, now):
        self._run(rid, now, self.puppets[rid].start(now))

    def on_message(self, rid, now, src, msg):
        self._run(rid, now, self.puppets[rid].on_message(now, src, msg))

    def on_timer(self, rid, now, key):
        if key[0] == "adv":
            self.on_adv_timer(rid, now, key)
        else:
            self._run(rid, now, self.puppets[rid].on_timer(now, key))

    def on_inject(self, rid, now, payload):
        self._run(rid, now, self.puppets[rid].on_inject(now, payload))

    def delay(self, src, dst, msg, now) -> Optional[int]:
        return None

    # -- customisation points --------------------------------------------------

    def rewrite(self, rid: int, now: int, send: Send) -> list:
        return [send]

    def on_enter(self, rid: int, now: int, view: int):
        pass

    def on_adv_timer(self, rid, now, key):
        pass

    def _run(self, rid, now, actions):
        for a in actions:
            if isinstance(a, Send):
                for out in self.rewrite(rid, now, a):
                    self.ctx.send(rid, out.dests, out.msg)
            elif isinstance(a, SetTimer):
                self.ctx.set_timer(rid, a.fire_time, a.key)
            elif isinstance(a, EnterView):
                self.on_enter(rid, now, a.view)

    # -- helpers -------------------------------------------------------------------

    def is_leader(self, rid: int, view: int) -> bool:
        return self.ctx.params.leader(view) == rid

    def split(self):
        """Random partition of the honest replicas into two non-empty groups."""
        h = list(self.ctx.honest)
        self.ctx.rng.shuffle(h)
        if len(h) < 2:
            return tuple(h), ()
        k = self.ctx.rng.randint(1, len(h) - 1)
        return tuple(sorted(h[:k])), tuple(sorted(h[k:]))

    def sibling(self, block: Block) -> Block:
        payload = tuple(tx + b"~alt" for tx in block.payload) or (b"alt",)
        return Block(block.parent, block.height, payload)

    def propose(self, rid: int, block: Block, view: int, qc, proof) -> Propose:
        s = self.ctx.signer(rid)
        p = ProposalTuple(block, view, s(proposal_digest(block, view)))
        return Propose(p, qc, proof, s(propose_digest(p, qc, proof)))

    def timeout(self, rid: int, view: int, inner=None, parent_qc=None) -> Timeout:
        return Timeout(view, inner, parent_qc, self.ctx.sign(rid, timeout_digest(view, inner)))


class Crash(Strategy):
    name = "crash"

    def start(self, rid, now):
        self.ctx.record(rid, "crash")

    def on_message(self, rid, now, src, msg):
        pass

    def on_timer(self, rid, now, key):
        pass

    def on_inject(self, rid, now, payload):
        pass


class SilentLeader(Strategy):
    """Correct except that it never proposes."""

    name = "silent-leader"

    def rewrite(self, rid, now, send):
        if isinstance(send.msg, Propose):
            self.ctx.record(rid, "withhold-proposal", view=send.msg.view)
            return []
        return [send]


class WithholdVotes(Strategy):
    name = "withhold-votes"

    def rewrite(self, rid, now, send):
        return [] if isinstance(send.msg, Vote) else [send]


class SplitVotes(Strategy):
    """Votes reach only a random subset of replicas."""

    name = "split-votes"

    def rewrite(self, rid, now, send):
        if isinstance(send.msg, Vote):
            a, _ = self.split()
            dests = tuple(sorted(set(a) | {rid}))
            self.ctx.record(rid, "split-vote", view=send.msg.view, to=list(dests))
            return [Send(dests, send.msg)]
        return [send]


class EquivocatingLeader(Strategy):
    """As leader, sends conflicting sibling blocks to two halves of the replicas.

    Options (each ``random`` by default): ``leader_vote`` picks which block the
    leader itself receives and votes for (``first``/``second``/``none``), ``resend``
    afterwards sends the other block to each half too, ``go_silent`` makes the
    leader stop proposing and withhold its timeout for the rest of the view.
    """

    name = "equivocating-leader"

    def __init__(self, ctx, params=None, ids=None):
        super().__init__(ctx, params, ids)
        self.silent = set()  # (rid, view)

    def rewrite(self, rid, now, send):
        msg = send.msg
        if isinstance(msg, Timeout) and (rid, msg.view) in self.silent:
            return []
        if not isinstance(msg, Propose) or not self.is_leader(rid, msg.view):
            return [send]
        w = msg.view
        if (rid, w) in self.silent:
            return []
        if msg.proof is not None:
            return [send]  # a first proposal must be the locked block, so no sibling
        x = msg
        alt = self.propose(rid, self.sibling(msg.proposal.block), w, msg.qc, None)
        a, b = self.split()
        if "partition" in self.opts:  # scripted: honest ids that get the first block
            first = {int(x) for x in str(self.opts["partition"]).replace(",", " ").split()}
            a = tuple(i for i in self.ctx.honest if i in first)
            b = tuple(i for i in self.ctx.honest if i not in first)
        others = tuple(c for c in self.ctx.corrupt if c != rid)
        a = tuple(sorted(set(a) | set(others)))
        mine = self.opt("leader_vote", ("first", "second"))
        if mine == "first":
            a = tuple(sorted(set(a) | {rid}))
        elif mine == "second":
            b = tuple(sorted(set(b) | {rid}))
        out = [Send(a, x), Send(b, alt)]
        resend = self.opt("resend", (True, False)) in (True, "true", "yes", "1")
        if resend:
            ra = tuple(i for i in a if i != rid)
            rb = tuple(i for i in b if i != rid)
            out += [Send(ra, alt), Send(rb, x)]
        silent = self.opt("go_silent", (True, False)) in (True, "true", "yes", "1")
        if silent:
            self.silent.add((rid, w))
        self.ctx.record(rid, "equivocate", view=w, height=x.proposal.block.height,
                        first=list(a), second=list(b), resend=resend, silent=silent)
        return out


class ConflictingTimeouts(Strategy):
    """Sends different timeouts for the same view to different replicas."""

    name = "conflicting-timeouts"

    def rewrite(self, rid, now, send):
        msg = send.msg
        if not isinstance(msg, Timeout) or msg.sender != rid:
            return [send]
        a, b = self.split()
        bottom = self.timeout(rid, msg.view)
        self.ctx.record(rid, "conflicting-timeouts", view=msg.view)
        return [Send(tuple(sorted(set(a) | {rid})), msg), Send(b, bottom)]

    def on_enter(self, rid, now, view):
        if self.opt("early", (True, False)) in (True, "true", "yes", "1"):
            a, _ = self.split()
            self.ctx.record(rid, "early-timeout", view=view)
            self.ctx.send(rid, a, self.timeout(rid, view))


class StaleQcProposer(Strategy):
    """As leader, builds follow-up blocks on the genesis certificate instead of the latest QC."""

    name = "stale-qc-proposer"

    def rewrite(self, rid, now, send):
        msg = send.msg
        if (not isinstance(msg, Propose) or msg.proof is not None
                or not self.is_leader(rid, msg.view)):
            return [send]
        block = Block(GENESIS.digest, 1, msg.proposal.block.payload)
        stale = self.propose(rid, block, msg.view, GENESIS_QC, None)
        self.ctx.record(rid, "stale-proposal", view=msg.view)
        return [Send(send.dests, stale)]


class StatusEquivocator(Strategy):
    """Sends the leader a stale genesis status ahead of its real one."""

    name = "status-equivocator"

    def rewrite(self, rid, now, send):
        msg = send.msg
        if not isinstance(msg, Status) or msg.sender != rid:
            return [send]
        pv = msg.prev_view
        stale = Status(pv, GENESIS_QC, GENESIS_TC,
                       self.ctx.sign(rid, status_digest(pv, GENESIS_QC, GENESIS_TC)))
        self.ctx.record(rid, "stale-status", view=pv + 1)
        return [Send(send.dests, stale), send]


class InvalidProposer(Strategy):
    """As leader, follow-up blocks carry a payload the validity predicate rejects."""

    name = "invalid-proposer"

    def rewrite(self, rid, now, send):
        msg = send.msg
        if (not isinstance(msg, Propose) or msg.proof is not None
                or not self.is_leader(rid, msg.view)):
            return [send]
        b = msg.proposal.block
        bad = self.propose(rid, Block(b.parent, b.height, (b"!bad", b"")), msg.view, msg.qc, None)
        self.ctx.record(rid, "invalid-proposal", view=msg.view)
        return [Send(send.dests, bad)]


class Mixed(Strategy):
    """Each corrupt replica independently draws one of the other strategies."""

    name = "mixed"

    def __init__(self, ctx, params=None, ids=None):
        self.ctx = ctx
        self.ids = tuple(ctx.corrupt if ids is None else ids)
        names = [k for k in STRATEGIES if k != "mixed"]
        self.by_id = {}
        for rid in self.ids:
            cls = STRATEGIES[ctx.rng.choice(names)]
            self.by_id[rid] = cls(ctx, params, ids=(rid,))
            ctx.record(rid, "mixed-choice", strategy=cls.name)

    def start(self, rid, now):
        self.by_id[rid].start(rid, now)

    def on_message(self, rid, now, src, msg):
        self.by_id[rid].on_message(rid, now, src, msg)

    def on_timer(self, rid, now, key):
        self.by_id[rid].on_timer(rid, now, key)

    def on_inject(self, rid, now, payload):
        self.by_id[rid].on_inject(rid, now, payload)


STRATEGIES = {
    cls.name: cls
    for cls in (Crash, SilentLeader, EquivocatingLeader, SplitVotes, ConflictingTimeouts,
                StaleQcProposer, StatusEquivocator, WithholdVotes, InvalidProposer, Mixed)
}
STRATEGIES["honest"] = Strategy


def make_strategy(name: str, ctx: AdversaryContext, params: Optional[dict] = None) -> Strategy:
    return STRATEGIES[name](ctx, params)
