"""Quorum certificates, timeout certificates and their ranking.

Thresholds for general ``n >= 5f - 1``: quorum ``n - f``, lock condition (1)
needs ``n - 3f`` supporting entries, condition (2) needs ``2f``.  At
``n = 5f - 1`` these are ``4f - 1``, ``2f - 1`` and ``2f``.
"""

from __future__ import annotations

import functools
from collections import ChainMap
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Mapping, Optional

from .core import (
    GENESIS,
    Block,
    ProposalTuple,
    Signature,
    Status,
    StatusSet,
    Timeout,
    Vote,
    conflicts,
    digest_of,
    directly_extends,
    encode_batch,
    encode_bytes,
    encode_int,
    externally_valid,
    leader_of,
    proposal_digest,
    timeout_digest,
    verify,
    vote_digest,
)

MUTATIONS = ("quorum", "tc-cond2", "no-dedup")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Params:
    n: int
    f: int
    mutation: Optional[str] = None

    def __post_init__(self):
        if self.f < 1:
            raise ConfigError(f"f must be >= 1, got {self.f}")
        if self.n < 5 * self.f - 1:
            raise ConfigError(
                f"n = {self.n} violates n >= 5f - 1 = {5 * self.f - 1} for f = {self.f}")
        if self.mutation is not None and self.mutation not in MUTATIONS:
            raise ConfigError(f"unknown mutation {self.mutation!r}")

    @property
    def quorum(self) -> int:
        q = self.n - self.f
        return q - 1 if self.mutation == "quorum" else q

    @property
    def t1(self) -> int:
        return self.n - 3 * self.f

    @property
    def t2(self) -> int:
        return 2 * self.f - 1 if self.mutation == "tc-cond2" else 2 * self.f

    @property
    def dedup(self) -> bool:
        return self.mutation != "no-dedup"

    def honest(self) -> "Params":
        return Params(self.n, self.f)

    def leader(self, view: int) -> int:
        return leader_of(view, self.n)


def _sig_list(sigs: Iterable[Signature]) -> bytes:
    return encode_batch([encode_int(s.signer) + encode_bytes(s.over) for s in sigs])


def _timeout_bytes(t) -> bytes:
    inner = b"" if t.inner is None else t.inner.digest + _sig_list((t.inner.leader_sig,))
    qc = b"" if t.parent_qc is None else t.parent_qc.digest
    return _sig_list((t.sig,)) + encode_bytes(inner) + encode_bytes(qc)


@dataclass(frozen=True, eq=False)
class QuorumCertificate:
    proposal: ProposalTuple
    votes: tuple  # Signature, sorted by signer
    digest: bytes = field(init=False, repr=False)

    def __post_init__(self):
        # covers the leader signature too: equality must imply identical validity
        object.__setattr__(self, "digest", digest_of(
            b"qc", encode_bytes(self.proposal.digest), _sig_list((self.proposal.leader_sig,)),
            _sig_list(self.votes)))

    def __eq__(self, other):
        return isinstance(other, QuorumCertificate) and self.digest == other.digest

    def __hash__(self):
        return hash(self.digest)

    @property
    def block(self) -> Block:
        return self.proposal.block

    @property
    def view(self) -> int:
        return self.proposal.view

    @property
    def height(self) -> int:
        return self.proposal.block.height

    def __repr__(self):
        return f"QC(v={self.view}, {self.block!r}, voters={[s.signer for s in self.votes]})"


@dataclass(frozen=True, eq=False)
class TimeoutCertificate:
    view: int
    entries: tuple  # Timeout, sorted by sender
    digest: bytes = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "digest", digest_of(
            b"tc", encode_int(self.view), encode_batch([_timeout_bytes(t) for t in self.entries])))

    def __eq__(self, other):
        return isinstance(other, TimeoutCertificate) and self.digest == other.digest

    def __hash__(self):
        return hash(self.digest)

    def __repr__(self):
        return f"TC(v={self.view}, senders={[t.sender for t in self.entries]})"


GENESIS_PROPOSAL = ProposalTuple(GENESIS, 0, Signature(0, proposal_digest(GENESIS, 0)))
GENESIS_QC = QuorumCertificate(GENESIS_PROPOSAL, ())
GENESIS_TC = TimeoutCertificate(0, ())


def make_qc(proposal: ProposalTuple, sigs: Iterable[Signature]) -> QuorumCertificate:
    return QuorumCertificate(proposal, tuple(sorted(set(sigs), key=lambda s: s.signer)))


def make_tc(view: int, timeouts: Iterable[Timeout]) -> TimeoutCertificate:
    return TimeoutCertificate(view, tuple(sorted(timeouts, key=lambda t: t.sender)))


def propose_digest(proposal: ProposalTuple, qc, proof) -> bytes:
    if proof is None:
        proof_d = b""
    elif isinstance(proof, StatusSet):
        proof_d = digest_of(b"statusset", _sig_list(s.sig for s in proof.statuses))
    else:
        proof_d = proof.digest
    return digest_of(b"propose", encode_bytes(proposal.digest), encode_bytes(qc.digest),
                     encode_bytes(proof_d))


def status_digest(prev_view: int, qc, high_tc) -> bytes:
    qc_d = qc.digest if qc is not None else b""
    return digest_of(b"status", encode_int(prev_view), encode_bytes(qc_d),
                     encode_bytes(high_tc.digest))


# -- ranking -------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class CertRank:
    view: int
    height: int


def compare_rank(a: CertRank, b: CertRank) -> int:
    """-1, 0 or 1 as ``a`` ranks below, equal to or above ``b``."""
    return (a > b) - (a < b)


def qc_rank(qc: QuorumCertificate) -> CertRank:
    return CertRank(qc.view, qc.height)


# -- quorum certificates ---------------------------------------------------------

def _proposal_signed(p: ProposalTuple, n: int) -> bool:
    return 1 <= p.view and verify(p.leader_sig, p.digest, leader_of(p.view, n))


def form_qc(votes: Iterable[Vote], params: Params) -> Optional[QuorumCertificate]:
    """A QC iff every vote is on one proposal tuple and enough distinct replicas voted."""
    votes = list(votes)
    if not votes:
        return None
    proposal = votes[0].proposal
    if any(v.proposal != proposal for v in votes):
        return None
    d = vote_digest(proposal)
    sigs = {}
    for v in votes:
        if not verify(v.sig, d) or not 1 <= v.sig.signer <= params.n:
            return None
        sigs[v.sig.signer] = v.sig
    if len(sigs) < params.quorum:
        return None
    return make_qc(proposal, sigs.values())


@functools.lru_cache(maxsize=200_000)
def validate_qc(qc, params: Params, predicate: Optional[Callable] = None) -> bool:
    if not isinstance(qc, QuorumCertificate):
        return False
    if qc == GENESIS_QC:
        return True
    p = qc.proposal
    if not _proposal_signed(p, params.n):
        return False
    if predicate is not None and not externally_valid(p.block, predicate):
        return False
    d = vote_digest(p)
    signers = set()
    for s in qc.votes:
        if not isinstance(s, Signature) or not verify(s, d) or not 1 <= s.signer <= params.n:
            return False
        signers.add(s.signer)
    return len(signers) == len(qc.votes) and len(signers) >= params.quorum


def certifies_parent(qc, block: Block) -> bool:
    """``qc`` is the certificate of ``block``'s parent (genesis is its own parent)."""
    if block == GENESIS:
        return qc == GENESIS_QC
    return isinstance(qc, QuorumCertificate) and directly_extends(block, qc.block)


# -- timeout certificates -----------------------------------------------------------

@functools.lru_cache(maxsize=200_000)
def validate_timeout(t, params: Params, predicate: Optional[Callable] = None) -> bool:
    if not isinstance(t, Timeout) or t.view < 1:
        return False
    if not 1 <= t.sig.signer <= params.n or not verify(t.sig, timeout_digest(t.view, t.inner)):
        return False
    if t.inner is None:
        return t.parent_qc is None
    p = t.inner
    if p.view != t.view or not _proposal_signed(p, params.n):
        return False
    if predicate is not None and not externally_valid(p.block, predicate):
        return False
    return certifies_parent(t.parent_qc, p.block) and validate_qc(t.parent_qc, params, predicate)


def validate_tc(tc, params: Params, predicate: Optional[Callable] = None) -> bool:
    if not isinstance(tc, TimeoutCertificate):
        return False
    if tc == GENESIS_TC:
        return True
    senders = {t.sender for t in tc.entries}
    if len(senders) != len(tc.entries) or len(senders) < params.quorum:
        return False
    return all(t.view == tc.view and validate_timeout(t, params, predicate) for t in tc.entries)


def tc_blocks(tc: TimeoutCertificate) -> dict:
    """Blocks carried by a TC: each inner block and its parent."""
    out = {}
    for t in tc.entries:
        if t.inner is not None:
            out[t.inner.block.digest] = t.inner.block
            if t.parent_qc is not None:
                out[t.parent_qc.block.digest] = t.parent_qc.block
    return out


def _inner_blocks(tc: TimeoutCertificate):
    return [(t, t.inner.block) for t in tc.entries if t.inner is not None]


def tc_locks(tc: TimeoutCertificate, candidate: Block, params: Params,
             store: Optional[Mapping] = None) -> bool:
    if tc == GENESIS_TC:
        return candidate == GENESIS
    blocks = ChainMap(tc_blocks(tc), store or {})
    inners = _inner_blocks(tc)
    support = sum(1 for _, b in inners if b == candidate or directly_extends(b, candidate))
    leader = params.leader(tc.view)
    if support >= params.t2 and all(t.sender != leader for t in tc.entries):
        return True
    if support >= params.t1:
        return not any(conflicts(b, candidate, blocks) for _, b in inners)
    return False


def locked_blocks(tc: TimeoutCertificate, params: Params, store: Optional[Mapping] = None):
    """All blocks the TC locks (candidates are inner blocks and their parents)."""
    if tc == GENESIS_TC:
        return [GENESIS]
    cands = tc_blocks(tc)
    return [b for b in cands.values() if tc_locks(tc, b, params, store)]


def locked_block(tc: TimeoutCertificate, params: Params,
                 store: Optional[Mapping] = None) -> Optional[Block]:
    """The highest locked block; ties (only possible with conflicting locks) go to the larger digest."""
    locked = locked_blocks(tc, params, store)
    if not locked:
        return None
    return max(locked, key=lambda b: (b.height, b.digest))


def tc_rank(tc: TimeoutCertificate, params: Params, store=None) -> Optional[CertRank]:
    b = locked_block(tc, params, store)
    return None if b is None else CertRank(tc.view, b.height)


def highest_tc(statuses: Iterable[Status], params: Params, store=None) -> Optional[TimeoutCertificate]:
    best, best_key = None, None
    for s in statuses:
        b = locked_block(s.high_tc, params, store)
        if b is None:
            continue
        key = (s.high_tc.view, b.height, b.digest)
        if best_key is None or key > best_key:
            best, best_key = s.high_tc, key
    return best


def validate_status(s, params: Params, predicate=None, store=None) -> bool:
    if not isinstance(s, Status) or s.prev_view < 0 or not 1 <= s.sig.signer <= params.n:
        return False
    if not verify(s.sig, status_digest(s.prev_view, s.qc, s.high_tc)):
        return False
    tc = s.high_tc
    if not isinstance(tc, TimeoutCertificate) or tc.view > s.prev_view:
        return False
    if not validate_tc(tc, params, predicate):
        return False
    locked = locked_block(tc, params, store)
    if locked is None:
        return False
    if s.qc is None:
        return True
    return certifies_parent(s.qc, locked) and validate_qc(s.qc, params, predicate)


def witness_subsets(timeouts, size: int):
    """Deterministic enumeration of ``size``-subsets, lexicographic by sender."""
    return combinations(sorted(timeouts, key=lambda t: t.sender), size)
