"""Blocks, hash chaining, ideal signatures and protocol messages.

Digests are SHA-256 over a length-prefixed canonical encoding: every field
is written as a 4-byte big-endian length followed by its bytes, integers as
8-byte big-endian two's complement, and a batch as its item count followed
by each item length-prefixed.  Every object that is signed or hashed starts
with a short ASCII domain tag (``b"block"``, ``b"vote"`` ...).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Optional, Union

HASH_NAME = "sha256"
DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)


class UnknownAncestry(Exception):
    """A parent digest on the path could not be resolved (or the chain is malformed)."""


class UnforgeabilityBreach(Exception):
    """Adversary code produced or requested a signature of an honest replica."""


def _field(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def encode_int(value: int) -> bytes:
    return _field(struct.pack(">q", value))


def encode_bytes(data: bytes) -> bytes:
    return _field(data)


def encode_batch(items) -> bytes:
    return struct.pack(">I", len(items)) + b"".join(_field(x) for x in items)


def digest_of(tag: bytes, *parts: bytes) -> bytes:
    """Hash a domain tag and already-encoded parts."""
    h = hashlib.sha256(_field(tag))
    for p in parts:
        h.update(p)
    return h.digest()


@dataclass(frozen=True)
class Block:
    parent: bytes
    height: int
    payload: tuple = ()
    digest: bytes = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        d = digest_of(b"block", encode_bytes(self.parent), encode_int(self.height),
                      encode_batch(self.payload))
        object.__setattr__(self, "digest", d)

    def __eq__(self, other):
        return isinstance(other, Block) and self.digest == other.digest

    def __hash__(self):
        return hash(self.digest)

    def __repr__(self):
        return f"Block(h={self.height}, {self.digest.hex()[:8]})"


GENESIS = Block(ZERO_DIGEST, 0, ())


@dataclass(frozen=True)
class Signature:
    signer: int
    over: bytes


def sign(replica_id: int, payload_digest: bytes) -> Signature:
    return Signature(replica_id, payload_digest)


def verify(sig: Signature, payload_digest: bytes, signer: Optional[int] = None) -> bool:
    if not isinstance(sig, Signature) or sig.over != payload_digest:
        return False
    return signer is None or sig.signer == signer


class Signer:
    """Signing capability bound to one replica id.

    ``registry`` (when given) collects every signature this signer creates,
    which lets the simulator audit adversary traffic for forged signatures.
    """

    def __init__(self, replica_id: int, registry: Optional[set] = None):
        self.replica_id = replica_id
        self._registry = registry

    def __call__(self, payload_digest: bytes) -> Signature:
        sig = sign(self.replica_id, payload_digest)
        if self._registry is not None:
            self._registry.add((sig.signer, sig.over))
        return sig


def leader_of(view: int, n: int) -> int:
    """Round-robin leader schedule, replica ids 1..n."""
    return (view - 1) % n + 1


@dataclass(frozen=True)
class ProposalTuple:
    block: Block
    view: int
    leader_sig: Signature
    digest: bytes = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "digest", proposal_digest(self.block, self.view))


def proposal_digest(block: Block, view: int) -> bytes:
    return digest_of(b"proposal", encode_bytes(block.digest), encode_int(view))


def vote_digest(proposal: ProposalTuple) -> bytes:
    return digest_of(b"vote", encode_bytes(proposal.digest))


def timeout_digest(view: int, inner: Optional[ProposalTuple]) -> bytes:
    inner_d = inner.digest if inner is not None else b""
    return digest_of(b"timeout", encode_int(view), encode_bytes(inner_d))


# -- messages ---------------------------------------------------------------
# QuorumCertificate / TimeoutCertificate live in certs; messages hold them as
# opaque values so core stays import-free of certs.


@dataclass(frozen=True)
class Propose:
    proposal: ProposalTuple
    qc: object
    proof: object  # None | TimeoutCertificate | StatusSet
    sig: Signature

    @property
    def view(self) -> int:
        return self.proposal.view


@dataclass(frozen=True)
class Vote:
    proposal: ProposalTuple
    sig: Signature

    @property
    def view(self) -> int:
        return self.proposal.view


@dataclass(frozen=True)
class Timeout:
    """``inner`` is None for bottom.

    ``parent_qc`` certifies ``inner.block``'s parent.  It is an unsigned
    attachment (certificates are self-authenticating) that lets any holder of
    a timeout certificate re-propose the locked block.
    """

    view: int
    inner: Optional[ProposalTuple]
    parent_qc: object
    sig: Signature

    @property
    def sender(self) -> int:
        return self.sig.signer


@dataclass(frozen=True)
class Status:
    prev_view: int
    qc: object  # QC of the parent of high_tc's locked block, or None if unknown
    high_tc: object
    sig: Signature

    @property
    def sender(self) -> int:
        return self.sig.signer


@dataclass(frozen=True)
class StatusSet:
    statuses: tuple


@dataclass(frozen=True)
class QcForward:
    qc: object


@dataclass(frozen=True)
class TimeoutForward:
    timeouts: tuple


Message = Union[Propose, Vote, Timeout, Status, QcForward, TimeoutForward]


# -- chain relations ---------------------------------------------------------

def extends(descendant: Block, ancestor: Block, store: Mapping[bytes, Block]) -> bool:
    """True iff following parents from ``descendant`` reaches ``ancestor``.

    Raises UnknownAncestry when the walk needs a digest ``store`` cannot
    resolve, or meets a parent whose height is not exactly one less.
    """
    cur = descendant
    while cur.height > ancestor.height:
        parent = store.get(cur.parent)
        if parent is None:
            raise UnknownAncestry(cur.parent.hex())
        if parent.height != cur.height - 1:
            raise UnknownAncestry(f"malformed chain at {cur.digest.hex()}")
        cur = parent
    return cur == ancestor


def conflicts(a: Block, b: Block, store: Mapping[bytes, Block]) -> bool:
    """Neither equal nor on one chain.  Unknown ancestry counts as conflicting."""
    if a == b:
        return False
    try:
        return not (extends(a, b, store) or extends(b, a, store))
    except UnknownAncestry:
        return True


def directly_extends(child: Block, parent: Block) -> bool:
    return child.parent == parent.digest and child.height == parent.height + 1


# -- validity predicates -------------------------------------------------------

def _any(payload) -> bool:
    return True


def _nonempty(payload) -> bool:
    return len(payload) > 0 and all(len(tx) > 0 for tx in payload)


def _no_bang(payload) -> bool:
    return _nonempty(payload) and not any(tx.startswith(b"!") for tx in payload)


PREDICATES: dict[str, Callable[[tuple], bool]] = {
    "any": _any,
    "nonempty": _nonempty,
    "no-bang": _no_bang,
}


def externally_valid(block: Block, predicate: Callable[[tuple], bool]) -> bool:
    return block == GENESIS or predicate(block.payload)


# -- traversal ---------------------------------------------------------------

def iter_proposals(obj) -> Iterator[ProposalTuple]:
    """Every ProposalTuple nested anywhere inside a message or certificate."""
    stack = [obj]
    while stack:
        o = stack.pop()
        if o is None:
            continue
        if isinstance(o, ProposalTuple):
            yield o
        elif isinstance(o, Propose):
            stack.extend((o.proposal, o.qc, o.proof))
        elif isinstance(o, Vote):
            yield o.proposal
        elif isinstance(o, Timeout):
            stack.extend((o.inner, o.parent_qc))
        elif isinstance(o, Status):
            stack.extend((o.qc, o.high_tc))
        elif isinstance(o, StatusSet):
            stack.extend(o.statuses)
        elif isinstance(o, QcForward):
            stack.append(o.qc)
        elif isinstance(o, TimeoutForward):
            stack.extend(o.timeouts)
        elif hasattr(o, "proposal"):  # QuorumCertificate
            yield o.proposal
        elif hasattr(o, "entries"):  # TimeoutCertificate
            stack.extend(o.entries)


def iter_signatures(obj) -> Iterator[Signature]:
    stack = [obj]
    while stack:
        o = stack.pop()
        if o is None:
            continue
        if isinstance(o, ProposalTuple):
            yield o.leader_sig
        elif isinstance(o, Propose):
            yield o.sig
            stack.extend((o.proposal, o.qc, o.proof))
        elif isinstance(o, Vote):
            yield o.sig
            stack.append(o.proposal)
        elif isinstance(o, Timeout):
            yield o.sig
            stack.extend((o.inner, o.parent_qc))
        elif isinstance(o, Status):
            yield o.sig
            stack.extend((o.qc, o.high_tc))
        elif isinstance(o, StatusSet):
            stack.extend(o.statuses)
        elif isinstance(o, QcForward):
            stack.append(o.qc)
        elif isinstance(o, TimeoutForward):
            stack.extend(o.timeouts)
        elif hasattr(o, "votes"):
            yield from o.votes
            stack.append(o.proposal)
        elif hasattr(o, "entries"):
            stack.extend(o.entries)


def iter_blocks(obj) -> Iterator[Block]:
    for p in iter_proposals(obj):
        yield p.block
