"""Line-delimited JSON traces and the JSON form of protocol messages.

The first line is a header naming the format, hash function, event
tie-break policy, scenario and seed; the last line is an ``end`` record.
Blocks appear once, as a ``block`` record, before the first message that
carries them; messages refer to blocks by hex digest.
"""

from __future__ import annotations

import hashlib
import json
from typing import Iterable, Optional

from .certs import QuorumCertificate, TimeoutCertificate
from .core import (
    HASH_NAME,
    Block,
    Propose,
    ProposalTuple,
    QcForward,
    Signature,
    Status,
    StatusSet,
    Timeout,
    TimeoutForward,
    Vote,
)

FORMAT = "fastbft-trace/1"
TIE_BREAK = "time,deliver<timer<inject,seq"


class TraceError(ValueError):
    pass


def block_record(b: Block) -> dict:
    return {"ev": "block", "d": b.digest.hex(), "p": b.parent.hex(), "h": b.height,
            "x": [tx.hex() for tx in b.payload]}


def block_from_record(rec: dict) -> Block:
    b = Block(bytes.fromhex(rec["p"]), rec["h"], tuple(bytes.fromhex(x) for x in rec["x"]))
    if b.digest.hex() != rec["d"]:
        raise TraceError(f"block digest mismatch for {rec['d']}")
    return b


class Encoder:
    """Message -> JSON-native structure, memoised per object for the run."""

    def __init__(self):
        self._memo = {}

    def sig(self, s: Signature):
        return [s.signer, s.over.hex()]

    def proposal(self, p: Optional[ProposalTuple]):
        if p is None:
            return None
        return {"b": p.block.digest.hex(), "v": p.view, "s": self.sig(p.leader_sig)}

    def qc(self, qc: Optional[QuorumCertificate]):
        if qc is None:
            return None
        hit = self._memo.get(id(qc))
        if hit is not None and hit[0] is qc:
            return hit[1]
        out = {"p": self.proposal(qc.proposal), "votes": [self.sig(s) for s in qc.votes]}
        self._memo[id(qc)] = (qc, out)
        return out

    def timeout(self, t: Timeout):
        return {"type": "timeout", "v": t.view, "inner": self.proposal(t.inner),
                "qc": self.qc(t.parent_qc), "s": self.sig(t.sig)}

    def tc(self, tc: TimeoutCertificate):
        hit = self._memo.get(id(tc))
        if hit is not None and hit[0] is tc:
            return hit[1]
        out = {"v": tc.view, "e": [self.timeout(t) for t in tc.entries]}
        self._memo[id(tc)] = (tc, out)
        return out

    def status(self, s: Status):
        return {"type": "status", "pv": s.prev_view, "qc": self.qc(s.qc),
                "tc": self.tc(s.high_tc), "s": self.sig(s.sig)}

    def message(self, m) -> dict:
        if isinstance(m, Propose):
            if m.proof is None:
                proof = None
            elif isinstance(m.proof, StatusSet):
                proof = {"ss": [self.status(s) for s in m.proof.statuses]}
            else:
                proof = {"tc": self.tc(m.proof)}
            return {"type": "propose", "p": self.proposal(m.proposal), "qc": self.qc(m.qc),
                    "proof": proof, "s": self.sig(m.sig)}
        if isinstance(m, Vote):
            return {"type": "vote", "p": self.proposal(m.proposal), "s": self.sig(m.sig)}
        if isinstance(m, Timeout):
            return self.timeout(m)
        if isinstance(m, Status):
            return self.status(m)
        if isinstance(m, QcForward):
            return {"type": "qc", "qc": self.qc(m.qc)}
        if isinstance(m, TimeoutForward):
            return {"type": "timeouts", "ts": [self.timeout(t) for t in m.timeouts]}
        raise TypeError(f"cannot encode {type(m).__name__}")


class Decoder:
    """JSON structure -> message objects, resolving blocks through ``blocks``."""

    def __init__(self, blocks: dict):
        self.blocks = blocks

    def sig(self, s):
        return Signature(s[0], bytes.fromhex(s[1]))

    def block(self, hexd: str) -> Block:
        try:
            return self.blocks[hexd]
        except KeyError:
            raise TraceError(f"message references unknown block {hexd}") from None

    def proposal(self, p):
        if p is None:
            return None
        return ProposalTuple(self.block(p["b"]), p["v"], self.sig(p["s"]))

    def qc(self, q):
        if q is None:
            return None
        return QuorumCertificate(self.proposal(q["p"]), tuple(self.sig(s) for s in q["votes"]))

    def timeout(self, t):
        return Timeout(t["v"], self.proposal(t["inner"]), self.qc(t["qc"]), self.sig(t["s"]))

    def tc(self, t):
        return TimeoutCertificate(t["v"], tuple(self.timeout(e) for e in t["e"]))

    def status(self, s):
        return Status(s["pv"], self.qc(s["qc"]), self.tc(s["tc"]), self.sig(s["s"]))

    def message(self, m):
        kind = m.get("type")
        if kind == "propose":
            proof = m["proof"]
            if proof is None:
                pr = None
            elif "ss" in proof:
                pr = StatusSet(tuple(self.status(s) for s in proof["ss"]))
            else:
                pr = self.tc(proof["tc"])
            return Propose(self.proposal(m["p"]), self.qc(m["qc"]), pr, self.sig(m["s"]))
        if kind == "vote":
            return Vote(self.proposal(m["p"]), self.sig(m["s"]))
        if kind == "timeout":
            return self.timeout(m)
        if kind == "status":
            return self.status(m)
        if kind == "qc":
            return QcForward(self.qc(m["qc"]))
        if kind == "timeouts":
            return TimeoutForward(tuple(self.timeout(t) for t in m["ts"]))
        raise TraceError(f"unknown message type {kind!r}")


_dumps = json.JSONEncoder(separators=(",", ":")).encode


class Trace:
    """A header plus an ordered list of JSON-native records."""

    def __init__(self, header: dict, records: list, raw: Optional[bytes] = None):
        self.header = header
        self.records = records
        self._raw = raw  # the exact bytes this trace was parsed from, if any

    @property
    def scenario(self) -> dict:
        return self.header["scenario"]

    def lines(self) -> Iterable[str]:
        yield _dumps(self.header)
        for rec in self.records:
            yield _dumps(rec)

    def to_bytes(self) -> bytes:
        if self._raw is None:
            self._raw = ("\n".join(self.lines()) + "\n").encode()
        return self._raw

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def write(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Trace":
        lines = data.decode().splitlines()
        if not lines:
            raise TraceError("incomplete trace: empty file")
        try:
            header = json.loads(lines[0])
            records = [json.loads(line) for line in lines[1:]]
        except json.JSONDecodeError as exc:
            raise TraceError(f"incomplete trace: unparsable line ({exc})") from None
        if header.get("ev") != "header" or header.get("format") != FORMAT:
            raise TraceError("not a fastbft trace (bad header)")
        if header.get("hash") != HASH_NAME:
            raise TraceError(f"unsupported hash function {header.get('hash')!r}; "
                             f"this build only recomputes {HASH_NAME}")
        if not records or records[-1].get("ev") != "end":
            raise TraceError("incomplete trace: missing end record")
        if records[-1].get("records") != len(records) - 1:
            raise TraceError("incomplete trace: record count mismatch")
        return cls(header, records, bytes(data))

    @classmethod
    def load(cls, path) -> "Trace":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
