"""Post-hoc oracles over traces.

Every check works from the trace records alone: certificates are decoded
from the sent messages and re-validated with the pure functions in
``certs`` under honest parameters, whatever the build flag used for the run.
Line numbers in verdicts are 1-based trace file lines (the header is line 1).
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

from .certs import (
    Params,
    QuorumCertificate,
    TimeoutCertificate,
    locked_blocks,
    make_tc,
    tc_locks,
    validate_qc,
    validate_tc,
    validate_timeout,
)
from .core import (
    GENESIS,
    PREDICATES,
    Propose,
    QcForward,
    Status,
    StatusSet,
    Timeout,
    TimeoutForward,
    UnknownAncestry,
    conflicts,
    externally_valid,
    extends,
    iter_signatures,
)
from .trace import Decoder, Trace, TraceError, block_from_record

LEMMA2_MAX_N = 6


@dataclass
class Verdict:
    name: str
    passed: bool = True
    details: list = field(default_factory=list)
    lines: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    data: dict = field(default_factory=dict)

    def fail(self, msg: str, *lines):
        self.passed = False
        if len(self.details) < 50:
            self.details.append(msg)
            self.lines.extend(x for x in lines if x is not None)

    def to_dict(self) -> dict:
        out = {"pass": self.passed, "details": self.details, "lines": self.lines}
        if self.warnings:
            out["warnings"] = self.warnings
        if self.data:
            out["data"] = self.data
        return out


def _line(idx: int) -> int:
    return idx + 2


def iter_qcs(obj):
    stack = [obj]
    while stack:
        o = stack.pop()
        if o is None:
            continue
        if isinstance(o, QuorumCertificate):
            yield o
        elif isinstance(o, Propose):
            stack.extend((o.qc, o.proof))
        elif isinstance(o, Timeout):
            stack.append(o.parent_qc)
        elif isinstance(o, Status):
            stack.extend((o.qc, o.high_tc))
        elif isinstance(o, StatusSet):
            stack.extend(o.statuses)
        elif isinstance(o, QcForward):
            stack.append(o.qc)
        elif isinstance(o, TimeoutForward):
            stack.extend(o.timeouts)
        elif isinstance(o, TimeoutCertificate):
            stack.extend(o.entries)


def iter_timeouts(obj):
    stack = [obj]
    while stack:
        o = stack.pop()
        if o is None:
            continue
        if isinstance(o, Timeout):
            yield o
        elif isinstance(o, Propose):
            stack.append(o.proof)
        elif isinstance(o, Status):
            stack.append(o.high_tc)
        elif isinstance(o, StatusSet):
            stack.extend(o.statuses)
        elif isinstance(o, TimeoutForward):
            stack.extend(o.timeouts)
        elif isinstance(o, TimeoutCertificate):
            stack.extend(o.entries)


class TraceView:
    """Indexed, decoded view of a trace shared by all checks."""

    def __init__(self, trace: Trace):
        self.trace = trace
        h = trace.header
        sc = h["scenario"]
        self.scenario = sc
        self.n, self.f = sc["n"], sc["f"]
        self.params = Params(self.n, self.f)  # honest thresholds, independent of the build flag
        self.delta = sc["delta"]
        self.gst = sc["gst"]
        self.horizon = sc["horizon"]
        self.honest = tuple(h["honest"])
        self.corrupt = tuple(h["corrupt"])
        self.predicate = PREDICATES[sc["predicate"]]
        self.records = trace.records
        self.blocks = {GENESIS.digest: GENESIS}
        self.by_kind = defaultdict(list)  # ev -> [(idx, rec)]
        for i, rec in enumerate(self.records):
            ev = rec["ev"]
            if ev == "block":
                b = block_from_record(rec)
                self.blocks[b.digest] = b
            self.by_kind[ev].append((i, rec))
        self.decoder = Decoder({d.hex(): b for d, b in self.blocks.items()})
        self.sends = []  # (idx, rec, msg)
        for i, rec in self.by_kind["send"]:
            self.sends.append((i, rec, self.decoder.message(rec["msg"])))
        self.send_by_id = {rec["id"]: (i, rec, msg) for i, rec, msg in self.sends}

    def block(self, hexd: str):
        return self.blocks[bytes.fromhex(hexd)]

    def honest_records(self, ev: str):
        hs = set(self.honest)
        return [(i, r) for i, r in self.by_kind[ev] if r["r"] in hs]

    # -- certificates seen anywhere in the trace ------------------------------------

    def qcs(self):
        """Distinct QCs carried by any sent message, with first line and validity."""
        if not hasattr(self, "_qcs"):
            out = {}
            for i, _, msg in self.sends:
                for qc in iter_qcs(msg):
                    if qc.digest not in out:
                        out[qc.digest] = (qc, i, validate_qc(qc, self.params, self.predicate))
            self._qcs = out
        return self._qcs

    def timeouts(self):
        """Distinct timeouts carried by any sent message: (sender, over) -> (Timeout, idx, valid)."""
        if not hasattr(self, "_timeouts"):
            out = {}
            for i, _, msg in self.sends:
                for t in iter_timeouts(msg):
                    key = (t.sig.signer, t.sig.over)
                    if key not in out:
                        out[key] = (t, i, validate_timeout(t, self.params, self.predicate))
            self._timeouts = out
        return self._timeouts

    def certified(self):
        """(view, digest) -> line of blocks certified or potentially certified.

        A block counts when a valid QC for it appears in the trace, or when
        enough honest replicas voted that the corrupt ones could complete a QC.
        """
        if not hasattr(self, "_certified"):
            out = {}
            for qc, i, ok in self.qcs().values():
                if ok and qc.view >= 1:
                    out.setdefault((qc.view, qc.block.digest), i)
            need = self.params.quorum - len(self.corrupt)
            voters = defaultdict(set)
            first = {}
            for i, r in self.honest_records("vote"):
                key = (r["view"], bytes.fromhex(r["block"]))
                voters[key].add(r["r"])
                first.setdefault(key, i)
            for key, vs in voters.items():
                if len(vs) >= need:
                    out.setdefault(key, first[key])
            self._certified = out
        return self._certified


def _extends_or_equal(a, b, store) -> Optional[bool]:
    try:
        return a == b or extends(a, b, store)
    except UnknownAncestry:
        return None


# -- safety --------------------------------------------------------------------------

def check_safety(tv: TraceView) -> Verdict:
    v = Verdict("safety")
    logs = defaultdict(dict)  # replica -> height -> (digest, idx)
    tips = {}
    for i, r in tv.honest_records("commit"):
        rid = r["r"]
        if r.get("conflict"):
            v.fail(f"replica {rid} committed a block conflicting its own log at height {r['h']}",
                   _line(i))
            continue
        prev = tips.get(rid, (GENESIS.digest.hex(), 0, None))
        if r["h"] != prev[1] + 1 or r["parent"] != prev[0]:
            v.fail(f"replica {rid} log is not a hash chain at height {r['h']}", prev[2] and _line(prev[2]),
                   _line(i))
        tips[rid] = (r["d"], r["h"], i)
        logs[rid][r["h"]] = (r["d"], i)
    by_height = {}
    for rid in sorted(logs):
        for h, (d, i) in logs[rid].items():
            seen = by_height.setdefault(h, (rid, d, i))
            if seen[1] != d:
                v.fail(f"replicas {seen[0]} and {rid} committed different blocks at height {h}: "
                       f"{seen[1][:16]} vs {d[:16]}", _line(seen[2]), _line(i))
    v.data["committed_heights"] = {str(r): max(logs[r], default=0) for r in sorted(logs)}
    return v


def check_external_validity(tv: TraceView) -> Verdict:
    v = Verdict("external_validity")
    for i, r in tv.honest_records("commit"):
        b = tv.block(r["d"])
        if not externally_valid(b, tv.predicate):
            v.fail(f"replica {r['r']} committed invalid block at height {r['h']}", _line(i))
    for i, r in tv.honest_records("vote"):
        b = tv.block(r["block"])
        if not externally_valid(b, tv.predicate):
            v.fail(f"replica {r['r']} voted for invalid block in view {r['view']}", _line(i))
    return v


def check_lemma1_lemma3(tv: TraceView) -> Verdict:
    """Certified blocks ranked at or above a directly committed block extend it."""
    v = Verdict("lemma1_lemma3")
    valid = {(qc.view, qc.block.digest) for qc, _, ok in tv.qcs().values() if ok}
    direct = {}
    for i, r in tv.honest_records("qc"):
        key = (r["view"], bytes.fromhex(r["block"]))
        if key not in valid:
            v.fail(f"replica {r['r']} acted on a QC for view {r['view']} that is not valid "
                   f"under n={tv.n}, f={tv.f}", _line(i))
            continue
        direct.setdefault(key, i)
    certified = tv.certified()
    cert_blocks = sorted(((w, tv.blocks[d], i) for (w, d), i in certified.items()),
                         key=lambda x: (x[0], x[1].height))
    for (w, d), i in sorted(direct.items(), key=lambda x: x[1]):
        b = tv.blocks[d]
        for cw, c, ci in cert_blocks:
            if (cw, c.height) < (w, b.height):
                continue
            ok = _extends_or_equal(c, b, tv.blocks)
            if not ok:
                v.fail(f"certified block (view {cw}, height {c.height}) does not extend "
                       f"directly committed block (view {w}, height {b.height})", _line(i), _line(ci))
    v.data["direct_commits"] = len(direct)
    v.data["certified_blocks"] = len(certified)
    return v


def check_lemma2(tv: TraceView) -> Verdict:
    v = Verdict("lemma2")
    if tv.n > LEMMA2_MAX_N:
        v.warnings.append(f"subset enumeration skipped for n={tv.n} > {LEMMA2_MAX_N}")
        return v
    params, store = tv.params, tv.blocks
    by_view = defaultdict(dict)  # view -> sender -> [Timeout]
    for (sender, _), (t, i, ok) in tv.timeouts().items():
        if ok:
            by_view[t.view].setdefault(sender, []).append(t)
    highest = defaultdict(list)  # view -> [(block, idx)] at max height
    for (w, d), i in tv.certified().items():
        b = store[d]
        cur = highest[w]
        if not cur or b.height > cur[0][0].height:
            highest[w] = [(b, i)]
        elif b.height == cur[0][0].height and all(b != x for x, _ in cur):
            cur.append((b, i))
    enumerated = 0
    for w, tops in sorted(highest.items()):
        senders = by_view.get(w, {})
        ids = sorted(senders)
        for size in range(params.quorum, len(ids) + 1):
            for group in itertools.combinations(ids, size):
                for choice in itertools.product(*(senders[s] for s in group)):
                    enumerated += 1
                    tc = make_tc(w, choice)
                    for lb in locked_blocks(tc, params, store):
                        for b, i in tops:
                            if conflicts(lb, b, store):
                                v.fail(f"timeouts of view {w} from {list(group)} form a TC locking "
                                       f"height {lb.height} which conflicts the highest certified "
                                       f"block (height {b.height})", _line(i))
    for i, r in tv.honest_records("tc-formed"):
        w = r["view"]
        tc = tv.decoder.tc(r["cert"])
        if not validate_tc(tc, params, tv.predicate):
            v.fail(f"replica {r['r']} entered view {w + 1} with an invalid TC", _line(i))
            continue
        known = tv.timeouts()
        if any((t.sig.signer, t.sig.over) not in known for t in tc.entries):
            v.fail(f"replica {r['r']} holds a view-{w} TC with timeouts never sent", _line(i))
        for b, bi in highest.get(w, ()):
            if not tc_locks(tc, b, params, store):
                v.fail(f"replica {r['r']} entered view {w + 1} with a TC that does not lock the "
                       f"highest certified block of view {w} (height {b.height})", _line(i), _line(bi))
    v.data["subsets_enumerated"] = enumerated
    return v


# -- timing --------------------------------------------------------------------------

def check_latency(tv: TraceView) -> Verdict:
    """Honest-leader proposals after GST reach a QC at every honest replica within 2 delta."""
    v = Verdict("latency")
    bound = 2 * tv.delta
    hs = set(tv.honest)
    qc_at = {}  # (replica, view, digest) -> time
    for i, r in tv.honest_records("qc"):
        qc_at.setdefault((r["r"], r["view"], r["block"]), r["t"])
    commit_at = {}
    for i, r in tv.honest_records("commit"):
        if not r.get("conflict"):
            commit_at.setdefault((r["r"], r["d"]), r["t"])
    timeout_at = defaultdict(lambda: None)
    for i, r in tv.honest_records("timeout"):
        if timeout_at[r["view"]] is None:
            timeout_at[r["view"]] = r["t"]
    view_of = {rid: 0 for rid in tv.honest}
    send_idx = {i for i, _, _ in tv.sends}
    sends = {i: (rec, msg) for i, rec, msg in tv.sends}
    blocks = []
    exempt = defaultdict(int)
    for i, rec in enumerate(tv.records):
        ev = rec["ev"]
        if ev == "view-enter" and rec["r"] in hs:
            view_of[rec["r"]] = rec["v"]
            continue
        if i not in send_idx:
            continue
        srec, msg = sends[i]
        if not isinstance(msg, Propose) or srec["r"] not in hs:
            continue
        w, t = msg.view, srec["t"]
        if tv.params.leader(w) != srec["r"]:
            continue
        if t < tv.gst:
            exempt["before GST"] += 1
            continue
        if t + bound > tv.horizon:
            exempt["too close to horizon"] += 1
            continue
        if any(view_of[rid] != w for rid in tv.honest):
            exempt["not all honest replicas in the view"] += 1
            continue
        to = timeout_at[w]
        if to is not None and to <= t + bound:
            exempt["view timed out"] += 1
            continue
        d = msg.proposal.block.digest.hex()
        worst = 0
        for rid in tv.honest:
            at = qc_at.get((rid, w, d))
            c = 0 if d == GENESIS.digest.hex() else commit_at.get((rid, d))
            if at is None or c is None or at - t > bound or c > t + bound:
                v.fail(f"block at height {msg.proposal.block.height} proposed in view {w} at t={t} "
                       f"not committed by replica {rid} within {bound}", _line(i))
                worst = None
                break
            worst = max(worst, at - t)
        if worst is not None:
            blocks.append({"view": w, "height": msg.proposal.block.height, "proposed": t,
                           "ticks": worst, "deltas": worst / tv.delta, "rounds": worst / tv.delta})
    v.data["blocks"] = blocks
    v.data["exempt"] = dict(exempt)
    return v


def check_liveness(tv: TraceView, bound_views: Optional[int] = None) -> Verdict:
    """Bounded recovery after GST: a finite-trace stand-in for "keeps committing"."""
    bound_views = tv.f + 1 if bound_views is None else bound_views
    v = Verdict("liveness", data={"bound_views": bound_views})
    if tv.horizon <= tv.gst:
        v.warnings.append("horizon does not extend past GST; liveness is vacuous")
        return v
    if tv.scenario["payloads"] != "auto" and tv.scenario["predicate"] != "any":
        v.warnings.append("liveness needs a continuous payload supply; skipped for a fixed schedule")
        return v
    d = tv.delta
    per_view_stall = 6 * d
    for rid in tv.honest:
        last_commit = None
        views_since = 0
        cur_view, entered = 0, 0
        qcs_in_view = defaultdict(int)
        last_idx = None
        for i, r in enumerate(tv.records):
            if r.get("r") != rid:
                continue
            ev = r["ev"]
            if ev == "commit" and not r.get("conflict"):
                last_commit = r["t"]
                last_idx = i
                views_since = 0
            elif ev == "view-enter":
                cur_view, entered = r["v"], r["t"]
                if r["t"] >= tv.gst:
                    views_since += 1
                    if views_since > bound_views + 1:
                        v.fail(f"replica {rid} went through {views_since - 1} view changes after GST "
                               f"without committing", _line(i))
            elif ev == "qc":
                qcs_in_view[r["view"]] += 1
        # no commit happened after ``start`` (the later of GST and the last commit)
        start = max(tv.gst, last_commit if last_commit is not None else 0)
        p = qcs_in_view[cur_view] + 1
        limit = max(start, entered + (2 * p + 2) * d) + d + bound_views * per_view_stall
        if tv.horizon > limit:
            v.fail(f"replica {rid} stalled: no commit between t={start} and the horizon "
                   f"t={tv.horizon} (bound t={limit})", None if last_idx is None else _line(last_idx))
    return v


def check_network(tv: TraceView) -> Verdict:
    """Honest-to-honest messages are delivered by max(send, GST) + delta, each exactly once."""
    v = Verdict("network")
    hs = set(tv.honest)
    got = defaultdict(int)
    for i, r in tv.by_kind["deliver"]:
        s = tv.send_by_id.get(r["id"])
        if s is None:
            v.fail(f"delivery of unknown message id {r['id']}", _line(i))
            continue
        si, srec, _ = s
        got[(r["id"], r["r"])] += 1
        if srec["r"] in hs and r["r"] in hs and r["t"] > max(srec["t"], tv.gst) + tv.delta:
            v.fail(f"message {r['id']} from {srec['r']} to {r['r']} sent at t={srec['t']} "
                   f"delivered late at t={r['t']}", _line(si), _line(i))
        if r["t"] < srec["t"]:
            v.fail(f"message {r['id']} delivered before it was sent", _line(i))
    end_t = tv.records[-1]["t"]
    for si, srec, _ in tv.sends:
        for dst in srec["to"]:
            c = got[(srec["id"], dst)]
            due = max(srec["t"], tv.gst) + tv.delta
            if c > 1 or (c == 0 and srec["r"] in hs and dst in hs and due <= end_t
                         and tv.records[-1]["reason"] == "horizon"):
                v.fail(f"message {srec['id']} to {dst} delivered {c} times", _line(si))
    return v


def check_signatures(tv: TraceView) -> Verdict:
    """No honest signature shows up before its owner sent it."""
    v = Verdict("signature_isolation")
    hs = set(tv.honest)
    seen = set()
    for i, rec, msg in tv.sends:
        for s in iter_signatures(msg):
            key = (s.signer, s.over)
            if key in seen or s.signer not in hs:
                continue
            if rec["r"] != s.signer:
                v.fail(f"signature of honest replica {s.signer} first sent by replica {rec['r']}",
                       _line(i))
            seen.add(key)
    return v


CHECKS = {
    "safety": check_safety,
    "lemma1_lemma3": check_lemma1_lemma3,
    "lemma2": check_lemma2,
    "external_validity": check_external_validity,
    "latency": check_latency,
    "liveness": check_liveness,
    "network": check_network,
    "signature_isolation": check_signatures,
}


def run_checks(trace: Trace, names=None) -> dict:
    tv = TraceView(trace)
    out = {}
    for name, fn in CHECKS.items():
        if names is None or name in names:
            out[name] = fn(tv)
    return out


__all__ = ["Verdict", "TraceView", "CHECKS", "run_checks", "TraceError"] + [
    fn.__name__ for fn in CHECKS.values()]
