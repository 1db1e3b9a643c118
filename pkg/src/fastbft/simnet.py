"""Seeded discrete-event simulator for partial synchrony.

Events are processed in ``(time, kind, seq)`` order with deliveries before
timers before injections at equal times.  A message sent at ``t`` is never
delivered later than ``max(t, gst) + delta``; self-addressed messages are
delivered with zero delay.
"""

from __future__ import annotations

import configparser
import heapq
import os
import random
from dataclasses import asdict, dataclass, field
from typing import Optional

from .adversary import STRATEGIES, AdversaryContext, make_strategy
from .certs import ConfigError, Params
from .core import (
    PREDICATES,
    Signer,
    UnforgeabilityBreach,
    iter_blocks,
    iter_signatures,
)
from .replica import ALL, OTHERS, Commit, EnterView, Replica, Send, SetTimer, TraceNote, auto_payload
from .trace import FORMAT, TIE_BREAK, Encoder, Trace, block_record

DELIVER, TIMER, INJECT = 0, 1, 2
DELAY_POLICIES = ("max", "random", "gst-deferral")

DELTA_ENV = "FASTBFT_DELTA"
HORIZON_ENV = "FASTBFT_HORIZON_DELTAS"


def default_delta() -> int:
    return int(os.environ.get(DELTA_ENV, "10"))


def default_horizon_deltas() -> int:
    return int(os.environ.get(HORIZON_ENV, "60"))


class ScenarioError(ConfigError):
    pass


@dataclass
class Scenario:
    n: int = 4
    f: int = 1
    delta: int = 0  # 0 -> $FASTBFT_DELTA, else 10
    gst: int = 0
    horizon: int = 0  # 0 -> $FASTBFT_HORIZON_DELTAS (else 60) times delta
    seed: int = 0
    corrupt: tuple = ()
    adversary: str = "crash"
    adversary_params: dict = field(default_factory=dict)
    payloads: object = "auto"  # "auto" or a list of (time, [tx, ...])
    predicate: str = "nonempty"
    delay: str = "max"
    pre_gst_max: int = 0  # 0 -> 5 * delta
    mutation: Optional[str] = None

    def __post_init__(self):
        if self.delta == 0:
            self.delta = default_delta()
        if self.horizon == 0:
            self.horizon = default_horizon_deltas() * self.delta
        if self.pre_gst_max == 0:
            self.pre_gst_max = 5 * self.delta
        self.corrupt = tuple(sorted(self.corrupt))
        self.validate()

    def validate(self):
        try:
            Params(self.n, self.f, self.mutation)
        except ConfigError as exc:
            raise ScenarioError(str(exc)) from None
        if len(self.corrupt) > self.f:
            raise ScenarioError(f"{len(self.corrupt)} corrupt replicas exceed f = {self.f}")
        if len(set(self.corrupt)) != len(self.corrupt):
            raise ScenarioError("duplicate corrupt replica id")
        if any(not 1 <= i <= self.n for i in self.corrupt):
            raise ScenarioError("corrupt replica id outside 1..n")
        if self.delta < 1:
            raise ScenarioError("delta must be an integer >= 1")
        if self.gst < 0 or self.horizon <= self.gst:
            raise ScenarioError("need 0 <= gst < horizon")
        if self.predicate not in PREDICATES:
            raise ScenarioError(f"unknown validity predicate {self.predicate!r}")
        if self.delay not in DELAY_POLICIES:
            raise ScenarioError(f"unknown delay policy {self.delay!r}")
        if self.adversary not in STRATEGIES:
            raise ScenarioError(f"unknown adversary strategy {self.adversary!r}")

    @property
    def params(self) -> Params:
        return Params(self.n, self.f, self.mutation)

    @property
    def honest(self) -> tuple:
        return tuple(i for i in range(1, self.n + 1) if i not in self.corrupt)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corrupt"] = list(self.corrupt)
        if self.payloads != "auto":
            d["payloads"] = [[t, [tx.hex() for tx in batch]] for t, batch in self.payloads]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        d["corrupt"] = tuple(d.get("corrupt", ()))
        if d.get("payloads", "auto") != "auto":
            d["payloads"] = [(t, tuple(bytes.fromhex(x) for x in batch)) for t, batch in d["payloads"]]
        return cls(**d)


def _parse_payloads(text: str):
    text = text.strip()
    if text in ("", "auto"):
        return "auto"
    out = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        t, _, txs = item.partition(":")
        out.append((int(t), tuple(tx.strip().encode() for tx in txs.split(",") if tx.strip())))
    return out


def ini_text(text: str) -> str:
    """Allow files without a leading section header (flat ``key = value``)."""
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith(("#", ";")):
            return text if line.startswith("[") else "[scenario]\n" + text
    return text


def parse_scenario(text: str, seed: Optional[int] = None) -> Scenario:
    """Parse the ``key = value`` scenario format (sections are optional groupings)."""
    cp = configparser.ConfigParser(default_section="__defaults__", inline_comment_prefixes=("#",))
    try:
        cp.read_string(ini_text(text))
    except configparser.Error as exc:
        raise ScenarioError(f"malformed scenario file: {exc}") from None
    flat, adv_opts = {}, {}
    for sec in cp.sections():
        for k, v in cp.items(sec):
            if sec == "adversary" and k not in ("strategy", "adversary", "corrupt"):
                adv_opts[k] = v.strip()
            else:
                flat[k] = v
    ints = ("n", "f", "delta", "gst", "horizon", "seed", "pre_gst_max")
    kw = {}
    try:
        for k in ints:
            if k in flat:
                kw[k] = int(flat.pop(k))
        if "horizon_deltas" in flat:
            kw["horizon"] = int(flat.pop("horizon_deltas")) * kw.get("delta", default_delta())
        if "corrupt" in flat:
            raw = flat.pop("corrupt").replace(",", " ").split()
            kw["corrupt"] = tuple(int(x) for x in raw)
    except ValueError as exc:
        raise ScenarioError(f"malformed scenario value: {exc}") from None
    for k in ("adversary", "predicate", "delay"):
        if k in flat:
            kw[k] = flat.pop(k).strip()
    if "strategy" in flat:
        kw["adversary"] = flat.pop("strategy").strip()
    if "payloads" in flat:
        kw["payloads"] = _parse_payloads(flat.pop("payloads"))
    if "mutation" in flat:
        m = flat.pop("mutation").strip()
        kw["mutation"] = None if m in ("", "none") else m
    if flat:
        raise ScenarioError(f"unknown scenario keys: {', '.join(sorted(flat))}")
    if adv_opts:
        kw["adversary_params"] = adv_opts
    if seed is not None:
        kw["seed"] = seed
    return Scenario(**kw)


def load_scenario(path, seed: Optional[int] = None) -> Scenario:
    with open(path) as fh:
        return parse_scenario(fh.read(), seed)


class Simulator:
    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.params = scenario.params
        self.rng = random.Random(scenario.seed)
        self.registry: set = set()
        self.encoder = Encoder()
        self.records: list = []
        self._seen_blocks: set = set()
        self._heap: list = []
        self._seq = 0
        self._msg_id = 0
        self.now = 0
        self.honest = scenario.honest
        self.corrupt = scenario.corrupt
        predicate = PREDICATES[scenario.predicate]
        source = auto_payload if scenario.payloads == "auto" else None
        self.replicas = {
            i: Replica(i, self.params, scenario.delta, Signer(i, self.registry), predicate, source)
            for i in self.honest
        }
        self.ctx = AdversaryContext(self, predicate, source)
        self.strategy = make_strategy(scenario.adversary, self.ctx, scenario.adversary_params)

    # -- scheduling ----------------------------------------------------------------

    def _push(self, time: int, kind: int, item: tuple):
        self._seq += 1
        heapq.heappush(self._heap, (time, kind, self._seq, item))

    def _delay(self, src: int, dst: int, msg) -> int:
        if src == dst:
            return 0
        sc = self.sc
        d = self.strategy.delay(src, dst, msg, self.now)
        if d is None:
            if sc.delay == "max":
                d = sc.delta
            elif sc.delay == "gst-deferral":
                d = sc.delta if self.now >= sc.gst else sc.horizon
            elif self.now >= sc.gst:
                d = self.rng.randint(1, sc.delta)
            else:
                d = self.rng.randint(1, sc.pre_gst_max)
        latest = max(self.now, sc.gst) + sc.delta
        return min(self.now + max(int(d), 1), latest) - self.now

    def _record(self, rec: dict):
        self.records.append(rec)

    def send(self, src: int, dests, msg, delay: Optional[int] = None):
        if dests == ALL:
            targets = range(1, self.params.n + 1)
        elif dests == OTHERS:
            targets = [i for i in range(1, self.params.n + 1) if i != src]
        else:
            targets = sorted(set(dests))
        targets = list(targets)
        if not targets:
            return
        for b in iter_blocks(msg):
            if b.digest not in self._seen_blocks:
                self._seen_blocks.add(b.digest)
                self._record(block_record(b))
        self._msg_id += 1
        mid = self._msg_id
        self._record({"t": self.now, "ev": "send", "r": src, "to": targets, "id": mid,
                      "msg": self.encoder.message(msg)})
        for dst in targets:
            if delay is not None and src != dst:
                latest = max(self.now, self.sc.gst) + self.sc.delta
                at = min(self.now + max(int(delay), 1), latest)
            else:
                at = self.now + self._delay(src, dst, msg)
            self._push(at, DELIVER, (dst, src, mid, msg))

    def audit(self, src: int, msg):
        """Reject adversary messages carrying honest signatures nobody honest produced."""
        for s in iter_signatures(msg):
            if s.signer in self.replicas and (s.signer, s.over) not in self.registry:
                raise UnforgeabilityBreach(
                    f"replica {src} sent a signature of honest replica {s.signer} "
                    f"over {s.over.hex()[:16]} that it never produced")

    def set_timer(self, rid: int, fire_time: int, key: tuple):
        self._push(max(fire_time, self.now), TIMER, (rid, key))

    # -- honest action handling ----------------------------------------------------

    def _apply(self, rid: int, actions: list):
        for a in actions:
            if isinstance(a, Send):
                self.send(rid, a.dests, a.msg)
            elif isinstance(a, SetTimer):
                self.set_timer(rid, a.fire_time, a.key)
            elif isinstance(a, Commit):
                for b in a.blocks:
                    rec = {"t": self.now, "ev": "commit", "r": rid, "h": b.height,
                           "d": b.digest.hex(), "parent": b.parent.hex()}
                    if a.conflicting:
                        rec["conflict"] = True
                    self._record(rec)
            elif isinstance(a, EnterView):
                self._record({"t": self.now, "ev": "view-enter", "r": rid, "v": a.view})
            elif isinstance(a, TraceNote):
                data = dict(a.data)
                if "cert" in data:
                    data["cert"] = self.encoder.tc(data["cert"])
                self._record({"t": self.now, "ev": a.kind, "r": rid, **data})

    # -- main loop -----------------------------------------------------------------

    def run(self) -> Trace:
        sc = self.sc
        header = {"ev": "header", "format": FORMAT, "hash": "sha256", "tie_break": TIE_BREAK,
                  "scenario": sc.to_dict(), "seed": sc.seed,
                  "honest": list(self.honest), "corrupt": list(self.corrupt)}
        for i in range(1, sc.n + 1):
            self._push(0, INJECT, (i, "start", None))
        if sc.payloads != "auto":
            for t, batch in sc.payloads:
                for i in range(1, sc.n + 1):
                    self._push(t, INJECT, (i, "payload", tuple(batch)))
        reason = "quiescent"
        while self._heap:
            time, kind, _, item = self._heap[0]
            if time > sc.horizon:
                reason = "horizon"
                break
            heapq.heappop(self._heap)
            self.now = time
            if kind == DELIVER:
                dst, src, mid, msg = item
                self._record({"t": time, "ev": "deliver", "r": dst, "from": src, "id": mid})
                if dst in self.replicas:
                    self._apply(dst, self.replicas[dst].on_message(time, src, msg))
                else:
                    self.strategy.on_message(dst, time, src, msg)
            elif kind == TIMER:
                rid, key = item
                if rid in self.replicas:
                    self._apply(rid, self.replicas[rid].on_timer(time, key))
                else:
                    self.strategy.on_timer(rid, time, key)
            else:
                rid, what, payload = item
                if rid in self.replicas:
                    r = self.replicas[rid]
                    acts = r.start(time) if what == "start" else r.on_inject(time, payload)
                    self._apply(rid, acts)
                elif what == "start":
                    self.strategy.start(rid, time)
                else:
                    self.strategy.on_inject(rid, time, payload)
        self._record({"t": self.now if reason == "quiescent" else sc.horizon, "ev": "end",
                      "reason": reason, "records": len(self.records)})
        return Trace(header, self.records)


def run(scenario: Scenario) -> Trace:
    """Execute one scenario; same scenario and seed give a byte-identical trace."""
    return Simulator(scenario).run()
