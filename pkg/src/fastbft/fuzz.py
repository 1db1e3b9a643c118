"""Seeded fuzz campaigns over scenario templates.

A template is a scenario file whose values may be randomised per run:
``*`` or ``random`` (draw from the full range), ``a|b|c`` (pick one) or
``lo..hi`` (inclusive integer range).  Every draw comes from
``random.Random(seed)``, so a failing seed replays exactly.
"""

from __future__ import annotations

import configparser
import multiprocessing
import random
from dataclasses import dataclass, field
from typing import Optional

from .adversary import STRATEGIES
from .checker import run_checks
from .simnet import DELAY_POLICIES, Scenario, ScenarioError, ini_text, parse_scenario, run
from .trace import Trace

CATALOG = tuple(k for k in STRATEGIES if k != "honest")
SAFETY_CHECKS = ("safety", "lemma1_lemma3", "external_validity", "lemma2")


@dataclass
class Template:
    sections: dict  # section -> {key: raw value}

    @classmethod
    def parse(cls, text: str) -> "Template":
        cp = configparser.ConfigParser(default_section="__defaults__", inline_comment_prefixes=("#",))
        try:
            cp.read_string(ini_text(text))
        except configparser.Error as exc:
            raise ScenarioError(f"malformed template: {exc}") from None
        return cls({s: dict(cp.items(s)) for s in cp.sections()})

    @classmethod
    def load(cls, path) -> "Template":
        with open(path) as fh:
            return cls.parse(fh.read())

    def get(self, key: str) -> Optional[str]:
        for sec in self.sections.values():
            if key in sec:
                return sec[key].strip()
        return None

    def draw(self, seed: int, mutation: Optional[str] = None) -> Scenario:
        rng = random.Random(seed)
        n = _pick(rng, self.get("n") or "4", None)
        f = _pick(rng, self.get("f") or "1", None)
        lines = {"n": n, "f": f}
        for sec, items in self.sections.items():
            for k, raw in items.items():
                if k in ("n", "f"):
                    continue
                raw = raw.strip()
                if k in ("adversary", "strategy"):
                    lines[k] = _pick(rng, raw, CATALOG)
                elif k == "delay":
                    lines[k] = _pick(rng, raw, DELAY_POLICIES)
                elif k == "corrupt":
                    if raw in ("*", "random"):
                        ids = rng.sample(range(1, int(n) + 1), int(f))
                        lines[k] = " ".join(str(i) for i in sorted(ids))
                    else:
                        lines[k] = raw
                elif sec == "adversary":
                    lines[f"adversary.{k}"] = raw
                else:
                    lines[k] = _pick(rng, raw, None)
        if mutation is not None:
            lines["mutation"] = mutation
        adv_opts = {k.split(".", 1)[1]: v for k, v in lines.items() if k.startswith("adversary.")}
        body = "[scenario]\n" + "".join(
            f"{k} = {v}\n" for k, v in lines.items() if not k.startswith("adversary."))
        if adv_opts:
            body += "[adversary]\n" + "".join(f"{k} = {v}\n" for k, v in adv_opts.items())
        return parse_scenario(body, seed=seed)


def _pick(rng: random.Random, raw: str, choices) -> str:
    if raw in ("*", "random"):
        if choices is None:
            raise ScenarioError("'*' needs a finite choice set; use lo..hi for numbers")
        return rng.choice(list(choices))
    if "|" in raw:
        return rng.choice([x.strip() for x in raw.split("|")])
    if ".." in raw:
        lo, hi = raw.split("..", 1)
        return str(rng.randint(int(lo), int(hi)))
    return raw


@dataclass
class RunResult:
    seed: int
    digest: str
    failed: list
    adversary: str
    mutation: Optional[str] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {"seed": self.seed, "digest": self.digest, "failed": self.failed,
                "adversary": self.adversary, "error": self.error}


def run_one(scenario: Scenario, checks=None) -> tuple:
    """Run, round-trip the trace through its bytes, check.  Returns (trace, verdicts)."""
    trace = Trace.from_bytes(run(scenario).to_bytes())
    return trace, run_checks(trace, checks)


def _job(args):
    template, seed, mutation, checks = args
    try:
        sc = template.draw(seed, mutation)
    except ScenarioError as exc:
        return RunResult(seed, "", ["config"], "", mutation, str(exc))
    try:
        trace, verdicts = run_one(sc, checks)
    except Exception as exc:  # a crash is a finding, report it with the seed
        return RunResult(seed, "", ["exception"], sc.adversary, mutation,
                         f"{type(exc).__name__}: {exc}")
    failed = [k for k, v in verdicts.items() if not v.passed]
    return RunResult(seed, trace.digest(), failed, sc.adversary, mutation)


@dataclass
class Summary:
    runs: int = 0
    failures: dict = field(default_factory=dict)  # check -> count
    first_failing_seed: Optional[int] = None
    first_failure: Optional[dict] = None
    by_adversary: dict = field(default_factory=dict)

    def add(self, r: RunResult):
        self.runs += 1
        self.by_adversary[r.adversary] = self.by_adversary.get(r.adversary, 0) + 1
        for k in r.failed:
            self.failures[k] = self.failures.get(k, 0) + 1
        if r.failed and self.first_failing_seed is None:
            self.first_failing_seed = r.seed
            self.first_failure = r.to_dict()

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"runs": self.runs, "ok": self.ok, "failures": self.failures,
                "first_failing_seed": self.first_failing_seed,
                "first_failure": self.first_failure, "by_adversary": self.by_adversary}


def campaign(template: Template, runs: int, seed_base: int = 0, mutation: Optional[str] = None,
             workers: int = 1, checks=None, stop_on_failure: bool = False) -> Summary:
    """Run seeds ``seed_base .. seed_base + runs - 1`` and aggregate verdicts in seed order."""
    summary = Summary()
    jobs = [(template, seed_base + i, mutation, checks) for i in range(runs)]
    if not jobs:
        return summary
    if workers <= 1:
        for j in jobs:
            summary.add(_job(j))
            if stop_on_failure and summary.failures:
                break
        return summary
    with multiprocessing.Pool(workers) as pool:
        for r in pool.imap(_job, jobs, chunksize=8):
            summary.add(r)
            if stop_on_failure and summary.failures:
                pool.terminate()
                break
    return summary
