import copy
import importlib.util
from pathlib import Path

import pytest

from fastbft.adversary import Strategy
from fastbft.certs import GENESIS_QC, make_tc, propose_digest
from fastbft.checker import TraceView, check_liveness, run_checks
from fastbft.core import GENESIS, Propose, ProposalTuple, Timeout, proposal_digest, timeout_digest
from fastbft.simnet import Scenario, Simulator, run
from fastbft.trace import Trace

FIX = Path(__file__).parent / "fixtures"

_spec = importlib.util.spec_from_file_location("make_fixtures", FIX / "make_fixtures.py")
make_fixtures = importlib.util.module_from_spec(_spec)
_spec.loader.exec_module(make_fixtures)


def verdicts(name):
    return run_checks(Trace.load(FIX / name))


def failing(vs):
    return {k for k, v in vs.items() if not v.passed}


@pytest.mark.parametrize("name", sorted(make_fixtures.FIXTURES))
def test_fixture_files_are_reproducible(name):
    assert (FIX / name).read_bytes() == make_fixtures.build(name)


def test_good_trace_passes_everything():
    vs = verdicts("good_f1.trace")
    assert failing(vs) == set()
    assert all(b["ticks"] == 20 for b in vs["latency"].data["blocks"])


def test_fork_is_reported_with_lines():
    vs = verdicts("fork_quorum_mutation.trace")
    assert {"safety", "lemma1_lemma3"} <= failing(vs)
    safety = vs["safety"]
    assert safety.lines and all(isinstance(x, int) and x >= 2 for x in safety.lines)
    lines = (FIX / "fork_quorum_mutation.trace").read_text().splitlines()
    assert '"ev":"commit"' in lines[safety.lines[0] - 1]


def test_lemma2_finds_constructible_conflicting_lock():
    vs = verdicts("lemma2_no_dedup_mutation.trace")
    assert "lemma2" in failing(vs)
    assert any("form a TC locking" in d for d in vs["lemma2"].details)
    assert vs["lemma2"].data["subsets_enumerated"] > 0


def test_external_validity_catches_invalid_commit():
    vs = verdicts("invalid_commit.trace")
    assert "external_validity" in failing(vs)
    assert any("committed invalid block" in d for d in vs["external_validity"].details)


def test_network_audit_catches_late_delivery():
    assert failing(verdicts("late_delivery.trace")) == {"network"}


def test_signature_isolation():
    assert failing(verdicts("stolen_signature.trace")) == {"signature_isolation"}


def test_liveness_catches_stall():
    vs = verdicts("stall.trace")
    assert "liveness" in failing(vs)
    assert vs["liveness"].lines


def test_latency_is_exact():
    vs = verdicts("slow_qc.trace")
    assert failing(vs) == {"latency"}


def test_liveness_vacuous_when_horizon_before_gst():
    t = Trace.load(FIX / "good_f1.trace")
    h = copy.deepcopy(t.header)
    h["scenario"]["gst"] = h["scenario"]["horizon"] + 10
    v = check_liveness(TraceView(Trace(h, t.records)))
    assert v.passed and v.warnings


def test_liveness_after_silent_leader_recovers_in_one_view():
    tr = run(Scenario(n=4, f=1, corrupt=(1,), adversary="silent-leader", horizon=400))
    v = check_liveness(TraceView(tr))
    assert v.passed
    views = {r["v"] for r in tr.records if r["ev"] == "view-enter"}
    assert views == {1, 2}


def test_lemma1_lemma3_vacuous_on_genesis_only():
    tr = run(Scenario(n=4, f=1, corrupt=(1,), adversary="crash", horizon=30))
    vs = run_checks(tr)
    assert vs["lemma1_lemma3"].passed and vs["lemma1_lemma3"].data["direct_commits"] == 0


def test_lemma2_skips_large_n_with_warning():
    tr = run(Scenario(n=9, f=2, horizon=60))
    v = run_checks(tr, ["lemma2"])["lemma2"]
    assert v.passed and v.warnings


def test_byzantine_leader_views_exempt_from_latency():
    tr = run(Scenario(n=4, f=1, corrupt=(1,), adversary="equivocating-leader", horizon=400, seed=2))
    v = run_checks(tr, ["latency"])["latency"]
    assert v.passed
    assert all(b["view"] != 1 for b in v.data["blocks"])


class IllegalTcProposer(Strategy):
    """Leader of view 2 proposes a fresh block justified by a two-entry TC."""

    name = "illegal-tc"

    def rewrite(self, rid, now, send):
        msg = send.msg
        if isinstance(msg, Propose) and msg.view == 2 and msg.proof is not None:
            b = GENESIS
            ts = [Timeout(1, None, None, self.ctx.sign(rid, timeout_digest(1, None)))]
            tc = make_tc(1, ts)
            from fastbft.core import Block
            blk = Block(b.digest, 1, (b"evil",))
            s = self.ctx.signer(rid)
            p = ProposalTuple(blk, 2, s(proposal_digest(blk, 2)))
            self.ctx.record(rid, "illegal-tc", view=2)
            return [type(send)(send.dests, Propose(p, GENESIS_QC, tc, s(propose_digest(p, GENESIS_QC, tc))))]
        return [send]


def test_illegal_tc_is_rejected_by_honest_replicas():
    sc = Scenario(n=4, f=1, corrupt=(2,), horizon=300, adversary="honest")
    sim = Simulator(sc)
    sim.strategy = IllegalTcProposer(sim.ctx)
    # make view 1 fail so that replica 2 leads view 2
    sim.replicas[1].on_status = lambda s: None
    tr = sim.run()
    assert any(r["ev"] == "adversary-action" and r["what"] == "illegal-tc" for r in tr.records)
    evil = [r["d"] for r in tr.records if r["ev"] == "block" and r["x"] == [b"evil".hex()]]
    assert evil
    votes = [r for r in tr.records if r["ev"] == "vote" and r["block"] in evil]
    assert votes == []
    vs = run_checks(Trace.from_bytes(tr.to_bytes()))
    assert vs["lemma2"].passed and vs["safety"].passed
