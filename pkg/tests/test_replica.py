from fastbft.certs import GENESIS_QC, GENESIS_TC, Params, make_qc, propose_digest, status_digest
from fastbft.core import (
    GENESIS,
    PREDICATES,
    Block,
    Propose,
    ProposalTuple,
    QcForward,
    Signer,
    Status,
    Timeout,
    Vote,
    proposal_digest,
    sign,
    timeout_digest,
    vote_digest,
)
from fastbft.replica import ALL, Commit, EnterView, Replica, Send, SetTimer, TraceNote

P = Params(4, 1)
D = 10


def replica(rid, params=P):
    return Replica(rid, params, D, Signer(rid), PREDICATES["nonempty"])


def sends(actions, kind):
    return [a for a in actions if isinstance(a, Send) and isinstance(a.msg, kind)]


def notes(actions, kind):
    return [a.data for a in actions if isinstance(a, TraceNote) and a.kind == kind]


def leader_propose(block, view, qc, proof, leader=None):
    leader = leader or (view - 1) % 4 + 1
    p = ProposalTuple(block, view, sign(leader, proposal_digest(block, view)))
    return Propose(p, qc, proof, sign(leader, propose_digest(p, qc, proof)))


def genesis_status(sender):
    return Status(0, GENESIS_QC, GENESIS_TC, sign(sender, status_digest(0, GENESIS_QC, GENESIS_TC)))


def test_start_enters_view_one_and_reports_to_leader():
    acts = replica(3).start(0)
    assert EnterView(1) in acts
    (st,) = sends(acts, Status)
    assert st.dests == (1,) and st.msg.prev_view == 0 and st.msg.high_tc == GENESIS_TC
    assert SetTimer(4 * D, ("progress", 1, 1)) in acts


def test_leader_reproposes_genesis_after_status_quorum():
    r = replica(1)
    r.start(0)
    out = []
    for s in (2, 3, 4):
        out += r.on_message(10, s, genesis_status(s))
    (pr,) = sends(out, Propose)
    assert pr.msg.proposal.block == GENESIS and pr.msg.view == 1 and pr.dests == ALL
    assert pr.msg.qc == GENESIS_QC and pr.msg.proof == GENESIS_TC


def test_vote_then_dedup_per_view_and_height():
    r = replica(2)
    r.start(0)
    acts = r.on_message(10, 1, leader_propose(GENESIS, 1, GENESIS_QC, GENESIS_TC))
    assert len(sends(acts, Vote)) == 1
    qc0 = make_qc(sends(acts, Vote)[0].msg.proposal,
                  [sign(i, vote_digest(sends(acts, Vote)[0].msg.proposal)) for i in (1, 2, 3)])
    a = Block(GENESIS.digest, 1, (b"a",))
    b = Block(GENESIS.digest, 1, (b"b",))
    first = r.on_message(20, 1, leader_propose(a, 1, qc0, None))
    second = r.on_message(20, 1, leader_propose(b, 1, qc0, None))
    assert len(sends(first, Vote)) == 1
    assert sends(second, Vote) == []
    assert notes(second, "note")[0]["what"] == "equivocation"


def test_no_dedup_mutation_votes_twice():
    r = replica(2, Params(4, 1, "no-dedup"))
    r.start(0)
    acts = r.on_message(10, 1, leader_propose(GENESIS, 1, GENESIS_QC, GENESIS_TC))
    p0 = sends(acts, Vote)[0].msg.proposal
    qc0 = make_qc(p0, [sign(i, vote_digest(p0)) for i in (1, 2, 3)])
    a = Block(GENESIS.digest, 1, (b"a",))
    b = Block(GENESIS.digest, 1, (b"b",))
    assert sends(r.on_message(20, 1, leader_propose(a, 1, qc0, None)), Vote)
    assert sends(r.on_message(20, 1, leader_propose(b, 1, qc0, None)), Vote)


def test_rejects_invalid_payload_and_wrong_leader():
    r = replica(2)
    r.start(0)
    bad = Block(GENESIS.digest, 1, ())
    assert sends(r.on_message(10, 1, leader_propose(bad, 1, GENESIS_QC, GENESIS_TC)), Vote) == []
    assert sends(r.on_message(10, 3, leader_propose(GENESIS, 1, GENESIS_QC, GENESIS_TC, leader=3)),
                 Vote) == []


def test_qc_commits_and_rearms_deadline():
    r = replica(2)
    r.start(0)
    acts = r.on_message(10, 1, leader_propose(GENESIS, 1, GENESIS_QC, GENESIS_TC))
    p0 = sends(acts, Vote)[0].msg.proposal
    a = Block(GENESIS.digest, 1, (b"a",))
    qc0 = make_qc(p0, [sign(i, vote_digest(p0)) for i in (1, 2, 3)])
    acts = r.on_message(20, 1, leader_propose(a, 1, qc0, None))
    pa = sends(acts, Vote)[0].msg.proposal
    out = []
    for i in (1, 3, 4):
        out += r.on_message(30, i, Vote(pa, sign(i, vote_digest(pa))))
    assert Commit((a,)) in out
    assert notes(out, "qc-formed")
    assert SetTimer(8 * D, ("progress", 1, 3)) in out  # two current-view QCs so far
    assert r.committed[-1] == a
    assert sends(out, QcForward)


def test_progress_deadline_sends_timeout_with_highest_vote():
    r = replica(2)
    r.start(0)
    r.on_message(10, 1, leader_propose(GENESIS, 1, GENESIS_QC, GENESIS_TC))
    acts = r.on_timer(4 * D, ("progress", 1, 1))
    (t,) = sends(acts, Timeout)
    assert t.msg.view == 1 and t.msg.inner.block == GENESIS and t.msg.parent_qc == GENESIS_QC
    assert sends(r.on_timer(4 * D, ("progress", 1, 1)), Timeout) == []  # once per view


def test_silent_leader_view_change():
    reps = {i: replica(i) for i in (2, 3, 4)}
    for r in reps.values():
        r.start(0)
    timeouts = []
    for r in reps.values():
        timeouts += [a.msg for a in sends(r.on_timer(40, ("progress", 1, 1)), Timeout)]
    assert all(t.inner is None for t in timeouts)
    r = reps[2]
    acts = []
    for t in timeouts:
        acts += r.on_message(50, t.sender, t)
    assert EnterView(2) in acts
    (tc,) = notes(acts, "tc-formed")
    assert tc["senders"] == [2, 3, 4] and tc["view"] == 1


def test_bottom_timeouts_do_not_lock():
    r = replica(3)
    r.start(0)
    ts = [Timeout(1, None, None, sign(s, timeout_digest(1, None))) for s in (2, 3, 4)]
    for t in ts:
        r.on_message(50, t.sender, t)
    assert r.view == 2 and r.high_tc == GENESIS_TC
