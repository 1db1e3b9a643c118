import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastbft.certs import (
    GENESIS_QC,
    GENESIS_TC,
    CertRank,
    ConfigError,
    Params,
    QuorumCertificate,
    compare_rank,
    form_qc,
    highest_tc,
    locked_block,
    locked_blocks,
    make_qc,
    make_tc,
    status_digest,
    tc_locks,
    validate_qc,
    validate_status,
    validate_tc,
    validate_timeout,
)
from fastbft.core import (
    GENESIS,
    PREDICATES,
    Block,
    ProposalTuple,
    Status,
    Timeout,
    Vote,
    proposal_digest,
    sign,
    timeout_digest,
    vote_digest,
)

P4 = Params(4, 1)
P9 = Params(9, 2)
NONEMPTY = PREDICATES["nonempty"]


def prop(block, view, n=4):
    leader = (view - 1) % n + 1
    return ProposalTuple(block, view, sign(leader, proposal_digest(block, view)))


def vote(p, signer):
    return Vote(p, sign(signer, vote_digest(p)))


def qc_for(p, signers):
    return make_qc(p, [vote(p, s).sig for s in signers])


def timeout(view, sender, p=None, parent_qc=None):
    return Timeout(view, p, parent_qc, sign(sender, timeout_digest(view, p)))


def child(parent, tag):
    return Block(parent.digest, parent.height + 1, (tag,))


# -- thresholds ----------------------------------------------------------------

@pytest.mark.parametrize("f", [1, 2, 3])
def test_thresholds_at_minimum_size(f):
    p = Params(5 * f - 1, f)
    assert (p.quorum, p.t1, p.t2) == (4 * f - 1, 2 * f - 1, 2 * f)


def test_thresholds_above_minimum_size():
    p = Params(10, 2)
    assert (p.quorum, p.t1, p.t2) == (8, 4, 4)


def test_rejects_too_few_replicas():
    with pytest.raises(ConfigError, match=r"n >= 5f - 1"):
        Params(3, 1)
    with pytest.raises(ConfigError, match="n = 8"):
        Params(8, 2)


def test_mutations_change_one_threshold_each():
    assert Params(4, 1, "quorum").quorum == 2
    assert Params(4, 1, "tc-cond2").t2 == 1
    assert not Params(4, 1, "no-dedup").dedup
    assert Params(4, 1, "quorum").honest() == P4
    with pytest.raises(ConfigError):
        Params(4, 1, "bogus")


@pytest.mark.parametrize("f", [1, 2, 3, 4])
def test_intersection_arithmetic(f):
    n, q = 5 * f - 1, 4 * f - 1
    assert 2 * q - n == 3 * f - 1 > f  # two quorums share more than f replicas
    assert (3 * f - 1) + q > n  # condition (1) cannot skip every honest voter
    assert f + (f - 1) == 2 * f - 1 < 2 * f  # condition (2) needs one more than a faulty leader can gather


# -- quorum certificates ------------------------------------------------------------

def test_quorum_equivalence_over_twelve_votes():
    """Every subset of 4 voters x 3 proposals: a QC exactly for >=3 distinct voters on one tuple."""
    g = GENESIS
    props = [prop(g, 1), prop(child(g, b"a"), 1), prop(child(g, b"b"), 1)]
    universe = [vote(p, r) for p in props for r in range(1, 5)]
    assert len(universe) == 12
    for mask in range(1 << 12):
        subset = [universe[i] for i in range(12) if mask >> i & 1]
        targets = {v.proposal for v in subset}
        voters = {v.sig.signer for v in subset}
        want = len(targets) == 1 and len(voters) >= 3
        qc = form_qc(subset, P4)
        assert (qc is not None) == want, mask
        if subset:
            cert = QuorumCertificate(subset[0].proposal, tuple(v.sig for v in subset))
            assert validate_qc(cert, P4) == want, mask


def test_qc_rejects_duplicate_and_out_of_range_signers():
    p = prop(child(GENESIS, b"a"), 1)
    s = [vote(p, r).sig for r in (1, 2, 2)]
    assert not validate_qc(QuorumCertificate(p, tuple(s)), P4)
    s = [vote(p, r).sig for r in (1, 2, 9)]
    assert not validate_qc(QuorumCertificate(p, tuple(s)), P4)


def test_qc_rejects_wrong_leader_and_invalid_payload():
    b = child(GENESIS, b"a")
    bad_leader = ProposalTuple(b, 1, sign(2, proposal_digest(b, 1)))
    assert not validate_qc(qc_for(bad_leader, (1, 2, 3)), P4)
    empty = Block(GENESIS.digest, 1, ())
    assert validate_qc(qc_for(prop(empty, 1), (1, 2, 3)), P4)
    assert not validate_qc(qc_for(prop(empty, 1), (1, 2, 3)), P4, NONEMPTY)


def test_genesis_certificates_are_valid():
    assert validate_qc(GENESIS_QC, P4)
    assert validate_tc(GENESIS_TC, P4)
    assert locked_block(GENESIS_TC, P4) == GENESIS


def test_rank_order():
    assert CertRank(2, 1) > CertRank(1, 9)
    assert CertRank(2, 3) > CertRank(2, 2)
    assert compare_rank(CertRank(1, 1), CertRank(1, 1)) == 0
    assert compare_rank(CertRank(1, 1), CertRank(1, 2)) == -1


# -- timeouts and timeout certificates ------------------------------------------------

def test_timeout_requires_parent_certificate():
    a = child(GENESIS, b"a")
    pa = prop(a, 1)
    assert validate_timeout(timeout(1, 2, pa, GENESIS_QC), P4)
    assert not validate_timeout(timeout(1, 2, pa, None), P4)
    b = child(a, b"b")
    qa = qc_for(pa, (1, 2, 3))
    assert validate_timeout(timeout(1, 2, prop(b, 1), qa), P4)
    assert not validate_timeout(timeout(1, 2, prop(b, 1), GENESIS_QC), P4)
    assert validate_timeout(timeout(1, 2), P4)
    assert not validate_timeout(timeout(1, 2, prop(a, 2), GENESIS_QC), P4)  # view mismatch


def test_tc_needs_quorum_of_distinct_senders():
    ts = [timeout(1, s) for s in (2, 3, 4)]
    assert validate_tc(make_tc(1, ts), P4)
    assert not validate_tc(make_tc(1, ts[:2]), P4)
    assert not validate_tc(make_tc(1, [ts[0], ts[0], ts[1]]), P4)


def fork_fixture():
    a = child(GENESIS, b"a")
    b = child(a, b"b")
    a2 = child(GENESIS, b"a2")
    pa, pb, pa2 = prop(a, 1), prop(b, 1), prop(a2, 1)
    qa = qc_for(pa, (1, 2, 3))
    store = {x.digest: x for x in (GENESIS, a, b, a2)}
    return a, b, a2, pa, pb, pa2, qa, store


def test_lock_by_condition_two_without_leader():
    a, b, a2, pa, pb, pa2, qa, store = fork_fixture()
    tc = make_tc(1, [timeout(1, s, pa, GENESIS_QC) for s in (2, 3, 4)])
    assert tc_locks(tc, a, P4, store)
    assert tc_locks(tc, GENESIS, P4, store)
    assert locked_block(tc, P4, store) == a


def test_conflict_blocks_condition_one_when_leader_present():
    a, b, a2, pa, pb, pa2, qa, store = fork_fixture()
    tc = make_tc(1, [timeout(1, 1, pb, qa), timeout(1, 2, pa, GENESIS_QC),
                     timeout(1, 3, pa2, GENESIS_QC)])
    assert not tc_locks(tc, a, P4, store)  # a2 conflicts and the leader signed
    assert not tc_locks(tc, a2, P4, store)
    assert tc_locks(tc, GENESIS, P4, store)
    assert locked_block(tc, P4, store) == GENESIS


def test_condition_one_single_support_without_conflict():
    a, b, a2, pa, pb, pa2, qa, store = fork_fixture()
    tc = make_tc(1, [timeout(1, 1, pb, qa), timeout(1, 2), timeout(1, 3)])
    assert tc_locks(tc, b, P4, store) and tc_locks(tc, a, P4, store)
    assert locked_block(tc, P4, store) == b


def test_equivocation_locks_both_only_under_lowered_condition_two():
    a, b, a2, pa, pb, pa2, qa, store = fork_fixture()
    tc = make_tc(1, [timeout(1, s, p, GENESIS_QC) for s, p in ((2, pa), (3, pa), (4, pa2))])
    assert tc_locks(tc, a, P4, store) and not tc_locks(tc, a2, P4, store)
    mutated = Params(4, 1, "tc-cond2")
    assert tc_locks(tc, a, mutated, store) and tc_locks(tc, a2, mutated, store)


def test_lock_uses_blocks_carried_by_the_tc():
    a, b, a2, pa, pb, pa2, qa, store = fork_fixture()
    tc = make_tc(1, [timeout(1, s, pb, qa) for s in (2, 3, 4)])
    assert tc_locks(tc, a, P4, {})  # parent a arrives through the parent certificate
    assert locked_blocks(tc, P4, {}) and locked_block(tc, P4, {}) == b


@st.composite
def tc_cases(draw):
    size = draw(st.integers(1, 7))
    parents = [None] + [draw(st.integers(0, i - 1)) for i in range(1, size)]
    senders = draw(st.lists(st.integers(1, 4), min_size=3, max_size=4, unique=True))
    inners = [draw(st.one_of(st.none(), st.integers(0, size - 1))) for _ in senders]
    cand = draw(st.integers(0, size - 1))
    return parents, senders, inners, cand


def ancestors(parents, i):
    out = {i}
    while parents[i] is not None:
        i = parents[i]
        out.add(i)
    return out


@settings(max_examples=300, deadline=None)
@given(tc_cases(), st.sampled_from([None, "tc-cond2"]))
def test_tc_locks_matches_counting_oracle(case, mutation):
    parents, senders, inners, cand = case
    params = Params(4, 1, mutation)
    blocks = [GENESIS]
    for i in range(1, len(parents)):
        blocks.append(child(blocks[parents[i]], bytes([i])))
    store = {b.digest: b for b in blocks}
    ts = [timeout(1, s, prop(blocks[i], 1) if i is not None else None)
          for s, i in zip(senders, inners)]
    tc = make_tc(1, ts)
    present = [i for i in inners if i is not None]
    support = sum(1 for i in present if i == cand or parents[i] == cand)
    conflict = any(cand not in ancestors(parents, i) and i not in ancestors(parents, cand)
                   for i in present)
    leader_in = 1 in senders
    want = (support >= 1 and not conflict) or (support >= params.t2 and not leader_in)
    assert tc_locks(tc, blocks[cand], params, store) == want


# -- status ------------------------------------------------------------------------------

def status(sender, prev_view, qc, tc):
    return Status(prev_view, qc, tc, sign(sender, status_digest(prev_view, qc, tc)))


def test_status_validation():
    a, b, a2, pa, pb, pa2, qa, store = fork_fixture()
    tc = make_tc(1, [timeout(1, s, pa, GENESIS_QC) for s in (2, 3, 4)])
    assert validate_status(status(2, 1, GENESIS_QC, tc), P4, None, store)
    assert validate_status(status(2, 1, None, tc), P4, None, store)
    assert not validate_status(status(2, 1, qa, tc), P4, None, store)  # qa is not a's parent
    assert not validate_status(status(2, 0, GENESIS_QC, tc), P4, None, store)  # tc newer than status
    assert validate_status(status(3, 0, GENESIS_QC, GENESIS_TC), P4)
    forged = Status(1, GENESIS_QC, tc, sign(3, status_digest(1, GENESIS_QC, tc)))
    assert forged.sender == 3


def test_highest_tc_prefers_view_then_height():
    a, b, a2, pa, pb, pa2, qa, store = fork_fixture()
    tc1 = make_tc(1, [timeout(1, s, pa, GENESIS_QC) for s in (2, 3, 4)])
    sts = [status(2, 1, GENESIS_QC, tc1), status(3, 1, GENESIS_QC, GENESIS_TC)]
    assert highest_tc(sts, P4, store) == tc1
    assert highest_tc(sts[1:], P4, store) == GENESIS_TC


def test_nine_replica_thresholds_in_locks():
    g = GENESIS
    a = child(g, b"a")
    pa = prop(a, 1, n=9)
    ts = [timeout(1, s, pa if s <= 4 else None, GENESIS_QC if s <= 4 else None)
          for s in range(2, 9)]
    tc = make_tc(1, ts)
    assert validate_tc(tc, P9)
    assert tc_locks(tc, a, P9, {a.digest: a, g.digest: g})
    fewer = make_tc(1, [timeout(1, s, pa if s <= 3 else None, GENESIS_QC if s <= 3 else None)
                        for s in range(1, 8)])
    assert tc_locks(fewer, a, P9, {a.digest: a, g.digest: g})  # 3 = n - 3f supporters, no conflict
    assert not tc_locks(make_tc(1, fewer.entries[3:]), a, P9)


def test_rank_of_every_pair_is_consistent():
    ranks = [CertRank(v, h) for v, h in itertools.product(range(3), range(3))]
    for x, y in itertools.product(ranks, ranks):
        assert compare_rank(x, y) == -compare_rank(y, x)
