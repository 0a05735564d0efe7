import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from manetpay import constants as C
from manetpay.protocol import (
    Accept,
    Bank,
    Billing,
    CUSTOMER,
    DisputeClaim,
    DuplicateRegistration,
    ENDORSER,
    LateClaim,
    MERCHANT,
    MerchantState,
    MonitorState,
    NoEndorsers,
    Refusal,
    Reject,
    Rejected,
    SettlementBundle,
    bank_settle,
    conservation_holds,
    customer_order,
    dispute,
    endorser_endorse,
    endorser_finalize,
    endorser_prepare,
    hello_exchange,
    location_similarity,
    make_message,
    merchant_accept,
    merchant_process_order,
    message_verifies,
    monitor_countersign,
    net_postings,
    new_endorser_state,
    online_settlement_oracle,
    register,
    release_due,
    sign_receipt,
    split_incentive,
)
from manetpay.ledger import bloom_sizing
from protocol_helpers import BLOOM, CHECK, K_HASH, M_BITS, World

@pytest.fixture
def world():
    return World()


def test_registration_issues_deposit_as_coins(world):
    coins = world.creds["E1"].coins
    assert len(coins) == 1500 and {c.value for c in coins} == {200}
    assert world.bank.state.locked["E1"] == 300_000
    with pytest.raises(DuplicateRegistration):
        register(world.bank, "E1", ENDORSER, deposit=10, seed=1)


def test_mutual_endorsement_trees_are_valid(world):
    t1 = world.bank.build_tree("E1")
    t2 = world.bank.build_tree("E2")
    assert t1.primary_ids == ("E2",) and t2.primary_ids == ("E1",)
    from manetpay.crypto import verify

    assert verify(world.directory.bank_pub, t1.payload(), t1.bank_signature)
    assert verify(world.directory.bank_pub, t2.payload(), t2.bank_signature)


def test_customer_without_endorsers(world):
    creds = register(world.bank, "lonely", CUSTOMER, seed=99, balance=100)
    book = world.bank.temp_id_book("lonely", 1)
    with pytest.raises(NoEndorsers):
        customer_order(creds, "M", 1, 200, book, order_id="x")
    order = customer_order(creds, "M", 1, 200, book, order_id="x", allow_empty=True)
    with pytest.raises(Rejected) as exc:
        merchant_process_order(world.merchant, order, world.bank.directory, 0.0)
    assert exc.value.reason == C.NO_ENDORSERS


def test_temp_ids_differ_per_transaction(world):
    a, b = world.order(), world.order()
    assert a.temp_id != b.temp_id


def test_billing_fans_out_to_primary_and_secondary(world):
    order = world.order()
    assert order.primaries == ("E1",) and order.secondaries == ("E2",)
    bills = merchant_process_order(world.merchant, order, world.directory, world.t)
    assert [(b.endorser_id, b.level) for b in bills] == [("E1", 1), ("E2", 2)]
    only_primary = merchant_process_order(MerchantState(world.creds["M"]), order, world.directory, world.t, fanout=False)
    assert [b.endorser_id for b in only_primary] == ["E1"]


def test_forged_photo_rejected(world):
    from dataclasses import replace

    order = world.order()
    forged = replace(order, photo=b"someone else")
    with pytest.raises(Rejected) as exc:
        merchant_process_order(world.merchant, forged, world.directory, world.t)
    assert exc.value.reason == C.BAD_CREDENTIAL


def test_honest_transaction_accepted(world):
    order, msgs, verdict = world.full_transaction()
    assert isinstance(verdict, Accept)
    assert verdict.covered >= order.amount
    assert len(msgs[0].coins) == 1 and msgs[0].coins[0].value == 200
    # every accepted endorsement carries a quorum on its spend block
    for m in verdict.endorsements:
        assert len({mid for mid, _ in m.monitor_signatures}) >= 3


def test_secondary_alone_completes(world):
    order = world.order()
    bills = merchant_process_order(world.merchant, order, world.directory, world.t)
    sec = [b for b in bills if b.endorser_id == "E2"]
    msg = world.endorse(sec[0])
    verdict = merchant_accept(world.merchant, order, [msg], world.directory, world.t + 1, **CHECK)
    assert isinstance(verdict, Accept)


def test_insufficient_cover_rejected(world):
    order = world.order(amount=400)
    bills = merchant_process_order(world.merchant, order, world.directory, world.t)
    msg = world.endorse(bills[0])  # E1 endorses its 2-dollar limit only
    verdict = merchant_accept(world.merchant, order, [msg], world.directory, world.t + 1, **CHECK)
    assert isinstance(verdict, Reject) and verdict.reason == C.INSUFFICIENT_COVER


def test_duplicate_monitor_signature_fails_quorum(world):
    order = world.order()
    bill = merchant_process_order(world.merchant, order, world.directory, world.t)[0]
    e = world.endorsers["E1"]
    draft = endorser_prepare(e, bill, world.t + 0.5, (0.0, 0.0), staleness=60.0)
    sig = monitor_countersign(world.monitors[0], "E1", draft.proposal, draft.snapshot, draft.filter_before,
                              draft.coins, draft.endorsed_value, world.directory, world.t + 0.5, quorum=3, staleness=60.0)
    sig2 = monitor_countersign(world.monitors[1], "E1", draft.proposal, draft.snapshot, draft.filter_before,
                               draft.coins, draft.endorsed_value, world.directory, world.t + 0.5, quorum=3, staleness=60.0)
    msg = endorser_finalize(e, draft, [sig, sig, sig2], world.directory, quorum=3, staleness=60.0, allow_short=True)
    verdict = merchant_accept(world.merchant, order, [msg], world.directory, world.t + 1, **CHECK)
    assert isinstance(verdict, Reject) and verdict.reason == C.INSUFFICIENT_QUORUM


def test_stale_endorser_refuses(world):
    world.t += 120  # phone was off: no hello for two minutes
    order = world.order()
    bill = merchant_process_order(world.merchant, order, world.directory, world.t)[0]
    out = world.endorse(bill)
    assert isinstance(out, Refusal) and out.reason == C.STALE_CHAIN
    world.tick(1.0)  # a hello with a quorum revalidates
    out = world.endorse(bill)
    assert not isinstance(out, Refusal)


def test_spent_coin_screened_by_monitors(world):
    order, msgs, verdict = world.full_transaction()
    spent = msgs[0].coins[0]
    world.tick()
    order2 = world.order()
    bill = merchant_process_order(world.merchant, order2, world.directory, world.t)[0]
    e = world.endorsers["E1"]
    draft = endorser_prepare(e, bill, world.t + 0.5, (0.0, 0.0), staleness=60.0, coins=[spent])
    with pytest.raises(Rejected) as exc:
        monitor_countersign(world.monitors[0], "E1", draft.proposal, draft.snapshot, draft.filter_before,
                            draft.coins, draft.endorsed_value, world.directory, world.t + 0.5, quorum=3, staleness=60.0)
    assert exc.value.reason == C.DOUBLE_SPEND
    # honest coin choice never picks it
    assert spent.coin_id not in {c.coin_id for c in e.available(world.t)}


def test_endorser_out_of_coins(world):
    e = world.endorsers["E1"]
    e.wallet.clear()
    order = world.order()
    bill = merchant_process_order(world.merchant, order, world.directory, world.t)[0]
    out = world.endorse(bill)
    assert isinstance(out, Refusal) and out.reason == C.INSUFFICIENT_COINS


def test_monitor_refuses_similar_location(world):
    order = world.order()
    bill = merchant_process_order(world.merchant, order, world.directory, world.t)[0]
    draft = endorser_prepare(world.endorsers["E1"], bill, world.t + 0.5, (0.0, 0.0), staleness=60.0)
    with pytest.raises(Rejected) as exc:
        monitor_countersign(world.monitors[0], "E1", draft.proposal, draft.snapshot, draft.filter_before,
                            draft.coins, 200, world.directory, world.t, quorum=3, staleness=60.0, similar=True)
    assert exc.value.reason == C.SIMILAR_LOCATION


def test_protocol_message_signature_and_size(world):
    msg = make_message("Hello", world.creds["E1"].keys, "*", ("beacon", 1.0))
    assert msg.size_bytes == 5 and message_verifies(msg, world.directory.keys)
    big = make_message("Billing", world.creds["M"].keys, "E1", ("x",))
    assert big.size_bytes == 5 * 1024 and message_verifies(big, world.directory.keys)
    from dataclasses import replace

    assert not message_verifies(replace(big, body=("y",)), world.directory.keys)


# -- settlement ---------------------------------------------------------------------


def settle(world, amount=200, claim=None):
    order, msgs, verdict = world.full_transaction(amount)
    assert isinstance(verdict, Accept)
    receipt = sign_receipt(world.creds["C"], order, world.t)
    bundle = SettlementBundle(order, verdict.endorsements, receipt, world.t)
    return order, verdict, bank_settle(world.bank, bundle, world.t + 100, dispute_window=3600)


def test_solvent_customer_pays_and_coins_reissued():
    w = World(customer_balance=10_000)
    order, verdict, s = settle(w)
    assert s.payer == "customer"
    net = net_postings(s.postings)
    assert net["C"] == -200
    assert net["escrow:o1"] == 200 - 6  # 3 % incentive pool
    assert sum(v for k, v in net.items() if k in ("E1", "E2")) == 6
    # the coins attached by both signers come back
    assert sum(c.value for coins in s.reissue.values() for c in coins) == sum(m.endorsed_value for m in verdict.endorsements)
    assert conservation_holds(w.bank)


def test_hand_ledger_forty_dollars():
    w = World(customer_balance=10_000, primary_limit=4000)
    # E1 endorses the whole 40 dollars with 20 coins
    order = w.order(4000)
    bill = merchant_process_order(w.merchant, order, w.directory, w.t)[0]
    msg = w.endorse(bill)
    verdict = merchant_accept(w.merchant, order, [msg], w.directory, w.t + 1, **CHECK)
    assert isinstance(verdict, Accept)
    s = bank_settle(w.bank, SettlementBundle(order, verdict.endorsements, None, w.t), w.t + 1, 3600)
    assert net_postings(s.postings) == {"C": -4000, "E1": 120, "escrow:o1": 3880}


def test_default_scenario_primary_charged():
    w = World(customer_balance=0)
    order, verdict, s = settle(w)
    assert s.payer == "endorsers"
    net = net_postings(s.postings)
    assert net.get("C", 0) == 0
    charged = -(net.get("locked:E1", 0) + net.get("locked:E2", 0))
    assert charged == 200
    # primary first
    assert net["locked:E1"] == -200
    assert conservation_holds(w.bank)


def test_default_scenario_secondary_charged_when_primary_empty():
    w = World(customer_balance=0)
    w.bank.state.locked["E1"] = 0
    order, verdict, s = settle(w)
    net = net_postings(s.postings)
    assert "locked:E1" not in net
    assert net["locked:E2"] == -200
    assert conservation_holds(w.bank)


def test_endorser_never_charged_above_limit():
    w = World(customer_balance=0)
    order, verdict, s = settle(w)
    for p in s.postings:
        if p.src.startswith("locked:"):
            assert p.amount <= order.tree.limit_of(p.src[7:])


def test_oracle_matches_settlement_for_solvent(world):
    order, msgs, verdict = world.full_transaction()
    guarantors = {}
    for m in verdict.endorsements:
        guarantors[m.endorser_id] = guarantors.get(m.endorser_id, 0) + m.endorsed_value
    oracle = online_settlement_oracle(world.bank, order, guarantors)
    s = bank_settle(world.bank, SettlementBundle(order, verdict.endorsements, None, world.t), world.t, 3600)
    assert [(p.src, p.dst, p.amount) for p in s.postings] == oracle


def test_dispute_paths():
    w = World()
    order, verdict, s = settle(w)
    t_settle = w.t + 100
    with pytest.raises(LateClaim):
        dispute(w.bank, "o1", DisputeClaim("o1", "C", t_settle + 7200), t_settle + 7200)
    assert dispute(w.bank, "o1", DisputeClaim("o1", "C", t_settle + 10), t_settle + 10) == "release"
    assert conservation_holds(w.bank)


def test_dispute_refund_without_receipt():
    w = World()
    order, msgs, verdict = w.full_transaction()
    bank_settle(w.bank, SettlementBundle(order, verdict.endorsements, None, w.t), w.t, 3600)
    before = w.bank.state.accounts["C"]
    assert dispute(w.bank, "o1", DisputeClaim("o1", "C", w.t + 1), w.t + 1) == "refund"
    assert w.bank.state.accounts["C"] == before + 194
    assert conservation_holds(w.bank)


def test_unclaimed_escrow_released_at_deadline():
    w = World()
    settle(w)
    assert release_due(w.bank, 0.0) == []
    assert release_due(w.bank, 1e9) == ["o1"]
    assert w.bank.state.accounts["M"] == 194
    assert conservation_holds(w.bank)


def test_locked_account_rejects_withdrawal(world):
    from manetpay.protocol import ProtocolError

    with pytest.raises(ProtocolError):
        world.bank.state.withdraw("locked:E1", 100, 0.0)


@given(st.integers(0, 10_000), st.dictionaries(st.sampled_from("abcdef"), st.integers(1, 5000), min_size=1))
def test_split_incentive_is_exact(pool, weights):
    shares = split_incentive(pool, weights)
    assert sum(shares.values()) == pool
    total = sum(weights.values())
    for k, w in weights.items():
        assert abs(shares[k] - pool * w / total) < 1


def test_location_similarity():
    rng = np.random.default_rng(0)
    track = np.cumsum(rng.normal(0, 5, size=(30, 2)), axis=0)
    near = track + rng.uniform(-3, 3, size=track.shape)
    far = track + 50
    assert location_similarity(track, near, 10.0)
    assert not location_similarity(track, far, 10.0)
    gaps = near.copy()
    gaps[:26] = np.nan
    assert not location_similarity(track, gaps, 10.0)  # too few shared samples
