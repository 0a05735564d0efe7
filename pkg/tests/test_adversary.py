import pytest

from manetpay import adversary
from manetpay import constants as C
from manetpay.adversary import (
    ACCEPTED, KINDS, UNDETECTABLE, AttackScript, InvalidScript, expected_outcome, inject, parse_script, run_attack,
)
from manetpay.config import ScenarioConfig
from manetpay.sim import Line, Simulation

BASE = ScenarioConfig(duration_s=600)


def test_expected_outcomes():
    assert expected_outcome("DoubleSpend") == C.DOUBLE_SPEND
    assert expected_outcome("ResetRecovery") == C.STALE_CHAIN
    assert expected_outcome("Impersonation") == C.BAD_CREDENTIAL
    assert expected_outcome("StolenPhoneColocation") == C.SIMILAR_LOCATION
    assert expected_outcome("ColludeCustomerEndorser") == C.INSUFFICIENT_COVER
    assert expected_outcome("ColludeCustomerMerchant") == UNDETECTABLE
    assert expected_outcome("ForgedCoin") == C.BAD_CREDENTIAL
    assert expected_outcome("ColludeMonitors", parties=2) == C.INSUFFICIENT_QUORUM
    # a full quorum of colluders gets the endorsement through; the merchant's
    # spent-coin check is what is left
    assert expected_outcome("ColludeMonitors", parties=3) == C.DOUBLE_SPEND
    with pytest.raises(InvalidScript):
        expected_outcome("Teleport")


def test_parse_script():
    s = parse_script("kind = DoubleSpend\nactors = E000, C010, M000\ntrigger = 300\nattempts = 2\n")
    assert s == AttackScript("DoubleSpend", ("E000", "C010", "M000"), 300.0, 0, 2)


@pytest.mark.parametrize("text", [
    "actors = E000\n",
    "kind = Teleport\n",
    "kind = ForgedCoin\nattempts = 0\n",
    "kind = ForgedCoin\ntrigger = soon\n",
    "kind = ForgedCoin\ncolour = red\n",
    "kind = ForgedCoin\nactors = E000, C001\n",
])
def test_parse_script_rejects(text):
    with pytest.raises(InvalidScript):
        parse_script(text)


def test_actor_with_wrong_role_rejected():
    with pytest.raises(InvalidScript):
        run_attack(BASE, AttackScript("ForgedCoin", ("C001", "C002", "M000")), seed=0)


def test_inject_after_start_rejected():
    sim = Simulation(BASE.with_(duration_s=5))
    sim.run()
    with pytest.raises(InvalidScript):
        inject(sim, AttackScript("ForgedCoin"))


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("seed", [0, 1])
def test_each_attack_yields_its_verdict(kind, seed):
    res, att = run_attack(BASE, AttackScript(kind), seed=seed)
    exp = expected_outcome(kind, len(att.parties), res.cfg.monitor_quorum)
    for a in att.attempts:
        assert a.verdict == (ACCEPTED if exp == UNDETECTABLE else exp)
    assert not res.violations
    logged = [ln for raw in res.lines if "\tAttack\t" in raw and (ln := Line.parse(raw)).verdict != "retry"]
    assert len(logged) == len(att.attempts)
    assert all(ln.extra["match"] == "1" for ln in logged)


def test_full_colluding_quorum_is_caught_by_merchant():
    res, att = run_attack(BASE, AttackScript("ColludeMonitors", parties=3), seed=0)
    assert [a.verdict for a in att.attempts] == [C.DOUBLE_SPEND]
    assert not res.violations


def test_several_attempts():
    res, att = run_attack(BASE, AttackScript("ForgedCoin", attempts=3, trigger=300), seed=2)
    assert [a.verdict for a in att.attempts] == [C.BAD_CREDENTIAL] * 3
    assert res.cfg.duration_s >= AttackScript("ForgedCoin", attempts=3, trigger=300).duration
    assert not res.violations
