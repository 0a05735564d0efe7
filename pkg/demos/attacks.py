"""Stage each attack once and show which check caught it."""

from manetpay.adversary import KINDS, AttackScript, expected_outcome, run_attack
from manetpay.config import ScenarioConfig

base = ScenarioConfig(duration_s=600)
for kind in KINDS:
    res, att = run_attack(base, AttackScript(kind), seed=0)
    exp = expected_outcome(kind, len(att.parties), res.cfg.monitor_quorum)
    for a in att.attempts:
        print(f"{kind:<24} verdict={a.verdict:<20} expected={exp:<24} tries={a.tries}")
    if res.violations:
        print("  conservation broke:", res.violations)
