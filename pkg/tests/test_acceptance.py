"""Acceptance gate: one test per criterion, each at its stated tolerance."""

import os
import random
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from manetpay import metrics
from manetpay.adversary import ACCEPTED, KINDS, UNDETECTABLE, AttackScript, expected_outcome, run_attack
from manetpay.config import ScenarioConfig
from manetpay.ledger import FULL, LIGHTWEIGHT, block_size_bytes, bloom_insert, bloom_new, bloom_query, chain_size_bytes
from manetpay.protocol import Accept, SettlementBundle, bank_settle, conservation_holds, online_settlement_oracle
from manetpay.sim import run

from chain_helpers import build_chain
from protocol_helpers import World

pytestmark = pytest.mark.slow

SEEDS = 20
HEADLINE = ScenarioConfig(duration_s=4 * 3600)
SWEEP_BASE = ScenarioConfig(duration_s=4 * 3600, multilevel=False)
WORKERS = os.cpu_count() or 1
# width of the default 1.0-1.4 m/s band; identical speeds on a uniform grid keep nodes in lockstep
SPEED_BAND = 0.4


def _summary(job):
    cfg, seed = job
    res = run(cfg, seed=seed)
    m = metrics.metrics_from_transcript(res.lines)
    out = metrics.summarize(m)
    out["merchant_bytes_mean"] = metrics.merchant_message_size_mean(m)
    out["sim_violations"] = list(res.violations)
    return out


def _batch(cfg, seeds=SEEDS):
    jobs = [(cfg, s) for s in range(seeds)]
    t0 = time.perf_counter()
    if WORKERS > 1:
        with ProcessPoolExecutor(WORKERS) as pool:
            rows = list(pool.map(_summary, jobs))
    else:
        rows = [_summary(j) for j in jobs]
    return rows, time.perf_counter() - t0


def _mean(rows, col):
    vals = [r[col] for r in rows if not np.isnan(r[col])]
    return float(np.mean(vals))


@pytest.fixture(scope="session")
def mle():
    return _batch(HEADLINE)


@pytest.fixture(scope="session")
def sle():
    return _batch(HEADLINE.with_(multilevel=False))


@pytest.fixture(scope="session")
def levels():
    return _batch(HEADLINE.with_(billing="levels"))


def test_c1_multilevel_beats_single_level(mle, sle, criterion):
    (mrows, mtime), (srows, stime) = mle, sle
    gap = _mean(mrows, "tcr") - _mean(srows, "tcr")
    ok = gap >= 0.15 and mtime < 600 and stime < 600
    assert criterion(
        "C1 multilevel TCR gap", ok,
        f"MLE {_mean(mrows, 'tcr'):.3f} vs SLE {_mean(srows, 'tcr'):.3f}, gap {gap * 100:.1f} pts >= 15; "
        f"runtime {mtime:.0f}s / {stime:.0f}s per 20-seed point < 600s",
    )


def test_c2_validity_ratio(mle, criterion):
    vr = _mean(mle[0], "vr")
    assert criterion("C2 event-chain validity", vr >= 0.95, f"VR {vr:.4f} >= 0.95 over {SEEDS} seeds")


def test_c3_merchant_message_size(mle, levels, criterion):
    fan = [r["merchant_bytes_mean"] for r in mle[0]]
    lev = [r["merchant_bytes_mean"] for r in levels[0]]
    red = metrics.paired_reduction(fan, lev)
    assert criterion(
        "C3 merchant message size", red >= 0.40,
        f"fan-out {np.mean(fan):.0f} B vs level search {np.mean(lev):.0f} B per success, reduction {red * 100:.1f}% >= 40%",
    )


def test_c4_chain_size(criterion):
    chain = build_chain(30, coins_per_block=10)
    assert sum(len(b.event.coins) for b in chain.blocks) == 300
    full = chain_size_bytes(chain.blocks, FULL)
    light = chain_size_bytes(chain.blocks, LIGHTWEIGHT)
    red = 1 - light / full
    mv = np.mean([1 - block_size_bytes(b, LIGHTWEIGHT, True) / block_size_bytes(b, FULL, True) for b in chain.blocks])
    ok = 0.45 <= red <= 0.60 and 0.30 <= mv <= 0.50
    assert criterion("C4 event-chain size", ok,
                     f"block reduction {red * 100:.1f}% in [45,60]; monitor view {mv * 100:.1f}% in [30,50]")


def test_c5_bloom_sizing(criterion):
    f = bloom_new(3000, 0.01)
    rng = np.random.default_rng(7)
    members = [rng.bytes(8) for _ in range(3000)]
    for cid in members:
        f = bloom_insert(f, cid)
    present = set(members)
    absent = [b for b in (rng.bytes(8) for _ in range(100_050)) if b not in present][:100_000]
    fpr = sum(bloom_query(f, cid) for cid in absent) / len(absent)
    ok = f.m == 28756 and 0.005 <= fpr <= 0.02
    assert criterion("C5 bloom sizing", ok, f"m = {f.m} bits (28756); FPR {fpr:.4f} in [0.005, 0.02]")


def test_c6_completion_time(mle, criterion):
    ct = _mean(mle[0], "mean_ct")
    assert criterion("C6 completion time", abs(ct - 1.2) <= 0.3, f"mean {ct:.3f} s, target 1.2 +/- 0.3 s")


@pytest.fixture(scope="session")
def attack_runs():
    base = ScenarioConfig(duration_s=600)
    out = {}
    for kind in KINDS:
        rows = []
        for seed in range(SEEDS):
            res, att = run_attack(base, AttackScript(kind), seed=seed)
            exp = expected_outcome(kind, len(att.parties), res.cfg.monitor_quorum)
            rows.append(([a.verdict for a in att.attempts], exp, list(res.violations)))
        out[kind] = rows
    return out


def test_c7_security_suite(attack_runs, criterion):
    parts, ok = [], True
    for kind, rows in attack_runs.items():
        hits = sum(v == (ACCEPTED if exp == UNDETECTABLE else exp) for vs, exp, _ in rows for v in vs)
        total = sum(len(vs) for vs, _, _ in rows)
        ok &= hits == total
        parts.append(f"{kind} {hits}/{total}")
    assert criterion("C7 security suite", ok, "; ".join(parts))


def test_c8_oracle_equivalence(mle, sle, levels, attack_runs, criterion):
    rng = random.Random(2024)
    mismatches = checked = 0
    conserved = True
    while checked < 1000:
        limit = rng.choice((200, 400, 600, 1000))
        w = World(customer_balance=10**7, primary_limit=limit)
        for _ in range(100):
            order, _, verdict = w.full_transaction(rng.randint(1, limit), fanout=rng.random() < 0.5)
            assert isinstance(verdict, Accept)
            guarantors = {}
            for m in verdict.endorsements:
                guarantors[m.endorser_id] = guarantors.get(m.endorser_id, 0) + m.endorsed_value
            oracle = online_settlement_oracle(w.bank, order, guarantors)
            s = bank_settle(w.bank, SettlementBundle(order, verdict.endorsements, None, w.t), w.t, 3600)
            mismatches += [(p.src, p.dst, p.amount) for p in s.postings] != oracle
            checked += 1
            w.tick(rng.uniform(1.0, 50.0))
        conserved &= conservation_holds(w.bank)
    sim_bad = sum(bool(r["sim_violations"]) for batch in (mle, sle, levels) for r in batch[0])
    attack_bad = sum(bool(v) for rows in attack_runs.values() for _, _, v in rows)
    ok = mismatches == 0 and conserved and sim_bad == 0 and attack_bad == 0
    assert criterion(
        "C8 oracle equivalence", ok,
        f"{checked - mismatches}/{checked} settlements equal the oracle; runs with conservation violations: "
        f"{sim_bad} simulation, {attack_bad} attack",
    )


def test_c9_determinism(criterion):
    cfg = ScenarioConfig(duration_s=3600)
    a, b = run(cfg, seed=11).transcript, run(cfg, seed=11).transcript
    script = AttackScript("DoubleSpend")
    ra = run_attack(ScenarioConfig(duration_s=600), script, seed=3)[0].transcript
    rb = run_attack(ScenarioConfig(duration_s=600), script, seed=3)[0].transcript
    ok = a.encode() == b.encode() and ra.encode() == rb.encode()
    assert criterion("C9 determinism", ok, f"{len(a)} and {len(ra)} byte transcripts identical across two executions")


def _sweep(cfgs):
    return [_mean(_batch(cfg)[0], "tcr") for cfg in cfgs]


def test_c10_sweep_trends(criterion):
    ratios = (0.02, 0.04, 0.06, 0.08, 0.10, 0.12)
    speeds = (1.0, 1.5, 2.0)  # mean speed; each node draws from a 0.4 m/s band around it
    quorums = (3, 4, 5)
    by_ratio = _sweep([SWEEP_BASE.with_(endorser_ratio=r) for r in ratios])
    by_speed = _sweep([SWEEP_BASE.with_(speed_min=v - SPEED_BAND / 2, speed_max=v + SPEED_BAND / 2) for v in speeds])
    by_quorum = _sweep([SWEEP_BASE.with_(monitor_quorum=q) for q in quorums])
    up = all(b >= a for a, b in zip(by_ratio, by_ratio[1:]))
    flat = max(by_speed) - min(by_speed) < 0.05
    down = all(b <= a for a, b in zip(by_quorum, by_quorum[1:]))
    fmt = lambda xs: ", ".join(f"{x:.3f}" for x in xs)
    assert criterion(
        "C10 sweep trends", up and flat and down,
        f"ratio {fmt(by_ratio)} nondecreasing={up}; speed {fmt(by_speed)} spread "
        f"{(max(by_speed) - min(by_speed)) * 100:.1f} pts < 5={flat}; quorum {fmt(by_quorum)} nonincreasing={down}",
    )
