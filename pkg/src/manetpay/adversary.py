"""Scripted dishonest behaviour, one deviation per attack kind.

Each script stages its actors next to a merchant (followers of the merchant's
position, phones kept on) so every attempt reaches a defence, then records the
first verdict the defence returns. Attempts that never reach a defence, say
because the network dropped a billing, are retried up to a fixed budget and
reported as inconclusive if the budget runs out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from . import constants as C
from .config import ConfigError, parse_kv
from .crypto import sign
from .ledger import DEFAULT_QUORUM, ECoin, coin_payload
from .protocol import CUSTOMER, ENDORSER, MERCHANT
from .sim import Behavior, Simulation

KINDS = (
    "DoubleSpend", "ResetRecovery", "Impersonation", "StolenPhoneColocation",
    "ColludeCustomerEndorser", "ColludeCustomerMerchant", "ColludeMonitors", "ForgedCoin",
)
UNDETECTABLE = "undetectable-by-design"
ACCEPTED = "accepted"
INCONCLUSIVE = "inconclusive"

# roles of the named actors, in order
ROLES = {
    "DoubleSpend": (ENDORSER, CUSTOMER, MERCHANT, MERCHANT),
    "ResetRecovery": (ENDORSER, CUSTOMER, MERCHANT),
    "Impersonation": (CUSTOMER, CUSTOMER, MERCHANT),
    "StolenPhoneColocation": (ENDORSER, CUSTOMER, MERCHANT),
    "ColludeCustomerEndorser": (ENDORSER, CUSTOMER, MERCHANT),
    "ColludeCustomerMerchant": (CUSTOMER, MERCHANT),
    "ColludeMonitors": (ENDORSER, CUSTOMER, MERCHANT),
    "ForgedCoin": (ENDORSER, CUSTOMER, MERCHANT),
}

ATTEMPT_GAP_S = 150.0
RETRIES = 6
WITNESS_OFFSETS = ((-40.0, 0.0), (0.0, 40.0), (40.0, 40.0), (-40.0, 40.0), (-40.0, -60.0))
ENDORSER_OFFSET = (0.0, -40.0)
CUSTOMER_OFFSET = (30.0, 0.0)
SECOND_MERCHANT_OFFSET = (70.0, 0.0)


class InvalidScript(ConfigError):
    pass


@dataclass(frozen=True)
class AttackScript:
    kind: str
    actors: tuple[str, ...] = ()
    trigger: float = 600.0
    parties: int = 0
    attempts: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidScript(f"unknown attack kind: {self.kind}")
        if self.trigger < 0 or self.attempts < 1 or self.parties < 0:
            raise InvalidScript("trigger >= 0, attempts >= 1 and parties >= 0 required")
        need = len(ROLES[self.kind])
        if self.actors and len(self.actors) not in (need, need - 1 if self.kind == "DoubleSpend" else need):
            raise InvalidScript(f"{self.kind} takes {need} actors")

    @property
    def duration(self) -> float:
        return self.trigger + self.attempts * ATTEMPT_GAP_S * RETRIES + 60.0


def parse_script(text: str) -> AttackScript:
    kv = parse_kv(text)
    try:
        kind = kv.pop("kind")
    except KeyError:
        raise InvalidScript("attack script needs kind") from None
    actors = tuple(a.strip() for a in kv.pop("actors", "").split(",") if a.strip())
    try:
        script = AttackScript(
            kind, actors, float(kv.pop("trigger", 600.0)), int(kv.pop("parties", 0)), int(kv.pop("attempts", 1))
        )
    except ValueError as exc:
        raise InvalidScript(str(exc)) from exc
    if kv:
        raise InvalidScript(f"unknown attack keys: {', '.join(sorted(kv))}")
    return script


def expected_outcome(kind: str, parties: int = 0, quorum: int = DEFAULT_QUORUM) -> str:
    """Reason code of the defence expected to stop ``kind``.

    Colluding monitors that reach a full quorum sign the double spend, so the
    merchant's own spent-coin check has to catch it instead.
    """
    if kind not in KINDS:
        raise InvalidScript(f"unknown attack kind: {kind}")
    if kind == "ColludeMonitors":
        return C.DOUBLE_SPEND if parties >= quorum else C.INSUFFICIENT_QUORUM
    return {
        "DoubleSpend": C.DOUBLE_SPEND,
        "ResetRecovery": C.STALE_CHAIN,
        "Impersonation": C.BAD_CREDENTIAL,
        "StolenPhoneColocation": C.SIMILAR_LOCATION,
        "ColludeCustomerEndorser": C.INSUFFICIENT_COVER,
        "ColludeCustomerMerchant": UNDETECTABLE,
        "ForgedCoin": C.BAD_CREDENTIAL,
    }[kind]


@dataclass
class Attempt:
    index: int
    tries: int = 0
    order_id: str = ""
    armed_at: float = 0.0
    verdict: str | None = None


@dataclass
class AttackRun(Behavior):
    """Behaviour hooks for one script; read ``attempts`` after the run."""

    script: AttackScript
    attempts: list[Attempt] = field(default_factory=list)
    endorser: int = -1
    customer: int = -1
    victim: int = -1
    merchants: tuple[int, ...] = ()
    parties: list[int] = field(default_factory=list)
    _live: dict[str, Attempt] = field(default_factory=dict)
    _prelude: dict[str, Attempt] = field(default_factory=dict)
    _coins: dict[str, list[ECoin]] = field(default_factory=dict)

    # ---- staging ----

    def setup(self, sim: Simulation) -> None:
        s = self.script
        ids = self._resolve_actors(sim)
        roles = ROLES[s.kind]
        for nid, role in zip(ids, roles):
            if nid not in sim.index or sim.roles[sim.index[nid]] != role:
                raise InvalidScript(f"{s.kind}: {nid} is not a {role}")
        idx = [sim.index[n] for n in ids]
        if s.kind == "ColludeCustomerMerchant":
            self.customer, m1 = idx
            self.merchants = (m1,)
        elif s.kind == "Impersonation":
            self.customer, self.victim, m1 = idx
            self.merchants = (m1,)
        else:
            self.endorser, self.customer = idx[0], idx[1]
            self.merchants = tuple(idx[2:])
            if self.endorser_id not in sim.creds[self.customer].tree.primary_ids:
                raise InvalidScript(f"{ids[0]} is not a primary endorser of {ids[1]}")
        m1 = self.merchants[0]
        fleet = sim.fleet
        taken = {m1, self.endorser, self.customer, self.victim, *self.merchants}
        if len(self.merchants) > 1:
            fleet.add_follower(self.merchants[1], m1, SECOND_MERCHANT_OFFSET)
        if self.endorser >= 0:
            fleet.add_follower(self.endorser, m1, ENDORSER_OFFSET)
        fleet.add_follower(self.customer, m1, CUSTOMER_OFFSET)
        if s.kind == "ColludeCustomerMerchant":
            # the fake purchase needs the customer's honest endorsers in range
            for k, eid in enumerate(sim.creds[self.customer].tree.primary_ids):
                e = sim.index[eid]
                ang = math.radians(-90.0 + 40.0 * k)
                fleet.add_follower(e, m1, (40.0 * math.cos(ang), 40.0 * math.sin(ang)))
                taken.add(e)
        pool = [c for c in sim.customers if c not in taken]
        witnesses = pool[: len(WITNESS_OFFSETS)]
        for w, off in zip(witnesses, WITNESS_OFFSETS):
            fleet.add_follower(w, m1, off)
        pool = pool[len(witnesses):]
        if s.kind in ("StolenPhoneColocation", "ColludeMonitors"):
            n = s.parties or sim.cfg.monitor_quorum - (s.kind == "ColludeMonitors")
            self.parties = pool[:n]
            if len(self.parties) < n:
                raise InvalidScript("not enough customers to act as parties")
            if s.kind == "StolenPhoneColocation":
                for p in self.parties:
                    fleet.add_follower(p, m1, ENDORSER_OFFSET)
        sim.always_on |= {i for i in (*taken, *witnesses, *self.parties) if i >= 0}
        self.attempts = [Attempt(i) for i in range(s.attempts)]
        for a in self.attempts:
            sim.q.push(s.trigger + a.index * ATTEMPT_GAP_S, "call", self._launch, a)

    def _resolve_actors(self, sim: Simulation) -> tuple[str, ...]:
        s = self.script
        if s.actors:
            ids = s.actors
            if s.kind == "DoubleSpend" and len(ids) == 3:
                ids = ids + (ids[2],)
            return ids
        ms = [sim.ids[m] for m in sim.merchants]
        if s.kind == "ColludeCustomerMerchant":
            return sim.ids[sim.customers[0]], ms[0]
        if s.kind == "Impersonation":
            return sim.ids[sim.customers[0]], sim.ids[sim.customers[1]], ms[0]
        for e in sim.endorsers:
            for c in sim.customers:
                if sim.ids[e] in sim.creds[c].tree.primary_ids:
                    out = (sim.ids[e], sim.ids[c], ms[0])
                    if s.kind == "DoubleSpend":
                        out += (ms[1] if len(ms) > 1 else ms[0],)
                    return out
        raise InvalidScript("no endorser has a customer")

    @property
    def endorser_id(self) -> str:
        return self._sim.ids[self.endorser]

    # ---- attempt lifecycle ----

    def _launch(self, t: float, a: Attempt) -> None:
        if a.verdict is not None:
            return
        if a.tries >= RETRIES:
            self._settle(t, a, INCONCLUSIVE)
            return
        a.tries += 1
        sim = self._sim
        kind = self.script.kind
        if kind in ("DoubleSpend", "ColludeMonitors", "ResetRecovery"):
            # an honest spend first; its coins or its message are reused later
            rec = sim.start_order(t, self.customer, self.merchants[0])
            self._prelude[rec.order.order_id] = a
            delay = sim.cfg.staleness_s + 30.0 if kind == "ResetRecovery" else 20.0
            sim.q.push(t + delay, "call", self._second_step, a, rec.order.order_id)
            return
        rec = sim.start_order(t, self.customer, self.merchants[0])
        self._arm(t, a, rec.order.order_id)

    def _second_step(self, t: float, a: Attempt, first: str) -> None:
        sim = self._sim
        e = sim.estate[self.endorser]
        spent = self._coins.get(first)
        if not spent or spent[0].coin_id not in e.chain.filter:
            # the honest spend never happened; try again later
            sim.q.push(t + ATTEMPT_GAP_S / 2, "call", self._launch, a)
            return
        if self.script.kind == "ResetRecovery":
            old = [m for m in sim.orders[first].valid if m.endorser_id == self.endorser_id]
            if not old:
                sim.q.push(t + ATTEMPT_GAP_S / 2, "call", self._launch, a)
                return
            # phone restored from backup: the already-used endorsement goes out again
            self._arm(t, a, first)
            rec = sim.orders[first]
            sim.send(t, self.endorser, rec.merchant, "Endorsement", old[0], C.TX_MESSAGE_BYTES, first)
            return
        target = self.merchants[-1]
        rec = sim.start_order(t, self.customer, target)
        self._coins[rec.order.order_id] = spent
        self._arm(t, a, rec.order.order_id)

    def _arm(self, t: float, a: Attempt, oid: str) -> None:
        a.order_id, a.armed_at = oid, t
        self._live[oid] = a
        self._sim.q.push(t + 2 * self._sim.cfg.order_timeout_s + C.ENDORSE_BLOCK_S * 4, "call", self._expire, a, oid)

    def _expire(self, t: float, a: Attempt, oid: str) -> None:
        if a.verdict is None and a.order_id == oid:
            self._live.pop(oid, None)
            self._sim.log(t, "attack", "*", "Attack", 0, "retry", attack=self.script.kind, attempt=a.index, order=oid)
            self._launch(t, a)

    def _settle(self, t: float, a: Attempt, verdict: str) -> None:
        a.verdict = verdict
        self._live.pop(a.order_id, None)
        exp = expected_outcome(self.script.kind, len(self.parties), self._sim.cfg.monitor_quorum)
        caught = verdict == exp or (exp == UNDETECTABLE and verdict == ACCEPTED)
        self._sim.log(t, "attack", "*", "Attack", 0, verdict, attack=self.script.kind, attempt=a.index,
                      order=a.order_id, expected=exp, match=int(caught))

    def _verdict(self, t: float, oid: str, endorser: str | None, reason: str | None) -> None:
        a = self._live.get(oid)
        if a is None or t < a.armed_at:
            return
        if endorser is not None and self.endorser >= 0 and endorser != self.endorser_id:
            return
        self._settle(t, a, reason or ACCEPTED)

    # ---- hooks ----

    def coins_for(self, sim, endorser, order_id, t):
        if endorser != self.endorser:
            return None
        kind = self.script.kind
        if order_id in self._prelude:
            coins = list(sim.estate[endorser].unspent(t + C.ENDORSE_BLOCK_S))[:1]
            self._coins[order_id] = coins
            return coins
        if order_id not in self._live:
            return None
        if kind in ("DoubleSpend", "ColludeMonitors"):
            return self._coins.get(order_id)
        if kind == "ForgedCoin":
            e = sim.estate[endorser]
            real = next(e.unspent(t))
            fake_id = bytes(b ^ 0xFF for b in real.coin_id)
            # signed with the endorser's own key instead of the bank's
            sig = sign(e.creds.keys.private_key, coin_payload(fake_id, real.endorser_id, real.value, real.expiry), t)
            return [ECoin(fake_id, real.endorser_id, real.value, real.expiry, sig)]
        if kind == "ColludeCustomerEndorser":
            return []
        return None

    def monitors_for(self, sim, endorser, candidates, t, order_id=""):
        if endorser != self.endorser or order_id not in self._live or not self.parties:
            return None
        return list(self.parties)

    def allow_short_quorum(self, sim, endorser, order_id):
        return self.script.kind == "ColludeMonitors" and endorser == self.endorser and order_id in self._live

    def colludes(self, sim, monitor, endorser):
        return endorser == self.endorser and monitor in self.parties

    def forge_order(self, sim, customer, order, t):
        if self.script.kind != "Impersonation" or customer != self.customer:
            return None
        victim = sim.creds[self.victim]
        fake = replace(order, customer_id=victim.keys.owner_id, tree=victim.tree,
                       primaries=victim.tree.primary_ids, secondaries=victim.tree.secondary_ids,
                       customer_sig=None)
        # own face, own key: the victim's key never leaves the victim's phone
        return replace(fake, customer_sig=sign(sim.creds[customer].keys.private_key, fake.digest(), t))

    def on_monitor_refusal(self, sim, monitor, endorser, order_id, reason, t):
        self._verdict(t, order_id, sim.ids[endorser], reason)

    def on_endorsement_verdict(self, sim, order_id, endorser, reason, t):
        self._verdict(t, order_id, endorser, reason)

    def on_order_rejected(self, sim, order_id, reason, t):
        self._verdict(t, order_id, None, reason)

    def on_accept(self, sim, order_id, t):
        if self.script.kind == "ColludeCustomerMerchant":
            self._verdict(t, order_id, None, None)

    def bind(self, sim: Simulation) -> None:
        self._sim = sim


def inject(sim: Simulation, script: AttackScript) -> AttackRun:
    """Attach ``script`` to a simulation that has not started yet."""
    if sim.lines:
        raise InvalidScript("simulation already started")
    run_ = AttackRun(script)
    run_.bind(sim)
    run_.setup(sim)
    sim.behaviors.append(run_)
    return run_


def run_attack(cfg, script: AttackScript, seed: int | None = None):
    """Run ``cfg`` long enough for every attempt; return (SimResult, AttackRun)."""
    cfg = cfg.with_(duration_s=max(cfg.duration_s, script.duration))
    if seed is not None:
        cfg = cfg.with_(seed=seed)
    if script.kind == "DoubleSpend" and cfg.merchants < 2:
        cfg = cfg.with_(merchants=2)
    sim = Simulation(cfg)
    attack = inject(sim, script)
    return sim.run(), attack
