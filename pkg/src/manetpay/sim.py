"""Deterministic discrete-event simulation of the offline payment system."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import constants as C
from .config import ConfigError, ScenarioConfig
from .crypto import sign
from .ledger import (
    FULL,
    LIGHTWEIGHT,
    ECoin,
    block_size_bytes,
    bloom_sizing,
    chain_size_bytes,
)
from .mobility import (
    Buffer,
    EventQueue,
    Fleet,
    MobilityModel,
    RadioModel,
    RoadGraph,
    TruckState,
    hop_counts,
    hop_path,
    load_road_graph,
    region_of,
)
from .protocol import (
    CUSTOMER,
    ENDORSER,
    MERCHANT,
    Bank,
    DeliveryReceipt,
    DisputeClaim,
    EndorsementDraft,
    EndorsementMessage,
    MerchantState,
    MonitorState,
    Refusal,
    Rejected,
    SettlementBundle,
    TransactionOrder,
    bank_settle,
    check_endorsement,
    conservation_holds,
    customer_order,
    dispute,
    endorser_finalize,
    endorser_prepare,
    escalate_billing,
    hello_exchange,
    location_similarity,
    merchant_process_order,
    monitor_countersign,
    new_endorser_state,
    register,
    release_due,
    sign_receipt,
)

PREFIX = {MERCHANT: "M", ENDORSER: "E", CUSTOMER: "C"}
COLLECTED = -2  # bundle_index once the truck has taken the bundle


class InvariantViolation(AssertionError):
    pass


# -- transcript -------------------------------------------------------------------


def format_line(t: float, sender: str, receiver: str, kind: str, size: int, verdict: str, **extra) -> str:
    extras = ";".join(f"{k}={_fmt(v)}" for k, v in extra.items())
    return f"{t:.6f}\t{sender}\t{receiver}\t{kind}\t{size}\t{verdict}\t{extras}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


@dataclass(frozen=True)
class Line:
    t: float
    sender: str
    receiver: str
    kind: str
    size: int
    verdict: str
    extra: dict

    @classmethod
    def parse(cls, raw: str) -> "Line":
        parts = raw.rstrip("\n").split("\t")
        if len(parts) != 7:
            raise ValueError(f"bad transcript line: {raw!r}")
        extra = {}
        if parts[6]:
            for item in parts[6].split(";"):
                k, _, v = item.partition("=")
                extra[k] = v
        return cls(float(parts[0]), parts[1], parts[2], parts[3], int(parts[4]), parts[5], extra)


def role_of(node_id: str) -> str:
    return {"M": MERCHANT, "E": ENDORSER, "C": CUSTOMER}.get(node_id[:1], "other")


# -- behaviour hooks ----------------------------------------------------------------


class Behavior:
    """Honest defaults; adversary scripts override individual hooks."""

    def setup(self, sim: "Simulation") -> None:
        pass

    def coins_for(self, sim: "Simulation", endorser: int, order_id: str, t: float) -> list[ECoin] | None:
        return None

    def monitors_for(self, sim: "Simulation", endorser: int, candidates: list[int], t: float,
                     order_id: str = "") -> list[int] | None:
        """``order_id`` is empty for hello exchanges."""
        return None

    def allow_short_quorum(self, sim: "Simulation", endorser: int, order_id: str) -> bool:
        return False

    def forge_order(self, sim: "Simulation", customer: int, order: TransactionOrder, t: float) -> TransactionOrder:
        return order

    def on_refusal(self, sim: "Simulation", endorser: int, order_id: str, reason: str, t: float) -> None:
        pass

    def on_monitor_refusal(self, sim: "Simulation", monitor: int, endorser: int, order_id: str, reason: str,
                           t: float) -> None:
        pass

    def colludes(self, sim: "Simulation", monitor: int, endorser: int) -> bool:
        return False

    def on_order_rejected(self, sim: "Simulation", order_id: str, reason: str, t: float) -> None:
        pass

    def on_endorsement_verdict(self, sim: "Simulation", order_id: str, endorser: str, reason: str | None, t: float) -> None:
        pass

    def on_accept(self, sim: "Simulation", order_id: str, t: float) -> None:
        pass


# -- bookkeeping ----------------------------------------------------------------------


@dataclass
class OrderRecord:
    order: TransactionOrder
    customer: int
    merchant: int
    t0: float
    received_at: float = math.nan
    status: str = "open"  # open | accepted | rejected | failed
    covered: int = 0
    valid: list[EndorsementMessage] = field(default_factory=list)
    invalid: list[str] = field(default_factory=list)
    refusals: list[str] = field(default_factory=list)
    escalated: bool = False
    mbytes: int = 0
    bundle_index: int = -1


@dataclass
class RelayState:
    endorser: int
    draft: EndorsementDraft
    monitors: list[int]
    sigs: list = field(default_factory=list)
    merchant: int = -1
    customer: int = -1


class Simulation:
    def __init__(self, cfg: ScenarioConfig, behaviors: tuple[Behavior, ...] = ()):
        self.cfg = cfg
        self.behaviors = list(behaviors)
        self.lines: list[str] = []
        self.q = EventQueue()
        self.t = 0.0
        self._setup()
        for b in self.behaviors:
            b.setup(self)

    # ---- setup ----

    def _setup(self) -> None:
        cfg = self.cfg
        ss = np.random.SeedSequence(cfg.seed)
        streams = ss.spawn(8)
        self.rng_place = np.random.default_rng(streams[0])
        self.rng_assign = np.random.default_rng(streams[1])
        self.rng_orders = np.random.default_rng(streams[2])
        self.rng_gps = np.random.default_rng(streams[3])
        self.rng_phone = np.random.default_rng(streams[4])
        self.rng_misc = np.random.default_rng(streams[5])
        mob_streams = streams[6].spawn(cfg.nodes)

        n = cfg.nodes
        n_merch = cfg.merchants
        n_end = max(1, int(round(cfg.endorser_ratio * n)))
        n_cust = n - n_merch - n_end
        if n_cust < 4:
            raise ConfigError("too few customers for a monitor quorum")
        roles = [MERCHANT] * n_merch + [ENDORSER] * n_end + [CUSTOMER] * n_cust
        counters = {r: 0 for r in PREFIX}
        self.ids: list[str] = []
        for r in roles:
            self.ids.append(f"{PREFIX[r]}{counters[r]:03d}")
            counters[r] += 1
        self.roles = roles
        self.index = {nid: i for i, nid in enumerate(self.ids)}
        self.merchants = [i for i, r in enumerate(roles) if r == MERCHANT]
        self.endorsers = [i for i, r in enumerate(roles) if r == ENDORSER]
        self.customers = [i for i, r in enumerate(roles) if r == CUSTOMER]

        if cfg.road_graph:
            self.graph = load_road_graph(cfg.road_graph)
        else:
            self.graph = RoadGraph.grid(cfg.grid_n, cfg.area_m)
        if not self.graph.is_connected() or not self.graph.within(cfg.area_m):
            raise ConfigError("road graph must be connected and inside the area")
        centre = self.graph.nearest_vertex((cfg.area_m / 2, cfg.area_m / 2))
        merch_vertices = [centre] + [
            self.graph.nearest_vertex(self.rng_place.uniform(0, cfg.area_m, 2)) for _ in range(n_merch - 1)
        ]
        market = sorted({
            v for v in range(len(self.graph)) for mv in merch_vertices
            if np.hypot(*(self.graph.vertices[v] - self.graph.vertices[mv])) <= cfg.market_radius_m + 1e-9
        })
        self.model = MobilityModel(
            self.graph, cfg.speed_min, cfg.speed_max, cfg.pause_s, tuple(market), cfg.market_bias
        )
        starts = list(self.rng_place.integers(len(self.graph), size=n))
        for k, i in enumerate(self.merchants):
            starts[i] = merch_vertices[k]
        self.fleet = Fleet(self.model, [int(s) for s in starts],
                           [np.random.default_rng(s) for s in mob_streams], static=self.merchants)
        self.radio = RadioModel(cfg.range_m, cfg.bandwidth_bps)
        self.truck = TruckState(cfg.truck_regions, cfg.truck_period)
        self.buffers = [Buffer(int(cfg.buffer_kb * 1024)) for _ in range(n)]
        self.online = np.ones(n, dtype=bool)
        self.noise = self.rng_gps.uniform(cfg.gps_noise_min_m, cfg.gps_noise_max_m, size=n)
        self.history = np.full((n, cfg.similarity_window, 2), np.nan)
        self._sim_cache: dict[tuple[int, int], bool] = {}

        # registration (pre-disaster)
        coin_cents = cfg.cents(cfg.endorse_amount)
        self.bank = Bank("bank", seed=cfg.seed, scheme=cfg.signature_scheme, coin_value=coin_cents,
                         coin_expiry=cfg.coin_expiry_s, incentive_pct=cfg.incentive_pct)
        self.choices: dict[int, list[tuple[str, int]]] = {i: [] for i in range(n)}
        for e in self.endorsers:
            others = [o for o in self.endorsers if o != e]
            k = min(cfg.secondaries_per_endorser, len(others))
            picks = sorted(self.rng_assign.choice(others, size=k, replace=False)) if k else []
            self.choices[e] = [(self.ids[o], coin_cents) for o in picks]
        custs = list(self.customers)
        self.rng_assign.shuffle(custs)
        slots = [e for _ in range(cfg.customers_per_endorser) for e in self.endorsers]
        for j, e in enumerate(slots):
            c = custs[j % len(custs)]
            if all(eid != self.ids[e] for eid, _ in self.choices[c]):
                self.choices[c].append((self.ids[e], coin_cents))
        defaulting = self.rng_assign.random(n) < cfg.default_prob
        self.creds = {}
        for i in self.endorsers + self.merchants + self.customers:
            role = self.roles[i]
            kw = dict(seed=cfg.seed * 100_003 + i)
            if role == ENDORSER:
                kw["deposit"] = cfg.cents(cfg.coin_total)
            if role == CUSTOMER:
                kw["balance"] = 0 if defaulting[i] else cfg.cents(cfg.customer_balance)
                if defaulting[i]:
                    self.bank.state.defaulting.add(self.ids[i])
            self.creds[i] = register(self.bank, self.ids[i], role, self.choices[i], **kw)
        self.directory = self.bank.directory
        self.bloom_n = max(1, int(round(cfg.coin_total / cfg.endorse_amount)))
        self.bloom_m, self.bloom_k = bloom_sizing(self.bloom_n, cfg.bloom_fpr)
        self.estate = {i: new_endorser_state(self.creds[i], self.bloom_n, cfg.bloom_fpr) for i in self.endorsers}
        self.mstate = {i: MerchantState(self.creds[i]) for i in self.merchants}
        self.monitor = {i: MonitorState(self.creds[i]) for i in self.endorsers + self.customers}
        self.temp_books = {i: self.bank.temp_id_book(self.ids[i], cfg.seed * 7919 + i) for i in self.customers}

        self.orders: dict[str, OrderRecord] = {}
        self.pending_intent: dict[int, float] = {}
        self.open_by_customer: dict[int, str] = {}
        self.busy_until = {i: 0.0 for i in self.endorsers}
        self.endorser_queue: dict[int, list] = {i: [] for i in self.endorsers}
        self.relays: dict[str, RelayState] = {}
        self.bundles: dict[int, list[SettlementBundle]] = {i: [] for i in self.merchants}
        self.truck_cargo: list[SettlementBundle] = []
        self.parcels: dict[int, list[ECoin]] = {}
        self.order_seq = 0
        self.violations: list[str] = []
        self.always_on: set[int] = set()
        self.accepted_coin_owner: dict[bytes, str] = {}
        self._pos_t = -1.0
        self._pos = None
        self._adj = None
        self._dist: dict[int, np.ndarray] = {}

    # ---- helpers ----

    def log(self, t: float, sender: str, receiver: str, kind: str, size: int, verdict: str, **extra) -> None:
        self.lines.append(format_line(t, sender, receiver, kind, size, verdict, **extra))

    def positions(self, t: float) -> np.ndarray:
        if t != self._pos_t:
            self._pos = self.fleet.positions(t)
            self._pos_t = t
            self._adj = None
        return self._pos

    def adjacency(self, t: float) -> np.ndarray:
        self.positions(t)
        if self._adj is None:
            self._adj = self.radio.adjacency(self._pos, self.online)
            self._dist = {}
        return self._adj

    def in_reach(self, t: float, src: int, dst: int) -> bool:
        """Same answer as ``route(...) is not None``, from one cached BFS per destination."""
        adj = self.adjacency(t)
        if dst not in self._dist:
            self._dist[dst] = hop_counts(adj, dst, self.cfg.max_hops)
        return bool(self.online[src] and self.online[dst] and self._dist[dst][src] >= 0)

    def route(self, t: float, src: int, dst: int) -> list[int] | None:
        if not (self.online[src] and self.online[dst]):
            return None
        return hop_path(self.adjacency(t), src, dst, self.cfg.max_hops)

    def send(self, t: float, src: int, dst: int, kind: str, payload, size: int, order_id: str = "",
             deadline: float = math.inf, buffer: bool = True, **extra) -> bool:
        """Unicast over the fewest hops; store-carry-forward if no path exists."""
        path = self.route(t, src, dst)
        if path is None:
            if not buffer:
                return False
            evicted = self.buffers[src].push(size, (deadline, dst, kind, payload, size, order_id, extra))
            self.log(t, self.ids[src], self.ids[dst], kind, size, "buffered", order=order_id)
            for item in evicted:
                self.log(t, self.ids[src], self.ids[item[1]], item[2], item[4], "dropped", order=item[5])
            return False
        hops = len(path) - 1
        pos = self.positions(t)
        span = max((float(np.hypot(*(pos[a] - pos[b]))) for a, b in zip(path, path[1:])), default=0.0)
        arrive = t + hops * self.radio.hop_delay(size)
        self.q.push(arrive, "deliver", src, dst, kind, payload, size, order_id, t, hops, span, extra)
        return True

    def similar(self, a: int, b: int) -> bool:
        key = (min(a, b), max(a, b))
        if key not in self._sim_cache:
            self._sim_cache[key] = location_similarity(
                self.history[a], self.history[b], self.cfg.similarity_eps_m, self.cfg.similarity_frac
            )
        return self._sim_cache[key]

    def neighbours(self, t: float, i: int) -> list[int]:
        adj = self.adjacency(t)
        pos = self.positions(t)
        idx = np.nonzero(adj[i])[0]
        d = np.hypot(*(pos[idx] - pos[i]).T)
        return [int(j) for _, j in sorted(zip(d.tolist(), idx.tolist()))]

    def eligible_monitors(self, t: float, endorser: int, exclude: set[int]) -> list[int]:
        return [
            j for j in self.neighbours(t, endorser)
            if j in self.monitor and j not in exclude and not self.similar(endorser, j)
        ]

    def reported_gps(self, t: float, i: int) -> tuple[float, float]:
        x, y = self.positions(t)[i]
        return float(x), float(y)

    def _hook(self, name: str, *args):
        out = None
        for b in self.behaviors:
            r = getattr(b, name)(self, *args)
            if r is not None and out is None:
                out = r
        return out

    # ---- run ----

    def run(self) -> "SimResult":
        cfg = self.cfg
        self.log(0.0, "sim", "*", "Start", 0, "ok", seed=cfg.seed, nodes=cfg.nodes)
        k = 0
        while k * cfg.hello_interval_s <= cfg.duration_s:
            self.q.push(k * cfg.hello_interval_s, "tick")
            k += 1
        for c in self.customers:
            self.q.push(float(self.rng_orders.exponential(cfg.order_mean_s)), "intent", c)
        if cfg.phone_off_per_h > 0:
            for i in self.endorsers + self.customers:
                self.q.push(float(self.rng_phone.exponential(3600.0 / cfg.phone_off_per_h)), "phone_off", i)
        for r in range(cfg.truck_regions):
            for ta in self.truck.arrival_times(r, cfg.duration_s):
                self.q.push(ta, "truck_region", r)
        for tr in self.truck.return_times(cfg.duration_s):
            self.q.push(tr, "truck_return")

        handlers: dict[str, Callable] = {
            "tick": self._on_tick,
            "intent": self._on_intent,
            "phone_off": self._on_phone_off,
            "phone_on": self._on_phone_on,
            "deliver": self._on_deliver,
            "order_send": self._on_order_send,
            "bill": self._on_bill,
            "endorse_ready": self._on_endorse_ready,
            "monitor_done": self._on_monitor_done,
            "merchant_check": self._on_merchant_check,
            "deadline": self._on_deadline,
            "level_timeout": self._on_level_timeout,
            "truck_region": self._on_truck_region,
            "truck_return": self._on_truck_return,
            "call": lambda t, fn, *a: fn(t, *a),
        }
        while len(self.q) and self.q.peek_time() <= cfg.duration_s:
            t, kind, payload = self.q.pop()
            self.t = t
            handlers[kind](t, *payload)
        self._finish(cfg.duration_s)
        return SimResult(self.cfg, self.lines, self)

    def _finish(self, t: float) -> None:
        for rec in self.orders.values():
            if rec.status == "open":
                self._close_failed(t, rec)
        for e in self.endorsers:
            chain = self.estate[e].chain
            self.log(t, self.ids[e], "*", "ChainSize", 0, "ok", blocks=len(chain),
                     full=chain_size_bytes(chain.blocks, FULL), light=chain_size_bytes(chain.blocks, LIGHTWEIGHT))
        if not conservation_holds(self.bank):
            self.violations.append("conservation")
        seen: dict[bytes, str] = {}
        for rec in self.orders.values():
            if rec.status != "accepted":
                continue
            for m in rec.valid:
                for c in m.coins:
                    if c.coin_id in seen and seen[c.coin_id] != rec.order.order_id:
                        self.violations.append(f"coin accepted twice: {c.coin_id.hex()}")
                    seen[c.coin_id] = rec.order.order_id
        self.log(t, "sim", "*", "End", 0, "ok" if not self.violations else "violation",
                 violations=len(self.violations))

    # ---- periodic ----

    def _on_tick(self, t: float) -> None:
        cfg = self.cfg
        pos = self.positions(t)
        ang = self.rng_gps.uniform(0, 2 * np.pi, size=cfg.nodes)
        rep = pos + self.noise[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        rep[~self.online] = np.nan
        self.history[:, :-1] = self.history[:, 1:]
        self.history[:, -1] = rep
        self._sim_cache.clear()

        for e in self.endorsers:
            if not self.online[e] or self.busy_until[e] > t:
                continue
            st = self.estate[e]
            chosen = self._hook("monitors_for", e, self.neighbours(t, e), t)
            if chosen is None:
                chosen = self.eligible_monitors(t, e, set())[: cfg.monitor_quorum]
            mons = [self.monitor[j] for j in chosen if j in self.monitor]
            block = None
            if len(mons) >= cfg.monitor_quorum:
                block = hello_exchange(st, mons, self.directory, t, gps=self.reported_gps(t, e),
                                       quorum=cfg.monitor_quorum, staleness=cfg.staleness_s)
            kind = block.event.kind if block is not None else "none"
            self.log(t, self.ids[e], "*", "Hello", C.HELLO_MESSAGE_BYTES, "block" if block else "noquorum",
                     event=kind, monitors=len(mons))

        # store-carry-forward retries
        for i in range(cfg.nodes):
            buf = self.buffers[i]
            if not buf.items:
                continue
            keep = []
            for item in buf.pop_all():
                deadline, dst, kind, payload, size, oid, extra = item
                if t > deadline:
                    self.log(t, self.ids[i], self.ids[dst], kind, size, "expired", order=oid)
                    continue
                if self.route(t, i, dst) is not None:
                    self.send(t, i, dst, kind, payload, size, oid, deadline, **extra)
                else:
                    keep.append(item)
            for item in keep:
                buf.push(item[4], item)

        for c, expiry in list(self.pending_intent.items()):
            if t > expiry:
                del self.pending_intent[c]
            else:
                self._try_initiate(t, c)

    def _on_phone_off(self, t: float, i: int) -> None:
        if i in self.always_on:
            self.q.push(t + float(self.rng_phone.exponential(3600.0 / self.cfg.phone_off_per_h)), "phone_off", i)
            return
        self.online[i] = False
        self._adj = None
        self.q.push(t + float(self.rng_phone.exponential(self.cfg.phone_off_mean_s)), "phone_on", i)

    def _on_phone_on(self, t: float, i: int) -> None:
        self.online[i] = True
        self._adj = None
        self.q.push(t + float(self.rng_phone.exponential(3600.0 / self.cfg.phone_off_per_h)), "phone_off", i)

    # ---- customer ----

    def _on_intent(self, t: float, c: int) -> None:
        self.q.push(t + float(self.rng_orders.exponential(self.cfg.order_mean_s)), "intent", c)
        if c in self.pending_intent or c in self.open_by_customer:
            return
        self.pending_intent[c] = t + self.cfg.order_ttl_s
        self._try_initiate(t, c)

    def _try_initiate(self, t: float, c: int) -> None:
        if not self.online[c]:
            return
        target = None
        for m in self.merchants:
            if self.in_reach(t, c, m):
                target = m
                break
        if target is None:
            return
        del self.pending_intent[c]
        self.start_order(t, c, target)

    def start_order(self, t: float, c: int, m: int, item: int = 1) -> OrderRecord:
        self.order_seq += 1
        oid = f"o{self.order_seq:05d}"
        order = customer_order(
            self.creds[c], self.ids[m], item, self.cfg.cents(self.cfg.tx_amount), self.temp_books[c],
            order_id=oid, now=t, allow_empty=True,
        )
        order = self._hook("forge_order", c, order, t) or order
        rec = OrderRecord(order, c, m, t)
        self.orders[oid] = rec
        self.open_by_customer[c] = oid
        self.q.push(t + C.ORDER_CREATE_S, "order_send", oid)
        self.q.push(t + self.cfg.order_timeout_s, "deadline", oid)
        return rec

    def _on_order_send(self, t: float, oid: str) -> None:
        rec = self.orders[oid]
        self.send(t, rec.customer, rec.merchant, "TransactionOrder", oid, C.TX_MESSAGE_BYTES, oid,
                  deadline=rec.t0 + self.cfg.order_timeout_s)

    # ---- delivery dispatch ----

    def _on_deliver(self, t, src, dst, kind, payload, size, oid, t_send, hops, span, extra) -> None:
        self.log(t, self.ids[src], self.ids[dst], kind, size, "delivered", order=oid, sent=t_send,
                 hops=hops, span=round(span, 3), **extra)
        if "mtraffic" in extra and oid in self.orders:
            self.orders[oid].mbytes += extra["mtraffic"]
        fn = getattr(self, f"_recv_{kind}", None)
        if fn is not None:
            fn(t, src, dst, payload)

    # ---- merchant ----

    def _recv_TransactionOrder(self, t: float, src: int, m: int, oid) -> None:
        rec = self.orders[oid] if isinstance(oid, str) else oid
        if rec.status != "open":
            return
        rec.received_at = t
        try:
            bills = merchant_process_order(self.mstate[m], rec.order, self.directory, t,
                                           fanout=self.cfg.billing == "fanout" and self.cfg.multilevel)
        except Rejected as r:
            self.log(t, self.ids[m], self.ids[src], "OrderReject", 0, r.reason, order=rec.order.order_id)
            rec.status = "rejected" if r.reason in C.VALIDITY_REASONS else "failed"
            self.open_by_customer.pop(rec.customer, None)
            rec.invalid.append(r.reason)
            self._hook("on_order_rejected", rec.order.order_id, r.reason, t)
            return
        ts = t + C.MERCHANT_VERIFY_BILLING_S
        for b in bills:
            self.q.push(ts, "call", self._send_billing, rec.order.order_id, b)
        if self.cfg.billing == "levels" and self.cfg.multilevel:
            self.q.push(ts + self.cfg.level_timeout_s, "level_timeout", rec.order.order_id)

    def _send_billing(self, t: float, oid: str, bill) -> None:
        rec = self.orders[oid]
        if rec.status != "open":
            return
        e = self.index[bill.endorser_id]
        tag = {"mtraffic": C.TX_MESSAGE_BYTES} if bill.level == 2 else {}
        self.send(t, rec.merchant, e, "Billing", bill, C.TX_MESSAGE_BYTES, oid,
                  deadline=rec.t0 + self.cfg.order_timeout_s, **tag)

    def _on_level_timeout(self, t: float, oid: str) -> None:
        rec = self.orders[oid]
        if rec.status != "open" or rec.escalated:
            return
        rec.escalated = True
        m = rec.merchant
        # search for the next level: one request, one referral per reachable secondary
        self.log(t, self.ids[m], "*", "Search", C.TX_MESSAGE_BYTES, "broadcast", order=oid,
                 mtraffic=C.TX_MESSAGE_BYTES)
        rec.mbytes += C.TX_MESSAGE_BYTES
        bills = escalate_billing(self.mstate[m], rec.order)
        for b in bills:
            e = self.index[b.endorser_id]
            if self.route(t, m, e) is None:
                continue
            proof = self.proof_bytes(e, None)
            self.send(t, e, m, "Referral", (oid, b), C.TX_MESSAGE_BYTES + proof, oid,
                      deadline=rec.t0 + self.cfg.order_timeout_s, mtraffic=C.TX_MESSAGE_BYTES + proof)

    def _recv_Referral(self, t: float, e: int, m: int, payload) -> None:
        oid, bill = payload
        self.q.push(t + C.MERCHANT_VERIFY_BILLING_S, "call", self._send_billing, oid, bill)

    def proof_bytes(self, e: int, msg: EndorsementMessage | None) -> int:
        """Chain-validation payload a merchant needs for an endorsement from ``e``."""
        chain = msg.chain if msg is not None else self.estate[e].chain.snapshot()
        if self.cfg.billing == "fanout":
            tail = chain[-2:]
            return sum(block_size_bytes(b, LIGHTWEIGHT, monitor_view=True) for b in tail) + \
                self.estate[e].chain.filter.size_bytes
        start = msg.coin_origin if msg is not None else 0
        return chain_size_bytes(chain[start:], FULL)

    def _recv_Endorsement(self, t: float, src: int, dst: int, msg) -> None:
        if dst in self.mstate:
            self.q.push(t + C.MERCHANT_FINAL_CHECK_S, "merchant_check", msg)
        else:
            # relay leg towards a monitor
            self._monitor_receive(t, dst, msg)

    def _recv_Refusal(self, t: float, src: int, m: int, ref: Refusal) -> None:
        rec = self.orders.get(ref.order_id)
        if rec is None:
            return
        rec.refusals.append(ref.reason)
        self.log(t, self.ids[src], self.ids[m], "EndorsementReject", 0, ref.reason, order=ref.order_id, stage="refusal")

    def _on_merchant_check(self, t: float, msg: EndorsementMessage) -> None:
        rec = self.orders.get(msg.order_id)
        if rec is None:
            return
        m = rec.merchant
        cfg = self.cfg
        try:
            value = check_endorsement(
                self.mstate[m], rec.order, msg, self.directory, t,
                quorum=cfg.monitor_quorum, staleness=cfg.staleness_s,
                bloom_m=self.bloom_m, bloom_k=self.bloom_k,
                similar=lambda a, b, _t: self.similar(self.index[a], self.index[b]) if b in self.index else False,
            )
        except Rejected as r:
            rec.invalid.append(r.reason)
            self.log(t, msg.endorser_id, self.ids[m], "EndorsementReject", 0, r.reason, order=msg.order_id, stage="merchant")
            self._hook("on_endorsement_verdict", msg.order_id, msg.endorser_id, r.reason, t)
            return
        self._hook("on_endorsement_verdict", msg.order_id, msg.endorser_id, None, t)
        for c in msg.coins:
            self.mstate[m].accepted_coins.add(c.coin_id)
        if rec.status == "accepted":
            if rec.bundle_index >= 0:
                # late endorsement: its coins still go to settlement for reissue
                self.bundles[m][rec.bundle_index] = _add_endorsement(self.bundles[m][rec.bundle_index], msg)
            else:
                # the bundle already left with the truck
                self.log(t, msg.endorser_id, self.ids[m], "LateEndorsement", 0, "dropped", order=msg.order_id)
            rec.valid.append(msg)
            return
        if rec.status != "open":
            return
        rec.valid.append(msg)
        rec.covered += value
        if rec.covered >= rec.order.amount:
            self._accept(t, rec)

    def _accept(self, t: float, rec: OrderRecord) -> None:
        rec.status = "accepted"
        self.open_by_customer.pop(rec.customer, None)
        m = rec.merchant
        receipt = sign_receipt(self.creds[rec.customer], rec.order, t)
        self.log(t, self.ids[rec.customer], self.ids[m], "DeliveryReceipt", C.TX_MESSAGE_BYTES, "signed",
                 order=rec.order.order_id)
        bundle = SettlementBundle(rec.order, tuple(rec.valid), receipt, t)
        rec.bundle_index = len(self.bundles[m])
        self.bundles[m].append(bundle)
        for msg in rec.valid:
            if len({s for s, _ in msg.monitor_signatures}) < self.cfg.monitor_quorum:
                self.violations.append(f"accepted {rec.order.order_id} without quorum")
        self.log(t, self.ids[m], self.ids[rec.customer], "TxAccept", 0, "ok", order=rec.order.order_id,
                 t0=rec.t0, ct=t - rec.t0, mbytes=rec.mbytes, endorsements=len(rec.valid))
        self._hook("on_accept", rec.order.order_id, t)

    def _on_deadline(self, t: float, oid: str) -> None:
        rec = self.orders[oid]
        if rec.status == "open":
            self._close_failed(t, rec)

    def _close_failed(self, t: float, rec: OrderRecord) -> None:
        validity = [r for r in rec.invalid if r in C.VALIDITY_REASONS]
        oid = rec.order.order_id
        who, cust = self.ids[rec.merchant], self.ids[rec.customer]
        self.open_by_customer.pop(rec.customer, None)
        if validity:
            rec.status = "rejected"
            self.log(t, who, cust, "TxReject", 0, validity[-1], order=oid, t0=rec.t0)
        else:
            rec.status = "failed"
            reason = (rec.invalid or rec.refusals or ["timeout"])[-1]
            self.log(t, who, cust, "TxFail", 0, reason, order=oid, t0=rec.t0,
                     received=int(not math.isnan(rec.received_at)))

    # ---- endorser ----

    def _recv_Billing(self, t: float, m: int, e: int, bill) -> None:
        self.q.push(t, "bill", e, bill, m)

    def _on_bill(self, t: float, e: int, bill, m: int) -> None:
        if not self.online[e]:
            self.log(t, self.ids[e], self.ids[m], "Billing", 0, "lost", order=bill.order_id)
            return
        if self.busy_until[e] > t:
            self.endorser_queue[e].append((bill, m))
            return
        rec = self.orders[bill.order_id]
        st = self.estate[e]
        coins = self._hook("coins_for", e, bill.order_id, t)
        ready = t + C.ENDORSE_BLOCK_S
        try:
            draft = endorser_prepare(st, bill, ready, self.reported_gps(t, e),
                                     staleness=self.cfg.staleness_s, coins=coins)
        except Rejected as r:
            self.q.push(t + C.ENDORSE_BLOCK_S, "call", self._refuse, e, m, bill.order_id, r.reason)
            return
        self.busy_until[e] = math.inf
        self.q.push(ready, "endorse_ready", e, draft, m, rec.customer)

    def _refuse(self, t: float, e: int, m: int, oid: str, reason: str) -> None:
        self._hook("on_refusal", e, oid, reason, t)
        self.send(t, e, m, "Refusal", Refusal(self.ids[e], oid, reason), C.TX_MESSAGE_BYTES, oid,
                  deadline=self.orders[oid].t0 + self.cfg.order_timeout_s)

    def _release(self, t: float, e: int) -> None:
        self.busy_until[e] = t
        queued, self.endorser_queue[e] = self.endorser_queue[e], []
        # own customers first; secondary billings only back them up
        for bill, m in sorted(queued, key=lambda q: q[0].level):
            self.q.push(t, "bill", e, bill, m)

    def _on_endorse_ready(self, t: float, e: int, draft: EndorsementDraft, m: int, cust: int) -> None:
        cfg = self.cfg
        if not self.online[e]:
            self._release(t, e)
            return
        oid = draft.billing.order_id
        chosen = self._hook("monitors_for", e, self.neighbours(t, e), t, oid)
        if chosen is None:
            chosen = self.eligible_monitors(t, e, {cust})[: cfg.monitor_quorum]
        if len(chosen) < cfg.monitor_quorum and not self._hook("allow_short_quorum", e, oid):
            self._release(t, e)
            self._refuse(t, e, m, draft.billing.order_id, C.INSUFFICIENT_QUORUM)
            return
        key = f"{draft.billing.order_id}:{self.ids[e]}"
        self.relays[key] = RelayState(e, draft, list(chosen), [], m, cust)
        self._relay_start(t, key)

    def _colludes(self, mon: int, e: int) -> bool:
        return any(b.colludes(self, mon, e) for b in self.behaviors if hasattr(b, "colludes"))

    def _relay_start(self, t: float, key: str) -> None:
        """Hand the proposal to every chosen monitor at once; they check in parallel."""
        relay = self.relays[key]
        e = relay.endorser
        if not relay.monitors:
            self._relay_finish(t, key)
            return
        for mon in relay.monitors:
            if self._colludes(mon, e):
                # colluders coordinate out of band
                self.q.push(t + C.MONITOR_CHECK_S, "monitor_done", key, mon)
            elif not self.send(t, e, mon, "Endorsement", ("relay", key), C.TX_MESSAGE_BYTES,
                               relay.draft.billing.order_id, buffer=False):
                self._relay_abort(t, key, C.INSUFFICIENT_QUORUM)
                return

    def _monitor_receive(self, t: float, dst: int, payload) -> None:
        relay = self.relays.get(payload[1])
        if relay is None:
            return
        if payload[0] == "reply":
            self._collect(t, payload[1], payload[2])
        else:
            self.q.push(t + C.MONITOR_CHECK_S, "monitor_done", payload[1], dst)

    def _collect(self, t: float, key: str, sig) -> None:
        relay = self.relays[key]
        relay.sigs.append(sig)
        if len(relay.sigs) == len(relay.monitors):
            self._relay_finish(t, key)

    def _on_monitor_done(self, t: float, key: str, mon: int) -> None:
        relay = self.relays.get(key)
        if relay is None:
            return
        d = relay.draft
        e = relay.endorser
        if self._colludes(mon, e):
            sig = (self.ids[mon], sign(self.monitor[mon].creds.keys.private_key, d.proposal.payload(), t))
            self._collect(t, key, sig)
            return
        try:
            sig = monitor_countersign(
                self.monitor[mon], self.ids[e], d.proposal, d.snapshot, d.filter_before, d.coins,
                d.endorsed_value, self.directory, t, quorum=self.cfg.monitor_quorum,
                staleness=self.cfg.staleness_s, exclude=(self.ids[relay.customer],),
                similar=self.similar(e, mon),
            )
        except Rejected as r:
            self.log(t, self.ids[mon], self.ids[e], "MonitorRefusal", 0, r.reason, order=d.billing.order_id)
            self._hook("on_monitor_refusal", mon, e, d.billing.order_id, r.reason, t)
            self._relay_abort(t, key, r.reason)
            return
        if not self.send(t, mon, e, "Endorsement", ("reply", key, sig), C.TX_MESSAGE_BYTES,
                         d.billing.order_id, buffer=False):
            self._relay_abort(t, key, C.INSUFFICIENT_QUORUM)

    def _relay_abort(self, t: float, key: str, reason: str) -> None:
        relay = self.relays.pop(key, None)
        if relay is None:
            return
        self._release(t, relay.endorser)
        self._refuse(t, relay.endorser, relay.merchant, relay.draft.billing.order_id, reason)

    def _relay_finish(self, t: float, key: str) -> None:
        relay = self.relays.pop(key)
        e = relay.endorser
        self._release(t, e)
        cfg = self.cfg
        try:
            msg = endorser_finalize(self.estate[e], relay.draft, relay.sigs, self.directory,
                                    quorum=cfg.monitor_quorum, staleness=cfg.staleness_s,
                                    allow_short=bool(self._hook("allow_short_quorum", e, relay.draft.billing.order_id)))
        except Rejected as r:
            self._refuse(t, e, relay.merchant, relay.draft.billing.order_id, r.reason)
            return
        proof = self.proof_bytes(e, msg)
        level = self.orders[msg.order_id].order.tree.level_of(self.ids[e])
        mt = proof + (C.TX_MESSAGE_BYTES if level == 2 else 0)
        rec = self.orders[msg.order_id]
        self.send(t, e, relay.merchant, "Endorsement", msg, C.TX_MESSAGE_BYTES + proof, msg.order_id,
                  deadline=rec.t0 + cfg.order_timeout_s, mtraffic=mt)

    # ---- truck and bank ----

    def _on_truck_region(self, t: float, region: int) -> None:
        pos = self.positions(t)
        for m in self.merchants:
            if region_of(pos[m], self.cfg.area_m, self.cfg.truck_regions) == region and self.bundles[m]:
                n = len(self.bundles[m])
                self.truck_cargo.extend(self.bundles[m])
                self.bundles[m] = []
                for rec in self.orders.values():
                    if rec.merchant == m and rec.status == "accepted":
                        rec.bundle_index = COLLECTED
                self.log(t, self.ids[m], "truck", "BankSettlement", C.TX_MESSAGE_BYTES * n, "picked", bundles=n)
        for e in sorted(self.parcels):
            if region_of(pos[e], self.cfg.area_m, self.cfg.truck_regions) != region or not self.online[e]:
                continue
            coins = self.parcels.pop(e)
            self.estate[e].pending_receipts.extend(coins)
            self.log(t, "truck", self.ids[e], "CoinDelivery", C.TX_MESSAGE_BYTES, "delivered", coins=len(coins))

    def _on_truck_return(self, t: float) -> None:
        for bundle in self.truck_cargo:
            s = bank_settle(self.bank, bundle, t, self.cfg.dispute_window)
            self.log(t, "truck", "bank", "BankSettlement", C.TX_MESSAGE_BYTES, s.payer,
                     order=bundle.order.order_id, postings=len(s.postings))
            for eid, coins in s.reissue.items():
                self.parcels.setdefault(self.index[eid], []).extend(coins)
            if self.cfg.dispute_prob > 0 and self.rng_misc.random() < self.cfg.dispute_prob:
                out = dispute(self.bank, bundle.order.order_id,
                              DisputeClaim(bundle.order.order_id, bundle.order.customer_id, t), t)
                self.log(t, bundle.order.customer_id, "bank", "DisputeClaim", C.TX_MESSAGE_BYTES, out,
                         order=bundle.order.order_id)
        self.truck_cargo = []
        for oid in release_due(self.bank, t):
            self.log(t, "bank", self.bank.state.escrow[oid].merchant_id, "BankSettlement", 0, "release", order=oid)
        if not conservation_holds(self.bank):
            self.violations.append(f"conservation at {t}")


def _add_endorsement(bundle: SettlementBundle, msg: EndorsementMessage) -> SettlementBundle:
    return SettlementBundle(bundle.order, bundle.endorsements + (msg,), bundle.receipt, bundle.accepted_at)


@dataclass
class SimResult:
    cfg: ScenarioConfig
    lines: list[str]
    sim: Simulation

    @property
    def transcript(self) -> str:
        return "\n".join(self.lines) + "\n"

    @property
    def violations(self) -> list[str]:
        return self.sim.violations


def run(cfg: ScenarioConfig, seed: int | None = None, behaviors: tuple[Behavior, ...] = ()) -> SimResult:
    if seed is not None:
        cfg = cfg.with_(seed=seed)
    return Simulation(cfg, behaviors).run()
