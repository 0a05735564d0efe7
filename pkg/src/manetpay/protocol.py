"""Roles, messages and the offline transaction state machines.

Nodes never share mutable state: everything a verifier learns arrives in a
message body.  The functions here are pure protocol logic; timing, radio
reachability and scheduling live in :mod:`manetpay.sim`.
"""

from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import constants as C
from .crypto import (
    BlindPrivateKey,
    BlindPublicKey,
    KeyPair,
    PublicKey,
    Signature,
    SignedPhoto,
    blind,
    blind_sign,
    blind_verify,
    digest,
    generate_keypair,
    issue_signed_photo,
    random_blinding_factor,
    sign,
    unblind,
    verify,
    verify_signed_photo,
)
from .ledger import (
    Block,
    Broken,
    ECoin,
    Event,
    EventChain,
    SpentCoinFilter,
    VerifyState,
    bloom_new,
    chain_append,
    coin_is_valid,
    initial_state,
    issue_coin,
    verify_blocks,
    LedgerError,
)

CUSTOMER, ENDORSER, MERCHANT = "customer", "endorser", "merchant"
ROLES = (CUSTOMER, ENDORSER, MERCHANT)

MESSAGE_KINDS = (
    "TransactionOrder",
    "Billing",
    "Endorsement",
    "Refusal",
    "Hello",
    "BankSettlement",
    "DisputeClaim",
    "DeliveryReceipt",
    "CoinDelivery",
    "Search",
    "Referral",
)


class ProtocolError(Exception):
    pass


class DuplicateRegistration(ProtocolError):
    pass


class NoEndorsers(ProtocolError):
    pass


class LateClaim(ProtocolError):
    pass


class InsufficientBalance(ProtocolError):
    pass


class Rejected(ProtocolError):
    """A verdict carrying one of the reason codes."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


# -- canonical encoding --------------------------------------------------------


def canonical(obj) -> bytes:
    """Deterministic byte encoding of message bodies (dataclasses, tuples, scalars)."""
    if obj is None:
        return b"N"
    if isinstance(obj, bool):
        return b"T" if obj else b"F"
    if isinstance(obj, int):
        raw = obj.to_bytes((obj.bit_length() + 8) // 8 or 1, "big", signed=True)
        return b"I" + struct.pack(">H", len(raw)) + raw
    if isinstance(obj, float):
        return b"D" + struct.pack(">d", obj)
    if isinstance(obj, bytes):
        return b"B" + struct.pack(">I", len(obj)) + obj
    if isinstance(obj, str):
        raw = obj.encode()
        return b"S" + struct.pack(">I", len(raw)) + raw
    if isinstance(obj, (tuple, list)):
        return b"L" + struct.pack(">I", len(obj)) + b"".join(canonical(x) for x in obj)
    if isinstance(obj, Mapping):
        items = sorted(obj.items())
        return b"M" + struct.pack(">I", len(items)) + b"".join(canonical(k) + canonical(v) for k, v in items)
    if isinstance(obj, SpentCoinFilter):
        return b"F" + canonical((obj.m, obj.k)) + obj.to_bytes()
    if is_dataclass(obj):
        name = type(obj).__name__.encode()
        return b"C" + canonical(name) + b"".join(canonical(getattr(obj, f.name)) for f in fields(obj))
    raise TypeError(f"cannot encode {type(obj).__name__}")


# -- credentials and directory --------------------------------------------------


@dataclass(frozen=True)
class EndorsementTree:
    customer_id: str
    primaries: tuple[tuple[str, int], ...]
    secondaries: tuple[tuple[str, tuple[tuple[str, int], ...]], ...]
    bank_signature: Signature | None = None

    def payload(self) -> bytes:
        return b"tree" + canonical((self.customer_id, self.primaries, self.secondaries))

    @property
    def primary_ids(self) -> tuple[str, ...]:
        return tuple(e for e, _ in self.primaries)

    @property
    def secondary_ids(self) -> tuple[str, ...]:
        seen: list[str] = []
        prim = set(self.primary_ids)
        for _, subs in self.secondaries:
            for e, _ in subs:
                if e not in seen and e not in prim:
                    seen.append(e)
        return tuple(seen)

    def limit_of(self, endorser_id: str) -> int:
        """Agreed per-transaction limit; a primary limit wins over a secondary one."""
        for e, lim in self.primaries:
            if e == endorser_id:
                return lim
        best = 0
        for _, subs in self.secondaries:
            for e, lim in subs:
                if e == endorser_id:
                    best = max(best, lim)
        return best

    def level_of(self, endorser_id: str) -> int:
        if endorser_id in self.primary_ids:
            return 1
        return 2 if endorser_id in self.secondary_ids else 0


@dataclass(frozen=True)
class Directory:
    """Public material every device receives at registration."""

    bank_id: str
    bank_pub: PublicKey
    blind_pub: BlindPublicKey
    keys: Mapping[str, PublicKey]


@dataclass
class Credentials:
    keys: KeyPair
    role: str
    signed_photo: SignedPhoto | None = None
    photo: bytes = b""
    tree: EndorsementTree | None = None
    coins: tuple[ECoin, ...] = ()


@dataclass
class TempIdBook:
    """Blind-signed temporary identifiers, one per transaction."""

    customer_id: str
    blind_pub: BlindPublicKey
    _signer: BlindPrivateKey = field(repr=False)
    rng: random.Random = field(repr=False)
    issued: int = 0

    def next(self) -> tuple[bytes, Signature]:
        # The bank signs without seeing the nonce, so it cannot link the ID to the customer.
        nonce = self.rng.getrandbits(128).to_bytes(16, "big")
        r = random_blinding_factor(self.blind_pub, self.rng)
        sig = unblind(blind_sign(self._signer, blind(nonce, r, self.blind_pub)), r, self.blind_pub)
        self.issued += 1
        return nonce, sig


# -- bank ----------------------------------------------------------------------


@dataclass(frozen=True)
class Posting:
    time: float
    src: str
    dst: str
    amount: int  # cents
    memo: str
    order_id: str = ""


@dataclass
class Escrow:
    order_id: str
    merchant_id: str
    amount: int
    payers: dict[str, int]
    deadline: float
    receipt: "DeliveryReceipt | None"
    order_digest: bytes
    customer_id: str
    settled: bool = False


@dataclass
class BankState:
    accounts: dict[str, int] = field(default_factory=dict)
    locked: dict[str, int] = field(default_factory=dict)
    escrow: dict[str, Escrow] = field(default_factory=dict)
    coins: dict[bytes, ECoin] = field(default_factory=dict)
    redeemed: set[bytes] = field(default_factory=set)
    postings: list[Posting] = field(default_factory=list)
    defaulting: set[str] = field(default_factory=set)
    # escrow and the outside world ("world") are pass-through accounts
    pseudo: dict[str, int] = field(default_factory=dict)
    mode: str = "manet"

    def _book(self, acct: str) -> tuple[dict, str, bool]:
        if acct.startswith("locked:"):
            return self.locked, acct[7:], True
        if acct.startswith("escrow:") or acct == "world":
            return self.pseudo, acct, acct != "world"
        return self.accounts, acct, True

    def transfer(self, src: str, dst: str, amount: int, memo: str, now: float, order_id: str = "") -> None:
        if amount < 0:
            raise ProtocolError("negative transfer")
        if amount == 0:
            return
        book, key, bounded = self._book(src)
        if bounded and book.get(key, 0) < amount:
            raise ProtocolError(f"balance of {src} would go negative")
        book[key] = book.get(key, 0) - amount
        book, key, _ = self._book(dst)
        book[key] = book.get(key, 0) + amount
        self.postings.append(Posting(now, src, dst, amount, memo, order_id))

    def withdraw(self, entity: str, amount: int, now: float) -> None:
        if self.mode == "manet" and entity.startswith("locked:"):
            raise ProtocolError(f"endorsement account {entity} is locked")
        self.transfer(entity, "world", amount, "withdraw", now)


class Bank:
    def __init__(
        self,
        bank_id: str = "bank",
        seed: int = 0,
        *,
        scheme: str = "keyed-hash",
        blind_bits: int = 256,
        coin_value: int = 200,
        coin_expiry: float = 30 * 86400.0,
        incentive_pct: float = 3.0,
    ):
        from .crypto import blind_keygen

        self.bank_id = bank_id
        self.scheme = scheme
        self.keys = generate_keypair(bank_id, seed, scheme=scheme)
        self.blind_pub, self._blind_priv = blind_keygen(blind_bits, random.Random(seed), owner_id=bank_id)
        self.coin_value = coin_value
        self.coin_expiry = coin_expiry
        self.incentive_pct = incentive_pct
        self.state = BankState()
        self.roles: dict[str, str] = {}
        self.choices: dict[str, tuple[tuple[str, int], ...]] = {}
        self.public_keys: dict[str, PublicKey] = {bank_id: self.keys.public_key}
        self.trees: dict[str, EndorsementTree] = {}
        self._coin_counter = 0
        self._seed = seed

    @property
    def directory(self) -> Directory:
        return Directory(self.bank_id, self.keys.public_key, self.blind_pub, self.public_keys)

    def new_coin(self, endorser_id: str, value: int) -> ECoin:
        self._coin_counter += 1
        coin_id = digest(b"coin-id" + struct.pack(">QQ", self._seed, self._coin_counter))[: C.COIN_ID_BYTES]
        coin = issue_coin(self.keys.private_key, coin_id, endorser_id, value, self.coin_expiry)
        self.state.coins[coin.coin_id] = coin
        return coin

    def issue_coins(self, endorser_id: str, total: int) -> list[ECoin]:
        coins = []
        while total > 0:
            v = min(self.coin_value, total)
            coins.append(self.new_coin(endorser_id, v))
            total -= v
        return coins

    def temp_id_book(self, customer_id: str, seed: int) -> TempIdBook:
        return TempIdBook(customer_id, self.blind_pub, self._blind_priv, random.Random(seed))

    def build_tree(self, customer_id: str) -> EndorsementTree:
        primaries = self.choices.get(customer_id, ())
        secondaries = tuple((p, self.choices.get(p, ())) for p, _ in primaries)
        tree = EndorsementTree(customer_id, primaries, secondaries)
        sig = sign(self.keys.private_key, tree.payload())
        return EndorsementTree(customer_id, primaries, secondaries, sig)


def register(
    bank: Bank,
    entity: str,
    role: str,
    endorser_choices: Sequence[tuple[str, int]] = (),
    deposit: int = 0,
    *,
    balance: int = 0,
    seed: int = 0,
    photo: bytes | None = None,
    now: float = 0.0,
) -> Credentials:
    """Pre-disaster registration: keys, signed photo, endorsement tree, coins."""
    if role not in ROLES:
        raise ProtocolError(f"unknown role {role}")
    if entity in bank.roles:
        raise DuplicateRegistration(entity)
    for _, lim in endorser_choices:
        if lim <= 0:
            raise ProtocolError("endorsement limits must be positive")
    keys = generate_keypair(entity, seed, scheme=bank.scheme)
    bank.roles[entity] = role
    bank.public_keys[entity] = keys.public_key
    bank.choices[entity] = tuple(endorser_choices)
    photo = photo if photo is not None else b"face-of-" + entity.encode()
    signed = issue_signed_photo(bank.keys.private_key, keys.private_key, photo, now)
    st = bank.state
    if balance:
        st.transfer("world", entity, balance, "opening balance", now)
    creds = Credentials(keys, role, signed, photo)
    if role == ENDORSER:
        if deposit <= 0:
            raise ProtocolError("endorsers must lock a deposit")
        st.transfer("world", f"locked:{entity}", deposit, "endorsement deposit", now)
        creds.coins = tuple(bank.issue_coins(entity, deposit))
    if role == CUSTOMER:
        creds.tree = bank.build_tree(entity)
    return creds


# -- message bodies ------------------------------------------------------------


@dataclass(frozen=True)
class TransactionOrder:
    order_id: str
    temp_id: bytes
    temp_id_sig: Signature
    customer_id: str
    merchant_id: str
    primaries: tuple[str, ...]
    secondaries: tuple[str, ...]
    bank_id: str
    item_number: int
    quantity: int
    amount: int
    signed_photo: SignedPhoto
    photo: bytes
    tree: EndorsementTree
    created_at: float
    customer_sig: Signature | None = None

    def body(self) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(self) if f.name != "customer_sig")

    def digest(self) -> bytes:
        return digest(canonical(self.body()))

    @property
    def endorser_ids(self) -> tuple[str, ...]:
        return self.primaries + self.secondaries


@dataclass(frozen=True)
class Billing:
    order_id: str
    order_digest: bytes
    temp_id: bytes
    merchant_id: str
    endorser_id: str
    amount: int
    level: int


@dataclass(frozen=True)
class EndorsementMessage:
    endorser_id: str
    order_id: str
    order_digest: bytes
    coins: tuple[ECoin, ...]
    endorsed_value: int
    chain: tuple[Block, ...]  # endorser chain up to and including the spend block
    filter_before: SpentCoinFilter
    coin_origin: int  # index of the block in which the oldest attached coin was received
    endorser_sig: Signature | None = None

    def body(self) -> tuple:
        return (self.endorser_id, self.order_id, self.order_digest, self.coins, self.endorsed_value,
                self.chain[-1].hash() if self.chain else b"", len(self.chain), self.coin_origin)

    @property
    def monitor_signatures(self):
        return self.chain[-1].monitor_signatures if self.chain else ()


@dataclass(frozen=True)
class Refusal:
    sender_id: str
    order_id: str
    reason: str


@dataclass(frozen=True)
class DeliveryReceipt:
    order_id: str
    order_digest: bytes
    customer_id: str
    signature: Signature

    @staticmethod
    def payload(order_id: str, order_digest: bytes) -> bytes:
        return b"delivered" + order_id.encode() + order_digest


@dataclass(frozen=True)
class DisputeClaim:
    order_id: str
    customer_id: str
    filed_at: float


@dataclass(frozen=True)
class SettlementBundle:
    order: TransactionOrder
    endorsements: tuple[EndorsementMessage, ...]
    receipt: DeliveryReceipt | None
    accepted_at: float


@dataclass(frozen=True)
class ProtocolMessage:
    kind: str
    sender: str
    receiver: str
    body: object
    sender_sig: Signature
    size_bytes: int


def message_size(kind: str) -> int:
    return C.HELLO_MESSAGE_BYTES if kind == "Hello" else C.TX_MESSAGE_BYTES


def make_message(kind: str, sender: KeyPair, receiver: str, body, now: float | None = None) -> ProtocolMessage:
    if kind not in MESSAGE_KINDS:
        raise ProtocolError(f"unknown message kind {kind}")
    sig = sign(sender.private_key, canonical((kind, receiver, body)), now)
    return ProtocolMessage(kind, sender.owner_id, receiver, body, sig, message_size(kind))


def message_verifies(msg: ProtocolMessage, keys: Mapping[str, PublicKey]) -> bool:
    pub = keys.get(msg.sender)
    return (
        pub is not None
        and msg.size_bytes == message_size(msg.kind)
        and verify(pub, canonical((msg.kind, msg.receiver, msg.body)), msg.sender_sig)
    )


# -- customer ------------------------------------------------------------------


def customer_order(
    creds: Credentials,
    merchant_id: str,
    item: int,
    amount: int,
    temp_ids: TempIdBook,
    *,
    order_id: str,
    bank_id: str = "bank",
    quantity: int = 1,
    now: float = 0.0,
    allow_empty: bool = False,
) -> TransactionOrder:
    """Build and sign an order with a fresh temporary ID.

    ``allow_empty`` lets a customer with no endorsers still broadcast, so the
    merchant can reject it on the record.
    """
    if amount <= 0:
        raise ProtocolError("amount must be positive")
    tree = creds.tree
    if tree is None or (not tree.primaries and not allow_empty):
        raise NoEndorsers(creds.keys.owner_id)
    nonce, tsig = temp_ids.next()
    order = TransactionOrder(
        order_id, nonce, tsig, creds.keys.owner_id, merchant_id,
        tree.primary_ids, tree.secondary_ids, bank_id, item, quantity, amount,
        creds.signed_photo, creds.photo, tree, now,
    )
    sig = sign(creds.keys.private_key, order.digest(), now)
    return _with(order, customer_sig=sig)


def _with(obj, **changes):
    from dataclasses import replace

    return replace(obj, **changes)


def sign_receipt(creds: Credentials, order: TransactionOrder, now: float) -> DeliveryReceipt:
    payload = DeliveryReceipt.payload(order.order_id, order.digest())
    return DeliveryReceipt(order.order_id, order.digest(), creds.keys.owner_id, sign(creds.keys.private_key, payload, now))


# -- merchant ------------------------------------------------------------------


@dataclass
class MerchantState:
    creds: Credentials
    verify_states: dict[str, VerifyState] = field(default_factory=dict)
    accepted_coins: set[bytes] = field(default_factory=set)
    seen_orders: set[bytes] = field(default_factory=set)

    @property
    def merchant_id(self) -> str:
        return self.creds.keys.owner_id


def check_order(order: TransactionOrder, directory: Directory, merchant_id: str, now: float) -> None:
    """Raise ``Rejected`` unless the order's credentials all verify."""
    cust_pub = directory.keys.get(order.customer_id)
    if cust_pub is None or order.customer_sig is None:
        raise Rejected(C.BAD_CREDENTIAL, "unknown customer")
    if order.merchant_id != merchant_id or order.amount <= 0:
        raise Rejected(C.BAD_CREDENTIAL, "order not addressed to this merchant")
    if not verify(cust_pub, order.digest(), order.customer_sig, now):
        raise Rejected(C.BAD_CREDENTIAL, "order signature")
    if not verify_signed_photo(order.signed_photo, directory.bank_pub, cust_pub, order.photo, now):
        raise Rejected(C.BAD_CREDENTIAL, "photo")
    if not blind_verify(directory.blind_pub, order.temp_id, order.temp_id_sig):
        raise Rejected(C.BAD_CREDENTIAL, "temporary id")
    tree = order.tree
    if (
        tree.customer_id != order.customer_id
        or tree.bank_signature is None
        or not verify(directory.bank_pub, tree.payload(), tree.bank_signature)
    ):
        raise Rejected(C.BAD_CREDENTIAL, "endorsement tree")
    if order.primaries != tree.primary_ids or order.secondaries != tree.secondary_ids:
        raise Rejected(C.BAD_CREDENTIAL, "endorser list differs from tree")
    if not order.endorser_ids:
        raise Rejected(C.NO_ENDORSERS)


def merchant_process_order(
    merchant: MerchantState, order: TransactionOrder, directory: Directory, now: float, *, fanout: bool = True
) -> list[Billing]:
    """Billing messages for the order: one round to everyone, or primaries only."""
    check_order(order, directory, merchant.merchant_id, now)
    d = order.digest()
    if d in merchant.seen_orders:
        raise Rejected(C.STALE_CHAIN, "order already processed")
    merchant.seen_orders.add(d)
    targets = [(e, 1) for e in order.primaries]
    if fanout:
        targets += [(e, 2) for e in order.secondaries]
    return [
        Billing(order.order_id, d, order.temp_id, merchant.merchant_id, e, min(order.amount, order.tree.limit_of(e)), lvl)
        for e, lvl in targets
    ]


def escalate_billing(merchant: MerchantState, order: TransactionOrder) -> list[Billing]:
    """Second level of the level-by-level search baseline."""
    d = order.digest()
    return [
        Billing(order.order_id, d, order.temp_id, merchant.merchant_id, e, min(order.amount, order.tree.limit_of(e)), 2)
        for e in order.secondaries
    ]


_BROKEN_REASON = {
    "quorum": C.INSUFFICIENT_QUORUM,
    "stale": C.STALE_CHAIN,
    "link": C.STALE_CHAIN,
    "time": C.STALE_CHAIN,
    "merkle": C.BAD_CREDENTIAL,
    "bloom": C.DOUBLE_SPEND,
}


def check_endorsement(
    merchant: MerchantState,
    order: TransactionOrder,
    msg: EndorsementMessage,
    directory: Directory,
    now: float,
    *,
    quorum: int,
    staleness: float,
    bloom_m: int,
    bloom_k: int,
    similar=None,
) -> int:
    """Validate one endorsement; return the value it covers or raise ``Rejected``.

    ``similar(endorser_id, monitor_id, t)`` reports whether two devices share a
    location history; signatures from such monitors do not count.
    """
    eid = msg.endorser_id
    pub = directory.keys.get(eid)
    if eid not in order.endorser_ids or pub is None:
        raise Rejected(C.BAD_CREDENTIAL, "endorser not in tree")
    if msg.order_digest != order.digest() or msg.endorser_sig is None:
        raise Rejected(C.BAD_CREDENTIAL, "order digest")
    if not verify(pub, canonical(msg.body()), msg.endorser_sig, now):
        raise Rejected(C.BAD_CREDENTIAL, "endorser signature")
    if not msg.coins or msg.endorsed_value <= 0:
        raise Rejected(C.INSUFFICIENT_COVER, "no coin attached")
    for coin in msg.coins:
        if coin.endorser_id != eid or not coin_is_valid(coin, directory.bank_pub, now):
            raise Rejected(C.BAD_CREDENTIAL, "coin signature")
    if sum(c.value for c in msg.coins) < msg.endorsed_value:
        raise Rejected(C.INSUFFICIENT_COVER, "coins below endorsed value")
    if msg.endorsed_value > order.tree.limit_of(eid):
        raise Rejected(C.INSUFFICIENT_COVER, "endorsement above agreed limit")
    if not msg.chain or now - msg.chain[-1].timestamp > staleness:
        raise Rejected(C.STALE_CHAIN, "chain not fresh")
    spend = msg.chain[-1]
    if spend.event.kind != "spend" or set(spend.event.spent_ids) != {c.coin_id for c in msg.coins}:
        raise Rejected(C.BAD_CREDENTIAL, "spend block does not match coins")
    signers = _quorum_signers(spend, eid, directory.keys)
    if len(signers) < quorum:
        raise Rejected(C.INSUFFICIENT_QUORUM, "spend block lacks monitor quorum")
    if any(c.coin_id in merchant.accepted_coins for c in msg.coins):
        raise Rejected(C.DOUBLE_SPEND, "coin already accepted")

    state = merchant.verify_states.get(eid)
    if state is None:
        state = initial_state(eid, bloom_m, bloom_k)
    else:
        # fork / replay screen against what this merchant already accepted
        if state.count > len(msg.chain) - 1 or (state.count and msg.chain[state.count - 1].hash() != state.prev_hash):
            raise Rejected(C.STALE_CHAIN, "chain diverges from verified prefix")
    trial = VerifyState(state.prev_hash, state.filter.copy(), state.count, state.last_timestamp)
    verdict = verify_blocks(msg.chain[:-1], eid, trial, directory.keys, quorum, staleness)
    if isinstance(verdict, Broken):
        raise Rejected(_BROKEN_REASON.get(verdict.reason, C.BAD_CREDENTIAL), f"block {verdict.index}")
    if trial.filter.anchor() != msg.filter_before.anchor():
        raise Rejected(C.DOUBLE_SPEND, "filter does not match chain")
    if any(c.coin_id in trial.filter for c in msg.coins):
        raise Rejected(C.DOUBLE_SPEND, "coin already spent")
    if similar is not None and any(similar(eid, m, spend.timestamp) for m in sorted(signers)):
        raise Rejected(C.SIMILAR_LOCATION, "monitor shares the endorser's location history")
    verdict = verify_blocks(msg.chain, eid, trial, directory.keys, quorum, staleness)
    if isinstance(verdict, Broken):
        raise Rejected(_BROKEN_REASON.get(verdict.reason, C.BAD_CREDENTIAL), f"block {verdict.index}")
    merchant.verify_states[eid] = trial
    return msg.endorsed_value


def _quorum_signers(block: Block, owner_id: str, keys: Mapping[str, PublicKey]) -> set[str]:
    payload = block.payload()
    return {
        m for m, sig in block.monitor_signatures
        if m != owner_id and m in keys and verify(keys[m], payload, sig)
    }


@dataclass(frozen=True)
class Accept:
    order_id: str
    covered: int
    endorsements: tuple[EndorsementMessage, ...]


@dataclass(frozen=True)
class Reject:
    order_id: str
    reason: str


def merchant_accept(
    merchant: MerchantState,
    order: TransactionOrder,
    endorsements: Iterable[EndorsementMessage],
    directory: Directory,
    now: float,
    **check_kw,
) -> Accept | Reject:
    """Validate every endorsement; accept if the valid ones cover the amount."""
    covered = 0
    used = []
    reasons = []
    for msg in endorsements:
        try:
            covered += check_endorsement(merchant, order, msg, directory, now, **check_kw)
        except Rejected as r:
            reasons.append(r.reason)
            continue
        used.append(msg)
    if used and covered >= order.amount:
        for m in used:
            merchant.accepted_coins.update(c.coin_id for c in m.coins)
        return Accept(order.order_id, covered, tuple(used))
    return Reject(order.order_id, reasons[-1] if reasons and not used else C.INSUFFICIENT_COVER)


# -- endorser --------------------------------------------------------------------


@dataclass
class EndorserState:
    creds: Credentials
    chain: EventChain
    wallet: dict[bytes, ECoin]
    coin_origin: dict[bytes, int]
    pending_receipts: list[ECoin] = field(default_factory=list)
    _unspent: tuple = field(default=(None, ()), repr=False, compare=False)

    @property
    def endorser_id(self) -> str:
        return self.creds.keys.owner_id

    def unspent(self, now: float):
        """Unspent, unexpired coins in spending order, checked lazily against the filter."""
        if self._unspent[0] != len(self.wallet):
            self._unspent = (len(self.wallet), tuple(sorted(self.wallet.values(), key=lambda c: (c.expiry, c.coin_id))))
        for c in self._unspent[1]:
            if c.expiry >= now and c.coin_id not in self.chain.filter:
                yield c

    def available(self, now: float) -> list[ECoin]:
        return list(self.unspent(now))


def new_endorser_state(creds: Credentials, bloom_n: int, bloom_fpr: float) -> EndorserState:
    chain = EventChain(creds.keys.owner_id, bloom_new(bloom_n, bloom_fpr))
    return EndorserState(creds, chain, {}, {}, list(creds.coins))


@dataclass(frozen=True)
class EndorsementDraft:
    billing: Billing
    proposal: Block
    coins: tuple[ECoin, ...]
    endorsed_value: int
    snapshot: tuple[Block, ...]
    filter_before: SpentCoinFilter


def endorser_prepare(
    e: EndorserState,
    billing: Billing,
    now: float,
    gps: tuple[float, float],
    *,
    staleness: float,
    coins: Sequence[ECoin] | None = None,
) -> EndorsementDraft:
    """Pick coins and propose the spend block; raise ``Rejected`` to refuse.

    ``coins`` overrides the honest coin choice (used by adversary scripts).
    """
    if billing.endorser_id != e.endorser_id:
        raise Rejected(C.BAD_CREDENTIAL, "billing for another endorser")
    if not e.chain.is_fresh(now, staleness):
        raise Rejected(C.STALE_CHAIN, "own chain is stale")
    value = billing.amount
    if coins is None:
        chosen, total = [], 0
        for c in e.unspent(now):
            if total >= value:
                break
            chosen.append(c)
            total += c.value
        if total < value:
            raise Rejected(C.INSUFFICIENT_COINS, "not enough unspent coins")
        coins = chosen
    event = Event("spend", tuple(c.record() for c in coins))
    proposal = e.chain.propose(event, gps, now)
    return EndorsementDraft(billing, proposal, tuple(coins), value, e.chain.snapshot(), e.chain.filter.copy())


@dataclass
class MonitorState:
    creds: Credentials
    last_seen: dict[str, tuple[int, bytes]] = field(default_factory=dict)

    @property
    def monitor_id(self) -> str:
        return self.creds.keys.owner_id


def monitor_countersign(
    mon: MonitorState,
    endorser_id: str,
    proposal: Block,
    snapshot: Sequence[Block],
    filter_before: SpentCoinFilter,
    coins: Sequence[ECoin],
    amount: int,
    directory: Directory,
    now: float,
    *,
    quorum: int,
    staleness: float,
    exclude: Iterable[str] = (),
    similar: bool = False,
) -> tuple[str, Signature]:
    """Reduced check of an endorser's next block; sign it or raise ``Rejected``."""
    mid = mon.monitor_id
    if mid == endorser_id or mid in set(exclude):
        raise Rejected(C.BAD_CREDENTIAL, "party to the transaction")
    if similar:
        raise Rejected(C.SIMILAR_LOCATION, "location history matches endorser")
    if not snapshot:
        raise Rejected(C.STALE_CHAIN, "empty chain")
    head = snapshot[-1]
    seen = mon.last_seen.get(endorser_id)
    if seen is not None:
        idx, h = seen
        if len(snapshot) <= idx or snapshot[idx].hash() != h:
            raise Rejected(C.STALE_CHAIN, "chain rolled back or forked")
    if proposal.prev_hash != head.hash() or proposal.timestamp <= head.timestamp:
        raise Rejected(C.STALE_CHAIN, "proposal does not extend head")
    if proposal.event.kind not in ("hello", "receipt") and proposal.timestamp - head.timestamp > staleness:
        raise Rejected(C.STALE_CHAIN, "chain is stale")
    if len(_quorum_signers(head, endorser_id, directory.keys)) < quorum:
        raise Rejected(C.INSUFFICIENT_QUORUM, "head lacks quorum")
    if filter_before.anchor() != head.bloom_anchor:
        raise Rejected(C.DOUBLE_SPEND, "filter does not match head anchor")
    if proposal.event.kind == "spend":
        for c in coins:
            if c.endorser_id != endorser_id or not coin_is_valid(c, directory.bank_pub, now):
                raise Rejected(C.BAD_CREDENTIAL, "coin signature")
        if any(c.coin_id in filter_before for c in coins):
            raise Rejected(C.DOUBLE_SPEND, "coin already in spent filter")
        if sum(c.value for c in coins) < amount or not coins:
            raise Rejected(C.INSUFFICIENT_COVER, "coins below amount")
        if set(proposal.event.spent_ids) != {c.coin_id for c in coins}:
            raise Rejected(C.BAD_CREDENTIAL, "block does not record the attached coins")
    after = filter_before.copy()
    for cid in proposal.event.spent_ids:
        after.add(cid)
    if after.anchor() != proposal.bloom_anchor or proposal.merkle_root != proposal.event.merkle_root():
        raise Rejected(C.BAD_CREDENTIAL, "proposal digests do not match")
    mon.last_seen[endorser_id] = (len(snapshot) - 1, head.hash())
    return mid, sign(mon.creds.keys.private_key, proposal.payload(), now)


def endorser_finalize(
    e: EndorserState,
    draft: EndorsementDraft,
    signatures: Sequence[tuple[str, Signature]],
    directory: Directory,
    *,
    quorum: int,
    staleness: float,
    allow_short: bool = False,
) -> EndorsementMessage:
    """Link the countersigned spend block and emit the endorsement.

    ``allow_short`` skips the local quorum check; only adversary scripts use it.
    """
    if len({m for m, _ in signatures}) < quorum and not allow_short:
        raise Rejected(C.INSUFFICIENT_QUORUM, "not enough monitors signed")
    try:
        if allow_short:
            chain_append(e.chain, draft.proposal, signatures, directory.keys, 0, staleness)
        else:
            chain_append(e.chain, draft.proposal, signatures, directory.keys, quorum, staleness)
    except LedgerError as exc:
        raise Rejected(C.STALE_CHAIN, str(exc)) from exc
    origin = min((e.coin_origin.get(c.coin_id, 0) for c in draft.coins), default=0)
    for c in draft.coins:
        e.wallet.pop(c.coin_id, None)
    msg = EndorsementMessage(
        e.endorser_id, draft.billing.order_id, draft.billing.order_digest, draft.coins,
        draft.endorsed_value, e.chain.snapshot(), draft.filter_before, origin,
    )
    sig = sign(e.creds.keys.private_key, canonical(msg.body()))
    return _with(msg, endorser_sig=sig)


def endorser_endorse(
    e: EndorserState,
    billing: Billing,
    now: float,
    monitors: Sequence[MonitorState],
    directory: Directory,
    *,
    gps: tuple[float, float] = (0.0, 0.0),
    quorum: int = 3,
    staleness: float = 60.0,
    exclude: Iterable[str] = (),
) -> EndorsementMessage | Refusal:
    """The whole endorsement step with co-located monitors and no transit delay."""
    try:
        draft = endorser_prepare(e, billing, now, gps, staleness=staleness)
        sigs = []
        for mon in monitors:
            try:
                sigs.append(monitor_countersign(
                    mon, e.endorser_id, draft.proposal, draft.snapshot, draft.filter_before,
                    draft.coins, draft.endorsed_value, directory, now,
                    quorum=quorum, staleness=staleness, exclude=exclude,
                ))
            except Rejected:
                continue
        return endorser_finalize(e, draft, sigs, directory, quorum=quorum, staleness=staleness)
    except Rejected as r:
        return Refusal(e.endorser_id, billing.order_id, r.reason)


def hello_exchange(
    e: EndorserState,
    monitors: Sequence[MonitorState],
    directory: Directory,
    now: float,
    *,
    gps: tuple[float, float] = (0.0, 0.0),
    quorum: int = 3,
    staleness: float = 60.0,
) -> Block | None:
    """Append a hello block (or a receipt block for delivered coins) if a quorum is in range.

    The first block of a chain is the genesis block carrying the opening coins.
    """
    if len(monitors) < quorum:
        return None
    if not e.chain.blocks:
        kind = "genesis"
    elif e.pending_receipts:
        kind = "receipt"
    else:
        kind = "hello"
    coins = tuple(e.pending_receipts) if kind != "hello" else ()
    proposal = e.chain.propose(Event(kind, tuple(c.record() for c in coins)), gps, now)
    payload = proposal.payload()
    sigs = [(m.monitor_id, sign(m.creds.keys.private_key, payload, now)) for m in monitors[:quorum]]
    chain_append(e.chain, proposal, sigs, directory.keys, quorum, staleness)
    for c in coins:
        e.wallet[c.coin_id] = c
        e.coin_origin[c.coin_id] = len(e.chain) - 1
    e.pending_receipts.clear()
    for m in monitors[:quorum]:
        m.last_seen[e.endorser_id] = (len(e.chain) - 1, e.chain.blocks[-1].hash())
    return e.chain.blocks[-1]


def location_similarity(
    history_a: np.ndarray,
    history_b: np.ndarray,
    epsilon: float = 10.0,
    threshold: float = 0.9,
    min_shared: int = 6,
) -> bool:
    """Similar iff reported positions agree within ``epsilon`` at >= ``threshold`` of shared samples.

    Histories are (T, 2) arrays aligned on the hello cadence; NaN rows mark
    samples a device did not report.
    """
    a = np.asarray(history_a, dtype=float)
    b = np.asarray(history_b, dtype=float)
    n = min(len(a), len(b))
    a, b = a[-n:], b[-n:]
    shared = ~(np.isnan(a).any(axis=1) | np.isnan(b).any(axis=1))
    if shared.sum() < min_shared:
        return False
    close = np.hypot(*(a[shared] - b[shared]).T) <= epsilon
    return bool(close.mean() >= threshold)


# -- settlement ----------------------------------------------------------------


@dataclass(frozen=True)
class Settlement:
    postings: tuple[Posting, ...]
    reissue: dict[str, tuple[ECoin, ...]]
    payer: str  # "customer" or "endorsers"


def incentive_pool(amount: int, pct: float) -> int:
    return int(math.floor(amount * pct / 100 + 1e-9))


def split_incentive(pool: int, weights: Mapping[str, int]) -> dict[str, int]:
    """Proportional integer split; leftover cents go to the largest remainders, ties by id."""
    total = sum(weights.values())
    if pool == 0 or total == 0:
        return {k: 0 for k in weights}
    base = {k: pool * w // total for k, w in weights.items()}
    left = pool - sum(base.values())
    order = sorted(weights, key=lambda k: (-(pool * weights[k] % total), k))
    for k in order[:left]:
        base[k] += 1
    return base


def _guarantor_weights(endorsements: Iterable[EndorsementMessage]) -> dict[str, int]:
    w: dict[str, int] = {}
    for m in endorsements:
        w[m.endorser_id] = w.get(m.endorser_id, 0) + m.endorsed_value
    return w


def bank_settle(bank: Bank, bundle: SettlementBundle, now: float, dispute_window: float) -> Settlement:
    """Post the payment, fund the escrow and reissue endorser coins."""
    st = bank.state
    order = bundle.order
    oid = order.order_id
    amount = order.amount
    before = len(st.postings)
    escrow_acct = f"escrow:{oid}"
    payers: dict[str, int] = {}

    # coins attached by every signing endorser are redeemed once
    attached: dict[str, int] = {}
    for m in bundle.endorsements:
        for c in m.coins:
            if c.coin_id in st.redeemed or c.coin_id not in st.coins:
                continue
            st.redeemed.add(c.coin_id)
            del st.coins[c.coin_id]
            attached[m.endorser_id] = attached.get(m.endorser_id, 0) + c.value

    cust = order.customer_id
    if cust not in st.defaulting and st.accounts.get(cust, 0) >= amount:
        st.transfer(cust, escrow_acct, amount, "customer payment", now, oid)
        payers[cust] = amount
        payer = "customer"
    else:
        remaining = amount
        signers = _guarantor_weights(bundle.endorsements)
        tree = order.tree
        for level in (1, 2):
            for eid in (order.primaries if level == 1 else order.secondaries):
                if remaining == 0 or eid not in signers:
                    continue
                charge = min(remaining, tree.limit_of(eid), st.locked.get(eid, 0))
                st.transfer(f"locked:{eid}", escrow_acct, charge, f"default level {level}", now, oid)
                payers[f"locked:{eid}"] = payers.get(f"locked:{eid}", 0) + charge
                remaining -= charge
        payer = "endorsers"
        if remaining:
            # unreachable with honest cover; recorded so conservation still balances
            st.transfer("world", escrow_acct, remaining, "uncovered shortfall", now, oid)
            payers["world"] = remaining

    pool = incentive_pool(amount, bank.incentive_pct)
    shares = split_incentive(pool, _guarantor_weights(bundle.endorsements))
    for eid in sorted(shares):
        st.transfer(escrow_acct, eid, shares[eid], "incentive", now, oid)

    st.escrow[oid] = Escrow(
        oid, order.merchant_id, amount - pool, payers, now + dispute_window,
        bundle.receipt, order.digest(), cust,
    )

    reissue: dict[str, tuple[ECoin, ...]] = {}
    for eid in sorted(attached):
        charged = payers.get(f"locked:{eid}", 0)
        back = attached[eid] - charged
        if back > 0:
            reissue[eid] = tuple(bank.issue_coins(eid, back))
    return Settlement(tuple(st.postings[before:]), reissue, payer)


def dispute(bank: Bank, order_id: str, claim: DisputeClaim | None, now: float) -> str:
    """Resolve an escrow: ``release`` to the merchant or ``refund`` to the payers."""
    st = bank.state
    esc = st.escrow[order_id]
    if esc.settled:
        raise ProtocolError(f"escrow {order_id} already resolved")
    if claim is None:
        if now < esc.deadline:
            raise ProtocolError("deadline not reached and no claim filed")
        outcome = "release"
    else:
        if claim.filed_at > esc.deadline:
            raise LateClaim(order_id)
        rec = esc.receipt
        ok = (
            rec is not None
            and rec.order_digest == esc.order_digest
            and esc.customer_id in bank.public_keys
            and verify(bank.public_keys[esc.customer_id], DeliveryReceipt.payload(order_id, rec.order_digest), rec.signature)
        )
        outcome = "release" if ok else "refund"
    acct = f"escrow:{order_id}"
    if outcome == "release":
        st.transfer(acct, esc.merchant_id, esc.amount, "escrow release", now, order_id)
    else:
        total = sum(esc.payers.values())
        refunds = split_incentive(esc.amount, esc.payers)
        for payer in sorted(refunds):
            dst = payer[7:] if payer.startswith("locked:") else payer
            st.transfer(acct, dst, refunds[payer], "refund", now, order_id)
        assert total >= esc.amount
    esc.settled = True
    return outcome


def release_due(bank: Bank, now: float) -> list[str]:
    done = []
    for oid in sorted(bank.state.escrow):
        esc = bank.state.escrow[oid]
        if not esc.settled and now >= esc.deadline:
            dispute(bank, oid, None, now)
            done.append(oid)
    return done


def online_settlement_oracle(
    bank: Bank, order: TransactionOrder, guarantors: Mapping[str, int]
) -> list[tuple[str, str, int]]:
    """Direct online payment for a solvent customer, as (src, dst, amount) transfers."""
    st = bank.state
    if st.accounts.get(order.customer_id, 0) < order.amount or order.customer_id in st.defaulting:
        raise InsufficientBalance(order.customer_id)
    esc = f"escrow:{order.order_id}"
    pool = incentive_pool(order.amount, bank.incentive_pct)
    out = [(order.customer_id, esc, order.amount)]
    shares = split_incentive(pool, guarantors)
    out += [(esc, eid, shares[eid]) for eid in sorted(shares) if shares[eid]]
    return out


def net_postings(postings: Iterable[Posting]) -> dict[str, int]:
    net: dict[str, int] = {}
    for p in postings:
        net[p.src] = net.get(p.src, 0) - p.amount
        net[p.dst] = net.get(p.dst, 0) + p.amount
    return {k: v for k, v in sorted(net.items()) if v}


def conservation(bank: Bank) -> dict[str, int]:
    """Totals per flow category; debits must equal credits."""
    cats = {"customer_debits": 0, "endorser_debits": 0, "merchant_credits": 0, "incentives": 0, "refunds": 0, "escrow_held": 0}
    for p in bank.state.postings:
        if p.memo == "customer payment":
            cats["customer_debits"] += p.amount
        elif p.memo.startswith("default level"):
            cats["endorser_debits"] += p.amount
        elif p.memo == "uncovered shortfall":
            cats["endorser_debits"] += p.amount
        elif p.memo == "escrow release":
            cats["merchant_credits"] += p.amount
        elif p.memo == "incentive":
            cats["incentives"] += p.amount
        elif p.memo == "refund":
            cats["refunds"] += p.amount
    cats["escrow_held"] = sum(e.amount for e in bank.state.escrow.values() if not e.settled)
    return cats


def conservation_holds(bank: Bank) -> bool:
    c = conservation(bank)
    return c["customer_debits"] + c["endorser_debits"] == (
        c["merchant_credits"] + c["incentives"] + c["refunds"] + c["escrow_held"]
    )
