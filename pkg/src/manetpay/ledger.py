"""E-coins, the spent-coin Bloom filter, Merkle roots and the event chain.

An event chain is a per-owner, append-only sequence of blocks.  Each block
links to the previous one by hash and carries the Merkle root of its event
payload plus the digest ("bloom anchor") of the owner's spent-coin filter after
the block.  A quorum of distinct monitors other than the owner countersigns
``(prev_hash, merkle_root, bloom_anchor, gps, timestamp)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

from . import constants as C
from .crypto import PrivateKey, PublicKey, Signature, digest, sign, verify


class LedgerError(Exception):
    pass


class InvalidParameter(LedgerError):
    pass


class EmptyLeaves(LedgerError):
    pass


class StaleChain(LedgerError):
    pass


class InsufficientQuorum(LedgerError):
    pass


class NonMonotonicTime(LedgerError):
    pass


class OwnerAsMonitor(LedgerError):
    pass


class InvalidChain(LedgerError):
    pass


DEFAULT_STALENESS_S = 60.0
DEFAULT_QUORUM = 3


def quorum_for_colluders(n_colluders: int) -> int:
    """Monitor count that tolerates ``n_colluders`` colluding parties."""
    return 3 * n_colluders + 1


# -- e-coins ---------------------------------------------------------------


@dataclass(frozen=True)
class ECoin:
    coin_id: bytes
    endorser_id: str
    value: int
    expiry: float
    bank_signature: Signature

    def payload(self) -> bytes:
        return coin_payload(self.coin_id, self.endorser_id, self.value, self.expiry)

    def record(self) -> "CoinRecord":
        return CoinRecord(self.coin_id, self.value, self.expiry)


def coin_payload(coin_id: bytes, endorser_id: str, value: int, expiry: float) -> bytes:
    return b"coin" + coin_id + endorser_id.encode() + struct.pack(">qd", value, expiry)


def issue_coin(bank_key: PrivateKey, coin_id: bytes, endorser_id: str, value: int, expiry: float) -> ECoin:
    if len(coin_id) != C.COIN_ID_BYTES:
        raise InvalidParameter("coin id must be 8 bytes")
    if value <= 0:
        raise InvalidParameter("coin value must be positive")
    return ECoin(coin_id, endorser_id, value, expiry, sign(bank_key, coin_payload(coin_id, endorser_id, value, expiry)))


def coin_is_valid(coin: ECoin, bank_pub: PublicKey, now: float) -> bool:
    return coin.value > 0 and now <= coin.expiry and verify(bank_pub, coin.payload(), coin.bank_signature)


@dataclass(frozen=True)
class CoinRecord:
    """What a full-mode block stores per coin."""

    coin_id: bytes
    value: int
    expiry: float

    def to_bytes(self) -> bytes:
        return self.coin_id + struct.pack(">Id", self.value, self.expiry)

    @classmethod
    def from_bytes(cls, b: bytes) -> "CoinRecord":
        value, expiry = struct.unpack(">Id", b[C.COIN_ID_BYTES:C.COIN_RECORD_BYTES])
        return cls(b[:C.COIN_ID_BYTES], value, expiry)


# -- Bloom filter --------------------------------------------------------------


@lru_cache(maxsize=1 << 16)
def _bloom_positions(m: int, k: int, coin_id: bytes) -> tuple[int, ...]:
    h = digest(b"bloom" + coin_id)
    h1 = int.from_bytes(h[:8], "big")
    h2 = int.from_bytes(h[8:16], "big") | 1
    return tuple((h1 + i * h2) % m for i in range(k))


@dataclass
class SpentCoinFilter:
    m: int
    k: int
    bits: int = 0
    inserted_count: int = 0

    def positions(self, coin_id: bytes) -> tuple[int, ...]:
        return _bloom_positions(self.m, self.k, coin_id)

    def add(self, coin_id: bytes) -> None:
        for p in self.positions(coin_id):
            self.bits |= 1 << p
        self.inserted_count += 1

    def __contains__(self, coin_id: bytes) -> bool:
        return all(self.bits >> p & 1 for p in self.positions(coin_id))

    def copy(self) -> "SpentCoinFilter":
        return SpentCoinFilter(self.m, self.k, self.bits, self.inserted_count)

    def to_bytes(self) -> bytes:
        return self.bits.to_bytes((self.m + 7) // 8, "big")

    @property
    def size_bytes(self) -> int:
        return (self.m + 7) // 8

    def anchor(self) -> bytes:
        return digest(struct.pack(">II", self.m, self.k) + self.to_bytes())


def bloom_sizing(n_expected: int, target_fpr: float) -> tuple[int, int]:
    if not 0 < target_fpr < 1 or n_expected <= 0:
        raise InvalidParameter("need n_expected > 0 and 0 < target_fpr < 1")
    m = math.ceil(-n_expected * math.log(target_fpr) / math.log(2) ** 2)
    k = max(1, round(m / n_expected * math.log(2)))
    return m, k


def bloom_new(n_expected: int, target_fpr: float) -> SpentCoinFilter:
    m, k = bloom_sizing(n_expected, target_fpr)
    return SpentCoinFilter(m, k)


def bloom_insert(f: SpentCoinFilter, coin_id: bytes) -> SpentCoinFilter:
    f.add(coin_id)
    return f


def bloom_query(f: SpentCoinFilter, coin_id: bytes) -> bool:
    return coin_id in f


# -- Merkle tree ---------------------------------------------------------------


def _pair(left: bytes, right: bytes) -> bytes:
    return digest(left + right)


def _levels(leaves: Sequence[bytes]) -> list[list[bytes]]:
    if not leaves:
        raise EmptyLeaves("merkle tree needs at least one leaf")
    levels = [list(leaves)]
    level = list(leaves)
    while True:
        if len(level) % 2:
            level = level + [level[-1]]
        level = [_pair(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        levels.append(level)
        if len(level) == 1:
            return levels


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    """Root with the last node duplicated on odd levels; one leaf gives H(L || L)."""
    return _levels(leaves)[-1][0]


def merkle_proof(leaves: Sequence[bytes], index: int) -> list[tuple[bytes, bool]]:
    """Sibling path for ``leaves[index]``; the flag is True when the sibling sits on the left."""
    proof = []
    for level in _levels(leaves)[:-1]:
        if len(level) % 2:
            level = level + [level[-1]]
        sibling = index ^ 1
        proof.append((level[sibling], sibling < index))
        index //= 2
    return proof


def merkle_verify(leaf: bytes, proof: Sequence[tuple[bytes, bool]], root: bytes) -> bool:
    node = leaf
    for sibling, on_left in proof:
        node = _pair(sibling, node) if on_left else _pair(node, sibling)
    return node == root


@dataclass(frozen=True)
class MerkleTree:
    leaves: tuple[bytes, ...]

    @property
    def root(self) -> bytes:
        return merkle_root(self.leaves)

    def proof(self, index: int) -> list[tuple[bytes, bool]]:
        return merkle_proof(self.leaves, index)


# -- events and blocks ---------------------------------------------------------

EVENT_KINDS = ("genesis", "hello", "spend", "receipt")


@dataclass(frozen=True)
class Event:
    kind: str
    coins: tuple[CoinRecord, ...] = ()

    def leaves(self) -> list[bytes]:
        tag = bytes([EVENT_KINDS.index(self.kind)])
        if not self.coins:
            return [digest(b"event" + tag)]
        return [digest(b"event" + tag + c.to_bytes()) for c in self.coins]

    def merkle_root(self) -> bytes:
        return merkle_root(self.leaves())

    @property
    def spent_ids(self) -> tuple[bytes, ...]:
        return tuple(c.coin_id for c in self.coins) if self.kind == "spend" else ()


def block_payload(prev_hash: bytes, merkle: bytes, anchor: bytes, gps: tuple[float, float], timestamp: float) -> bytes:
    return prev_hash + merkle + anchor + struct.pack(">ffd", gps[0], gps[1], timestamp)


@dataclass(frozen=True)
class Block:
    prev_hash: bytes
    event: Event
    gps: tuple[float, float]
    timestamp: float
    merkle_root: bytes
    bloom_anchor: bytes
    monitor_signatures: tuple[tuple[str, Signature], ...] = ()

    def payload(self) -> bytes:
        return block_payload(self.prev_hash, self.merkle_root, self.bloom_anchor, self.gps, self.timestamp)

    def hash(self) -> bytes:
        return digest(self.payload())


def genesis_hash(owner_id: str) -> bytes:
    return digest(b"genesis" + owner_id.encode())


def _f32(x: float) -> float:
    return struct.unpack(">f", struct.pack(">f", x))[0]


@dataclass
class EventChain:
    owner_id: str
    filter: SpentCoinFilter
    blocks: list[Block] = field(default_factory=list)

    @property
    def last_hash(self) -> bytes:
        return self.blocks[-1].hash() if self.blocks else genesis_hash(self.owner_id)

    @property
    def last_timestamp(self) -> float:
        return self.blocks[-1].timestamp if self.blocks else -math.inf

    def __len__(self) -> int:
        return len(self.blocks)

    def is_fresh(self, now: float, staleness_window: float = DEFAULT_STALENESS_S) -> bool:
        return bool(self.blocks) and now - self.blocks[-1].timestamp <= staleness_window

    def snapshot(self) -> tuple[Block, ...]:
        return tuple(self.blocks)

    def propose(self, event: Event, gps: tuple[float, float], timestamp: float) -> Block:
        """Unsigned next block; the bloom anchor reflects the filter after this event."""
        after = self.filter.copy()
        for cid in event.spent_ids:
            after.add(cid)
        gps = (_f32(gps[0]), _f32(gps[1]))
        return Block(self.last_hash, event, gps, timestamp, event.merkle_root(), after.anchor())


def countersign(monitor_key: PrivateKey, block: Block) -> tuple[str, Signature]:
    return monitor_key.owner_id, sign(monitor_key, block.payload())


def _valid_signers(
    block: Block, owner_id: str, keyring: Mapping[str, PublicKey]
) -> tuple[set[str], bool]:
    """Distinct monitors whose signature verifies; flag is set if the owner signed."""
    good: set[str] = set()
    owner_signed = False
    payload = block.payload()
    for mid, sig in block.monitor_signatures:
        if mid == owner_id:
            owner_signed = True
            continue
        pub = keyring.get(mid)
        if pub is not None and verify(pub, payload, sig):
            good.add(mid)
    return good, owner_signed


def chain_append(
    chain: EventChain,
    block: Block,
    monitor_signatures: Iterable[tuple[str, Signature]],
    keyring: Mapping[str, PublicKey],
    quorum: int = DEFAULT_QUORUM,
    staleness_window: float = DEFAULT_STALENESS_S,
) -> EventChain:
    """Attach ``monitor_signatures`` to a proposed block and link it in.

    A hello block may revalidate a stale chain; any other event on a stale chain
    raises StaleChain.
    """
    signed = Block(
        block.prev_hash, block.event, block.gps, block.timestamp,
        block.merkle_root, block.bloom_anchor, tuple(monitor_signatures),
    )
    if signed.prev_hash != chain.last_hash:
        raise InvalidChain("block does not extend the chain head")
    if chain.blocks and signed.timestamp <= chain.last_timestamp:
        raise NonMonotonicTime(f"{signed.timestamp} <= {chain.last_timestamp}")
    if (
        chain.blocks
        and signed.event.kind not in ("hello", "receipt")
        and not chain.is_fresh(signed.timestamp, staleness_window)
    ):
        raise StaleChain(f"chain of {chain.owner_id} is stale")
    good, owner_signed = _valid_signers(signed, chain.owner_id, keyring)
    if owner_signed:
        raise OwnerAsMonitor(f"{chain.owner_id} countersigned its own block")
    if len(good) < quorum:
        raise InsufficientQuorum(f"{len(good)} of {quorum} monitor signatures")
    for cid in signed.event.spent_ids:
        chain.filter.add(cid)
    if chain.filter.anchor() != signed.bloom_anchor:
        raise InvalidChain("bloom anchor does not match filter")
    chain.blocks.append(signed)
    return chain


# -- verification --------------------------------------------------------------


@dataclass(frozen=True)
class Valid:
    def __bool__(self) -> bool:
        return True


@dataclass(frozen=True)
class Broken:
    reason: str
    index: int

    def __bool__(self) -> bool:
        return False


@dataclass
class VerifyState:
    """Running state of a verifier that has accepted a chain prefix."""

    prev_hash: bytes
    filter: SpentCoinFilter
    count: int = 0
    last_timestamp: float = -math.inf


def initial_state(owner_id: str, m: int, k: int) -> VerifyState:
    return VerifyState(genesis_hash(owner_id), SpentCoinFilter(m, k))


def verify_blocks(
    blocks: Sequence[Block],
    owner_id: str,
    state: VerifyState,
    keyring: Mapping[str, PublicKey],
    quorum: int = DEFAULT_QUORUM,
    staleness_window: float = DEFAULT_STALENESS_S,
) -> Valid | Broken:
    """Check ``blocks[state.count:]`` and advance ``state`` over the good ones."""
    for i in range(state.count, len(blocks)):
        b = blocks[i]
        if b.prev_hash != state.prev_hash:
            return Broken("link", i)
        if b.merkle_root != b.event.merkle_root():
            return Broken("merkle", i)
        if b.timestamp <= state.last_timestamp:
            return Broken("time", i)
        if (
            i > 0
            and b.event.kind not in ("hello", "receipt")
            and b.timestamp - state.last_timestamp > staleness_window
        ):
            return Broken("stale", i)
        nxt = state.filter.copy()
        for cid in b.event.spent_ids:
            nxt.add(cid)
        if nxt.anchor() != b.bloom_anchor:
            return Broken("bloom", i)
        good, owner_signed = _valid_signers(b, owner_id, keyring)
        if owner_signed or len(good) < quorum:
            return Broken("quorum", i)
        state.prev_hash = b.hash()
        state.filter = nxt
        state.count = i + 1
        state.last_timestamp = b.timestamp
    return Valid()


def chain_verify(
    chain: EventChain,
    now: float,
    keyring: Mapping[str, PublicKey],
    quorum: int = DEFAULT_QUORUM,
    staleness_window: float = DEFAULT_STALENESS_S,
) -> Valid | Broken:
    if not chain.blocks:
        return Broken("empty", 0)
    state = initial_state(chain.owner_id, chain.filter.m, chain.filter.k)
    verdict = verify_blocks(chain.blocks, chain.owner_id, state, keyring, quorum, staleness_window)
    if not verdict:
        return verdict
    if now - chain.blocks[-1].timestamp > staleness_window:
        return Broken("stale", len(chain.blocks) - 1)
    return verdict


def is_double_spent(coin_id: bytes, f: SpentCoinFilter, chain: EventChain | Sequence[Block]) -> bool:
    """Bloom verdict for ``coin_id``; the filter must match the chain head's anchor."""
    blocks = chain.blocks if isinstance(chain, EventChain) else chain
    if blocks and blocks[-1].bloom_anchor != f.anchor():
        raise InvalidChain("filter does not match the chain's bloom anchor")
    return coin_id in f


def spent_by_scan(coin_id: bytes, chain: EventChain | Sequence[Block]) -> bool:
    blocks = chain.blocks if isinstance(chain, EventChain) else chain
    return any(coin_id in b.event.spent_ids for b in blocks)


def replay_filter(chain: EventChain) -> SpentCoinFilter:
    f = SpentCoinFilter(chain.filter.m, chain.filter.k)
    for b in chain.blocks:
        for cid in b.event.spent_ids:
            f.add(cid)
    return f


# -- sizes -----------------------------------------------------------------------

FULL = "full"
LIGHTWEIGHT = "lightweight"


def event_size_bytes(event: Event, mode: str) -> int:
    if mode == FULL:
        return C.EVENT_KIND_BYTES + C.COUNT_BYTES + C.COIN_RECORD_BYTES * len(event.coins)
    if mode == LIGHTWEIGHT:
        # Coin-free events have a constant Merkle root and leave the filter
        # unchanged, so both digests are implied by the previous block.
        return C.EVENT_KIND_BYTES + (2 * C.DIGEST_BYTES if event.coins else 0)
    raise ValueError(f"unknown mode {mode!r}")


def block_size_bytes(b: Block, mode: str, monitor_view: bool = False) -> int:
    """Bytes of ``b`` under the canonical layout.

    Full mode ships the coin records of the event; lightweight mode ships the
    Merkle root and bloom anchor in their place.  The monitor view adds the
    requester's signature that accompanies every countersign request.
    Monitor signatures travel in the fixed message envelope and are not counted.
    """
    size = C.BLOCK_HEADER_BYTES + event_size_bytes(b.event, mode)
    if monitor_view:
        size += C.SIGNATURE_BYTES
    return size


def chain_size_bytes(blocks: Iterable[Block], mode: str) -> int:
    return sum(block_size_bytes(b, mode) for b in blocks)


# -- canonical serialization -------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack(">H", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise InvalidChain("truncated chain encoding")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def string(self) -> str:
        try:
            return self.take(self.u16()).decode()
        except UnicodeDecodeError as exc:
            raise InvalidChain("bad identifier encoding") from exc


def encode_block(b: Block) -> bytes:
    """Full-mode block with its monitor signatures (the on-disk chain format)."""
    out = [b.prev_hash, struct.pack(">dff", b.timestamp, b.gps[0], b.gps[1])]
    out.append(bytes([EVENT_KINDS.index(b.event.kind)]))
    out.append(struct.pack(">H", len(b.event.coins)))
    out.extend(c.to_bytes() for c in b.event.coins)
    out.append(b.bloom_anchor)
    out.append(struct.pack(">H", len(b.monitor_signatures)))
    for mid, sig in b.monitor_signatures:
        out.append(_pack_str(mid) + _pack_str(sig.signer_id) + sig.value)
    return b"".join(out)


def encode_chain(chain: EventChain) -> bytes:
    head = _pack_str(chain.owner_id) + struct.pack(">IIH", chain.filter.m, chain.filter.k, len(chain.blocks))
    return head + b"".join(encode_block(b) for b in chain.blocks)


def decode_chain(data: bytes) -> EventChain:
    """Parse :func:`encode_chain` output; the filter is rebuilt by replaying spends."""
    r = _Reader(data)
    owner = r.string()
    m, k, n = struct.unpack(">IIH", r.take(10))
    if not (0 < m <= 1 << 24 and 0 < k <= 64):
        raise InvalidChain("bad filter parameters")
    chain = EventChain(owner, SpentCoinFilter(m, k))
    for _ in range(n):
        prev = r.take(C.DIGEST_BYTES)
        ts, x, y = struct.unpack(">dff", r.take(16))
        kind_idx = r.take(1)[0]
        if kind_idx >= len(EVENT_KINDS):
            raise InvalidChain("bad event kind")
        coins = tuple(CoinRecord.from_bytes(r.take(C.COIN_RECORD_BYTES)) for _ in range(r.u16()))
        event = Event(EVENT_KINDS[kind_idx], coins)
        anchor = r.take(C.DIGEST_BYTES)
        sigs = []
        for _ in range(r.u16()):
            mid = r.string()
            signer = r.string()
            sigs.append((mid, Signature(r.take(C.SIGNATURE_BYTES), signer)))
        chain.blocks.append(Block(prev, event, (x, y), ts, event.merkle_root(), anchor, tuple(sigs)))
    if r.pos != len(data):
        raise InvalidChain("trailing bytes after chain")
    chain.filter = replay_filter(chain)
    return chain
