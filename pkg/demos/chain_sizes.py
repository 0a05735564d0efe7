"""Compare full and lightweight event-chain encodings for a busy endorser."""

import numpy as np

from manetpay.crypto import generate_keypair
from manetpay.ledger import (
    FULL, LIGHTWEIGHT, CoinRecord, Event, EventChain, block_size_bytes, bloom_new, chain_append,
    chain_size_bytes, chain_verify, countersign, is_double_spent,
)

rng = np.random.default_rng(0)
monitors = [generate_keypair(f"mon{i}", 100 + i) for i in range(3)]
keyring = {kp.owner_id: kp.public_key for kp in monitors}
chain = EventChain("E000", bloom_new(3000, 0.01))

t = 0.0
spent = []
for _ in range(30):
    coins = tuple(CoinRecord(rng.bytes(8), 200, 1e9) for _ in range(10))
    spent += [c.coin_id for c in coins]
    block = chain.propose(Event("spend", coins), (1500.0, 1500.0), t)
    chain = chain_append(chain, block, [countersign(m.private_key, block) for m in monitors], keyring)
    t += 30.0

full = chain_size_bytes(chain.blocks, FULL)
light = chain_size_bytes(chain.blocks, LIGHTWEIGHT)
print(f"30 blocks, 300 coins: full {full} B, lightweight {light} B, saving {100 * (1 - light / full):.1f}%")
b = chain.blocks[-1]
mf, ml = block_size_bytes(b, FULL, True), block_size_bytes(b, LIGHTWEIGHT, True)
print(f"one block as a monitor sees it: {mf} B vs {ml} B, saving {100 * (1 - ml / mf):.1f}%")
print("chain verifies:", bool(chain_verify(chain, t, keyring, 3, 60.0)))
print("re-spending coin 17 is flagged:", is_double_spent(spent[17], chain.filter, chain))
print("a fresh coin is not:", is_double_spent(rng.bytes(8), chain.filter, chain))
