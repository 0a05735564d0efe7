"""Wire widths, message sizes and protocol timing constants.

Every size metric in the package is computed from this table, so changing a
width here changes chain sizes, merchant traffic and transmission delays
consistently.
"""

# Canonical field widths (bytes, big-endian integers).
DIGEST_BYTES = 32
SIGNATURE_BYTES = 64
COIN_ID_BYTES = 8
COIN_VALUE_BYTES = 4
TIMESTAMP_BYTES = 8
GPS_BYTES = 2 * 4
COUNT_BYTES = 2
EVENT_KIND_BYTES = 1

# A coin record inside a full (non-lightweight) event: id, value, expiry.
COIN_RECORD_BYTES = COIN_ID_BYTES + COIN_VALUE_BYTES + TIMESTAMP_BYTES
COINS_PER_FULL_EVENT = 10

# prev_hash + timestamp + gps, shared by both serialization modes.
BLOCK_HEADER_BYTES = DIGEST_BYTES + TIMESTAMP_BYTES + GPS_BYTES

# Message sizes.
TX_MESSAGE_BYTES = 5 * 1024
HELLO_MESSAGE_BYTES = 5

# Per-step computation delays on the transaction path (seconds).
ORDER_CREATE_S = 0.006
MERCHANT_VERIFY_BILLING_S = 0.07
ENDORSE_BLOCK_S = 0.5
MONITOR_CHECK_S = 0.1
MERCHANT_FINAL_CHECK_S = 0.03

# Reason codes carried by every refusal / rejection.
BAD_CREDENTIAL = "BadCredential"
STALE_CHAIN = "StaleChain"
DOUBLE_SPEND = "DoubleSpend"
INSUFFICIENT_QUORUM = "InsufficientQuorum"
INSUFFICIENT_COVER = "InsufficientCover"
SIMILAR_LOCATION = "SimilarLocation"
INSUFFICIENT_COINS = "InsufficientCoins"
NO_ENDORSERS = "NoEndorsers"

REASON_CODES = (
    BAD_CREDENTIAL,
    STALE_CHAIN,
    DOUBLE_SPEND,
    INSUFFICIENT_QUORUM,
    INSUFFICIENT_COVER,
    SIMILAR_LOCATION,
)

# Reasons that mean an endorsement's event chain / coin was judged invalid.
VALIDITY_REASONS = frozenset(
    {BAD_CREDENTIAL, STALE_CHAIN, DOUBLE_SPEND, INSUFFICIENT_QUORUM, SIMILAR_LOCATION}
)


def transmission_delay(size_bytes: int, bandwidth_bps: float) -> float:
    """Seconds needed to push ``size_bytes`` over one hop."""
    return size_bytes * 8 / bandwidth_bps
