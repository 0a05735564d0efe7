"""Scenario configuration as a flat key/value text file."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    # network and mobility
    area_m: float = 3000.0
    nodes: int = 100
    speed_min: float = 1.0
    speed_max: float = 1.4
    pause_s: float = 10.0
    range_m: float = 100.0
    bandwidth_bps: float = 1e6
    buffer_kb: float = 500.0
    grid_n: int = 7
    road_graph: str = ""
    market_bias: float = 0.9
    market_radius_m: float = 500.0
    max_hops: int = 4
    gps_noise_min_m: float = 2.45
    gps_noise_max_m: float = 5.0
    phone_off_per_h: float = 0.5
    phone_off_mean_s: float = 600.0

    # protocol
    hello_interval_s: float = 10.0
    staleness_s: float = 60.0
    endorser_ratio: float = 0.04
    merchants: int = 1
    monitor_quorum: int = 3
    tx_amount: float = 2.0
    endorse_amount: float = 2.0
    coin_total: float = 3000.0
    coin_expiry_s: float = 30 * 86400.0
    customers_per_endorser: int = 25
    secondaries_per_endorser: int = 2
    multilevel: bool = True
    billing: str = "fanout"  # fanout | levels
    level_timeout_s: float = 2.0
    order_timeout_s: float = 6.0
    order_mean_s: float = 300.0
    order_ttl_s: float = 600.0
    incentive_pct: float = 3.0
    customer_balance: float = 100.0
    default_prob: float = 0.1
    similarity_eps_m: float = 10.0
    similarity_frac: float = 0.9
    similarity_window: int = 30
    bloom_fpr: float = 0.01

    # settlement and run control
    truck_period_s: float = 172800.0
    truck_regions: int = 4
    dispute_window_s: float = 172800.0
    dispute_prob: float = 0.0
    time_scale: float = 1.0 / 48.0
    seed: int = 0
    duration_s: float = 14400.0
    signature_scheme: str = "keyed-hash"

    def __post_init__(self):
        problems = []
        if self.nodes < 6:
            problems.append("nodes must be >= 6")
        if not 0 < self.endorser_ratio < 1:
            problems.append("endorser_ratio must be in (0, 1)")
        if self.speed_min <= 0 or self.speed_max < self.speed_min:
            problems.append("need 0 < speed_min <= speed_max")
        if self.monitor_quorum < 1:
            problems.append("monitor_quorum must be >= 1")
        if self.tx_amount <= 0 or self.endorse_amount <= 0:
            problems.append("amounts must be positive")
        if self.billing not in ("fanout", "levels"):
            problems.append("billing must be fanout or levels")
        if self.duration_s <= 0 or self.time_scale <= 0:
            problems.append("duration_s and time_scale must be positive")
        if self.merchants < 1:
            problems.append("need at least one merchant")
        if problems:
            raise ConfigError("; ".join(problems))

    # derived quantities
    @property
    def truck_period(self) -> float:
        return self.truck_period_s * self.time_scale

    @property
    def dispute_window(self) -> float:
        return self.dispute_window_s * self.time_scale

    def cents(self, dollars: float) -> int:
        return int(round(dollars * 100))

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)


_FIELDS = {f.name: f for f in fields(ScenarioConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(float(raw))
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def is_config_key(name: str) -> bool:
    return name in _FIELDS


def coerce_value(name: str, raw: str):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key: {name}")
    return _coerce(name, raw)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def config_from_dict(values: dict[str, str], base: ScenarioConfig | None = None) -> ScenarioConfig:
    changes = {k: coerce_value(k, v) for k, v in values.items()}
    return replace(base or ScenarioConfig(), **changes)


def load_config(path: str | Path) -> ScenarioConfig:
    return config_from_dict(parse_kv(Path(path).read_text()))


def dump_config(cfg: ScenarioConfig) -> str:
    lines = []
    for k, v in asdict(cfg).items():
        if isinstance(v, bool):
            v = int(v)
        lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
    return "\n".join(lines) + "\n"
