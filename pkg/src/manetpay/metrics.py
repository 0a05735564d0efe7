"""Metrics recomputed from transcripts, plus parameter sweeps with CSV output."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import constants as C
from .config import ConfigError, ScenarioConfig, coerce_value, is_config_key
from .protocol import MERCHANT
from .sim import Line, role_of, run

BIN_S = 1800.0


class NoTransactions(ValueError):
    pass


@dataclass
class Bin:
    orders_received: int = 0
    successes: int = 0
    rejected_tx: int = 0
    rejected_endorsements: int = 0


@dataclass
class MetricsRecord:
    bins: list[Bin] = field(default_factory=list)
    bytes_sent: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    bytes_received: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    completion_times: list[float] = field(default_factory=list)
    merchant_bytes: dict[str, int] = field(default_factory=dict)  # order -> tagged bytes
    chain_full: list[int] = field(default_factory=list)
    chain_light: list[int] = field(default_factory=list)
    violations: int = 0

    def _bin(self, t: float) -> Bin:
        i = int(t // BIN_S)
        while len(self.bins) <= i:
            self.bins.append(Bin())
        return self.bins[i]

    def total(self, name: str) -> int:
        return sum(getattr(b, name) for b in self.bins)

    @property
    def orders_received(self) -> int:
        return self.total("orders_received")

    @property
    def successes(self) -> int:
        return self.total("successes")

    @property
    def rejected_tx(self) -> int:
        return self.total("rejected_tx")

    @property
    def rejected_endorsements(self) -> int:
        return self.total("rejected_endorsements")


def metrics_from_transcript(lines: Iterable[str | Line]) -> MetricsRecord:
    m = MetricsRecord()
    tagged: dict[str, int] = defaultdict(int)
    accepted: set[str] = set()
    for raw in lines:
        ln = raw if isinstance(raw, Line) else Line.parse(raw)
        oid = ln.extra.get("order", "")
        if "mtraffic" in ln.extra and ln.verdict in ("delivered", "broadcast"):
            tagged[oid] += int(ln.extra["mtraffic"])
        if ln.verdict == "delivered" or ln.kind == "Hello":
            m.bytes_sent[role_of(ln.sender)] += ln.size
            if ln.receiver != "*":
                m.bytes_received[role_of(ln.receiver)] += ln.size
        if ln.kind == "TransactionOrder" and ln.verdict == "delivered" and role_of(ln.receiver) == MERCHANT:
            m._bin(ln.t).orders_received += 1
        elif ln.kind == "TxAccept":
            m._bin(ln.t).successes += 1
            m.completion_times.append(float(ln.extra["ct"]))
            accepted.add(oid)
        elif ln.kind == "TxReject" or (ln.kind == "OrderReject" and ln.verdict in C.VALIDITY_REASONS):
            m._bin(ln.t).rejected_tx += 1
        elif ln.kind == "EndorsementReject":
            m._bin(ln.t).rejected_endorsements += 1
        elif ln.kind == "ChainSize":
            m.chain_full.append(int(ln.extra["full"]))
            m.chain_light.append(int(ln.extra["light"]))
        elif ln.kind == "End":
            m.violations = int(ln.extra.get("violations", 0))
    m.merchant_bytes = {oid: tagged.get(oid, 0) for oid in sorted(accepted)}
    return m


def compute_tcr(m: MetricsRecord) -> float:
    if m.orders_received == 0:
        raise NoTransactions("no orders reached a merchant")
    return m.successes / m.orders_received


def compute_vr(m: MetricsRecord) -> float:
    """1 - rejected transactions / rejected endorsement messages; 1 when nothing was rejected."""
    if m.rejected_endorsements == 0:
        return 1.0
    return max(0.0, 1.0 - m.rejected_tx / m.rejected_endorsements)


def merchant_message_size(m: MetricsRecord) -> int:
    """Chain-validation and secondary-endorser bytes over successful transactions, summed."""
    return sum(m.merchant_bytes.values())


def merchant_message_size_mean(m: MetricsRecord) -> float:
    return merchant_message_size(m) / len(m.merchant_bytes) if m.merchant_bytes else 0.0


def completion_time_stats(m: MetricsRecord) -> tuple[float, np.ndarray]:
    if not m.completion_times:
        raise NoTransactions("no successful transactions")
    ct = np.sort(np.asarray(m.completion_times))
    return float(ct.mean()), ct


def tcr_series(m: MetricsRecord) -> list[float]:
    """Cumulative TCR at the end of each half-hour bin (nan before the first order)."""
    out, rx, ok = [], 0, 0
    for b in m.bins:
        rx += b.orders_received
        ok += b.successes
        out.append(ok / rx if rx else math.nan)
    return out


def vr_series(m: MetricsRecord) -> list[float]:
    out, rt, re = [], 0, 0
    for b in m.bins:
        rt += b.rejected_tx
        re += b.rejected_endorsements
        out.append(1.0 if re == 0 else max(0.0, 1.0 - rt / re))
    return out


# -- sweeps -----------------------------------------------------------------------

METRIC_COLUMNS = (
    "tcr", "vr", "orders_received", "successes", "mean_ct", "merchant_bytes", "merchant_bytes_mean",
    "chain_full", "chain_light", "violations",
)


def summarize(m: MetricsRecord) -> dict[str, float]:
    return {
        "tcr": compute_tcr(m) if m.orders_received else math.nan,
        "vr": compute_vr(m),
        "orders_received": m.orders_received,
        "successes": m.successes,
        "mean_ct": float(np.mean(m.completion_times)) if m.completion_times else math.nan,
        "merchant_bytes": merchant_message_size(m),
        "merchant_bytes_mean": merchant_message_size_mean(m),
        "chain_full": float(np.mean(m.chain_full)) if m.chain_full else 0.0,
        "chain_light": float(np.mean(m.chain_light)) if m.chain_light else 0.0,
        "violations": m.violations,
    }


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple
    seeds: int = 20
    base: ScenarioConfig = ScenarioConfig()

    def __post_init__(self):
        if not is_config_key(self.parameter):
            raise ConfigError(f"unknown sweep parameter: {self.parameter}")
        if not self.values or self.seeds < 1:
            raise ConfigError("sweep needs at least one value and one seed")


def parse_sweep(text: str, base: ScenarioConfig | None = None) -> SweepSpec:
    """``parameter = name``, ``values = a, b, c``, ``seeds = N``; other keys override the base config."""
    from .config import config_from_dict, parse_kv

    kv = parse_kv(text)
    try:
        name = kv.pop("parameter")
        raw_values = kv.pop("values")
    except KeyError as exc:
        raise ConfigError(f"sweep spec missing {exc.args[0]}") from exc
    seeds = int(kv.pop("seeds", "20"))
    if not is_config_key(name):
        raise ConfigError(f"unknown sweep parameter: {name}")
    values = tuple(coerce_value(name, v) for v in raw_values.split(",") if v.strip())
    return SweepSpec(name, values, seeds, config_from_dict(kv, base))


def _run_one(args) -> dict:
    cfg, value, seed, name = args
    res = run(cfg.with_(**{name: value}), seed=seed)
    row = {name: value, "seed": seed}
    row.update(summarize(metrics_from_transcript(res.lines)))
    return row


@dataclass
class Table:
    columns: list[str]
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _cell(r.get(k, "")) for k in self.columns})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Table":
        rd = csv.DictReader(io.StringIO(text))
        return cls(list(rd.fieldnames or []), [{k: _parse_cell(v) for k, v in r.items()} for r in rd])


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def _parse_cell(v: str):
    for kind in (int, float):
        try:
            return kind(v)
        except ValueError:
            pass
    return v


def run_sweep(spec: SweepSpec, workers: int = 1) -> Table:
    """One row per (value, seed), then one ``seed=mean`` row per value."""
    jobs = [(spec.base, v, s, spec.parameter) for v in spec.values for s in range(spec.seeds)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_one, jobs))
    else:
        rows = [_run_one(j) for j in jobs]
    rows.sort(key=lambda r: (spec.values.index(r[spec.parameter]), r["seed"]))
    summary = []
    for v in spec.values:
        sel = [r for r in rows if r[spec.parameter] == v]
        mean = {spec.parameter: v, "seed": "mean"}
        for col in METRIC_COLUMNS:
            vals = [r[col] for r in sel if not (isinstance(r[col], float) and math.isnan(r[col]))]
            mean[col] = float(np.mean(vals)) if vals else math.nan
        summary.append(mean)
    return Table([spec.parameter, "seed", *METRIC_COLUMNS], rows + summary)


def point_means(table: Table, parameter: str) -> dict:
    return {r[parameter]: r for r in table.rows if r["seed"] == "mean"}


def paired_reduction(a: Sequence[float], b: Sequence[float]) -> float:
    """Mean relative reduction of ``a`` against baseline ``b`` over paired seeds."""
    pairs = [(x, y) for x, y in zip(a, b) if y > 0]
    if not pairs:
        return math.nan
    return float(np.mean([1.0 - x / y for x, y in pairs]))
