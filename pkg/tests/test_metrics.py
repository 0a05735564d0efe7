import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manetpay import metrics
from manetpay.config import ConfigError, ScenarioConfig
from manetpay.metrics import (
    Bin, MetricsRecord, NoTransactions, SweepSpec, Table, compute_tcr, compute_vr,
    merchant_message_size, merchant_message_size_mean, metrics_from_transcript, parse_sweep,
)
from manetpay.sim import format_line, run

SMALL = ScenarioConfig(nodes=40, area_m=1200, duration_s=1800)


def _record(**counts):
    return MetricsRecord(bins=[Bin(**counts)])


def test_tcr_counts_successes_over_received_orders():
    assert compute_tcr(_record(orders_received=10, successes=7)) == pytest.approx(0.7)


def test_tcr_without_orders_raises():
    with pytest.raises(NoTransactions):
        compute_tcr(MetricsRecord())


@pytest.mark.parametrize("rtx, rend, expected", [(0, 0, 1.0), (1, 20, 0.95), (0, 5, 1.0), (8, 4, 0.0)])
def test_vr(rtx, rend, expected):
    assert compute_vr(_record(rejected_tx=rtx, rejected_endorsements=rend)) == pytest.approx(expected)


def test_merchant_bytes_zero_without_successes():
    lines = [format_line(1.0, "M000", "E001", "Billing", 5120, "delivered", order="o1", mtraffic=5120)]
    m = metrics_from_transcript(lines)
    assert merchant_message_size(m) == 0
    assert merchant_message_size_mean(m) == 0.0


def test_transcript_counts():
    lines = [
        format_line(10, "C001", "M000", "TransactionOrder", 5120, "delivered", order="o1"),
        format_line(11, "M000", "E002", "Billing", 5120, "delivered", order="o1", mtraffic=5120),
        format_line(12, "E002", "M000", "Endorsement", 6000, "delivered", order="o1", mtraffic=880),
        format_line(13, "M000", "C001", "TxAccept", 0, "ok", order="o1", ct=1.5),
        format_line(1900, "C002", "M000", "TransactionOrder", 5120, "delivered", order="o2"),
        format_line(1901, "M000", "E001", "EndorsementReject", 0, "StaleChain", order="o2"),
        format_line(1902, "M000", "C002", "TxReject", 0, "StaleChain", order="o2"),
    ]
    m = metrics_from_transcript(lines)
    assert len(m.bins) == 2
    assert (m.bins[0].orders_received, m.bins[0].successes) == (1, 1)
    assert (m.bins[1].rejected_tx, m.bins[1].rejected_endorsements) == (1, 1)
    assert m.merchant_bytes == {"o1": 6000}
    assert m.completion_times == [1.5]
    assert m.bytes_sent["customer"] == 10240
    assert metrics.tcr_series(m) == [1.0, 0.5]
    assert metrics.vr_series(m) == [1.0, 0.0]


def test_metrics_agree_with_simulator_state():
    res = run(SMALL, seed=4)
    m = metrics_from_transcript(res.lines)
    sim = res.sim
    assert m.successes == sum(1 for r in sim.orders.values() if r.status == "accepted")
    assert m.orders_received == sum(1 for r in sim.orders.values() if not math.isnan(r.received_at))
    assert m.violations == 0


def test_fanout_merchant_bytes_below_levels_on_same_seed():
    fan = metrics_from_transcript(run(SMALL, seed=1).lines)
    lev = metrics_from_transcript(run(SMALL.with_(billing="levels"), seed=1).lines)
    assert 0 < merchant_message_size_mean(fan) < merchant_message_size_mean(lev)


cells = st.one_of(st.integers(-10**6, 10**6), st.floats(allow_nan=False, allow_infinity=False),
                  st.text(alphabet="abcxyz_", min_size=1, max_size=6))


@given(st.lists(st.fixed_dictionaries({"a": cells, "b": cells}), max_size=8))
@settings(max_examples=60, deadline=None)
def test_table_csv_round_trip(rows):
    t = Table(["a", "b"], rows)
    back = Table.from_csv(t.to_csv())
    assert back.columns == ["a", "b"]
    for got, want in zip(back.rows, rows):
        for k in ("a", "b"):
            if isinstance(want[k], str):
                assert str(got[k]) == want[k] or got[k] == metrics._parse_cell(want[k])
            else:
                assert got[k] == pytest.approx(want[k])


def test_sweep_spec_validation():
    with pytest.raises(ConfigError):
        SweepSpec("warp_factor", (1, 2))
    with pytest.raises(ConfigError):
        SweepSpec("endorser_ratio", ())
    with pytest.raises(ConfigError):
        parse_sweep("values = 1, 2\n")


def test_parse_sweep_overrides_base():
    spec = parse_sweep("parameter = endorser_ratio\nvalues = 0.02, 0.04\nseeds = 3\nmultilevel = false\n")
    assert spec.values == (0.02, 0.04)
    assert spec.seeds == 3
    assert spec.base.multilevel is False


def test_run_sweep_shape():
    spec = SweepSpec("endorser_ratio", (0.04, 0.08), seeds=2, base=SMALL.with_(duration_s=900))
    table = metrics.run_sweep(spec)
    assert len(table.rows) == 2 * 2 + 2
    means = metrics.point_means(table, "endorser_ratio")
    assert set(means) == {0.04, 0.08}
    per_seed = [r["tcr"] for r in table.rows if r["endorser_ratio"] == 0.04 and r["seed"] != "mean"]
    finite = [x for x in per_seed if not math.isnan(x)]
    assert means[0.04]["tcr"] == pytest.approx(sum(finite) / len(finite))


def test_paired_reduction():
    assert metrics.paired_reduction([50, 30], [100, 100]) == pytest.approx(0.6)
    assert math.isnan(metrics.paired_reduction([1], [0]))
