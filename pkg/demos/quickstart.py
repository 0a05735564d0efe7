"""Run the default 100-node market for two hours and look at what happened."""

from collections import Counter

from manetpay import metrics
from manetpay.config import ScenarioConfig
from manetpay.sim import Line, run

cfg = ScenarioConfig(duration_s=7200)
res = run(cfg, seed=1)
m = metrics.metrics_from_transcript(res.lines)

print(f"orders reaching the merchant: {m.orders_received}")
print(f"completed: {m.successes}  (TCR {metrics.compute_tcr(m):.2f})")
print(f"validity ratio: {metrics.compute_vr(m):.3f}")
mean_ct, _ = metrics.completion_time_stats(m)
print(f"mean completion time: {mean_ct:.3f} s")

kinds = Counter(Line.parse(raw).kind for raw in res.lines)
print("\nmessage kinds in the transcript:")
for kind, n in kinds.most_common():
    print(f"  {kind:<18} {n}")

first = next(Line.parse(raw) for raw in res.lines if "\tTxAccept\t" in raw)
print(f"\nthe first completed order, {first.extra['order']}:")
for raw in res.lines:
    if f"order={first.extra['order']}" in raw:
        print("  " + raw)
