"""Batch command-line front end: run, sweep, report, verify-chain, attack."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import adversary, metrics
from .config import ConfigError, ScenarioConfig, load_config
from .ledger import LedgerError, chain_verify, decode_chain, encode_chain
from .sim import Line, Simulation, run

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


def _scenario(path: str | None) -> ScenarioConfig:
    return load_config(path) if path else ScenarioConfig()


def _metrics_csv(rows: list[dict], columns: list[str]) -> str:
    return metrics.Table(columns, rows).to_csv()


def cmd_run(args) -> int:
    cfg = _scenario(args.scenario)
    res = run(cfg, seed=args.seed)
    if args.transcript:
        Path(args.transcript).write_text(res.transcript)
    if args.export_chains:
        out = Path(args.export_chains)
        out.mkdir(parents=True, exist_ok=True)
        for e, st in res.sim.estate.items():
            (out / f"{res.sim.ids[e]}.chain").write_bytes(encode_chain(st.chain))
    row = {"seed": res.cfg.seed, **metrics.summarize(metrics.metrics_from_transcript(res.lines))}
    sys.stdout.write(_metrics_csv([row], ["seed", *metrics.METRIC_COLUMNS]))
    for v in res.violations:
        print(f"violation: {v}", file=sys.stderr)
    return EXIT_VIOLATION if res.violations else EXIT_OK


def cmd_sweep(args) -> int:
    spec = metrics.parse_sweep(Path(args.spec).read_text(), _scenario(args.scenario))
    if args.seeds:
        spec = metrics.SweepSpec(spec.parameter, spec.values, args.seeds, spec.base)
    table = metrics.run_sweep(spec, workers=args.workers)
    text = table.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    bad = [r for r in table.rows if r["seed"] != "mean" and r["violations"]]
    return EXIT_VIOLATION if bad else EXIT_OK


def cmd_report(args) -> int:
    lines = [ln for ln in Path(args.transcript).read_text().splitlines() if ln]
    m = metrics.metrics_from_transcript(lines)
    if args.bins:
        tcr, vr = metrics.tcr_series(m), metrics.vr_series(m)
        rows = [
            {"bin_start_s": i * metrics.BIN_S, "orders_received": b.orders_received, "successes": b.successes,
             "rejected_tx": b.rejected_tx, "rejected_endorsements": b.rejected_endorsements,
             "tcr": tcr[i], "vr": vr[i]}
            for i, b in enumerate(m.bins)
        ]
        sys.stdout.write(_metrics_csv(rows, list(rows[0]) if rows else ["bin_start_s"]))
    else:
        row = metrics.summarize(m)
        for role in sorted(set(m.bytes_sent) | set(m.bytes_received)):
            row[f"sent_{role}"] = m.bytes_sent.get(role, 0)
            row[f"received_{role}"] = m.bytes_received.get(role, 0)
        sys.stdout.write(_metrics_csv([row], list(row)))
    return EXIT_VIOLATION if m.violations else EXIT_OK


def cmd_verify_chain(args) -> int:
    try:
        chain = decode_chain(Path(args.chain).read_bytes())
    except (LedgerError, ValueError) as exc:
        print(f"broken: decode: {exc}")
        return EXIT_VIOLATION
    cfg = _scenario(args.scenario)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    # registration is deterministic, so rebuilding it recovers the keyring
    keys = Simulation(cfg).directory.keys
    now = args.now if args.now is not None else (chain.blocks[-1].timestamp if chain.blocks else 0.0)
    verdict = chain_verify(chain, now, keys, cfg.monitor_quorum, cfg.staleness_s)
    if verdict:
        print(f"valid: {chain.owner_id} blocks={len(chain)}")
        return EXIT_OK
    print(f"broken: {verdict.reason} at block {verdict.index}")
    return EXIT_VIOLATION


def cmd_attack(args) -> int:
    cfg = _scenario(args.scenario)
    script = adversary.parse_script(Path(args.script).read_text())
    res, attack = adversary.run_attack(cfg, script, seed=args.seed)
    if args.transcript:
        Path(args.transcript).write_text(res.transcript)
    exp = adversary.expected_outcome(script.kind, len(attack.parties), res.cfg.monitor_quorum)
    ok = True
    for a in attack.attempts:
        match = a.verdict == exp or (exp == adversary.UNDETECTABLE and a.verdict == adversary.ACCEPTED)
        ok &= match
        print(f"{script.kind}\tattempt={a.index}\torder={a.order_id}\tverdict={a.verdict}\texpected={exp}\t"
              f"{'ok' if match else 'MISMATCH'}")
    for v in res.violations:
        print(f"violation: {v}", file=sys.stderr)
    return EXIT_OK if ok and not res.violations else EXIT_VIOLATION


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="manetpay", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario and print its metrics as CSV")
    r.add_argument("scenario", nargs="?", help="key = value scenario file (defaults if omitted)")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("-o", "--transcript", help="write the transcript here")
    r.add_argument("--export-chains", metavar="DIR", help="write every endorser chain to DIR")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="sweep one parameter over seeds; CSV out")
    s.add_argument("spec", help="sweep file: parameter, values, seeds, plus config overrides")
    s.add_argument("--scenario", help="base scenario file")
    s.add_argument("--seeds", type=int, default=0, help="override the seed count")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("-o", "--out")
    s.set_defaults(fn=cmd_sweep)

    rp = sub.add_parser("report", help="recompute metrics from a transcript")
    rp.add_argument("transcript")
    rp.add_argument("--bins", action="store_true", help="half-hour time series instead of totals")
    rp.set_defaults(fn=cmd_report)

    v = sub.add_parser("verify-chain", help="verify an exported event chain")
    v.add_argument("chain")
    v.add_argument("--scenario", help="scenario the chain came from (for its keyring)")
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("--now", type=float, default=None, help="verification time (default: last block)")
    v.set_defaults(fn=cmd_verify_chain)

    a = sub.add_parser("attack", help="run a scenario with an attack script")
    a.add_argument("scenario", help="scenario file")
    a.add_argument("script", help="attack script file")
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("-o", "--transcript")
    a.set_defaults(fn=cmd_attack)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
