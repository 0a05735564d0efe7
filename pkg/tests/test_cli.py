import subprocess
import sys

import pytest

from manetpay.cli import EXIT_OK, EXIT_USAGE, EXIT_VIOLATION, main
from manetpay.metrics import Table

SCENARIO = "nodes = 40\narea_m = 1200\nduration_s = 900\n"


@pytest.fixture
def scenario(tmp_path):
    p = tmp_path / "small.conf"
    p.write_text(SCENARIO)
    return p


def test_run_prints_metrics_and_writes_transcript(scenario, tmp_path, capsys):
    out = tmp_path / "t.tsv"
    assert main(["run", str(scenario), "--seed", "2", "-o", str(out)]) == EXIT_OK
    table = Table.from_csv(capsys.readouterr().out)
    assert table.rows[0]["seed"] == 2
    assert out.read_text().rstrip().splitlines()[-1].split("\t")[3] == "End"


def test_report_matches_run(scenario, tmp_path, capsys):
    out = tmp_path / "t.tsv"
    main(["run", str(scenario), "--seed", "1", "-o", str(out)])
    ran = Table.from_csv(capsys.readouterr().out).rows[0]
    assert main(["report", str(out)]) == EXIT_OK
    rep = Table.from_csv(capsys.readouterr().out).rows[0]
    assert rep["successes"] == ran["successes"]
    assert rep["orders_received"] == ran["orders_received"]
    assert main(["report", str(out), "--bins"]) == EXIT_OK
    assert "bin_start_s" in capsys.readouterr().out


def test_verify_chain_ok_then_tampered(scenario, tmp_path, capsys):
    chains = tmp_path / "chains"
    main(["run", str(scenario), "--seed", "0", "--export-chains", str(chains)])
    capsys.readouterr()
    exported = sorted(chains.glob("*.chain"))
    assert exported
    target = max(exported, key=lambda p: p.stat().st_size)
    args = ["verify-chain", str(target), "--scenario", str(scenario), "--seed", "0"]
    assert main(args) == EXIT_OK
    assert capsys.readouterr().out.startswith("valid")
    raw = bytearray(target.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    target.write_bytes(bytes(raw))
    assert main(args) == EXIT_VIOLATION
    assert "broken" in capsys.readouterr().out


def test_verify_chain_wrong_keyring(scenario, tmp_path, capsys):
    chains = tmp_path / "chains"
    main(["run", str(scenario), "--seed", "0", "--export-chains", str(chains)])
    target = max(chains.glob("*.chain"), key=lambda p: p.stat().st_size)
    assert main(["verify-chain", str(target), "--scenario", str(scenario), "--seed", "9"]) == EXIT_VIOLATION


def test_sweep(tmp_path, scenario, capsys):
    spec = tmp_path / "sweep.conf"
    spec.write_text("parameter = endorser_ratio\nvalues = 0.04, 0.08\nseeds = 1\n")
    out = tmp_path / "sweep.csv"
    assert main(["sweep", str(spec), "--scenario", str(scenario), "-o", str(out)]) == EXIT_OK
    rows = Table.from_csv(out.read_text()).rows
    assert [r["seed"] for r in rows] == [0, 0, "mean", "mean"]


def test_attack(tmp_path, scenario, capsys):
    script = tmp_path / "forged.attack"
    script.write_text("kind = ForgedCoin\ntrigger = 300\n")
    assert main(["attack", str(scenario), str(script), "--seed", "0"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "verdict=BadCredential" in out and "ok" in out


@pytest.mark.parametrize("argv", [
    ["run", "/nonexistent.conf"],
    ["report", "/nonexistent.tsv"],
])
def test_missing_files_are_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_bad_scenario_key(tmp_path):
    p = tmp_path / "bad.conf"
    p.write_text("warp_factor = 9\n")
    assert main(["run", str(p)]) == EXIT_USAGE


def test_bad_attack_script(tmp_path, scenario):
    p = tmp_path / "bad.attack"
    p.write_text("kind = Teleport\n")
    assert main(["attack", str(scenario), str(p)]) == EXIT_USAGE


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "manetpay", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "verify-chain" in proc.stdout
