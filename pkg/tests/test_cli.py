import csv
import json
import subprocess
import sys

import pytest

from blocksim.cli import main

SCENARIO = {
    "rng_seed": 11,
    "node_count": 4,
    "link_latency": 50,
    "miners": [[0, 0.5], [1, 0.5]],
    "duration": 60 * 600.0,
    "workload": {"rate": 0.01, "users": 6},
    "analysis": {"spy": True},
    "attack": {"kind": "double_spend", "attacker_share": 0.1, "confirmations": 6, "trials": 200},
}


def write(tmp_path, data, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_all_outputs(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--scenario", write(tmp_path, SCENARIO), "--out", str(out)]) == 0
    for name in ("trace.jsonl", "chain.jsonl", "metrics.csv", "resolved-config.json"):
        assert (out / name).stat().st_size > 0
    resolved = json.loads((out / "resolved-config.json").read_text())
    assert resolved["seed"] == 11 and resolved["scenario"]["analysis"]["spy"] is True


def test_run_is_deterministic_and_seed_override_changes_it(tmp_path):
    path = write(tmp_path, SCENARIO)
    for d, extra in (("a", []), ("b", []), ("c", ["--seed", "12"])):
        assert main(["run", "--scenario", path, "--out", str(tmp_path / d), *extra]) == 0
    a, b, c = ((tmp_path / d / "trace.jsonl").read_bytes() for d in "abc")
    assert a == b and a != c


def test_toml_scenario(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text('rng_seed = 3\nnode_count = 2\nduration = 6000.0\nminers = [[0, 1.0]]\n')
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "o")]) == 0


def test_resolved_config_reproduces_run(tmp_path):
    first = tmp_path / "first"
    main(["run", "--scenario", write(tmp_path, SCENARIO), "--out", str(first)])
    second = tmp_path / "second"
    assert main(["run", "--scenario", str(first / "resolved-config.json"), "--out", str(second)]) == 0
    assert (first / "trace.jsonl").read_bytes() == (second / "trace.jsonl").read_bytes()
    assert (first / "resolved-config.json").read_text() == (second / "resolved-config.json").read_text()


@pytest.mark.parametrize("patch,key", [
    ({"miners": [[0, 0.7], [1, 0.5]]}, "miners"),
    ({"node_count": 0}, "node_count"),
    ({"nodes": 3}, "nodes"),
    ({"spy": True}, "spy"),
    ({"attack": {"attacker_share": 1.5}}, "attack.attacker_share"),
])
def test_bad_scenarios_exit_2_naming_the_key(tmp_path, capsys, patch, key):
    path = write(tmp_path, {**SCENARIO, **patch})
    assert main(["run", "--scenario", path, "--out", str(tmp_path / "o")]) == 2
    assert key in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_unreadable_and_unparseable_scenarios(tmp_path):
    assert main(["run", "--scenario", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_attack_zero_share_and_majority(tmp_path):
    path = write(tmp_path, SCENARIO)
    out = tmp_path / "atk"
    assert main(["attack", "--scenario", path, "--out", str(out), "--grid", "0.0:1,0.6:6",
                 "--trials", "300"]) == 0
    zero, major = rows(out / "attack_results.csv")
    assert float(zero["rate"]) == 0.0 and int(zero["trials"]) == 300
    assert float(major["rate"]) >= 0.99
    assert float(major["ci_lo"]) <= float(major["rate"]) <= float(major["ci_hi"])
    resolved = json.loads((out / "resolved-config.json").read_text())
    assert resolved["scenario"]["attack"]["grid"] == [[0.0, 1], [0.6, 6]]


def test_attack_grid_from_scenario_and_jobs(tmp_path):
    data = {**SCENARIO, "attack": {**SCENARIO["attack"], "grid": [[0.2, 1], [0.3, 2]]}}
    path = write(tmp_path, data)
    main(["attack", "--scenario", path, "--out", str(tmp_path / "a")])
    main(["attack", "--scenario", path, "--out", str(tmp_path / "b"), "--jobs", "2"])
    a = (tmp_path / "a" / "attack_results.csv").read_text()
    assert a == (tmp_path / "b" / "attack_results.csv").read_text()
    assert [(r["q"], r["z"]) for r in rows(tmp_path / "a" / "attack_results.csv")] == [("0.2", "1"), ("0.3", "2")]


@pytest.mark.parametrize("grid", ["", "0.1", "0.1:x", "1.2:3", "0.1:0"])
def test_attack_bad_grid_exits_2(tmp_path, grid):
    path = write(tmp_path, SCENARIO)
    assert main(["attack", "--scenario", path, "--out", str(tmp_path / "o"), "--grid", grid]) == 2
    assert not (tmp_path / "o" / "attack_results.csv").exists()


def test_attack_needs_attack_block(tmp_path):
    data = {k: v for k, v in SCENARIO.items() if k != "attack"}
    assert main(["attack", "--scenario", write(tmp_path, data), "--out", str(tmp_path / "o")]) == 2


def test_analyze_and_report_pipeline(tmp_path, capsys):
    run = tmp_path / "run"
    main(["run", "--scenario", write(tmp_path, SCENARIO), "--out", str(run)])
    main(["attack", "--scenario", write(tmp_path, SCENARIO), "--out", str(run), "--grid", "0.1:1,0.1:2,0.3:1,0.3:2"])
    capsys.readouterr()
    assert main(["analyze", "--chain", str(run / "chain.jsonl"), "--trace", str(run / "trace.jsonl"),
                 "--out", str(run)]) == 0
    assert "first-relayer accuracy" in capsys.readouterr().out
    clusters = rows(run / "clusters.csv")
    deanon = rows(run / "deanon.csv")
    assert clusters and all(len(r["address"]) == 64 for r in clusters)
    assert deanon and {r["correct"] for r in deanon} <= {"0", "1"}
    assert main(["report", "--out", str(run)]) == 0
    out = capsys.readouterr().out
    assert "fork rate" in out
    figures = [line.split(": ", 1)[1] for line in out.splitlines() if line.startswith("figure: ")]
    assert len(figures) >= 3
    for f in figures:
        assert open(f, "rb").read(8) == b"\x89PNG\r\n\x1a\n"


def test_analyze_without_spy_gives_notice(tmp_path, capsys):
    data = {**SCENARIO, "analysis": {"spy": False}}
    run = tmp_path / "run"
    main(["run", "--scenario", write(tmp_path, data), "--out", str(run)])
    capsys.readouterr()
    assert main(["analyze", "--chain", str(run / "chain.jsonl"), "--trace", str(run / "trace.jsonl"),
                 "--out", str(run), "--no-clustering"]) == 0
    assert "no spy" in capsys.readouterr().err
    assert not (run / "deanon.csv").exists() and not (run / "clusters.csv").exists()


@pytest.mark.parametrize("which", ["chain", "trace"])
def test_analyze_truncated_input_exits_2_with_line(tmp_path, capsys, which):
    run = tmp_path / "run"
    main(["run", "--scenario", write(tmp_path, SCENARIO), "--out", str(run)])
    target = run / f"{which}.jsonl"
    lines = target.read_text().splitlines()
    target.write_text("\n".join(lines[:2] + [lines[2][:30]]) + "\n")
    capsys.readouterr()
    assert main(["analyze", "--chain", str(run / "chain.jsonl"), "--trace", str(run / "trace.jsonl"),
                 "--out", str(tmp_path / "a")]) == 2
    assert "line 3" in capsys.readouterr().err


def test_report_on_missing_dir_exits_2(tmp_path):
    assert main(["report", "--out", str(tmp_path / "nope")]) == 2


def test_console_entry_point(tmp_path):
    path = write(tmp_path, SCENARIO)
    proc = subprocess.run([sys.executable, "-m", "blocksim", "run", "--scenario", path, "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "blocksim", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
