"""``blocksim`` command line: run, attack, analyze, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import __version__
from .adversary import AttackSpec, run_grid
from .analysis import NoSpyError, build_tx_graph, cluster_addresses, first_relayer_attack, summarize
from .chain import ChainFormatError, export_chain
from .config import SCHEMA_VERSION, ConfigError, SimConfig, _coerce, _reject_unknown, load_mapping
from .netsim import Simulation
from .trace import EventTrace, TraceFormatError

log = logging.getLogger("blocksim")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class Scenario:
    sim: SimConfig
    attack: dict | None = None  # raw block; resolved against the sim seed on use
    clustering: bool = True

    def attack_spec(self) -> AttackSpec:
        block = dict(self.attack or {})
        block.setdefault("seed", self.sim.rng_seed)
        return AttackSpec.from_dict(block, self.sim)

    def grid(self) -> list[tuple[float, int]] | None:
        if not self.attack or "grid" not in self.attack:
            return None
        return parse_grid_list(self.attack["grid"], "attack.grid")

    def resolved(self) -> dict:
        out: dict[str, Any] = {"schema_version": SCHEMA_VERSION}
        sim = self.sim.to_dict()
        spy = sim.pop("spy")
        out.update(sim)
        if self.attack is not None:
            spec = self.attack_spec().to_dict()
            if "grid" in self.attack:
                spec["grid"] = [list(c) for c in self.grid()]
            out["attack"] = spec
        out["analysis"] = {"spy": spy, "clustering": self.clustering}
        return out


def parse_scenario(data: Mapping[str, Any]) -> Scenario:
    """Strictly parse a scenario mapping; ``resolved-config.json`` files are accepted too."""
    if not isinstance(data, Mapping):
        raise ConfigError("<root>", "scenario must be a table/object")
    if "scenario" in data and "package_version" in data:
        data = data["scenario"]
    data = dict(data)
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r}")
    attack = data.pop("attack", None)
    analysis = data.pop("analysis", None) or {}
    if not isinstance(analysis, Mapping):
        raise ConfigError("analysis", "expected a table/object")
    _reject_unknown(analysis, {"spy", "clustering"}, "analysis.")
    if "spy" in data:
        raise ConfigError("spy", "set the spy under the analysis block")
    if "spy" in analysis:
        data["spy"] = _coerce(analysis["spy"], bool, "analysis.spy")
    clustering = _coerce(analysis.get("clustering", True), bool, "analysis.clustering")
    sim = SimConfig.from_dict(data)
    if attack is not None and not isinstance(attack, Mapping):
        raise ConfigError("attack", "expected a table/object")
    scenario = Scenario(sim, dict(attack) if attack is not None else None, clustering)
    if attack is not None:
        scenario.attack_spec()
        scenario.grid()
    return scenario


def load_scenario(path: str | Path, seed: int | None = None) -> Scenario:
    try:
        data = load_mapping(path)
    except OSError as exc:
        raise UsageError(f"cannot read scenario {path}: {exc.strerror or exc}") from None
    except ValueError as exc:  # JSON and TOML decode errors
        raise ConfigError("<file>", f"cannot parse {path}: {exc}") from None
    if seed is not None:
        if not isinstance(data, dict):
            raise ConfigError("<root>", "scenario must be a table/object")
        if "scenario" in data and "package_version" in data:
            data = dict(data["scenario"])
        data["rng_seed"] = seed
        if isinstance(data.get("attack"), dict):
            data["attack"] = {**data["attack"], "seed": seed}
    return parse_scenario(data)


def parse_grid_list(cells: Any, key: str) -> list[tuple[float, int]]:
    if not isinstance(cells, list):
        raise ConfigError(key, "expected a list of [q, z] pairs")
    out = []
    for i, cell in enumerate(cells):
        if not isinstance(cell, (list, tuple)) or len(cell) != 2:
            raise ConfigError(f"{key}[{i}]", "expected [q, z]")
        out.append((_coerce(cell[0], float, f"{key}[{i}].q"), _coerce(cell[1], int, f"{key}[{i}].z")))
    return out


def parse_grid_arg(text: str) -> list[tuple[float, int]]:
    """``"0.1:6,0.3:2"`` -> ``[(0.1, 6), (0.3, 2)]``."""
    cells = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        q, sep, z = part.partition(":")
        try:
            if not sep:
                raise ValueError
            cells.append((float(q), int(z)))
        except ValueError:
            raise ConfigError("grid", f"bad cell {part!r}, expected q:z") from None
    return cells


def _resolved_config(scenario: Scenario) -> dict:
    return {
        "package_version": __version__,
        "seed": scenario.sim.rng_seed,
        "signature_scheme": scenario.sim.signature_scheme,
        "scenario": scenario.resolved(),
    }


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Subcommands


def cmd_run(scenario_path: str | Path, out_dir: str | Path, seed: int | None = None) -> int:
    scenario = load_scenario(scenario_path, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = Simulation(scenario.sim)
    trace = sim.run()
    with (out / "trace.jsonl").open("w") as fh:
        trace.write_jsonl(fh)
    with (out / "chain.jsonl").open("w") as fh:
        export_chain(sim.nodes[0].chain, fh)
    with (out / "metrics.csv").open("w", newline="") as fh:
        summarize(trace).to_csv(fh)
    _write_json(out / "resolved-config.json", _resolved_config(scenario))
    log.info("run written to %s", out)
    return EXIT_OK


def cmd_attack(
    scenario_path: str | Path,
    grid: Sequence[tuple[float, int]] | None,
    out_dir: str | Path,
    seed: int | None = None,
    trials: int | None = None,
    jobs: int = 1,
) -> int:
    scenario = load_scenario(scenario_path, seed)
    if scenario.attack is None:
        raise ConfigError("attack", "scenario has no attack block")
    spec = scenario.attack_spec()
    if trials is not None:
        spec.trials = trials
        spec.validate()
    if grid is None:
        grid = scenario.grid()
    if grid is None:
        grid = [(spec.attacker_share, spec.confirmations)]
    if not grid:
        raise ConfigError("grid", "attack grid is empty")
    for q, z in grid:
        spec.with_cell(q, z)  # validate every cell before any work
    outcomes = run_grid(spec, grid, jobs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "attack_results.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "q", "z", "trials", "successes", "rate", "ci_lo", "ci_hi", "horizon", "mean_blocks_to_success"])
        for (q, z), o in zip(grid, outcomes):
            lo, hi = o.wilson_interval()
            w.writerow([spec.kind, q, z, o.trial_count, o.success_count, repr(o.success_rate), repr(lo), repr(hi),
                        spec.horizon, repr(o.mean_blocks_to_success)])
    resolved = _resolved_config(scenario)
    resolved["scenario"]["attack"] = {**spec.to_dict(), "grid": [list(c) for c in grid]}
    _write_json(out / "resolved-config.json", resolved)
    return EXIT_OK


def cmd_analyze(chain_path: str | Path, trace_path: str | Path, out_dir: str | Path, clustering: bool = True) -> int:
    out = Path(out_dir)
    try:
        chain_lines = Path(chain_path).read_text().splitlines()
        trace_lines = Path(trace_path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read input: {exc}") from None
    try:
        graph = build_tx_graph(chain_lines)
    except ChainFormatError as exc:
        raise UsageError(f"{chain_path}: {exc}") from None
    try:
        trace = EventTrace.read_jsonl(trace_lines)
    except TraceFormatError as exc:
        raise UsageError(f"{trace_path}: {exc}") from None
    out.mkdir(parents=True, exist_ok=True)
    if clustering:
        clusters = cluster_addresses(graph)
        with (out / "clusters.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["address", "cluster_id"])
            for addr in sorted(clusters.cluster_of):
                w.writerow([addr, clusters.cluster_of[addr]])
    try:
        report = first_relayer_attack(trace)
    except NoSpyError:
        print("notice: trace has no spy node; first-relayer report skipped", file=sys.stderr)
    else:
        with (out / "deanon.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tx_id", "guessed_source", "true_source", "correct"])
            for tx, guess, truth in report.rows:
                w.writerow([tx, guess, truth, int(guess == truth)])
        print(f"first-relayer accuracy {report.accuracy:.4f} over {len(report.rows)} txs "
              f"(baseline {report.baseline:.4f})")
    with (out / "metrics.csv").open("w", newline="") as fh:
        summarize(trace).to_csv(fh)
    return EXIT_OK


def cmd_report(run_dir: str | Path) -> int:
    from .report import build_report

    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"{run_dir} is not a directory")
    interval = None
    cfg_path = run_dir / "resolved-config.json"
    if cfg_path.exists():
        interval = json.loads(cfg_path.read_text())["scenario"].get("mean_block_interval")
    text, figures = build_report(run_dir, interval)
    sys.stdout.write(text)
    for f in figures:
        print(f"figure: {f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blocksim", description="Proof-of-work ledger simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a network and write trace, chain and metrics")
    run.add_argument("--scenario", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=_u64)

    atk = sub.add_parser("attack", help="Monte Carlo attack success rates over a (q, z) grid")
    atk.add_argument("--scenario", required=True)
    atk.add_argument("--out", required=True)
    atk.add_argument("--grid", help="comma separated q:z cells, e.g. 0.1:6,0.3:2")
    atk.add_argument("--seed", type=_u64)
    atk.add_argument("--trials", type=_positive)
    atk.add_argument("--jobs", type=_positive, default=1)

    an = sub.add_parser("analyze", help="clusters, first-relayer report and metrics from exports")
    an.add_argument("--chain", required=True)
    an.add_argument("--trace", required=True)
    an.add_argument("--out", required=True)
    an.add_argument("--no-clustering", action="store_true")

    rep = sub.add_parser("report", help="text summary and figures for an output directory")
    rep.add_argument("--out", required=True, help="directory holding the CSVs")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    level = logging.getLevelName(os.environ.get("BLOCKSIM_LOG", "WARNING").upper())
    logging.basicConfig(
        level=level if isinstance(level, int) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.scenario, args.out, args.seed)
        if args.command == "attack":
            grid = parse_grid_arg(args.grid) if args.grid is not None else None
            return cmd_attack(args.scenario, grid, args.out, args.seed, args.trials, args.jobs)
        if args.command == "analyze":
            return cmd_analyze(args.chain, args.trace, args.out, not args.no_clustering)
        return cmd_report(args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
