"""Human-readable summary of a run directory, with figures written next to the CSVs."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path: Path) -> list[dict[str, str]]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _metrics(rows: list[dict[str, str]]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = defaultdict(dict)
    for r in rows:
        out[r["metric"]][r["key"]] = float(r["value"])
    return out


def _style(ax, title: str, xlabel: str, ylabel: str) -> None:
    ax.set_title(title, fontsize=11)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3, linewidth=0.6)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)


def plot_miner_shares(m: dict[str, dict[str, float]], path: Path) -> None:
    keys = sorted(m["miner_share"], key=int)
    x = range(len(keys))
    frac = [m["miner_fraction"][k] for k in keys]
    lo = [frac[i] - m["miner_fraction_ci99_lo"][k] for i, k in enumerate(keys)]
    hi = [m["miner_fraction_ci99_hi"][k] - frac[i] for i, k in enumerate(keys)]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar([i - 0.2 for i in x], [m["miner_share"][k] for k in keys], 0.4, label="hashrate share", color="0.7")
    ax.bar([i + 0.2 for i in x], frac, 0.4, yerr=[lo, hi], capsize=3, label="block fraction (99% CI)", color="C0")
    ax.set_xticks(list(x), keys)
    _style(ax, "Blocks found vs hashrate", "miner", "fraction")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_confirmation_waits(m: dict[str, dict[str, float]], path: Path, interval: float | None) -> None:
    ks = sorted(m.get("confirmation_mean_s", {}), key=int)
    if not ks:
        return
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([int(k) for k in ks], [m["confirmation_mean_s"][k] / 60 for k in ks], "o-", label="mean")
    ax.plot([int(k) for k in ks], [m["confirmation_p90_s"][k] / 60 for k in ks], "s--", label="90th percentile")
    if interval:
        ax.plot([int(k) for k in ks], [int(k) * interval / 60 for k in ks], ":", color="0.4", label="k x interval")
    _style(ax, "Wait for k confirmations", "k", "minutes")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_reorgs(m: dict[str, dict[str, float]], path: Path) -> None:
    hist = m.get("reorg_depth", {})
    if not hist:
        return
    depths = sorted(hist, key=int)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar([int(d) for d in depths], [hist[d] for d in depths], color="C3")
    _style(ax, "Reorganisation depths", "depth (blocks)", "events")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_attack(rows: list[dict[str, str]], path: Path) -> None:
    by_q: dict[float, list[tuple[int, float]]] = defaultdict(list)
    for r in rows:
        by_q[float(r["q"])].append((int(r["z"]), float(r["rate"])))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for q in sorted(by_q):
        pts = sorted(by_q[q])
        ax.plot([z for z, _ in pts], [max(r, 1e-6) for _, r in pts], "o-", label=f"q={q:g}")
    ax.set_yscale("log")
    _style(ax, "Attack success rate", "confirmations z", "success rate")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_report(run_dir: str | Path, interval: float | None = None) -> tuple[str, list[Path]]:
    """Render ``report.txt`` and PNG figures for whatever CSVs ``run_dir`` holds."""
    run_dir = Path(run_dir)
    fig_dir = run_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    lines: list[str] = []
    figures: list[Path] = []

    metrics_path = run_dir / "metrics.csv"
    if metrics_path.exists():
        m = _metrics(_read_csv(metrics_path))
        blocks = m.get("blocks_found", {}).get("", 0)
        lines.append(f"blocks found: {blocks:.0f}; stale: {m.get('stale_blocks', {}).get('', 0):.0f} "
                     f"(fork rate {m.get('fork_rate', {}).get('', 0):.4f})")
        for k in sorted(m.get("miner_share", {}), key=int):
            lines.append(f"  miner {k}: share {m['miner_share'][k]:.3f}, mined {m['miner_fraction'][k]:.4f} "
                         f"[{m['miner_fraction_ci99_lo'][k]:.4f}, {m['miner_fraction_ci99_hi'][k]:.4f}]")
        for k in sorted(m.get("confirmation_mean_s", {}), key=int):
            lines.append(f"  k={k}: mean wait {m['confirmation_mean_s'][k] / 60:.1f} min, "
                         f"p90 {m['confirmation_p90_s'][k] / 60:.1f} min "
                         f"({m['confirmation_count'][k]:.0f} txs)")
        reorgs = m.get("reorg_depth", {})
        if reorgs:
            lines.append("  reorg depths: " + ", ".join(f"{d}:{reorgs[d]:.0f}" for d in sorted(reorgs, key=int)))
        if m.get("miner_share"):
            figures.append(fig_dir / "miner_shares.png")
            plot_miner_shares(m, figures[-1])
        if m.get("confirmation_mean_s"):
            figures.append(fig_dir / "confirmation_waits.png")
            plot_confirmation_waits(m, figures[-1], interval)
        if m.get("reorg_depth"):
            figures.append(fig_dir / "reorg_depths.png")
            plot_reorgs(m, figures[-1])

    attack_path = run_dir / "attack_results.csv"
    if attack_path.exists():
        rows = _read_csv(attack_path)
        lines.append("attack grid:")
        for r in rows:
            lines.append(f"  q={float(r['q']):g} z={r['z']}: {r['successes']}/{r['trials']} = "
                         f"{float(r['rate']):.4f} [{float(r['ci_lo']):.4f}, {float(r['ci_hi']):.4f}]")
        if rows:
            figures.append(fig_dir / "attack_success.png")
            plot_attack(rows, figures[-1])

    clusters_path = run_dir / "clusters.csv"
    if clusters_path.exists():
        rows = _read_csv(clusters_path)
        sizes = defaultdict(int)
        for r in rows:
            sizes[r["cluster_id"]] += 1
        multi = sum(1 for s in sizes.values() if s > 1)
        lines.append(f"clusters: {len(rows)} addresses in {len(sizes)} clusters ({multi} with >1 address)")

    deanon_path = run_dir / "deanon.csv"
    if deanon_path.exists():
        rows = _read_csv(deanon_path)
        n = len(rows)
        hits = sum(r["correct"] == "1" for r in rows)
        acc = hits / n if n else math.nan
        lines.append(f"first-relayer guess: {hits}/{n} correct (accuracy {acc:.3f})")

    text = "\n".join(lines) + "\n"
    (run_dir / "report.txt").write_text(text)
    return text, figures
