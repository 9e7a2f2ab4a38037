"""Post-hoc analysis of exported chains and traces.

* transaction graph built from a best-chain export,
* address clustering under the multi-input heuristic (union-find),
* the first-relayer source inference against a spy peered with every node,
* run summary metrics.
"""

from __future__ import annotations

import json
import math
import statistics
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .chain import Block, ChainFormatError
from .ledger import TxRejected, sha256
from .trace import EventTrace, TraceIndex


# --------------------------------------------------------------------------
# Transaction graph


@dataclass
class TxNode:
    tx_id: str
    height: int
    coinbase: bool
    # (address, amount, "txid:index") per input, (address, amount) per output
    inputs: list[tuple[str, int, str]] = field(default_factory=list)
    outputs: list[tuple[str, int]] = field(default_factory=list)

    @property
    def input_total(self) -> int:
        return sum(a for _, a, _ in self.inputs)

    @property
    def output_total(self) -> int:
        return sum(a for _, a in self.outputs)

    @property
    def fee(self) -> int:
        return self.input_total - self.output_total if not self.coinbase else 0


@dataclass
class TxGraph:
    txs: dict[str, TxNode] = field(default_factory=dict)
    addresses: dict[str, None] = field(default_factory=dict)  # insertion-ordered set

    def output_edges(self) -> Iterable[tuple[str, str, int]]:
        """(tx -> address, amount)."""
        for tx in self.txs.values():
            for addr, amount in tx.outputs:
                yield tx.tx_id, addr, amount

    def spend_edges(self) -> Iterable[tuple[str, str, int]]:
        """(address -> tx, amount)."""
        for tx in self.txs.values():
            for addr, amount, _ in tx.inputs:
                yield addr, tx.tx_id, amount

    def input_sets(self) -> list[tuple[str, list[str]]]:
        return [(t.tx_id, [a for a, _, _ in t.inputs]) for t in self.txs.values() if not t.coinbase]

    def conservation_violations(self) -> list[str]:
        """Non-coinbase txs whose outputs exceed their inputs."""
        return [t.tx_id for t in self.txs.values() if not t.coinbase and t.output_total > t.input_total]


def _blocks_with_lines(chain_export) -> Iterable[tuple[int, Block]]:
    for lineno, item in enumerate(chain_export, start=1):
        if isinstance(item, Block):
            yield lineno, item
            continue
        if not item.strip():
            continue
        try:
            yield lineno, Block.from_json(json.loads(item))
        except (ValueError, KeyError, TypeError, TxRejected) as exc:
            raise ChainFormatError(lineno, f"{type(exc).__name__}: {exc}") from exc


def build_tx_graph(chain_export: Iterable[str | Block]) -> TxGraph:
    """Graph of a best-chain export given as JSON lines or :class:`Block` objects."""
    graph = TxGraph()
    outputs: dict[tuple[str, int], tuple[str, int]] = {}
    prev_id = None
    for lineno, block in _blocks_with_lines(chain_export):
        if prev_id is not None and block.parent_id.hex() != prev_id:
            raise ChainFormatError(lineno, "block does not extend the previous line")
        prev_id = block.block_id.hex()
        for tx in block.all_txs():
            tid = tx.tx_id.hex()
            node = TxNode(tid, block.height, tx.is_coinbase)
            for txin in tx.inputs:
                key = (txin.outpoint.tx_id.hex(), txin.outpoint.output_index)
                try:
                    addr, amount = outputs.pop(key)
                except KeyError:
                    raise ChainFormatError(lineno, f"input {key[0]}:{key[1]} not an unspent output of the export") from None
                if sha256(txin.public_key).hex() != addr:
                    raise ChainFormatError(lineno, f"input key does not match address in {tid}")
                node.inputs.append((addr, amount, f"{key[0]}:{key[1]}"))
            for i, out in enumerate(tx.outputs):
                addr = out.address.hex()
                node.outputs.append((addr, out.amount))
                outputs[(tid, i)] = (addr, out.amount)
                graph.addresses.setdefault(addr)
            for addr, _, _ in node.inputs:
                graph.addresses.setdefault(addr)
            graph.txs[tid] = node
    return graph


# --------------------------------------------------------------------------
# Clustering


class UnionFind:
    def __init__(self) -> None:
        self.parent: dict[str, str] = {}
        self.size: dict[str, int] = {}

    def add(self, x: str) -> None:
        if x not in self.parent:
            self.parent[x] = x
            self.size[x] = 1

    def find(self, x: str) -> str:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: str, b: str) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True


@dataclass
class ClusterSet:
    cluster_of: dict[str, str]
    members: dict[str, list[str]]
    provenance: dict[str, list[str]]

    def partition(self) -> set[frozenset[str]]:
        return {frozenset(m) for m in self.members.values()}

    def __len__(self) -> int:
        return len(self.members)


def cluster_input_sets(input_sets: Iterable[tuple[str, Sequence[str]]], addresses: Iterable[str] = ()) -> ClusterSet:
    """Merge every address co-occurring among the inputs of one transaction.

    ``input_sets`` yields ``(tx_id, input_addresses)``.  Clusters are named
    by their lexicographically smallest address.
    """
    uf = UnionFind()
    for a in addresses:
        uf.add(a)
    merges: list[tuple[str, str]] = []  # (tx, an address of the merged set)
    for tx_id, ins in input_sets:
        ins = list(ins)
        for a in ins:
            uf.add(a)
        merged = False
        for other in ins[1:]:
            merged |= uf.union(ins[0], other)
        if merged:
            merges.append((tx_id, ins[0]))
    members: dict[str, list[str]] = {}
    for a in uf.parent:
        members.setdefault(uf.find(a), []).append(a)
    cluster_of, named = {}, {}
    for root, addrs in members.items():
        addrs.sort()
        named[addrs[0]] = addrs
        for a in addrs:
            cluster_of[a] = addrs[0]
    provenance: dict[str, list[str]] = {cid: [] for cid in named}
    for tx_id, a in merges:
        provenance[cluster_of[a]].append(tx_id)
    return ClusterSet(cluster_of, dict(sorted(named.items())), provenance)


def cluster_addresses(graph: TxGraph) -> ClusterSet:
    return cluster_input_sets(graph.input_sets(), graph.addresses)


# --------------------------------------------------------------------------
# First-relayer source inference


class NoSpyError(ValueError):
    pass


@dataclass
class DeanonReport:
    rows: list[tuple[str, int, int]]  # (tx, guessed source, true source)
    node_count: int

    @property
    def correct(self) -> int:
        return sum(g == t for _, g, t in self.rows)

    @property
    def accuracy(self) -> float:
        return self.correct / len(self.rows) if self.rows else math.nan

    @property
    def baseline(self) -> float:
        return 1.0 / self.node_count

    @property
    def stderr(self) -> float:
        n = len(self.rows)
        p = self.accuracy
        return math.sqrt(p * (1 - p) / n) if n else math.nan


def first_relayer_attack(trace: EventTrace) -> DeanonReport:
    """Guess each transaction's origin as the first peer to relay it to the spy."""
    spy = trace.spy_node
    if spy is None:
        raise NoSpyError("trace has no spy node")
    truth: dict[str, int] = {}
    guess: dict[str, int] = {}
    for ev in trace.events:
        kind = ev["kind"]
        if kind == "TxArrival" and ev.get("tx") and ev.get("status") != "no_funds":
            truth.setdefault(ev["tx"], ev["node"])
        elif kind == "TxRelay" and ev["node"] == spy:
            guess.setdefault(ev["tx"], ev["sender"])
    rows = [(tx, guess[tx], src) for tx, src in truth.items() if tx in guess]
    return DeanonReport(rows, trace.meta["config"]["node_count"])


# --------------------------------------------------------------------------
# Summary metrics


def binomial_ci(successes: int, n: int, z: float = 2.5758293035489004) -> tuple[float, float]:
    """Normal-approximation interval; default z gives 99% coverage."""
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    half = z * math.sqrt(p * (1 - p) / n)
    return p - half, p + half


@dataclass
class Metrics:
    rows: list[tuple[str, str, float]] = field(default_factory=list)

    def add(self, metric: str, key: object, value: float) -> None:
        self.rows.append((metric, str(key), value))

    def get(self, metric: str, key: object = "") -> float:
        for m, k, v in self.rows:
            if m == metric and k == str(key):
                return v
        raise KeyError((metric, key))

    def where(self, metric: str) -> dict[str, float]:
        return {k: v for m, k, v in self.rows if m == metric}

    def to_csv(self, fh) -> None:
        import csv

        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "key", "value"])
        for m, k, v in self.rows:
            w.writerow([m, k, repr(v) if isinstance(v, float) else v])


def confirmation_waits(index: TraceIndex, k: int, injected_before: float = math.inf) -> list[float]:
    """Broadcast-to-k-confirmations delays, seen from each tx's entry node.

    Txs broadcast after ``injected_before`` are skipped; near the end of a run
    only the quick ones would finish, which biases the sample low.
    """
    waits = []
    for tx, (node, t0) in index.injected.items():
        if t0 > injected_before:
            continue
        t = index.time_to_depth(tx, node, k, t0)
        if t is not None:
            waits.append(t - t0)
    return waits


def summarize(trace: EventTrace, ks: Sequence[int] = (1, 2, 3, 4, 5, 6), reference_node: int = 0) -> Metrics:
    index = TraceIndex(trace)
    cfg = trace.meta.get("config", {})
    m = Metrics()
    found = list(index.miner_of)
    total = len(found)
    m.add("blocks_found", "", total)
    per_miner = Counter(index.miner_of.values())
    for i, spec in enumerate(cfg.get("miners", [])):
        n = per_miner.get(i, 0)
        lo, hi = binomial_ci(n, total)
        m.add("miner_blocks", i, n)
        m.add("miner_fraction", i, n / total if total else math.nan)
        m.add("miner_share", i, spec["share"])
        m.add("miner_fraction_ci99_lo", i, lo)
        m.add("miner_fraction_ci99_hi", i, hi)
    tip = trace.final_tips.get(reference_node)
    best = set(index.best_chain(tip)) if tip else set()
    stale = sum(1 for b in found if b not in best)
    m.add("best_chain_height", "", trace.final_heights.get(reference_node, 0))
    m.add("stale_blocks", "", stale)
    m.add("fork_rate", "", stale / total if total else 0.0)
    duration = cfg.get("duration") or 0
    if duration:
        m.add("block_rate", "", total / duration)
    interval = cfg.get("mean_block_interval") or 0
    for k in ks:
        # leave room for the slow tail (Erlang-k beyond 3k intervals is negligible)
        cutoff = duration - 3 * k * interval if duration > 6 * k * interval else math.inf
        waits = confirmation_waits(index, k, cutoff)
        m.add("confirmation_count", k, len(waits))
        if waits:
            waits.sort()
            m.add("confirmation_mean_s", k, statistics.fmean(waits))
            m.add("confirmation_median_s", k, statistics.median(waits))
            m.add("confirmation_p90_s", k, waits[min(len(waits) - 1, int(0.9 * len(waits)))])
    m.add("transactions", "", len(index.injected))
    hist = Counter(depth for _, _, depth in index.reorgs)
    m.add("reorg_events", "", sum(hist.values()))
    for depth in sorted(hist):
        m.add("reorg_depth", depth, hist[depth])
    return m
