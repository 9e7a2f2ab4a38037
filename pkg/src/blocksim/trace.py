"""Event traces: JSON Lines I/O and after-the-fact queries over a run."""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from typing import IO, Iterable


class TraceFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class EventTrace:
    """Ordered record of every processed event plus the end state.

    On disk: a ``Meta`` line, one line per event, ``FirstSeen`` lines and a
    closing ``Final`` line.
    """

    meta: dict = field(default_factory=dict)
    events: list[dict] = field(default_factory=list)
    final_tips: dict[int, str] = field(default_factory=dict)
    final_heights: dict[int, int] = field(default_factory=dict)
    first_seen: dict[str, dict[int, float]] = field(default_factory=dict)

    def add(self, event: dict) -> None:
        self.events.append(event)

    @property
    def spy_node(self) -> int | None:
        cfg = self.meta.get("config", {})
        return cfg.get("node_count") if cfg.get("spy") else None

    def lines(self) -> Iterable[str]:
        yield _dumps({"kind": "Meta", **self.meta})
        for ev in self.events:
            yield _dumps(ev)
        for tx, seen in self.first_seen.items():
            yield _dumps({"kind": "FirstSeen", "tx": tx, "times": {str(k): v for k, v in seen.items()}})
        yield _dumps(
            {
                "kind": "Final",
                "tips": {str(k): v for k, v in self.final_tips.items()},
                "heights": {str(k): v for k, v in self.final_heights.items()},
            }
        )

    def write_jsonl(self, fh: IO[str]) -> None:
        for line in self.lines():
            fh.write(line)
            fh.write("\n")

    def to_text(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    @classmethod
    def read_jsonl(cls, lines: Iterable[str]) -> "EventTrace":
        trace = cls()
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                kind = obj["kind"]
            except (ValueError, KeyError, TypeError) as exc:
                raise TraceFormatError(lineno, f"{type(exc).__name__}: {exc}") from exc
            if kind == "Meta":
                obj.pop("kind")
                trace.meta = obj
            elif kind == "FirstSeen":
                trace.first_seen[obj["tx"]] = {int(k): v for k, v in obj["times"].items()}
            elif kind == "Final":
                trace.final_tips = {int(k): v for k, v in obj.get("tips", {}).items()}
                trace.final_heights = {int(k): v for k, v in obj.get("heights", {}).items()}
            else:
                if "t" not in obj or "node" not in obj:
                    raise TraceFormatError(lineno, "event lacks 't' or 'node'")
                trace.events.append(obj)
        return trace


class TraceIndex:
    """Block tree and per-node tip timelines reconstructed from a trace."""

    def __init__(self, trace: EventTrace) -> None:
        self.trace = trace
        self.parent: dict[str, str] = {}
        self.height: dict[str, int] = {}
        self.block_txs: dict[str, list[str]] = {}
        self.tx_blocks: dict[str, list[str]] = {}
        self.miner_of: dict[str, int] = {}
        self.found_at: dict[str, float] = {}
        self.injected: dict[str, tuple[int, float]] = {}
        # node -> parallel lists of (time, tip, tip_height)
        self._tip_times: dict[int, list[float]] = {}
        self._tips: dict[int, list[tuple[str, int]]] = {}
        self.reorgs: list[tuple[int, float, int]] = []
        for ev in trace.events:
            kind = ev["kind"]
            if kind == "BlockFound":
                b = ev["block"]
                self.parent[b] = ev["parent"]
                self.height[b] = ev["height"]
                self.block_txs[b] = ev["txs"]
                self.miner_of[b] = ev["miner"]
                self.found_at[b] = ev["t"]
                for tx in ev["txs"]:
                    self.tx_blocks.setdefault(tx, []).append(b)
            elif kind == "TxArrival" and ev.get("tx") and ev["tx"] not in self.injected:
                self.injected[ev["tx"]] = (ev["node"], ev["t"])
            if "tip" in ev:
                n = ev["node"]
                self._tip_times.setdefault(n, []).append(ev["t"])
                self._tips.setdefault(n, []).append((ev["tip"], ev["tip_height"]))
            if kind == "BlockRelay" and ev.get("reorg_depth", 0) > 0:
                self.reorgs.append((ev["node"], ev["t"], ev["reorg_depth"]))

    def tip_at(self, node: int, time: float) -> tuple[str, int] | None:
        times = self._tip_times.get(node)
        if not times:
            return None
        i = bisect.bisect_right(times, time)
        return self._tips[node][i - 1] if i else None

    def tip_timeline(self, node: int) -> list[tuple[float, str, int]]:
        return [(t, tip, h) for t, (tip, h) in zip(self._tip_times.get(node, []), self._tips.get(node, []))]

    def is_ancestor(self, block: str, tip: str, tip_height: int) -> bool:
        target_h = self.height.get(block)
        if target_h is None or target_h > tip_height:
            return False
        cur, h = tip, tip_height
        while h > target_h:
            cur = self.parent.get(cur)
            if cur is None:
                return False
            h -= 1
        return cur == block

    def depth_on(self, tx: str, tip: str, tip_height: int) -> int:
        for b in self.tx_blocks.get(tx, ()):
            if self.is_ancestor(b, tip, tip_height):
                return tip_height - self.height[b] + 1
        return 0

    def confirmations(self, tx: str, node: int, time: float) -> int | None:
        seen = self.trace.first_seen.get(tx, {})
        known = node in seen and seen[node] <= time
        state = self.tip_at(node, time)
        depth = self.depth_on(tx, *state) if state else 0
        if depth == 0 and not known:
            return None
        return depth

    def best_chain(self, tip: str) -> list[str]:
        out = []
        cur = tip
        while cur in self.parent:
            out.append(cur)
            cur = self.parent[cur]
        out.reverse()
        return out

    def time_to_depth(self, tx: str, node: int, k: int, since: float) -> float | None:
        """First time after ``since`` at which ``tx`` sits ``k`` deep on ``node``'s best chain."""
        times = self._tip_times.get(node, [])
        tips = self._tips.get(node, [])
        holders = self.tx_blocks.get(tx)
        if not holders:
            return None
        min_h = min(self.height[b] for b in holders) + k - 1
        start = bisect.bisect_left(times, since)
        for i in range(start, len(times)):
            tip, h = tips[i]
            if h < min_h:
                continue
            if self.depth_on(tx, tip, h) >= k:
                return times[i]
        return None


def confirmations(trace: EventTrace | TraceIndex, tx_id: str | bytes, node: int, time: float) -> int | None:
    """Confirmation count of ``tx_id`` on ``node`` at ``time``; None if the node never saw it."""
    index = trace if isinstance(trace, TraceIndex) else TraceIndex(trace)
    if isinstance(tx_id, bytes):
        tx_id = tx_id.hex()
    return index.confirmations(tx_id, node, time)
