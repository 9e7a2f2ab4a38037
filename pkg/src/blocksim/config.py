"""Scenario parameters and their strict dict/JSON/TOML surface.

Unknown keys are errors.  Every :class:`ConfigError` carries the dotted path
of the offending key so the CLI can name it.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .chain import RetargetParams, RewardSchedule
from .ledger import COIN, SCHEMES

SCHEMA_VERSION = 1
TOPOLOGIES = ("complete", "random", "ring", "star")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def derive_seed(master: int, *labels: object) -> int:
    """Independent 64-bit sub-seed for a named stream or trial index."""
    text = ":".join([str(master), *map(str, labels)]).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "big")


@dataclass(frozen=True)
class Latency:
    kind: str = "constant"
    lo_ms: float = 0.0
    hi_ms: float = 0.0

    def sample(self, rng) -> float:
        """One link delay in simulated seconds."""
        if self.kind == "constant":
            return self.lo_ms / 1000.0
        return rng.uniform(self.lo_ms, self.hi_ms) / 1000.0

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "ms": self.lo_ms}
        return {"kind": "uniform", "lo_ms": self.lo_ms, "hi_ms": self.hi_ms}


@dataclass(frozen=True)
class Topology:
    kind: str = "complete"
    p: float = 0.5

    def to_dict(self) -> dict:
        if self.kind == "random":
            return {"kind": "random", "p": self.p}
        return {"kind": self.kind}


@dataclass(frozen=True)
class MinerSpec:
    node: int
    share: float


@dataclass(frozen=True)
class Workload:
    """Poisson payment traffic between simulated wallet users.

    Each user owns ``addresses_per_user`` addresses, all funded in the genesis
    block, and pays other users from up to ``max_inputs`` of its coins at once.
    """

    rate: float = 0.0
    users: int = 10
    addresses_per_user: int = 3
    initial_balance: int = 50 * COIN
    max_inputs: int = 3
    fee_min: int = 1_000
    fee_max: int = 10_000
    payment_fraction_min: float = 0.05
    payment_fraction_max: float = 0.5


@dataclass(frozen=True)
class HashrateChange:
    time: float
    multiplier: float


@dataclass
class SimConfig:
    rng_seed: int = 0
    node_count: int = 1
    topology: Topology = field(default_factory=Topology)
    link_latency: Latency = field(default_factory=Latency)
    miners: list[MinerSpec] = field(default_factory=lambda: [MinerSpec(0, 1.0)])
    mean_block_interval: float = 600.0
    duration: float = 60_000.0
    workload: Workload = field(default_factory=Workload)
    reward: RewardSchedule = field(default_factory=RewardSchedule)
    retarget: RetargetParams | None = None
    initial_target: int = 2**252
    max_block_txs: int = 1000
    orphan_limit: int = 100
    signature_scheme: str = "simulated"
    spy: bool = False
    hashrate_changes: list[HashrateChange] = field(default_factory=list)
    stop_height: int | None = None

    def validate(self) -> "SimConfig":
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigError("rng_seed", "must be an unsigned 64-bit integer")
        if self.node_count < 1:
            raise ConfigError("node_count", "must be at least 1")
        if self.topology.kind not in TOPOLOGIES:
            raise ConfigError("topology", f"unknown kind {self.topology.kind!r}")
        if not 0 <= self.topology.p <= 1:
            raise ConfigError("topology.p", "must be in [0, 1]")
        lat = self.link_latency
        if lat.kind not in ("constant", "uniform"):
            raise ConfigError("link_latency", f"unknown kind {lat.kind!r}")
        if lat.lo_ms < 0 or lat.hi_ms < 0 or (lat.kind == "uniform" and lat.hi_ms < lat.lo_ms):
            raise ConfigError("link_latency", "latencies must be non-negative with lo <= hi")
        if not self.miners:
            raise ConfigError("miners", "at least one miner is required")
        total = 0.0
        for m in self.miners:
            if not 0 <= m.node < self.node_count:
                raise ConfigError("miners", f"node {m.node} outside 0..{self.node_count - 1}")
            if not 0 <= m.share <= 1 or math.isnan(m.share):
                raise ConfigError("miners", f"share {m.share} outside [0, 1]")
            total += m.share
        if total > 1 + 1e-9:
            raise ConfigError("miners", f"hashrate shares sum to {total:g} > 1")
        if not self.mean_block_interval > 0:
            raise ConfigError("mean_block_interval", "must be positive")
        if not self.duration >= 0:
            raise ConfigError("duration", "must be non-negative")
        w = self.workload
        if w.rate < 0:
            raise ConfigError("workload.rate", "must be non-negative")
        if w.rate > 0 and (w.users < 2 or w.addresses_per_user < 1):
            raise ConfigError("workload.users", "need at least 2 users with 1 address each")
        if w.max_inputs < 1:
            raise ConfigError("workload.max_inputs", "must be at least 1")
        if not 0 <= w.fee_min <= w.fee_max:
            raise ConfigError("workload.fee_min", "need 0 <= fee_min <= fee_max")
        if not 0 < w.payment_fraction_min <= w.payment_fraction_max <= 1:
            raise ConfigError("workload.payment_fraction_min", "need 0 < min <= max <= 1")
        if w.initial_balance <= 0:
            raise ConfigError("workload.initial_balance", "must be positive")
        if not 0 < self.initial_target < 2**256:
            raise ConfigError("initial_target", "must be in (0, 2^256)")
        if self.max_block_txs < 0:
            raise ConfigError("max_block_txs", "must be non-negative")
        if self.signature_scheme not in SCHEMES:
            raise ConfigError("signature_scheme", f"unknown scheme {self.signature_scheme!r}")
        if self.stop_height is not None and self.stop_height < 1:
            raise ConfigError("stop_height", "must be positive")
        for ch in self.hashrate_changes:
            if ch.time < 0 or ch.multiplier < 0:
                raise ConfigError("hashrate_changes", "times and multipliers must be non-negative")
        return self

    @property
    def spy_node(self) -> int | None:
        return self.node_count if self.spy else None

    def to_dict(self) -> dict:
        return {
            "rng_seed": self.rng_seed,
            "node_count": self.node_count,
            "topology": self.topology.to_dict(),
            "link_latency": self.link_latency.to_dict(),
            "miners": [{"node": m.node, "share": m.share} for m in self.miners],
            "mean_block_interval": self.mean_block_interval,
            "duration": self.duration,
            "workload": {f.name: getattr(self.workload, f.name) for f in fields(Workload)},
            "reward": {
                "initial_reward": self.reward.initial_reward,
                "halving_interval": self.reward.halving_interval,
            },
            "retarget": None
            if self.retarget is None
            else {"window": self.retarget.window, "desired_interval": self.retarget.desired_interval},
            "initial_target": hex(self.initial_target),
            "max_block_txs": self.max_block_txs,
            "orphan_limit": self.orphan_limit,
            "signature_scheme": self.signature_scheme,
            "spy": self.spy,
            "hashrate_changes": [
                {"time": c.time, "multiplier": c.multiplier} for c in self.hashrate_changes
            ],
            "stop_height": self.stop_height,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], prefix: str = "") -> "SimConfig":
        data = dict(data)
        _reject_unknown(data, {f.name for f in fields(cls)}, prefix)
        kw: dict[str, Any] = {}
        p = prefix

        def num(key, typ=float):
            if key in data:
                kw[key] = _coerce(data[key], typ, p + key)

        num("rng_seed", int)
        num("node_count", int)
        num("mean_block_interval")
        num("duration")
        num("max_block_txs", int)
        num("orphan_limit", int)
        if "signature_scheme" in data:
            kw["signature_scheme"] = _coerce(data["signature_scheme"], str, p + "signature_scheme")
        if "spy" in data:
            kw["spy"] = _coerce(data["spy"], bool, p + "spy")
        if data.get("stop_height") is not None:
            kw["stop_height"] = _coerce(data["stop_height"], int, p + "stop_height")
        if "initial_target" in data:
            v = data["initial_target"]
            kw["initial_target"] = int(v, 0) if isinstance(v, str) else _coerce(v, int, p + "initial_target")
        if "topology" in data:
            kw["topology"] = _parse_topology(data["topology"], p + "topology")
        if "link_latency" in data:
            kw["link_latency"] = _parse_latency(data["link_latency"], p + "link_latency")
        if "miners" in data:
            kw["miners"] = _parse_miners(data["miners"], p + "miners")
        if "workload" in data:
            kw["workload"] = _parse_flat(Workload, data["workload"], p + "workload.")
        if "reward" in data:
            try:
                kw["reward"] = _parse_flat(RewardSchedule, data["reward"], p + "reward.")
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(p + "reward", str(exc)) from None
        if "retarget" in data:
            r = data["retarget"]
            if r is None or r is False:
                kw["retarget"] = None
            else:
                r = dict(r)
                enabled = r.pop("enabled", True)
                if "desired_interval" not in r:
                    r["desired_interval"] = kw.get("mean_block_interval", 600.0)
                try:
                    params = _parse_flat(RetargetParams, r, p + "retarget.")
                except ValueError as exc:
                    if isinstance(exc, ConfigError):
                        raise
                    raise ConfigError(p + "retarget", str(exc)) from None
                kw["retarget"] = params if enabled else None
        if "hashrate_changes" in data:
            items = data["hashrate_changes"]
            if not isinstance(items, list):
                raise ConfigError(p + "hashrate_changes", "must be a list")
            kw["hashrate_changes"] = [
                _parse_flat(HashrateChange, c, f"{p}hashrate_changes[{i}].") for i, c in enumerate(items)
            ]
        return cls(**kw).validate()


def _reject_unknown(data: Mapping, allowed: set[str], prefix: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(prefix + str(key), "unknown key")


def _coerce(value: Any, typ: type, key: str):
    if typ is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    raise TypeError(typ)


def _parse_flat(cls, data: Any, prefix: str):
    if not isinstance(data, Mapping):
        raise ConfigError(prefix.rstrip("."), "expected a table/object")
    types = {f.name: f.type for f in fields(cls)}
    _reject_unknown(data, set(types), prefix)
    kw = {}
    for key, value in data.items():
        typ = {"int": int, "float": float, "str": str, "bool": bool}.get(str(types[key]), float)
        kw[key] = _coerce(value, typ, prefix + key)
    return cls(**kw)


def _parse_topology(value: Any, key: str) -> Topology:
    if isinstance(value, str):
        return Topology(value)
    if not isinstance(value, Mapping):
        raise ConfigError(key, "expected a string or table")
    _reject_unknown(value, {"kind", "p"}, key + ".")
    return Topology(_coerce(value.get("kind", "complete"), str, key + ".kind"), _coerce(value.get("p", 0.5), float, key + ".p"))


def _parse_latency(value: Any, key: str) -> Latency:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return Latency("constant", float(value), float(value))
    if not isinstance(value, Mapping):
        raise ConfigError(key, "expected a number (ms) or table")
    kind = _coerce(value.get("kind", "constant"), str, key + ".kind")
    if kind == "constant":
        _reject_unknown(value, {"kind", "ms"}, key + ".")
        ms = _coerce(value.get("ms", 0.0), float, key + ".ms")
        return Latency("constant", ms, ms)
    _reject_unknown(value, {"kind", "lo_ms", "hi_ms"}, key + ".")
    return Latency(kind, _coerce(value.get("lo_ms", 0.0), float, key + ".lo_ms"), _coerce(value.get("hi_ms", 0.0), float, key + ".hi_ms"))


def _parse_miners(value: Any, key: str) -> list[MinerSpec]:
    if not isinstance(value, list):
        raise ConfigError(key, "expected a list")
    out = []
    for i, m in enumerate(value):
        if isinstance(m, (list, tuple)) and len(m) == 2:
            m = {"node": m[0], "share": m[1]}
        if not isinstance(m, Mapping):
            raise ConfigError(f"{key}[{i}]", "expected {node, share}")
        _reject_unknown(m, {"node", "share"}, f"{key}[{i}].")
        out.append(MinerSpec(_coerce(m.get("node", 0), int, f"{key}[{i}].node"), _coerce(m.get("share", 0.0), float, f"{key}[{i}].share")))
    return out


def load_mapping(path: str | Path) -> dict:
    """Read a scenario file as JSON or TOML depending on its suffix."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)
