"""Double-spend and majority-hashpower attacks, and the green-address policy.

Each trial is a race between one logical attacker (zero internal latency)
and the honest network, both finding blocks as Poisson processes with rates
``q / T`` and ``(1 - q) / T``.  With ``chain_backed`` the race drives real
blocks through a merchant's :class:`ChainStore` and success is read off the
merchant's best chain; otherwise branch lengths are tracked directly.  Both
paths consume the per-trial random stream identically.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, fields
from typing import Iterable, Mapping, Sequence

from .chain import MAX_TARGET, ChainStore, make_genesis, make_template, mine_block
from .config import ConfigError, SimConfig, _coerce, _reject_unknown, derive_seed
from .ledger import (
    COIN,
    Address,
    OutPoint,
    Transaction,
    get_scheme,
    make_coinbase,
    make_payment,
    sign_transaction,
)

DOUBLE_SPEND = "double_spend"
MAJORITY_OVERTAKE = "majority_overtake"


@dataclass
class AttackSpec:
    kind: str = DOUBLE_SPEND
    attacker_share: float = 0.1
    confirmations: int = 6
    premine_lead: int = 0
    trials: int = 1000
    horizon: int = 50
    publish_lead: int = 1
    seed: int = 0
    chain_backed: bool = False
    mean_block_interval: float = 600.0

    def validate(self) -> "AttackSpec":
        if self.kind not in (DOUBLE_SPEND, MAJORITY_OVERTAKE):
            raise ConfigError("attack.kind", f"unknown attack {self.kind!r}")
        if not 0 <= self.attacker_share < 1:
            raise ConfigError("attack.attacker_share", "must be in [0, 1)")
        if self.kind == MAJORITY_OVERTAKE and self.attacker_share == 0:
            raise ConfigError("attack.attacker_share", "overtaking needs a positive share")
        if self.confirmations < 1 and self.kind == DOUBLE_SPEND:
            raise ConfigError("attack.confirmations", "must be at least 1")
        if self.confirmations < 0:
            raise ConfigError("attack.confirmations", "must be non-negative")
        if self.premine_lead < 0:
            raise ConfigError("attack.premine_lead", "must be non-negative")
        if self.trials < 1:
            raise ConfigError("attack.trials", "must be at least 1")
        if self.horizon < 1:
            raise ConfigError("attack.horizon", "must be at least 1")
        if self.publish_lead < 1:
            raise ConfigError("attack.publish_lead", "must be at least 1")
        if not self.mean_block_interval > 0:
            raise ConfigError("attack.mean_block_interval", "must be positive")
        return self

    def with_cell(self, q: float, z: int) -> "AttackSpec":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(attacker_share=q, confirmations=z)
        return AttackSpec(**kw).validate()

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping, base: SimConfig | None = None) -> "AttackSpec":
        allowed = {f.name for f in fields(cls)} | {"grid"}
        _reject_unknown(data, allowed, "attack.")
        types = {"kind": str, "attacker_share": float, "chain_backed": bool, "mean_block_interval": float}
        kw = {}
        for key, value in data.items():
            if key == "grid":
                continue
            kw[key] = _coerce(value, types.get(key, int), "attack." + key)
        if base is not None and "mean_block_interval" not in kw:
            kw["mean_block_interval"] = base.mean_block_interval
        return cls(**kw).validate()


@dataclass(frozen=True)
class TrialRecord:
    index: int
    success: bool
    attacker_blocks: int
    honest_blocks: int
    duration: float
    accepted_at: float | None


@dataclass
class AttackOutcome:
    spec: AttackSpec
    success_count: int
    trial_count: int
    records: list[TrialRecord] = field(repr=False, default_factory=list)

    @property
    def success_rate(self) -> float:
        return self.success_count / self.trial_count

    @property
    def mean_blocks_to_success(self) -> float:
        wins = [r.attacker_blocks + r.honest_blocks for r in self.records if r.success]
        return sum(wins) / len(wins) if wins else math.nan

    @property
    def mean_time_to_success(self) -> float:
        wins = [r.duration for r in self.records if r.success]
        return sum(wins) / len(wins) if wins else math.nan

    def overtake_times(self) -> list[float]:
        return [r.duration for r in self.records if r.success]

    def wilson_interval(self, z: float = 1.959963984540054) -> tuple[float, float]:
        return wilson_interval(self.success_count, self.trial_count, z)


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


# --------------------------------------------------------------------------
# Race engine


class _Counters:
    """Branch lengths only."""

    def __init__(self, spec: AttackSpec) -> None:
        self.attacker = spec.premine_lead
        self.honest = 0 if spec.kind == DOUBLE_SPEND else spec.confirmations

    def attacker_block(self, t: float) -> None:
        self.attacker += 1

    def honest_block(self, t: float) -> None:
        self.honest += 1

    def payment_confirmations(self) -> int:
        return self.honest

    def publish(self) -> None:
        pass

    def attacker_won(self) -> bool:
        return self.attacker > self.honest


class _ChainRace:
    """Real blocks: an honest/merchant store and the attacker's private store.

    The payment to the merchant sits in the first honest block past the fork
    point; the conflicting spend back to the attacker sits in the first
    private block.
    """

    def __init__(self, spec: AttackSpec, ctx: "_ChainContext", index: int) -> None:
        self.spec = spec
        self.ctx = ctx
        self.public = ChainStore(ctx.genesis, scheme=ctx.scheme, check_targets=False)
        self.private = ChainStore(ctx.genesis, scheme=ctx.scheme, check_targets=False)
        self.rng = random.Random(derive_seed(spec.seed, "nonce", index))
        self.fork_height = 0
        if spec.kind == MAJORITY_OVERTAKE:
            # honest blocks already on top of the fork point the attacker mines from
            for _ in range(spec.confirmations):
                self.honest_block(0.0)
        for _ in range(spec.premine_lead):
            self.attacker_block(0.0)

    def _extend(self, store: ChainStore, payee: Address, tx: Transaction, t: float) -> None:
        parent = store.tip.header
        txs = [tx] if store.confirmations(tx.tx_id) is None else []
        fees = self.ctx.fee * len(txs)
        coinbase = make_coinbase([(payee, store.schedule.reward(parent.height + 1) + fees)], parent.height + 1)
        block = mine_block(make_template(parent, coinbase, txs, MAX_TARGET, t), 1, self.rng)
        store.connect_block(block)

    def attacker_block(self, t: float) -> None:
        self._extend(self.private, self.ctx.attacker_miner, self.ctx.conflict, t)

    def honest_block(self, t: float) -> None:
        self._extend(self.public, self.ctx.honest_miner, self.ctx.payment, t)

    @property
    def attacker(self) -> int:
        return self.private.height - self.fork_height

    @property
    def honest(self) -> int:
        return self.public.height - self.fork_height

    def payment_confirmations(self) -> int:
        return self.public.confirmations(self.ctx.payment.tx_id) or 0

    def publish(self) -> None:
        for block in list(self.private.best_blocks())[1:]:
            self.public.connect_block(block)

    def attacker_won(self) -> bool:
        pay = self.public.confirmations(self.ctx.payment.tx_id) or 0
        conflict = self.public.confirmations(self.ctx.conflict.tx_id) or 0
        return pay == 0 and conflict > 0


@dataclass
class _ChainContext:
    genesis: object
    scheme: object
    payment: Transaction
    conflict: Transaction
    attacker_miner: Address
    honest_miner: Address
    merchant: Address
    fee: int


def _chain_context(spec: AttackSpec) -> _ChainContext:
    scheme = get_scheme("simulated")
    attacker = scheme.generate(derive_seed(spec.seed, "attacker"))
    attacker_alt = scheme.generate(derive_seed(spec.seed, "attacker-alt"))
    merchant = scheme.generate(derive_seed(spec.seed, "merchant"))
    attacker_miner = scheme.generate(derive_seed(spec.seed, "attacker-miner"))
    honest_miner = scheme.generate(derive_seed(spec.seed, "honest-miner"))
    funds = 10 * COIN
    fee = 1_000
    genesis = make_genesis(MAX_TARGET, [(attacker.address, funds)])
    coin = OutPoint(genesis.coinbase.tx_id, 0)
    payment = sign_transaction(
        make_payment([coin], [(merchant.address, funds - fee)]), [attacker], scheme=scheme
    )
    conflict = sign_transaction(
        make_payment([coin], [(attacker_alt.address, funds - fee)]), [attacker], scheme=scheme
    )
    return _ChainContext(
        genesis, scheme, payment, conflict, attacker_miner.address, honest_miner.address, merchant.address, fee
    )


def _run_trial(spec: AttackSpec, index: int, state) -> TrialRecord:
    q = spec.attacker_share
    T = spec.mean_block_interval
    rng = random.Random(derive_seed(spec.seed, "trial", index))
    inf = math.inf
    next_a = rng.expovariate(q / T) if q > 0 else inf
    next_h = rng.expovariate((1 - q) / T)
    z = spec.confirmations
    overtake = spec.kind == MAJORITY_OVERTAKE
    accepted_at = 0.0 if overtake or state.payment_confirmations() >= z else None
    t = 0.0
    while True:
        lead = state.attacker - state.honest
        if accepted_at is not None and lead >= spec.publish_lead:
            a, h = state.attacker, state.honest
            state.publish()
            return TrialRecord(index, state.attacker_won(), a, h, t, accepted_at)
        if -lead >= spec.horizon:
            return TrialRecord(index, False, state.attacker, state.honest, t, accepted_at)
        if next_a < next_h:
            t = next_a
            state.attacker_block(t)
            next_a = t + rng.expovariate(q / T)
        else:
            t = next_h
            state.honest_block(t)
            next_h = t + rng.expovariate((1 - q) / T)
            if accepted_at is None and state.payment_confirmations() >= z:
                accepted_at = t


def _run(spec: AttackSpec, indices: Iterable[int] | None = None) -> AttackOutcome:
    spec.validate()
    ctx = _chain_context(spec) if spec.chain_backed else None
    records = []
    for i in indices if indices is not None else range(spec.trials):
        state = _ChainRace(spec, ctx, i) if ctx else _Counters(spec)
        records.append(_run_trial(spec, i, state))
    wins = sum(r.success for r in records)
    return AttackOutcome(spec, wins, len(records), records)


def run_double_spend(spec: AttackSpec) -> AttackOutcome:
    """Merchant accepts at ``confirmations`` blocks; attacker publishes a conflicting branch once ahead."""
    if spec.kind != DOUBLE_SPEND:
        raise ConfigError("attack.kind", "run_double_spend needs kind double_spend")
    return _run(spec)


def run_majority_overtake(spec: AttackSpec) -> AttackOutcome:
    """Attacker starts ``confirmations`` blocks behind and wins on a strict lead within ``horizon``."""
    if spec.kind != MAJORITY_OVERTAKE:
        raise ConfigError("attack.kind", "run_majority_overtake needs kind majority_overtake")
    return _run(spec)


def run_attack(spec: AttackSpec) -> AttackOutcome:
    return run_double_spend(spec) if spec.kind == DOUBLE_SPEND else run_majority_overtake(spec)


def run_grid(spec: AttackSpec, grid: Sequence[tuple[float, int]], jobs: int = 1) -> list[AttackOutcome]:
    """One outcome per (q, z) cell, in grid order regardless of ``jobs``."""
    cells = [spec.with_cell(q, z) for q, z in grid]
    if jobs <= 1 or len(cells) <= 1:
        return [run_attack(c) for c in cells]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_attack, cells))


# --------------------------------------------------------------------------
# Green addresses


@dataclass(frozen=True)
class GreenAddressPolicy:
    whitelist: frozenset[Address] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "whitelist", frozenset(self.whitelist))


ACCEPT = "accept"
WAIT = "wait"


def accept_payment(
    policy: GreenAddressPolicy,
    tx: Transaction,
    sender_addresses: Iterable[Address],
    confirmations: int,
    z: int,
) -> str:
    """Merchant decision: ``"accept"`` or ``"wait"``.

    Whitelisted senders are trusted at zero confirmations; everyone else
    waits for ``z``.
    """
    senders = list(sender_addresses)
    if confirmations >= z:
        return ACCEPT
    if senders and all(a in policy.whitelist for a in senders):
        return ACCEPT
    return WAIT


@dataclass(frozen=True)
class ZeroConfResult:
    decision: str
    payment_confirmations: int
    conflict_confirmations: int

    @property
    def merchant_lost(self) -> bool:
        return self.decision == ACCEPT and self.payment_confirmations == 0


def zero_conf_scenario(policy_whitelisted: bool, sender_honest: bool, seed: int = 0, z: int = 6) -> ZeroConfResult:
    """Two-node network: merchant at node 0, the only miner at node 1.

    The sender pays the merchant at node 0.  A dishonest sender also hands a
    conflicting spend straight to the miner at the same instant.
    """
    from .config import Latency, MinerSpec
    from .netsim import Simulation

    cfg = SimConfig(
        rng_seed=seed,
        node_count=2,
        link_latency=Latency("constant", 50.0, 50.0),
        miners=[MinerSpec(1, 1.0)],
        mean_block_interval=600.0,
        duration=600.0 * 12,
    )
    scheme = get_scheme(cfg.signature_scheme)
    sender = scheme.generate(derive_seed(seed, "green-sender"))
    merchant = scheme.generate(derive_seed(seed, "green-merchant"))
    other = scheme.generate(derive_seed(seed, "green-other"))
    sim = Simulation(cfg, extra_allocations=[(sender.address, 10 * COIN)])
    genesis = sim.genesis
    coin = OutPoint(genesis.coinbase.tx_id, 0)
    pay = sign_transaction(make_payment([coin], [(merchant.address, 10 * COIN - 1000)]), [sender], scheme=scheme)
    sim.inject_transaction(0, pay, 1.0)
    conflict = None
    if not sender_honest:
        conflict = sign_transaction(make_payment([coin], [(other.address, 10 * COIN - 1000)]), [sender], scheme=scheme)
        sim.inject_transaction(1, conflict, 1.0)
    policy = GreenAddressPolicy({sender.address} if policy_whitelisted else set())
    # the merchant decides the moment the payment reaches it, before any block
    decision = accept_payment(policy, pay, [sender.address], 0, z)
    sim.run()
    merchant_store = sim.nodes[0].chain
    pay_conf = merchant_store.confirmations(pay.tx_id) or 0
    conf_conf = (merchant_store.confirmations(conflict.tx_id) or 0) if conflict else 0
    if decision == WAIT and pay_conf >= z:
        decision = ACCEPT
    return ZeroConfResult(decision, pay_conf, conf_conf)
