"""Deterministic discrete-event simulation of a flooding P2P network of miners.

Block discovery is the memoryless abstraction of hash trials: each miner finds
blocks as a Poisson process whose rate is its hashrate share over the mean
block interval, scaled by how easy the current target is relative to the
initial one.  Blocks still carry a real (easy) proof of work.
"""

from __future__ import annotations

import heapq
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Sequence

from .chain import (
    Block,
    BlockRejected,
    ChainStore,
    make_genesis,
    make_template,
    mine_block,
)
from .config import SimConfig, derive_seed
from .ledger import (
    Address,
    KeyPair,
    MissingUtxo,
    OutPoint,
    Transaction,
    TxRejected,
    get_scheme,
    make_coinbase,
    make_payment,
    sign_transaction,
    validate_transaction,
)
from .trace import EventTrace

log = logging.getLogger(__name__)

TX_ARRIVAL = "TxArrival"
TX_RELAY = "TxRelay"
BLOCK_FOUND = "BlockFound"
BLOCK_RELAY = "BlockRelay"
SCHEDULED = "Scheduled"

DEFERRED_LIMIT = 500
MINING_ATTEMPTS = 1 << 24


@dataclass
class Miner:
    index: int
    node: int
    share: float
    keys: KeyPair
    generation: int = 0


@dataclass
class NodeState:
    node_id: int
    chain: ChainStore | None
    peers: list[int] = field(default_factory=list)
    mempool: dict[bytes, tuple[Transaction, int]] = field(default_factory=dict)
    spent: dict[OutPoint, bytes] = field(default_factory=dict)
    seen_txs: set[bytes] = field(default_factory=set)
    seen_blocks: set[bytes] = field(default_factory=set)
    deferred: dict[bytes, Transaction] = field(default_factory=dict)
    spy: bool = False

    def mempool_order(self) -> list[tuple[Transaction, int]]:
        """Highest fee rate first, ties by tx id."""
        return sorted(self.mempool.values(), key=lambda e: (-e[1] / e[0].size, e[0].tx_id))


@dataclass
class _User:
    keys: list[KeyPair]
    # unspent-by-us outpoint -> index of the owning key
    coins: dict[OutPoint, int] = field(default_factory=dict)


def build_topology(config: SimConfig, rng: random.Random) -> dict[int, list[int]]:
    n = config.node_count
    adj: dict[int, set[int]] = {i: set() for i in range(n)}

    def link(a: int, b: int) -> None:
        if a != b:
            adj[a].add(b)
            adj[b].add(a)

    kind = config.topology.kind
    if kind == "complete":
        for a in range(n):
            for b in range(a + 1, n):
                link(a, b)
    elif kind == "ring":
        if n > 1:
            for a in range(n):
                link(a, (a + 1) % n)
    elif kind == "star":
        for b in range(1, n):
            link(0, b)
    else:
        for a in range(n):
            for b in range(a + 1, n):
                if rng.random() < config.topology.p:
                    link(a, b)
        # join components in index order so every node is reachable
        comps, seen = [], set()
        for start in range(n):
            if start in seen:
                continue
            stack, comp = [start], []
            seen.add(start)
            while stack:
                cur = stack.pop()
                comp.append(cur)
                for nxt in sorted(adj[cur]):
                    if nxt not in seen:
                        seen.add(nxt)
                        stack.append(nxt)
            comps.append(min(comp))
        for a, b in zip(comps, comps[1:]):
            link(a, b)
    peers = {i: sorted(adj[i]) for i in range(n)}
    if config.spy:
        spy = config.spy_node
        for i in range(n):
            peers[i].append(spy)
        peers[spy] = list(range(n))
    return peers


class Simulation:
    """One run of the network; call :meth:`run` once.

    Extra transactions can be injected before running with
    :meth:`inject_transaction`.
    """

    def __init__(self, config: SimConfig, extra_allocations: Sequence[tuple[Address, int]] = ()) -> None:
        self.config = config.validate()
        seed = config.rng_seed
        self.scheme = get_scheme(config.signature_scheme)
        self.rng_latency = random.Random(derive_seed(seed, "latency"))
        self.rng_mining = random.Random(derive_seed(seed, "mining"))
        self.rng_nonce = random.Random(derive_seed(seed, "nonce"))
        self.rng_workload = random.Random(derive_seed(seed, "workload"))
        self.now = 0.0
        self._queue: list[tuple[float, int, str, Any]] = []
        self._seq = 0
        self.hash_multiplier = 1.0
        self.trace = EventTrace(meta={"config": config.to_dict(), "signature_scheme": self.scheme.name})

        self.users: list[_User] = []
        allocations = []
        w = config.workload
        if w.rate > 0:
            for u in range(w.users):
                keys = [
                    self.scheme.generate(derive_seed(seed, "user", u, k))
                    for k in range(w.addresses_per_user)
                ]
                self.users.append(_User(keys))
                allocations.extend((kp.address, w.initial_balance) for kp in keys)
        n_user_outputs = len(allocations)
        allocations.extend(extra_allocations)
        self.genesis = make_genesis(config.initial_target, allocations, config.reward)
        for i in range(n_user_outputs):
            u, k = divmod(i, w.addresses_per_user)
            self.users[u].coins[OutPoint(self.genesis.coinbase.tx_id, i)] = k
        self._owner = {
            kp.address: (u, k) for u, user in enumerate(self.users) for k, kp in enumerate(user.keys)
        }

        peers = build_topology(config, random.Random(derive_seed(seed, "topology")))
        self.nodes: list[NodeState] = []
        for i in range(config.node_count):
            store = ChainStore(
                self.genesis,
                config.reward,
                config.retarget,
                config.max_block_txs,
                config.orphan_limit,
                self.scheme,
            )
            self.nodes.append(NodeState(i, store, peers.get(i, [])))
        if config.spy:
            self.nodes.append(NodeState(config.spy_node, None, peers[config.spy_node], spy=True))
        self.miners = [
            Miner(i, m.node, m.share, self.scheme.generate(derive_seed(seed, "miner", i)))
            for i, m in enumerate(config.miners)
        ]
        self._honest_nodes = list(range(config.node_count))
        self._started = False

    # -- scheduling --------------------------------------------------------

    def schedule(self, time: float, kind: str, payload: Any) -> int:
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, (time, seq, kind, payload))
        return seq

    def inject_transaction(self, node: int, tx: Transaction, time: float) -> None:
        """Broadcast ``tx`` from ``node`` at ``time``."""
        self.schedule(time, TX_ARRIVAL, (node, tx))

    def _record(self, time: float, seq: int, kind: str, node: int, **fields: Any) -> None:
        self.trace.add({"t": time, "seq": seq, "kind": kind, "node": node, **fields})

    # -- mining ------------------------------------------------------------

    def _miner_rate(self, miner: Miner) -> float:
        store = self.nodes[miner.node].chain
        ease = store.next_target() / self.config.initial_target
        return miner.share * self.hash_multiplier * ease / self.config.mean_block_interval

    def _resample(self, miner: Miner) -> None:
        miner.generation += 1
        rate = self._miner_rate(miner)
        if rate > 0:
            t = self.now + self.rng_mining.expovariate(rate)
            self.schedule(t, BLOCK_FOUND, (miner.index, miner.generation))

    def _on_block_found(self, seq: int, miner_index: int, generation: int) -> None:
        miner = self.miners[miner_index]
        if generation != miner.generation:
            return
        node = self.nodes[miner.node]
        store = node.chain
        parent = store.tip.header
        height = parent.height + 1
        picked, fees = [], 0
        for tx, fee in node.mempool_order()[: self.config.max_block_txs]:
            picked.append(tx)
            fees += fee
        coinbase = make_coinbase([(miner.keys.address, store.schedule.reward(height) + fees)], height)
        template = make_template(parent, coinbase, picked, store.next_target(), self.now)
        block = mine_block(template, MINING_ATTEMPTS, self.rng_nonce)
        old_tip = store.best_tip
        node.seen_blocks.add(block.block_id)
        outcome = store.connect_block(block)
        self._record(
            self.now, seq, BLOCK_FOUND, node.node_id,
            miner=miner_index,
            block=block.block_id.hex(),
            parent=parent.block_id.hex(),
            height=height,
            txs=[tx.tx_id.hex() for tx in picked],
            fees=fees,
            outcome=outcome.kind.value,
            tip=store.best_tip.hex(),
            tip_height=store.height,
        )
        self._after_tip_change(node, old_tip)
        self._relay_block(node, block, sender=None)

    def _relay_block(self, node: NodeState, block: Block, sender: int | None) -> None:
        for peer in node.peers:
            if peer != sender:
                delay = self.config.link_latency.sample(self.rng_latency)
                self.schedule(self.now + delay, BLOCK_RELAY, (peer, node.node_id, block))

    def _on_block_relay(self, seq: int, node_id: int, sender: int, block: Block) -> None:
        node = self.nodes[node_id]
        bid = block.block_id
        if node.spy:
            self._record(self.now, seq, BLOCK_RELAY, node_id, sender=sender, block=bid.hex(), outcome="spy")
            return
        if bid in node.seen_blocks:
            self._record(self.now, seq, BLOCK_RELAY, node_id, sender=sender, block=bid.hex(), outcome="duplicate")
            return
        node.seen_blocks.add(bid)
        store = node.chain
        old_tip = store.best_tip
        try:
            outcome = store.connect_block(block)
        except BlockRejected as exc:
            self._record(self.now, seq, BLOCK_RELAY, node_id, sender=sender, block=bid.hex(), outcome="invalid", reason=exc.reason)
            return
        reorg = max([outcome.reorg_depth] + [r.reorg_depth for r in outcome.resolved])
        self._record(
            self.now, seq, BLOCK_RELAY, node_id,
            sender=sender,
            block=bid.hex(),
            outcome=outcome.kind.value,
            reorg_depth=reorg,
            resolved=[r.block_id.hex() for r in outcome.resolved],
            tip=store.best_tip.hex(),
            tip_height=store.height,
        )
        if store.best_tip != old_tip:
            self._after_tip_change(node, old_tip)
        self._relay_block(node, block, sender)

    def _after_tip_change(self, node: NodeState, old_tip: bytes) -> None:
        store = node.chain
        fork = store.fork_point(old_tip, store.best_tip)
        returned = []
        for bid in reversed(store.path_from(fork, old_tip)):
            returned.extend(store.blocks[bid].txs)
        candidates = returned + [tx for tx, _ in node.mempool.values()]
        node.mempool.clear()
        node.spent.clear()
        for tx in candidates:
            self._admit(node, tx)
        for tx_id, tx in list(node.deferred.items()):
            if store.confirmations(tx_id):
                del node.deferred[tx_id]
            elif self._admit(node, tx) == "accepted":
                del node.deferred[tx_id]
                self._relay_tx(node, tx, sender=None)
        for miner in self.miners:
            if miner.node == node.node_id:
                self._resample(miner)

    # -- transactions ------------------------------------------------------

    def _admit(self, node: NodeState, tx: Transaction) -> str:
        """Try to put ``tx`` into ``node``'s mempool; return a status string."""
        tid = tx.tx_id
        if tid in node.mempool:
            return "duplicate"
        if node.chain.confirmations(tid):
            return "confirmed"
        for txin in tx.inputs:
            if txin.outpoint in node.spent:
                return "conflict"
        try:
            fee = validate_transaction(tx, node.chain.utxo, self.scheme)
        except MissingUtxo:
            return "missing"
        except TxRejected as exc:
            return "rejected:" + exc.reason
        node.mempool[tid] = (tx, fee)
        for txin in tx.inputs:
            node.spent[txin.outpoint] = tid
        return "accepted"

    def _relay_tx(self, node: NodeState, tx: Transaction, sender: int | None) -> None:
        for peer in node.peers:
            if peer != sender:
                delay = self.config.link_latency.sample(self.rng_latency)
                self.schedule(self.now + delay, TX_RELAY, (peer, node.node_id, tx))

    def _receive_tx(self, node: NodeState, tx: Transaction, sender: int | None) -> str:
        tid = tx.tx_id
        if node.spy:
            self.trace.first_seen.setdefault(tid.hex(), {}).setdefault(node.node_id, self.now)
            return "spy"
        if tid in node.seen_txs:
            return "duplicate"
        node.seen_txs.add(tid)
        self.trace.first_seen.setdefault(tid.hex(), {}).setdefault(node.node_id, self.now)
        status = self._admit(node, tx)
        if status == "accepted":
            self._relay_tx(node, tx, sender)
        elif status == "missing":
            # parent outputs may simply not have reached this node yet
            if len(node.deferred) >= DEFERRED_LIMIT:
                node.deferred.pop(next(iter(node.deferred)))
            node.deferred[tid] = tx
            status = "deferred"
        return status

    def _on_tx_arrival(self, seq: int, payload: Any) -> None:
        if payload is None:
            node_id, tx = self._generate_payment()
            self._schedule_next_payment()
            if tx is None:
                self._record(self.now, seq, TX_ARRIVAL, node_id, tx=None, status="no_funds")
                return
        else:
            node_id, tx = payload
        status = self._receive_tx(self.nodes[node_id], tx, None)
        self._record(
            self.now, seq, TX_ARRIVAL, node_id,
            tx=tx.tx_id.hex(),
            status=status,
            inputs=len(tx.inputs),
            value=tx.output_total,
        )

    def _on_tx_relay(self, seq: int, node_id: int, sender: int, tx: Transaction) -> None:
        status = self._receive_tx(self.nodes[node_id], tx, sender)
        self._record(self.now, seq, TX_RELAY, node_id, sender=sender, tx=tx.tx_id.hex(), status=status)

    # -- workload ----------------------------------------------------------

    def _schedule_next_payment(self) -> None:
        rate = self.config.workload.rate
        if rate > 0:
            self.schedule(self.now + self.rng_workload.expovariate(rate), TX_ARRIVAL, None)

    def _generate_payment(self) -> tuple[int, Transaction | None]:
        """A payment from a random user, built from coins its entry node sees."""
        w = self.config.workload
        rng = self.rng_workload
        node_id = rng.choice(self._honest_nodes)
        u = rng.randrange(len(self.users))
        user = self.users[u]
        node = self.nodes[node_id]
        live = node.chain.utxo
        usable = [
            op for op in user.coins
            if op in live and op not in node.spent
        ]
        if not usable:
            return node_id, None
        k = min(len(usable), rng.randint(1, w.max_inputs))
        spends = rng.sample(usable, k)
        total = sum(live.get(op).amount for op in spends)
        fee = rng.randint(w.fee_min, w.fee_max)
        if total <= fee:
            return node_id, None
        payee_u = rng.randrange(len(self.users) - 1)
        payee_u += payee_u >= u
        payee_k = rng.randrange(w.addresses_per_user)
        change_k = rng.randrange(w.addresses_per_user)
        value = total - fee
        pay = max(1, int(value * rng.uniform(w.payment_fraction_min, w.payment_fraction_max)))
        payee = self.users[payee_u].keys[payee_k].address
        outputs = [(payee, pay)]
        if value - pay > 0:
            outputs.append((user.keys[change_k].address, value - pay))
        unsigned = make_payment(spends, outputs)
        keys = [user.keys[user.coins[op]] for op in spends]
        tx = sign_transaction(unsigned, keys, scheme=self.scheme)
        for op in spends:
            del user.coins[op]
        for i, out in enumerate(tx.outputs):
            owner = self._owner[out.address]
            self.users[owner[0]].coins[OutPoint(tx.tx_id, i)] = owner[1]
        return node_id, tx

    # -- main loop ---------------------------------------------------------

    def _start(self) -> None:
        self._started = True
        for ch in sorted(self.config.hashrate_changes, key=lambda c: c.time):
            self.schedule(ch.time, SCHEDULED, ("hashrate", ch.multiplier))
        for miner in self.miners:
            self._resample(miner)
        self._schedule_next_payment()

    def run(self) -> EventTrace:
        if self._started:
            raise RuntimeError("a Simulation runs once")
        self._start()
        duration = self.config.duration
        stop_height = self.config.stop_height or float("inf")
        reference = self.nodes[0].chain
        queue = self._queue
        while queue and queue[0][0] <= duration and reference.height < stop_height:
            time, seq, kind, payload = heapq.heappop(queue)
            self.now = time
            if kind == BLOCK_FOUND:
                self._on_block_found(seq, *payload)
            elif kind == BLOCK_RELAY:
                self._on_block_relay(seq, *payload)
            elif kind == TX_RELAY:
                self._on_tx_relay(seq, *payload)
            elif kind == TX_ARRIVAL:
                self._on_tx_arrival(seq, payload)
            elif kind == SCHEDULED:
                what, value = payload
                self.hash_multiplier = value
                self._record(time, seq, SCHEDULED, -1, action=what, value=value)
                for miner in self.miners:
                    self._resample(miner)
        self.trace.final_tips = {
            n.node_id: n.chain.best_tip.hex() for n in self.nodes if not n.spy
        }
        self.trace.final_heights = {n.node_id: n.chain.height for n in self.nodes if not n.spy}
        log.info("simulation done: %d events, %d blocks at node 0", len(self.trace.events), self.nodes[0].chain.height)
        return self.trace

    def confirmations(self, tx_id: bytes, node: int = 0) -> int | None:
        return self.nodes[node].chain.confirmations(tx_id)

    @property
    def in_flight(self) -> bool:
        return any(kind in (TX_RELAY, BLOCK_RELAY) for _, _, kind, _ in self._queue)


def run_simulation(config: SimConfig) -> EventTrace:
    return Simulation(config).run()


def broadcast_transaction(sim: Simulation, node: int, tx: Transaction, time: float) -> None:
    sim.inject_transaction(node, tx, time)
