"""Blocks, proof of work, issuance, and the block tree with most-work fork choice."""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import cached_property
from typing import IO, Iterable, Iterator, Sequence

from .ledger import (
    COIN,
    DEFAULT_SCHEME,
    BURN_ADDRESS,
    Address,
    Transaction,
    TxRejected,
    TxUndo,
    UtxoSet,
    checked_sum,
    make_coinbase,
    sha256,
    validate_transaction,
)

MAX_TARGET = 2**256 - 1
ZERO_HASH = bytes(32)
DEFAULT_MAX_BLOCK_TXS = 1000


# --------------------------------------------------------------------------
# Errors


class BlockRejected(Exception):
    reason = "rejected"


class BadPow(BlockRejected):
    reason = "bad_pow"


class UnknownParent(BlockRejected):
    reason = "unknown_parent"


class BadHeight(BlockRejected):
    reason = "bad_height"


class BadTarget(BlockRejected):
    reason = "bad_target"


class BadCommitment(BlockRejected):
    reason = "bad_commitment"


class ExcessCoinbase(BlockRejected):
    reason = "excess_coinbase"


class Oversize(BlockRejected):
    reason = "oversize"


class InvalidTx(BlockRejected):
    reason = "invalid_tx"

    def __init__(self, index: int, cause: TxRejected | str):
        self.index = index
        self.cause = cause
        why = cause.reason if isinstance(cause, TxRejected) else str(cause)
        super().__init__(f"tx {index}: {why} ({cause})")


class MiningExhausted(RuntimeError):
    pass


class ChainFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


# --------------------------------------------------------------------------
# Headers and blocks


_HEADER_FMT = struct.Struct(">32s32s32sQQd")
_NONCE_OFFSET = 96


@dataclass(frozen=True)
class BlockHeader:
    parent_id: bytes
    tx_commitment: bytes
    target: int
    nonce: int
    height: int
    timestamp: float

    @cached_property
    def raw(self) -> bytes:
        return _HEADER_FMT.pack(
            self.parent_id,
            self.tx_commitment,
            self.target.to_bytes(32, "big"),
            self.nonce,
            self.height,
            float(self.timestamp),
        )

    @cached_property
    def block_id(self) -> bytes:
        return sha256(self.raw)

    def with_nonce(self, nonce: int) -> "BlockHeader":
        return BlockHeader(
            self.parent_id, self.tx_commitment, self.target, nonce, self.height, self.timestamp
        )


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    coinbase: Transaction
    txs: tuple[Transaction, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "txs", tuple(self.txs))

    @property
    def block_id(self) -> bytes:
        return self.header.block_id

    @property
    def height(self) -> int:
        return self.header.height

    @property
    def parent_id(self) -> bytes:
        return self.header.parent_id

    def all_txs(self) -> tuple[Transaction, ...]:
        return (self.coinbase, *self.txs)

    def to_json(self) -> dict:
        h = self.header
        return {
            "block_id": self.block_id.hex(),
            "height": h.height,
            "parent_id": h.parent_id.hex(),
            "tx_commitment": h.tx_commitment.hex(),
            "target": h.target.to_bytes(32, "big").hex(),
            "nonce": h.nonce,
            "timestamp": h.timestamp,
            "coinbase": self.coinbase.to_json(),
            "txs": [tx.to_json() for tx in self.txs],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Block":
        header = BlockHeader(
            bytes.fromhex(obj["parent_id"]),
            bytes.fromhex(obj["tx_commitment"]),
            int(obj["target"], 16),
            int(obj["nonce"]),
            int(obj["height"]),
            float(obj["timestamp"]),
        )
        block = cls(
            header,
            Transaction.from_json(obj["coinbase"]),
            tuple(Transaction.from_json(t) for t in obj["txs"]),
        )
        if "block_id" in obj and block.block_id.hex() != obj["block_id"]:
            raise ValueError(f"block_id mismatch for {obj['block_id']}")
        return block


def tx_commitment(txs: Iterable[Transaction]) -> bytes:
    return sha256(b"".join(tx.tx_id for tx in txs))


def block_work(target: int) -> int:
    return (1 << 256) // target


def check_pow(header: BlockHeader) -> bool:
    return int.from_bytes(header.block_id, "big") < header.target


@dataclass(frozen=True)
class RewardSchedule:
    initial_reward: int = 50 * COIN
    halving_interval: int = 210_000

    def __post_init__(self) -> None:
        if self.halving_interval <= 0:
            raise ValueError("halving_interval must be positive")
        if self.initial_reward < 0:
            raise ValueError("initial_reward must be non-negative")

    def reward(self, height: int) -> int:
        if height < 0:
            raise ValueError("height must be non-negative")
        shift = height // self.halving_interval
        return self.initial_reward >> shift if shift < 64 else 0


def block_reward(height: int, schedule: RewardSchedule) -> int:
    return schedule.reward(height)


def mine_header(header: BlockHeader, max_attempts: int, rng) -> tuple[BlockHeader | None, int]:
    """Search nonces from an rng-chosen start; return ``(header, attempts)``.

    The header is ``None`` when ``max_attempts`` hashes found nothing.
    """
    raw = header.raw
    prefix, suffix = raw[:_NONCE_OFFSET], raw[_NONCE_OFFSET + 8 :]
    target = header.target
    start = rng.getrandbits(64)
    pack = struct.Struct(">Q").pack
    for attempt in range(1, max_attempts + 1):
        nonce = (start + attempt - 1) & 0xFFFFFFFFFFFFFFFF
        digest = sha256(prefix + pack(nonce) + suffix)
        if int.from_bytes(digest, "big") < target:
            return header.with_nonce(nonce), attempt
    return None, max_attempts


def mine_block(template: Block, max_attempts: int, rng) -> Block:
    """Fill in a nonce satisfying the template's target.

    Raises :class:`MiningExhausted` after ``max_attempts`` failures.
    """
    header, attempts = mine_header(template.header, max_attempts, rng)
    if header is None:
        raise MiningExhausted(f"no valid nonce in {attempts} attempts")
    return Block(header, template.coinbase, template.txs)


def make_template(
    parent: BlockHeader,
    coinbase: Transaction,
    txs: Sequence[Transaction],
    target: int,
    timestamp: float,
) -> Block:
    header = BlockHeader(
        parent.block_id,
        tx_commitment([coinbase, *txs]),
        target,
        0,
        parent.height + 1,
        timestamp,
    )
    return Block(header, coinbase, tuple(txs))


def make_genesis(
    target: int,
    allocations: Sequence[tuple[Address, int]] = (),
    schedule: RewardSchedule | None = None,
) -> Block:
    """Genesis block: zero parent, height 0, never PoW-checked.

    Its coinbase pays ``allocations`` or, when there are none, the height-0
    reward to the unspendable burn address.
    """
    schedule = schedule or RewardSchedule()
    payouts = list(allocations) or [(BURN_ADDRESS, max(schedule.reward(0), 1))]
    coinbase = make_coinbase(payouts, 0)
    header = BlockHeader(ZERO_HASH, tx_commitment([coinbase]), target, 0, 0, 0.0)
    return Block(header, coinbase, ())


# --------------------------------------------------------------------------
# Retargeting


@dataclass(frozen=True)
class RetargetParams:
    window: int = 32
    desired_interval: float = 600.0

    def __post_init__(self) -> None:
        if self.window < 1 or self.desired_interval <= 0:
            raise ValueError("retarget window and desired interval must be positive")


def compute_retarget(old_target: int, span: float, window: int, desired_interval: float) -> int:
    """Scale ``old_target`` by observed/desired mean interval, clamped to 4x either way."""
    ratio = Fraction(span) / (Fraction(window) * Fraction(desired_interval))
    new = int(old_target * ratio)
    new = max(old_target // 4, min(old_target * 4, new))
    return max(1, min(MAX_TARGET, new))


# --------------------------------------------------------------------------
# Block tree


class ConnectKind(str, Enum):
    EXTENDED_BEST = "extended_best"
    CREATED_FORK = "created_fork"
    REORGANIZED = "reorganized"
    ORPHANED = "orphaned"
    DUPLICATE = "duplicate"


@dataclass
class ConnectOutcome:
    kind: ConnectKind
    block_id: bytes
    reorg_depth: int = 0
    disconnected: list[Block] = field(default_factory=list)
    connected: list[Block] = field(default_factory=list)
    # outcomes for buffered orphans that this block allowed to connect
    resolved: list["ConnectOutcome"] = field(default_factory=list)

    @property
    def tip_changed(self) -> bool:
        return self.kind in (ConnectKind.EXTENDED_BEST, ConnectKind.REORGANIZED) or any(
            r.tip_changed for r in self.resolved
        )


@dataclass
class _Entry:
    height: int
    work: int
    seen: int
    fees: int
    undo: list[TxUndo]


class ChainStore:
    """Block tree rooted at a genesis block, tracking the most-work tip.

    Ties in cumulative work keep whichever tip was connected first.  Only the
    best tip's unspent-output set is cached; side branches are materialised on
    demand from per-block undo records.
    """

    def __init__(
        self,
        genesis: Block,
        schedule: RewardSchedule | None = None,
        retarget: RetargetParams | None = None,
        max_block_txs: int = DEFAULT_MAX_BLOCK_TXS,
        orphan_limit: int = 100,
        scheme=None,
        check_targets: bool = True,
    ) -> None:
        self.schedule = schedule or RewardSchedule()
        self.retarget_params = retarget
        self.max_block_txs = max_block_txs
        self.orphan_limit = orphan_limit
        self.scheme = scheme or DEFAULT_SCHEME
        self.check_targets = check_targets

        gid = genesis.block_id
        self.genesis = gid
        self.blocks: dict[bytes, Block] = {gid: genesis}
        self.children: dict[bytes, list[bytes]] = {gid: []}
        self.tx_index: dict[bytes, list[bytes]] = {}
        self.utxo = UtxoSet()
        undo = [self.utxo.apply(genesis.coinbase)]
        self._entries: dict[bytes, _Entry] = {
            gid: _Entry(0, block_work(genesis.header.target), 0, 0, undo)
        }
        self._index_txs(genesis)
        self._seen = 1
        self.best_tip = gid
        self.best_chain: list[bytes] = [gid]
        self.orphans: dict[bytes, list[Block]] = {}
        self._orphan_order: deque[bytes] = deque()
        self._orphan_ids: set[bytes] = set()

    # -- queries -----------------------------------------------------------

    def __contains__(self, block_id: bytes) -> bool:
        return block_id in self.blocks

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def tip(self) -> Block:
        return self.blocks[self.best_tip]

    @property
    def height(self) -> int:
        return len(self.best_chain) - 1

    def work(self, block_id: bytes) -> int:
        return self._entries[block_id].work

    def block_height(self, block_id: bytes) -> int:
        return self._entries[block_id].height

    def fees(self, block_id: bytes) -> int:
        return self._entries[block_id].fees

    def on_best_chain(self, block_id: bytes) -> bool:
        e = self._entries.get(block_id)
        return e is not None and e.height < len(self.best_chain) and self.best_chain[e.height] == block_id

    def best_blocks(self) -> Iterator[Block]:
        for bid in self.best_chain:
            yield self.blocks[bid]

    def tips(self) -> list[bytes]:
        return [b for b, kids in self.children.items() if not kids]

    def ancestor(self, block_id: bytes, height: int) -> bytes:
        if self.on_best_chain(block_id):
            return self.best_chain[height]
        bid = block_id
        while self._entries[bid].height > height:
            bid = self.blocks[bid].parent_id
            if self.on_best_chain(bid):
                return self.best_chain[height]
        return bid

    def fork_point(self, a: bytes, b: bytes) -> bytes:
        ha, hb = self._entries[a].height, self._entries[b].height
        if ha > hb:
            a = self.ancestor(a, hb)
        elif hb > ha:
            b = self.ancestor(b, ha)
        while a != b:
            a = self.blocks[a].parent_id
            b = self.blocks[b].parent_id
        return a

    def path_from(self, ancestor: bytes, block_id: bytes) -> list[bytes]:
        """Block ids strictly after ``ancestor`` up to and including ``block_id``."""
        out = []
        bid = block_id
        while bid != ancestor:
            out.append(bid)
            bid = self.blocks[bid].parent_id
        out.reverse()
        return out

    def confirmations(self, tx_id: bytes) -> int | None:
        """Depth of ``tx_id`` under the best tip; 0 if only on side branches, None if unseen."""
        holders = self.tx_index.get(tx_id)
        if holders is None:
            return None
        for bid in holders:
            if self.on_best_chain(bid):
                return self.height - self._entries[bid].height + 1
        return 0

    def containing_block(self, tx_id: bytes) -> bytes | None:
        for bid in self.tx_index.get(tx_id, ()):
            if self.on_best_chain(bid):
                return bid
        return None

    def utxo_at(self, block_id: bytes) -> UtxoSet:
        """Fresh copy of the unspent-output set after ``block_id``."""
        fork = self.fork_point(self.best_tip, block_id)
        utxo = self.utxo.copy()
        fork_h = self._entries[fork].height
        for h in range(self.height, fork_h, -1):
            for u in reversed(self._entries[self.best_chain[h]].undo):
                utxo.revert(u)
        for bid in self.path_from(fork, block_id):
            for tx in self.blocks[bid].all_txs():
                utxo.apply(tx)
        return utxo

    def expected_target(self, parent_id: bytes) -> int:
        parent = self.blocks[parent_id].header
        p = self.retarget_params
        if p is None or parent.height < p.window or parent.height % p.window:
            return parent.target
        first = self.blocks[self.ancestor(parent_id, parent.height - p.window)].header
        return compute_retarget(parent.target, parent.timestamp - first.timestamp, p.window, p.desired_interval)

    def next_target(self) -> int:
        return self.expected_target(self.best_tip)

    # -- validation --------------------------------------------------------

    def validate_block(self, block: Block) -> int:
        """Validate ``block`` against its parent's state; return total fees."""
        utxo, undo, fees = self._check_and_apply(block, None)
        for u in reversed(undo):
            utxo.revert(u)
        return fees

    def _check_header(self, block: Block) -> None:
        h = block.header
        if h.parent_id not in self.blocks:
            raise UnknownParent(f"parent {h.parent_id.hex()} not in store")
        parent = self._entries[h.parent_id]
        if h.height != parent.height + 1:
            raise BadHeight(f"height {h.height} after parent height {parent.height}")
        if self.check_targets and h.target != self.expected_target(h.parent_id):
            raise BadTarget("target does not follow the retarget rule")
        if not 0 < h.target <= MAX_TARGET or not check_pow(h):
            raise BadPow("block hash is not below target")
        if len(block.txs) > self.max_block_txs:
            raise Oversize(f"{len(block.txs)} txs exceeds capacity {self.max_block_txs}")
        if h.tx_commitment != tx_commitment(block.all_txs()):
            raise BadCommitment("tx commitment does not match block contents")
        if not block.coinbase.is_coinbase:
            raise InvalidTx(0, "first transaction is not a coinbase")

    def _check_and_apply(self, block: Block, utxo: UtxoSet | None):
        """Apply ``block`` to the parent state; on failure leave state untouched."""
        self._check_header(block)
        if utxo is None:
            utxo = self.utxo if block.parent_id == self.best_tip else self.utxo_at(block.parent_id)
        undo: list[TxUndo] = []
        fees = 0
        try:
            for i, tx in enumerate(block.txs, start=1):
                if tx.is_coinbase:
                    raise InvalidTx(i, "extra coinbase")
                try:
                    fees += validate_transaction(tx, utxo, self.scheme)
                except TxRejected as exc:
                    raise InvalidTx(i, exc) from exc
                undo.append(utxo.apply(tx))
            limit = self.schedule.reward(block.height) + fees
            claimed = checked_sum(o.amount for o in block.coinbase.outputs)
            if claimed > limit:
                raise ExcessCoinbase(f"coinbase claims {claimed}, limit {limit}")
        except BlockRejected:
            for u in reversed(undo):
                utxo.revert(u)
            raise
        undo.insert(0, utxo.apply(block.coinbase))
        return utxo, undo, fees

    # -- connection --------------------------------------------------------

    def connect_block(self, block: Block) -> ConnectOutcome:
        bid = block.block_id
        if bid in self.blocks or bid in self._orphan_ids:
            return ConnectOutcome(ConnectKind.DUPLICATE, bid)
        if block.parent_id not in self.blocks:
            self._buffer_orphan(block)
            return ConnectOutcome(ConnectKind.ORPHANED, bid)
        outcome = self._attach(block)
        pending = deque([bid])
        while pending:
            parent = pending.popleft()
            for child in self.orphans.pop(parent, ()):
                self._orphan_ids.discard(child.block_id)
                try:
                    outcome.resolved.append(self._attach(child))
                except BlockRejected:
                    continue
                pending.append(child.block_id)
        return outcome

    def _attach(self, block: Block) -> ConnectOutcome:
        bid = block.block_id
        parent_id = block.parent_id
        on_tip = parent_id == self.best_tip
        utxo, undo, fees = self._check_and_apply(block, None)
        parent = self._entries[parent_id]
        entry = _Entry(parent.height + 1, parent.work + block_work(block.header.target), self._seen, fees, undo)
        self._seen += 1
        self.blocks[bid] = block
        self._entries[bid] = entry
        self.children[bid] = []
        self.children[parent_id].append(bid)
        self._index_txs(block)

        best_work = self._entries[self.best_tip].work
        if on_tip:
            # parent was best, so the child strictly adds work
            self.best_tip = bid
            self.best_chain.append(bid)
            return ConnectOutcome(ConnectKind.EXTENDED_BEST, bid, connected=[block])
        if entry.work <= best_work:
            return ConnectOutcome(ConnectKind.CREATED_FORK, bid)
        fork = self.fork_point(self.best_tip, bid)
        fork_h = self._entries[fork].height
        disconnected = [self.blocks[b] for b in reversed(self.best_chain[fork_h + 1 :])]
        path = self.path_from(fork, bid)
        del self.best_chain[fork_h + 1 :]
        self.best_chain.extend(path)
        self.best_tip = bid
        self.utxo = utxo
        return ConnectOutcome(
            ConnectKind.REORGANIZED,
            bid,
            reorg_depth=len(disconnected),
            disconnected=disconnected,
            connected=[self.blocks[b] for b in path],
        )

    def _buffer_orphan(self, block: Block) -> None:
        while len(self._orphan_ids) >= self.orphan_limit and self._orphan_order:
            old = self._orphan_order.popleft()
            if old not in self._orphan_ids:
                continue
            self._orphan_ids.discard(old)
            for pid, kids in list(self.orphans.items()):
                self.orphans[pid] = [k for k in kids if k.block_id != old]
                if not self.orphans[pid]:
                    del self.orphans[pid]
        if self.orphan_limit <= 0:
            return
        self.orphans.setdefault(block.parent_id, []).append(block)
        self._orphan_ids.add(block.block_id)
        self._orphan_order.append(block.block_id)

    def _index_txs(self, block: Block) -> None:
        bid = block.block_id
        for tx in block.all_txs():
            self.tx_index.setdefault(tx.tx_id, []).append(bid)

    def copy(self) -> "ChainStore":
        new = object.__new__(ChainStore)
        new.__dict__.update(self.__dict__)
        new.blocks = dict(self.blocks)
        new.children = {k: list(v) for k, v in self.children.items()}
        new.tx_index = {k: list(v) for k, v in self.tx_index.items()}
        new.utxo = self.utxo.copy()
        new._entries = dict(self._entries)
        new.best_chain = list(self.best_chain)
        new.orphans = {k: list(v) for k, v in self.orphans.items()}
        new._orphan_order = deque(self._orphan_order)
        new._orphan_ids = set(self._orphan_ids)
        return new


def validate_block(block: Block, store: ChainStore) -> int:
    return store.validate_block(block)


def connect_block(store: ChainStore, block: Block) -> ConnectOutcome:
    return store.connect_block(block)


def retarget(store: ChainStore, window: int, desired_interval: float) -> int:
    """Target for the block after the best tip, from the last ``window`` intervals."""
    tip = store.tip.header
    if tip.height < window:
        raise ValueError(f"need {window} blocks on the best chain, have {tip.height}")
    first = store.blocks[store.best_chain[tip.height - window]].header
    return compute_retarget(tip.target, tip.timestamp - first.timestamp, window, desired_interval)


# --------------------------------------------------------------------------
# JSON Lines export


def export_chain(store: ChainStore, fh: IO[str], best_only: bool = True) -> int:
    blocks = store.best_blocks() if best_only else sorted(
        store.blocks.values(), key=lambda b: (b.height, store._entries[b.block_id].seen)
    )
    n = 0
    for block in blocks:
        fh.write(json.dumps(block.to_json(), sort_keys=True, separators=(",", ":")))
        fh.write("\n")
        n += 1
    return n


def import_chain(lines: Iterable[str]) -> list[Block]:
    blocks = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            blocks.append(Block.from_json(json.loads(line)))
        except (ValueError, KeyError, TypeError, TxRejected) as exc:
            raise ChainFormatError(lineno, f"{type(exc).__name__}: {exc}") from exc
    return blocks
