"""Small builders shared by the test modules."""

from __future__ import annotations

import random

from blocksim.chain import MAX_TARGET, ChainStore, make_genesis, make_template, mine_block
from blocksim.ledger import (
    COIN,
    OutPoint,
    generate_keypair,
    make_coinbase,
    make_payment,
    sign_transaction,
)

RNG = random.Random(0)


def keys(n: int, start: int = 1):
    return [generate_keypair(start + i) for i in range(n)]


def funded_store(owners, amount: int = 10 * COIN, **kw) -> ChainStore:
    genesis = make_genesis(MAX_TARGET, [(k.address, amount) for k in owners])
    return ChainStore(genesis, **kw)


def genesis_outpoint(store: ChainStore, index: int) -> OutPoint:
    return OutPoint(store.blocks[store.genesis].coinbase.tx_id, index)


def pay(spends, owners, outputs, utxo=None, memo: bytes = b""):
    """Signed payment; ``owners[i]`` signs ``spends[i]``."""
    outs = [(getattr(dest, "address", dest), v) for dest, v in outputs]
    return sign_transaction(make_payment(spends, outs, memo), owners, utxo)


def next_block(store: ChainStore, parent: bytes | None = None, txs=(), payee=None, claim: int | None = None,
               timestamp: float | None = None, tag: int = 0):
    """Block on ``parent`` (default best tip) claiming reward plus fees unless ``claim`` is given.

    ``tag`` varies the coinbase so sibling blocks get distinct ids.
    """
    parent = parent if parent is not None else store.best_tip
    ph = store.blocks[parent].header
    height = ph.height + 1
    if claim is None:
        utxo = store.utxo_at(parent)
        fees = 0
        for tx in txs:
            fees += sum(utxo.get(i.outpoint).amount for i in tx.inputs) - tx.output_total
            utxo.apply(tx)
        claim = store.schedule.reward(height) + fees
    payee = payee or generate_keypair(10_000 + tag).address
    coinbase = make_coinbase([(payee, claim)], height)
    ts = timestamp if timestamp is not None else ph.timestamp + 600.0
    template = make_template(ph, coinbase, list(txs), store.expected_target(parent), ts)
    return mine_block(template, 1_000_000, RNG)


def build_branch(store: ChainStore, parent: bytes, length: int, tag: int = 0):
    blocks = []
    for _ in range(length):
        b = next_block(store, parent, tag=tag)
        store.connect_block(b)
        blocks.append(b)
        parent = b.block_id
    return blocks
