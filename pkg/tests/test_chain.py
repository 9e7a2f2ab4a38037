import io
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blocksim.chain import (
    MAX_TARGET,
    BadCommitment,
    BadHeight,
    BadPow,
    BadTarget,
    Block,
    BlockHeader,
    ChainStore,
    ConnectKind,
    ExcessCoinbase,
    InvalidTx,
    MiningExhausted,
    Oversize,
    RetargetParams,
    RewardSchedule,
    block_reward,
    block_work,
    check_pow,
    compute_retarget,
    connect_block,
    export_chain,
    import_chain,
    make_genesis,
    make_template,
    mine_block,
    mine_header,
    retarget,
    validate_block,
)
from blocksim.ledger import BURN_ADDRESS, COIN, MissingUtxo, make_coinbase
from helpers import build_branch, funded_store, genesis_outpoint, keys, next_block, pay

# -- proof of work --------------------------------------------------------


def _header(target, nonce=0, height=1):
    return BlockHeader(b"\1" * 32, b"\2" * 32, target, nonce, height, 1.0)


def test_maximal_target_accepts_almost_any_nonce():
    assert sum(check_pow(_header(MAX_TARGET, n)) for n in range(200)) == 200


def test_zero_target_accepts_nothing():
    assert not any(check_pow(_header(0, n)) for n in range(200))


def test_mine_maximal_target_first_attempt():
    header, attempts = mine_header(_header(MAX_TARGET), 10, random.Random(1))
    assert attempts == 1 and check_pow(header)


def test_mining_exhausts():
    genesis = make_genesis(MAX_TARGET)
    cb = make_coinbase([(BURN_ADDRESS, 1)], 1)
    template = make_template(genesis.header, cb, [], 2**200, 600.0)
    with pytest.raises(MiningExhausted):
        mine_block(template, 50, random.Random(0))


def test_mining_is_rng_deterministic():
    h1, a1 = mine_header(_header(2**250), 10_000, random.Random(5))
    h2, a2 = mine_header(_header(2**250), 10_000, random.Random(5))
    assert (h1, a1) == (h2, a2) and check_pow(h1)


def test_attempt_counts_are_geometric_with_mean_256():
    rng = random.Random(2024)
    counts = []
    for i in range(1000):
        header, n = mine_header(_header(2**248, height=i + 1), 100_000, rng)
        assert check_pow(header)
        counts.append(n)
    mean = sum(counts) / len(counts)
    p = 2**248 / 2**256
    sd = ((1 - p) / p**2 / len(counts)) ** 0.5
    assert abs(mean - 256) < 3 * sd


def test_header_round_trip_and_nonce_offset():
    h = _header(2**250, nonce=0xDEADBEEF)
    assert h.raw[96:104] == (0xDEADBEEF).to_bytes(8, "big")
    assert len(h.raw) == 120
    assert h.with_nonce(1).block_id != h.block_id


# -- rewards --------------------------------------------------------------


def test_reward_schedule_definition():
    s = RewardSchedule(50 * COIN, 10)
    assert [block_reward(h, s) for h in (0, 9, 10)] == [50 * COIN, 50 * COIN, 25 * COIN]
    assert block_reward(10 * 64, s) == 0


def test_total_issuance_by_exact_summation():
    s = RewardSchedule(50 * COIN, 10)
    total, era = 0, 0
    while s.reward(era * 10):
        total += s.reward(era * 10) * 10
        era += 1
    expected = sum((50 * COIN >> e) * 10 for e in range(64))
    assert total == expected < 2 * 50 * COIN * 10
    # 5_000_000_000 base units shrink to zero after 33 halvings
    assert era == (50 * COIN).bit_length()


# -- validation -----------------------------------------------------------


def test_valid_block_extends_best_chain():
    a, b = keys(2)
    store = funded_store([a])
    tx = pay([genesis_outpoint(store, 0)], [a], [(b, 9 * COIN)])
    block = next_block(store, txs=[tx])
    assert validate_block(block, store) == COIN
    out = connect_block(store, block)
    assert out.kind is ConnectKind.EXTENDED_BEST
    assert store.confirmations(tx.tx_id) == 1
    assert store.fees(block.block_id) == COIN


def test_coinbase_may_claim_reward_plus_fees_but_not_one_more():
    a, b = keys(2)
    store = funded_store([a])
    tx = pay([genesis_outpoint(store, 0)], [a], [(b, 9 * COIN)])
    limit = store.schedule.reward(1) + COIN
    store.validate_block(next_block(store, txs=[tx], claim=limit))
    with pytest.raises(ExcessCoinbase):
        store.validate_block(next_block(store, txs=[tx], claim=limit + 1))


def test_intra_block_double_spend_is_invalid_tx():
    a, b = keys(2)
    store = funded_store([a])
    op = genesis_outpoint(store, 0)
    t1 = pay([op], [a], [(b, 10 * COIN)])
    t2 = pay([op], [a], [(a, 10 * COIN)])
    cb = make_coinbase([(b.address, store.schedule.reward(1))], 1)
    block = mine_block(make_template(store.tip.header, cb, [t1, t2], MAX_TARGET, 600.0), 10, random.Random(0))
    with pytest.raises(InvalidTx) as err:
        store.validate_block(block)
    assert err.value.index == 2 and isinstance(err.value.cause, MissingUtxo)
    assert store.utxo.total() == 10 * COIN  # state untouched


def test_structural_rejections():
    store = funded_store(keys(1))
    good = next_block(store)
    h = good.header
    wrong_height = BlockHeader(h.parent_id, h.tx_commitment, h.target, 0, 5, h.timestamp)
    with pytest.raises(BadHeight):
        store.validate_block(Block(mine_header(wrong_height, 10, random.Random(0))[0], good.coinbase, ()))
    bad_commit = BlockHeader(h.parent_id, b"\0" * 32, h.target, 0, 1, h.timestamp)
    with pytest.raises(BadCommitment):
        store.validate_block(Block(mine_header(bad_commit, 10, random.Random(0))[0], good.coinbase, ()))
    hard = BlockHeader(h.parent_id, h.tx_commitment, 1, 0, 1, h.timestamp)
    with pytest.raises((BadPow, BadTarget)):
        store.validate_block(Block(hard, good.coinbase, ()))
    lax = ChainStore(store.blocks[store.genesis], check_targets=False)
    with pytest.raises(BadPow):
        lax.validate_block(Block(hard, good.coinbase, ()))


def test_block_capacity():
    a, b = keys(2)
    store = funded_store([a], max_block_txs=0)
    tx = pay([genesis_outpoint(store, 0)], [a], [(b, 9 * COIN)])
    with pytest.raises(Oversize):
        store.validate_block(next_block(store, txs=[tx]))


# -- fork choice ----------------------------------------------------------


def test_longer_branch_wins():
    store = funded_store(keys(1))
    short = build_branch(store, store.genesis, 3, tag=1)
    long = build_branch(store, store.genesis, 5, tag=2)
    assert store.best_tip == long[-1].block_id
    assert store.height == 5
    assert not store.on_best_chain(short[0].block_id)


def test_equal_work_keeps_first_seen():
    store = funded_store(keys(1))
    first = build_branch(store, store.genesis, 2, tag=1)
    second = build_branch(store, store.genesis, 2, tag=2)
    assert store.best_tip == first[-1].block_id
    assert store.connect_block(next_block(store, second[-1].block_id, tag=2)).kind is ConnectKind.REORGANIZED


def test_cumulative_work_beats_length():
    g = make_genesis(2**255)
    store = ChainStore(g, check_targets=False)
    easy = build_branch(store, store.genesis, 3, tag=1)
    assert store.best_tip == easy[-1].block_id
    cb = make_coinbase([(BURN_ADDRESS, store.schedule.reward(1))], 1)
    hard = mine_block(make_template(g.header, cb, [], 2**250, 600.0), 10_000_000, random.Random(0))
    assert block_work(2**250) > 3 * block_work(2**255)
    out = store.connect_block(hard)
    assert out.kind is ConnectKind.REORGANIZED and out.reorg_depth == 3
    assert store.height == 1


def test_attacker_overtakes_and_payment_becomes_unconfirmed():
    a, b = keys(2)
    store = funded_store([a])
    op = genesis_outpoint(store, 0)
    payment = pay([op], [a], [(b, 10 * COIN)])
    conflict = pay([op], [a], [(a, 10 * COIN)])
    honest = [next_block(store, txs=[payment], tag=1)]
    store.connect_block(honest[0])
    honest += build_branch(store, honest[0].block_id, 1, tag=1)
    assert store.confirmations(payment.tx_id) == 2
    before = store.utxo.serialize()

    private = [next_block(store, store.genesis, txs=[conflict], tag=9)]
    store.connect_block(private[0])
    private += build_branch(store, private[0].block_id, 1, tag=9)
    assert store.best_tip == honest[-1].block_id  # tie, honest seen first
    last = next_block(store, private[-1].block_id, tag=9)
    out = store.connect_block(last)
    assert out.kind is ConnectKind.REORGANIZED and out.reorg_depth == 2
    assert [blk.block_id for blk in out.disconnected] == [honest[1].block_id, honest[0].block_id]
    assert store.confirmations(payment.tx_id) == 0
    assert store.confirmations(conflict.tx_id) == 3

    # reorg back restores the exact same unspent set
    store.connect_block(next_block(store, honest[-1].block_id, tag=1))
    store.connect_block(next_block(store, store.best_tip, tag=1))
    assert store.best_tip != last.block_id
    assert store.utxo_at(honest[-1].block_id).serialize() == before


def test_orphans_buffered_and_resolved():
    store = funded_store(keys(1))
    builder = store.copy()
    chain = build_branch(builder, builder.genesis, 4)
    assert store.connect_block(chain[2]).kind is ConnectKind.ORPHANED
    assert store.connect_block(chain[1]).kind is ConnectKind.ORPHANED
    assert store.connect_block(chain[1]).kind is ConnectKind.DUPLICATE
    out = store.connect_block(chain[0])
    assert out.kind is ConnectKind.EXTENDED_BEST and len(out.resolved) == 2 and out.tip_changed
    assert store.best_tip == chain[2].block_id


def test_orphan_limit_evicts_oldest():
    store = funded_store(keys(1), orphan_limit=2)
    builder = store.copy()
    chain = build_branch(builder, builder.genesis, 5)
    for blk in chain[1:]:
        store.connect_block(blk)
    assert len(store._orphan_ids) == 2
    store.connect_block(chain[0])
    assert store.height == 1  # chain[1] and chain[2] were evicted


def test_confirmations_monotone_without_reorg():
    store = funded_store(keys(1))
    blocks = build_branch(store, store.genesis, 6)
    tx = blocks[0].coinbase.tx_id
    assert store.confirmations(tx) == 6
    assert store.confirmations(b"\0" * 32) is None


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32))
def test_fork_choice_order_independent(seed):
    rng = random.Random(seed)
    store = funded_store(keys(1))
    blocks = []
    for i in range(rng.randint(3, 15)):
        parent = rng.choice([store.genesis, *[b.block_id for b in blocks]])
        blk = next_block(store, parent, tag=i)
        store.connect_block(blk)
        blocks.append(blk)
    heights = [store.block_height(t) for t in store.tips()]
    best_h = max(heights)
    if heights.count(best_h) > 1:
        return  # first-seen ties depend on arrival order by design
    for _ in range(5):
        rng.shuffle(blocks)
        other = funded_store(keys(1))
        for blk in blocks:
            other.connect_block(blk)
        assert other.best_tip == store.best_tip
        assert other.utxo == store.utxo


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32))
def test_global_conservation(seed):
    rng = random.Random(seed)
    owners = keys(3)
    store = funded_store(owners, 5 * COIN)
    wallet = {k.address: k for k in owners}
    claimed = 15 * COIN
    for i in range(rng.randint(1, 8)):
        parent = store.best_tip
        if store.height and rng.random() < 0.3:
            parent = store.tip.parent_id
        utxo = store.utxo_at(parent)
        spendable = [op for op, out in sorted(utxo.live.items()) if out.address in wallet]
        txs = []
        if spendable:
            op = rng.choice(spendable)
            amt = utxo.get(op).amount
            fee = rng.randint(0, min(amt - 1, 1000))
            txs.append(pay([op], [wallet[utxo.get(op).address]], [(rng.choice(owners), amt - fee)]))
        store.connect_block(next_block(store, parent, txs=txs, payee=rng.choice(owners).address, tag=i))
    best = [b for b in store.best_blocks() if b.height > 0]
    # fees move already-claimed value, so only the excess over fees is new money
    gross = sum(o.amount for b in best for o in b.coinbase.outputs)
    fees = sum(store.fees(b.block_id) for b in best)
    assert store.utxo.total() == claimed + gross - fees
    issued = sum(store.schedule.reward(b.height) for b in best)
    assert gross <= issued + fees


# -- retarget -------------------------------------------------------------


def test_retarget_rule():
    assert compute_retarget(2**240, 32 * 600, 32, 600) == 2**240
    assert compute_retarget(2**240, 32 * 300, 32, 600) == 2**239
    assert compute_retarget(2**240, 1, 32, 600) == 2**238
    assert compute_retarget(2**240, 10**9, 32, 600) == 2**242
    assert compute_retarget(MAX_TARGET, 10**9, 32, 600) == MAX_TARGET


def test_store_retargets_at_window_boundaries():
    params = RetargetParams(4, 600.0)
    g = make_genesis(2**250)
    store = ChainStore(g, retarget=params)
    for i in range(4):
        store.connect_block(next_block(store, timestamp=(i + 1) * 300.0))
    assert store.next_target() == 2**249 == retarget(store, 4, 600.0)
    blk = next_block(store)
    assert blk.header.target == 2**249
    store.connect_block(blk)
    assert store.next_target() == 2**249  # mid-window keeps the parent target
    with pytest.raises(BadTarget):
        store.validate_block(_with_target(store, 2**250))


def _with_target(store, target):
    ph = store.tip.header
    cb = make_coinbase([(BURN_ADDRESS, 1)], ph.height + 1)
    return mine_block(make_template(ph, cb, [], target, ph.timestamp + 600), 1_000_000, random.Random(0))


# -- export ---------------------------------------------------------------


def test_export_import_round_trip():
    a, b = keys(2)
    store = funded_store([a])
    tx = pay([genesis_outpoint(store, 0)], [a], [(b, 9 * COIN)])
    store.connect_block(next_block(store, txs=[tx]))
    build_branch(store, store.best_tip, 2)
    fh = io.StringIO()
    assert export_chain(store, fh) == 4
    blocks = import_chain(fh.getvalue().splitlines())
    assert [x.block_id for x in blocks] == [x.block_id for x in store.best_blocks()]
    fresh = ChainStore(blocks[0])
    for blk in blocks[1:]:
        fresh.connect_block(blk)
    assert fresh.utxo == store.utxo
