"""Keys, addresses, transactions and validation against the unspent-output set.

Outputs are locked to a single address (the SHA-256 of a public key).  An
output is spent whole; change goes back through an extra output.  Amounts are
integers in base units, ``COIN`` base units per coin.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

COIN = 100_000_000
MAX_AMOUNT = 2**63 - 1
HASH_LEN = 32
TX_VERSION = 1


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def check_amount(value: int) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise TypeError(f"amount must be an int, got {type(value).__name__}")
    if value < 0 or value > MAX_AMOUNT:
        raise ValueError(f"amount {value} outside [0, 2^63-1]")
    return value


def checked_sum(values: Iterable[int]) -> int:
    total = 0
    for v in values:
        total += v
        if total > MAX_AMOUNT:
            raise OverflowError("amount sum exceeds 2^63-1")
    return total


# --------------------------------------------------------------------------
# Errors


class TxRejected(Exception):
    """Base class for protocol-level transaction rejections."""

    reason = "rejected"


class MissingUtxo(TxRejected):
    reason = "missing_utxo"


class BadSignature(TxRejected):
    reason = "bad_signature"


class AddressMismatch(TxRejected):
    reason = "address_mismatch"


class Overspend(TxRejected):
    reason = "overspend"


class InternalConflict(TxRejected):
    reason = "internal_conflict"


class MalformedTx(TxRejected):
    reason = "malformed"


class SigningError(ValueError):
    pass


# --------------------------------------------------------------------------
# Keys and signature schemes


@dataclass(frozen=True)
class KeyPair:
    private_key: bytes = field(repr=False)
    public_key: bytes
    scheme: str

    @property
    def address(self) -> "Address":
        return derive_address(self.public_key)


class Ed25519Scheme:
    """Real asymmetric signatures; keys derived deterministically from a seed."""

    name = "ed25519"

    def generate(self, seed: int) -> KeyPair:
        secret = sha256(b"blocksim-ed25519" + _seed_bytes(seed))
        sk = Ed25519PrivateKey.from_private_bytes(secret)
        pk = sk.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return KeyPair(secret, pk, self.name)

    def sign(self, keypair: KeyPair, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(keypair.private_key).sign(message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True


class SimulatedScheme:
    """Keyed-hash signatures, verifiable only through this scheme's key registry.

    Fast and deterministic; meant for large Monte Carlo runs.  Anything signed
    with it is only as trustworthy as the simulator holding the registry.
    """

    name = "simulated"

    def __init__(self) -> None:
        self._registry: dict[bytes, bytes] = {}

    def generate(self, seed: int) -> KeyPair:
        secret = sha256(b"blocksim-sim-secret" + _seed_bytes(seed))
        pk = sha256(b"blocksim-sim-public" + secret)
        self._registry[pk] = secret
        return KeyPair(secret, pk, self.name)

    def sign(self, keypair: KeyPair, message: bytes) -> bytes:
        self._registry.setdefault(keypair.public_key, keypair.private_key)
        return hmac.digest(keypair.private_key, message, "sha256")

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        secret = self._registry.get(public_key)
        if secret is None:
            return False
        expected = hmac.digest(secret, message, "sha256")
        return hmac.compare_digest(expected, signature)


ED25519 = Ed25519Scheme()
SIMULATED = SimulatedScheme()
SCHEMES = {ED25519.name: ED25519, SIMULATED.name: SIMULATED}
DEFAULT_SCHEME = SIMULATED


def get_scheme(name: str):
    try:
        return SCHEMES[name]
    except KeyError:
        raise ValueError(f"unknown signature scheme {name!r}") from None


def _seed_bytes(seed: int) -> bytes:
    return (seed % 2**64).to_bytes(8, "big")


def generate_keypair(seed: int, scheme=None) -> KeyPair:
    return (scheme or DEFAULT_SCHEME).generate(seed)


# --------------------------------------------------------------------------
# Addresses and transactions


@dataclass(frozen=True, order=True)
class Address:
    digest: bytes

    def __post_init__(self) -> None:
        if len(self.digest) != HASH_LEN:
            raise ValueError("address digest must be 32 bytes")

    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def fromhex(cls, text: str) -> "Address":
        return cls(bytes.fromhex(text))

    def __str__(self) -> str:
        return self.digest.hex()


BURN_ADDRESS = Address(bytes(HASH_LEN))


def derive_address(public_key: bytes) -> Address:
    if not public_key:
        raise ValueError("empty public key")
    return Address(sha256(public_key))


class OutPoint(NamedTuple):
    tx_id: bytes
    output_index: int

    def __str__(self) -> str:
        return f"{self.tx_id.hex()}:{self.output_index}"


@dataclass(frozen=True)
class TxInput:
    outpoint: OutPoint
    public_key: bytes = b""
    signature: bytes = b""


@dataclass(frozen=True)
class TxOutput:
    address: Address
    amount: int

    def __post_init__(self) -> None:
        check_amount(self.amount)


@dataclass(frozen=True)
class Transaction:
    inputs: tuple[TxInput, ...]
    outputs: tuple[TxOutput, ...]
    memo: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        if not self.outputs:
            raise MalformedTx("transaction has no outputs")

    @property
    def is_coinbase(self) -> bool:
        return not self.inputs

    @cached_property
    def body(self) -> bytes:
        """Signed portion: every outpoint, every output and the memo."""
        return _serialize(self, with_witness=False)

    @cached_property
    def raw(self) -> bytes:
        return _serialize(self, with_witness=True)

    @cached_property
    def tx_id(self) -> bytes:
        return sha256(self.raw)

    @property
    def size(self) -> int:
        return len(self.raw)

    @cached_property
    def output_total(self) -> int:
        return checked_sum(o.amount for o in self.outputs)

    def outpoints(self) -> Iterator[OutPoint]:
        for i in range(len(self.outputs)):
            yield OutPoint(self.tx_id, i)

    def to_json(self) -> dict:
        return {
            "tx_id": self.tx_id.hex(),
            "coinbase": self.is_coinbase,
            "inputs": [
                {
                    "tx_id": i.outpoint.tx_id.hex(),
                    "index": i.outpoint.output_index,
                    "public_key": i.public_key.hex(),
                    "signature": i.signature.hex(),
                }
                for i in self.inputs
            ],
            "outputs": [
                {"address": o.address.hex(), "amount": o.amount} for o in self.outputs
            ],
            "memo": self.memo.hex(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Transaction":
        tx = cls(
            inputs=tuple(
                TxInput(
                    OutPoint(bytes.fromhex(i["tx_id"]), int(i["index"])),
                    bytes.fromhex(i["public_key"]),
                    bytes.fromhex(i["signature"]),
                )
                for i in obj["inputs"]
            ),
            outputs=tuple(
                TxOutput(Address.fromhex(o["address"]), int(o["amount"]))
                for o in obj["outputs"]
            ),
            memo=bytes.fromhex(obj.get("memo", "")),
        )
        if "tx_id" in obj and tx.tx_id.hex() != obj["tx_id"]:
            raise MalformedTx(f"tx_id mismatch for {obj['tx_id']}")
        return tx


def _serialize(tx: Transaction, with_witness: bool) -> bytes:
    parts = [struct.pack(">BBI", TX_VERSION, 1 if tx.is_coinbase else 0, len(tx.inputs))]
    for txin in tx.inputs:
        op = txin.outpoint
        if len(op.tx_id) != HASH_LEN:
            raise MalformedTx("outpoint tx_id must be 32 bytes")
        parts.append(op.tx_id)
        parts.append(struct.pack(">I", op.output_index))
        if with_witness:
            parts.append(struct.pack(">H", len(txin.public_key)) + txin.public_key)
            parts.append(struct.pack(">H", len(txin.signature)) + txin.signature)
    parts.append(struct.pack(">I", len(tx.outputs)))
    for out in tx.outputs:
        parts.append(out.address.digest)
        parts.append(struct.pack(">Q", out.amount))
    parts.append(struct.pack(">H", len(tx.memo)) + tx.memo)
    return b"".join(parts)


def make_coinbase(payouts: Sequence[tuple[Address, int]], height: int) -> Transaction:
    """Input-free transaction paying ``payouts``; the memo carries the height."""
    if not payouts:
        raise ValueError("coinbase needs a payout address")
    outs = tuple(TxOutput(a, v) for a, v in payouts if v > 0)
    if not outs:
        # exhausted schedule and no fees: a zero-value claim keeps the block well formed
        outs = (TxOutput(payouts[0][0], 0),)
    return Transaction((), outs, memo=struct.pack(">Q", height))


def make_payment(
    spends: Sequence[OutPoint],
    outputs: Sequence[tuple[Address, int]],
    memo: bytes = b"",
) -> Transaction:
    """Unsigned transaction spending ``spends`` into ``outputs``."""
    return Transaction(
        tuple(TxInput(op) for op in spends),
        tuple(TxOutput(a, v) for a, v in outputs),
        memo,
    )


def sign_transaction(tx: Transaction, keys: Sequence[KeyPair], utxo: "UtxoSet | None" = None, scheme=None) -> Transaction:
    """Sign every input of ``tx``; ``keys[i]`` signs input ``i``.

    When ``utxo`` is given, each key must hash to the address locked by the
    referenced output, otherwise :class:`SigningError` is raised.
    """
    if tx.is_coinbase:
        raise SigningError("coinbase transactions carry no signatures")
    if len(keys) != len(tx.inputs):
        raise SigningError(f"{len(tx.inputs)} inputs but {len(keys)} keys")
    scheme = scheme or DEFAULT_SCHEME
    body = tx.body
    signed = []
    for txin, kp in zip(tx.inputs, keys):
        if utxo is not None:
            prev = utxo.get(txin.outpoint)
            if prev is not None and prev.address != kp.address:
                raise SigningError(f"key does not own {txin.outpoint}")
        signed.append(TxInput(txin.outpoint, kp.public_key, scheme.sign(kp, body)))
    return Transaction(tuple(signed), tx.outputs, tx.memo)


def verify_transaction_signatures(tx: Transaction, scheme=None) -> bool:
    scheme = scheme or DEFAULT_SCHEME
    body = tx.body
    return all(scheme.verify(i.public_key, body, i.signature) for i in tx.inputs)


# --------------------------------------------------------------------------
# Unspent outputs


@dataclass
class TxUndo:
    """What applying one transaction changed, so it can be rolled back."""

    spent: list[tuple[OutPoint, TxOutput]]
    created: list[OutPoint]


class UtxoSet:
    """Map from outpoint to the live output it names.

    Mutation happens only through :meth:`apply` / :meth:`revert`; the module
    level :func:`apply_transaction` is the copying, value-style variant.
    """

    __slots__ = ("live",)

    def __init__(self, live: Mapping[OutPoint, TxOutput] | None = None) -> None:
        self.live: dict[OutPoint, TxOutput] = dict(live or {})

    def __contains__(self, op: OutPoint) -> bool:
        return op in self.live

    def __len__(self) -> int:
        return len(self.live)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, UtxoSet) and self.live == other.live

    def get(self, op: OutPoint) -> TxOutput | None:
        return self.live.get(op)

    def copy(self) -> "UtxoSet":
        return UtxoSet(self.live)

    def total(self) -> int:
        return sum(o.amount for o in self.live.values())

    def apply(self, tx: Transaction) -> TxUndo:
        live = self.live
        spent = []
        for txin in tx.inputs:
            op = txin.outpoint
            try:
                spent.append((op, live.pop(op)))
            except KeyError:
                for sop, sout in reversed(spent):
                    live[sop] = sout
                raise AssertionError(f"apply of unvalidated tx: {op} not live") from None
        tid = tx.tx_id
        created = []
        for i, out in enumerate(tx.outputs):
            op = OutPoint(tid, i)
            live[op] = out
            created.append(op)
        return TxUndo(spent, created)

    def revert(self, undo: TxUndo) -> None:
        live = self.live
        for op in undo.created:
            del live[op]
        for op, out in undo.spent:
            live[op] = out

    def serialize(self) -> bytes:
        """Canonical bytes: entries sorted by outpoint."""
        parts = [struct.pack(">Q", len(self.live))]
        for op in sorted(self.live):
            out = self.live[op]
            parts.append(op.tx_id + struct.pack(">I", op.output_index))
            parts.append(out.address.digest + struct.pack(">Q", out.amount))
        return b"".join(parts)


def validate_transaction(tx: Transaction, utxo: UtxoSet, scheme=None) -> int:
    """Check ``tx`` against ``utxo`` and return its fee in base units.

    Raises a :class:`TxRejected` subclass naming the first failed rule.
    Coinbase transactions cannot be validated on their own (their limit
    depends on the block) and are rejected as malformed here.
    """
    if tx.is_coinbase:
        raise MalformedTx("coinbase cannot be validated outside a block")
    if any(o.amount == 0 for o in tx.outputs):
        raise MalformedTx("zero-value output")
    scheme = scheme or DEFAULT_SCHEME
    seen: set[OutPoint] = set()
    total_in = 0
    body = tx.body
    for txin in tx.inputs:
        op = txin.outpoint
        if op in seen:
            raise InternalConflict(f"{op} referenced twice")
        seen.add(op)
        prev = utxo.live.get(op)
        if prev is None:
            raise MissingUtxo(f"{op} is not an unspent output")
        if sha256(txin.public_key) != prev.address.digest:
            raise AddressMismatch(f"key does not hash to the address locking {op}")
        if not scheme.verify(txin.public_key, body, txin.signature):
            raise BadSignature(f"signature for {op} does not verify")
        total_in += prev.amount
    if total_in > MAX_AMOUNT:
        raise Overspend("input sum overflows")
    total_out = tx.output_total
    if total_out > total_in:
        raise Overspend(f"outputs {total_out} exceed inputs {total_in}")
    return total_in - total_out


def apply_transaction(utxo: UtxoSet, tx: Transaction) -> UtxoSet:
    """Return a new set with ``tx``'s inputs removed and outputs added."""
    out = utxo.copy()
    out.apply(tx)
    return out
