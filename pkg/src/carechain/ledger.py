"""Append-only, hash-linked consortium ledger with role-based endorsement."""

from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

from .crypto import ZERO_DIGEST, concat, digest, hash_parts, split
from .errors import AuthorizationError, ConfigError, DuplicateError, ProtocolError, QuorumError, VerificationError


class TxKind(str, enum.Enum):
    HEALTH_METADATA = "HealthMetadata"
    INSURANCE_UPDATE = "InsuranceUpdate"
    DEVICE_EVENT = "DeviceEvent"
    PRESCRIPTION_NFT_EVENT = "PrescriptionNftEvent"
    FINANCIAL_TRANSFER = "FinancialTransfer"
    # cross-chain references written by the orchestrator
    CHANNEL_SHARE = "ChannelShare"
    ACCESS_GRANT = "AccessGrant"
    BRIDGE_RECEIPT = "BridgeReceipt"


class Role(str, enum.Enum):
    HOSPITAL = "hospital"
    INSURANCE = "insurance"
    DEVICE_MANUFACTURER = "device-manufacturer"


def _int(raw: bytes) -> int:
    if len(raw) != 8:
        raise ValueError("integer field must be 8 bytes")
    return int.from_bytes(raw, "big", signed=True)


@dataclass(frozen=True)
class Endorsement:
    miner_id: str
    role: Role
    signature: bytes

    def encode(self) -> bytes:
        return concat([self.miner_id, self.role.value, self.signature])

    @classmethod
    def decode(cls, raw: bytes) -> "Endorsement":
        miner_id, role, sig = split(raw)
        return cls(miner_id.decode(), Role(role.decode()), sig)


@dataclass(frozen=True)
class SignedTransaction:
    kind: TxKind
    payload: bytes
    submitter: str
    timestamp: int
    tx_id: bytes
    endorsements: tuple = ()

    @staticmethod
    def compute_id(kind: TxKind, payload: bytes, submitter: str, timestamp: int) -> bytes:
        return hash_parts(kind.value, payload, submitter, timestamp)

    @classmethod
    def create(cls, kind: TxKind, payload: bytes, submitter: str, timestamp: int) -> "SignedTransaction":
        return cls(kind, payload, submitter, timestamp,
                   cls.compute_id(kind, payload, submitter, timestamp))

    def id_is_valid(self) -> bool:
        return self.tx_id == self.compute_id(self.kind, self.payload, self.submitter, self.timestamp)

    def encode(self) -> bytes:
        return concat([self.tx_id, self.kind.value, self.payload, self.submitter, self.timestamp,
                       concat(e.encode() for e in self.endorsements)])

    @classmethod
    def decode(cls, raw: bytes) -> "SignedTransaction":
        tx_id, kind, payload, submitter, ts, endorsements = split(raw)
        return cls(TxKind(kind.decode()), payload, submitter.decode(), _int(ts), tx_id,
                   tuple(Endorsement.decode(e) for e in split(endorsements)))


def tx_root(tx_ids: Iterable[bytes]) -> bytes:
    return digest(concat(tx_ids))


def endorsement_root(txs: Iterable[SignedTransaction]) -> bytes:
    return digest(concat(concat(e.encode() for e in tx.endorsements) for tx in txs))


@dataclass(frozen=True)
class Block:
    chain_id: str
    height: int
    prev_hash: bytes
    tx_root: bytes
    endorsement_root: bytes
    timestamp: int
    block_hash: bytes
    txs: tuple = ()

    @staticmethod
    def header_bytes(chain_id, height, prev_hash, root, e_root, timestamp) -> bytes:
        return concat([chain_id, height, prev_hash, root, e_root, timestamp])

    def compute_hash(self) -> bytes:
        return digest(self.header_bytes(self.chain_id, self.height, self.prev_hash, self.tx_root,
                                        self.endorsement_root, self.timestamp))

    @classmethod
    def build(cls, chain_id: str, height: int, prev_hash: bytes, timestamp: int,
              txs: Iterable[SignedTransaction]) -> "Block":
        txs = tuple(txs)
        root = tx_root(tx.tx_id for tx in txs)
        e_root = endorsement_root(txs)
        h = digest(cls.header_bytes(chain_id, height, prev_hash, root, e_root, timestamp))
        return cls(chain_id, height, prev_hash, root, e_root, timestamp, h, txs)

    def header(self) -> dict:
        return {
            "chain_id": self.chain_id,
            "height": self.height,
            "prev_hash": self.prev_hash.hex(),
            "tx_root": self.tx_root.hex(),
            "endorsement_root": self.endorsement_root.hex(),
            "timestamp": self.timestamp,
            "block_hash": self.block_hash.hex(),
        }

    def encode(self) -> bytes:
        return concat([self.chain_id, self.height, self.prev_hash, self.tx_root,
                       self.endorsement_root, self.timestamp, self.block_hash,
                       concat(tx.encode() for tx in self.txs)])

    @classmethod
    def decode(cls, raw: bytes) -> "Block":
        chain_id, height, prev, root, e_root, ts, h, txs = split(raw)
        return cls(chain_id.decode(), _int(height), prev, root, e_root, _int(ts), h,
                   tuple(SignedTransaction.decode(t) for t in split(txs)))


def header_hash(header: dict) -> bytes:
    """Recompute a block hash from an exported header dict."""
    return digest(Block.header_bytes(header["chain_id"], header["height"],
                                     bytes.fromhex(header["prev_hash"]), bytes.fromhex(header["tx_root"]),
                                     bytes.fromhex(header["endorsement_root"]), header["timestamp"]))


@dataclass
class Miner:
    miner_id: str
    role: Role
    key: bytes = field(repr=False)
    online: bool = True

    def sign(self, tx_id: bytes) -> bytes:
        return hash_parts(self.miner_id, tx_id, self.key)

    def endorse(self, tx_id: bytes) -> Endorsement:
        return Endorsement(self.miner_id, self.role, self.sign(tx_id))

    def to_dict(self) -> dict:
        return {"miner_id": self.miner_id, "role": self.role.value, "key": self.key.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "Miner":
        return cls(d["miner_id"], Role(d["role"]), bytes.fromhex(d["key"]))


@dataclass(frozen=True)
class EndorsementRule:
    """``role=None`` accepts any role; ``quorum=None`` means a strict majority."""
    role: Optional[Role]
    quorum: Optional[int] = None

    def required(self, miners: Iterable[Miner]) -> int:
        if self.quorum is not None:
            return self.quorum
        n = sum(1 for m in miners if self.role is None or m.role == self.role)
        return n // 2 + 1


DEFAULT_POLICY = {
    TxKind.HEALTH_METADATA: EndorsementRule(Role.HOSPITAL),
    TxKind.INSURANCE_UPDATE: EndorsementRule(Role.INSURANCE, 1),
    TxKind.DEVICE_EVENT: EndorsementRule(Role.DEVICE_MANUFACTURER, 1),
    TxKind.PRESCRIPTION_NFT_EVENT: EndorsementRule(Role.HOSPITAL),
    TxKind.FINANCIAL_TRANSFER: EndorsementRule(None),
    TxKind.CHANNEL_SHARE: EndorsementRule(Role.HOSPITAL),
    TxKind.ACCESS_GRANT: EndorsementRule(Role.HOSPITAL),
    TxKind.BRIDGE_RECEIPT: EndorsementRule(Role.HOSPITAL),
}


@dataclass(frozen=True)
class TxLocation:
    height: int
    position: int
    tx: SignedTransaction


def genesis(chain_id: str) -> Block:
    return Block.build(chain_id, 0, ZERO_DIGEST, 0, ())


def _block_problem(block: Block, index: int, prev: Optional[Block], chain_id: Optional[str],
                   roster: Optional[dict], policy: dict, seen: set) -> Optional[str]:
    if block.height != index:
        return "height out of sequence"
    if chain_id is not None and block.chain_id != chain_id:
        return "block belongs to another chain"
    expected_prev = ZERO_DIGEST if prev is None else prev.block_hash
    if block.prev_hash != expected_prev:
        return "prev_hash does not link"
    if index == 0 and block.txs:
        return "genesis block carries transactions"
    if index > 0 and not block.txs:
        return "empty block"
    for tx in block.txs:
        if not tx.id_is_valid():
            return "tx_id does not match transaction content"
        if tx.tx_id in seen:
            return "transaction committed twice"
        seen.add(tx.tx_id)
        if roster is not None:
            problem = _endorsement_problem(tx, roster, policy)
            if problem:
                return problem
    if tx_root(tx.tx_id for tx in block.txs) != block.tx_root:
        return "tx_root mismatch"
    if endorsement_root(block.txs) != block.endorsement_root:
        return "endorsement_root mismatch"
    if block.compute_hash() != block.block_hash:
        return "block hash mismatch"
    return None


def _endorsement_problem(tx: SignedTransaction, roster: dict, policy: dict) -> Optional[str]:
    signers = set()
    for e in tx.endorsements:
        miner = roster.get(e.miner_id)
        if miner is None or miner.role != e.role or miner.sign(tx.tx_id) != e.signature:
            return f"invalid endorsement by {e.miner_id!r}"
        signers.add(e.miner_id)
    rule = policy.get(tx.kind)
    if rule is None:
        return f"no endorsement rule for {tx.kind.value}"
    valid = [roster[m] for m in signers if rule.role is None or roster[m].role == rule.role]
    if len(valid) < rule.required(roster.values()):
        return "endorsement quorum not met"
    return None


def verify_blocks(blocks, chain_id: Optional[str] = None, miners: Optional[Iterable[Miner]] = None,
                  policy: Optional[dict] = None) -> Optional[int]:
    """Return the first invalid height, or None when every block checks out.

    Without ``miners`` the endorsement signatures are only covered by the
    endorsement root, not checked against keys.
    """
    roster = None if miners is None else {m.miner_id: m for m in miners}
    policy = DEFAULT_POLICY if policy is None else policy
    seen: set = set()
    prev = None
    for i, block in enumerate(blocks):
        if _block_problem(block, i, prev, chain_id, roster, policy, seen):
            return i
        prev = block
    return None


def explain_blocks(blocks, chain_id=None, miners=None, policy=None) -> Optional[tuple[int, str]]:
    roster = None if miners is None else {m.miner_id: m for m in miners}
    policy = DEFAULT_POLICY if policy is None else policy
    seen: set = set()
    prev = None
    for i, block in enumerate(blocks):
        problem = _block_problem(block, i, prev, chain_id, roster, policy, seen)
        if problem:
            return i, problem
        prev = block
    return None


_FRAME = struct.Struct(">I")


def encode_chain(blocks: Iterable[Block]) -> bytes:
    out = []
    for b in blocks:
        raw = b.encode()
        out.append(_FRAME.pack(len(raw)))
        out.append(raw)
    return b"".join(out)


def block_offsets(data: bytes) -> list[int]:
    """Start offset of each block frame in an intact chain file."""
    offsets, pos = [], 0
    while pos < len(data):
        offsets.append(pos)
        (n,) = _FRAME.unpack_from(data, pos)
        pos += 4 + n
    return offsets


def _frames(data: bytes):
    """Yield decoded blocks in file order; ``None`` marks an undecodable frame
    and ends the stream."""
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            yield None
            return
        (n,) = _FRAME.unpack_from(data, pos)
        if pos + 4 + n > len(data):
            yield None
            return
        try:
            yield Block.decode(data[pos + 4:pos + 4 + n])
        except (ValueError, UnicodeDecodeError):
            yield None
            return
        pos += 4 + n


def decode_chain(data: bytes) -> tuple[list[Block], Optional[int]]:
    """Decode as many blocks as possible.

    Returns the decoded prefix and the index of the first undecodable frame
    (None when the whole file parsed).
    """
    blocks = []
    for block in _frames(data):
        if block is None:
            return blocks, len(blocks)
        blocks.append(block)
    return blocks, None


def verify_chain_bytes(data: bytes, chain_id=None, miners=None, policy=None) -> Optional[int]:
    """First bad height in a framed chain file, decoding only as far as needed."""
    roster = None if miners is None else {m.miner_id: m for m in miners}
    policy = DEFAULT_POLICY if policy is None else policy
    seen: set = set()
    prev = None
    for i, block in enumerate(_frames(data)):
        if block is None or _block_problem(block, i, prev, chain_id, roster, policy, seen):
            return i
        prev = block
    return None


Authorizer = Callable[["Ledger", SignedTransaction], None]


class Ledger:
    """One chain: pending pool, sealing with endorsement quorum, queries.

    The sealer is the only writer of ``blocks``; readers take a snapshot
    tuple, so queries never observe a half-appended block.
    """

    def __init__(self, chain_id: str, miners: Iterable[Miner], *, policy: Optional[dict] = None,
                 block_size: int = 10, authorizer: Optional[Authorizer] = None,
                 allowed_kinds: Optional[Iterable[TxKind]] = None):
        self.chain_id = chain_id
        self.miners = list(miners)
        ids = [m.miner_id for m in self.miners]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate miner ids on chain {chain_id}")
        if block_size < 1:
            raise ConfigError("block size must be positive")
        self.policy = dict(DEFAULT_POLICY if policy is None else policy)
        self.block_size = block_size
        self.authorizer = authorizer
        self.allowed_kinds = None if allowed_kinds is None else frozenset(allowed_kinds)
        self.blocks: tuple = (genesis(chain_id),)
        self.pending: list[SignedTransaction] = []
        self._known: set = set()
        self._index: dict[bytes, TxLocation] = {}
        self.clock = 0
        self._lock = threading.RLock()

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    def tick(self) -> int:
        with self._lock:
            self.clock += 1
            return self.clock

    def new_tx(self, kind: TxKind, payload: bytes, submitter: str) -> SignedTransaction:
        return SignedTransaction.create(kind, payload, submitter, self.tick())

    def submit(self, tx: SignedTransaction) -> bytes:
        if not tx.id_is_valid():
            raise ProtocolError("malformed transaction: tx_id does not match content")
        if self.allowed_kinds is not None and tx.kind not in self.allowed_kinds:
            raise AuthorizationError(f"{tx.kind.value} transactions are not accepted on chain {self.chain_id}")
        if self.authorizer is not None:
            self.authorizer(self, tx)
        with self._lock:
            if tx.tx_id in self._known:
                raise DuplicateError(f"transaction {tx.tx_id.hex()} already submitted")
            self._known.add(tx.tx_id)
            self.pending.append(tx)
            self.clock = max(self.clock, tx.timestamp)
        return tx.tx_id

    def _endorsers(self, rule: EndorsementRule, height: int) -> list[Miner]:
        candidates = sorted((m for m in self.miners if rule.role is None or m.role == rule.role),
                            key=lambda m: m.miner_id)
        need = rule.required(self.miners)
        if not candidates:
            raise QuorumError("no miners hold the required role")
        start = height % len(candidates)
        rotated = candidates[start:] + candidates[:start]
        chosen = [m for m in rotated if m.online][:need]
        if len(chosen) < need:
            role = rule.role.value if rule.role else "any"
            raise QuorumError(f"need {need} {role} endorsers on {self.chain_id}, {len(chosen)} online")
        return chosen

    def seal_block(self) -> Optional[Block]:
        """Seal up to ``block_size`` pending txs. Returns None if nothing is pending."""
        with self._lock:
            if not self.pending:
                return None
            height = len(self.blocks)
            batch = sorted(self.pending, key=lambda t: (t.timestamp, t.tx_id))[:self.block_size]
            endorsed = []
            for tx in batch:
                rule = self.policy.get(tx.kind)
                if rule is None:
                    raise QuorumError(f"no endorsement rule for {tx.kind.value}")
                sigs = tuple(m.endorse(tx.tx_id) for m in self._endorsers(rule, height))
                endorsed.append(replace(tx, endorsements=sigs))
            block = Block.build(self.chain_id, height, self.head.block_hash,
                                max(tx.timestamp for tx in batch), endorsed)
            taken = {tx.tx_id for tx in batch}
            self.pending = [tx for tx in self.pending if tx.tx_id not in taken]
            self.blocks = self.blocks + (block,)
            for pos, tx in enumerate(block.txs):
                self._index[tx.tx_id] = TxLocation(height, pos, tx)
            return block

    def seal_all(self) -> list[Block]:
        sealed = []
        while True:
            block = self.seal_block()
            if block is None:
                return sealed
            sealed.append(block)

    def commit(self, tx: SignedTransaction) -> TxLocation:
        """Submit and seal until ``tx`` is on the chain."""
        self.submit(tx)
        self.seal_all()
        return self._index[tx.tx_id]

    def record(self, kind: TxKind, payload: bytes, submitter: str) -> TxLocation:
        return self.commit(self.new_tx(kind, payload, submitter))

    def find(self, tx_id: bytes) -> Optional[TxLocation]:
        return self._index.get(tx_id)

    def query(self, kind: Optional[TxKind] = None, submitter: Optional[str] = None,
              heights: Optional[tuple[int, int]] = None) -> list[SignedTransaction]:
        """Committed txs matching every given filter, in commit order.

        ``heights`` is an inclusive (low, high) range.
        """
        blocks = self.blocks
        lo, hi = (0, len(blocks) - 1) if heights is None else heights
        out = []
        for block in blocks[max(lo, 0):hi + 1]:
            for tx in block.txs:
                if kind is not None and tx.kind != kind:
                    continue
                if submitter is not None and tx.submitter != submitter:
                    continue
                out.append(tx)
        return out

    def verify_chain(self, check_endorsements: bool = True) -> Optional[int]:
        return verify_blocks(self.blocks, self.chain_id,
                             self.miners if check_endorsements else None, self.policy)

    def export_bytes(self) -> bytes:
        return encode_chain(self.blocks)

    @classmethod
    def from_bytes(cls, chain_id: str, data: bytes, miners: Iterable[Miner], **kwargs) -> "Ledger":
        blocks, bad_frame = decode_chain(data)
        if bad_frame is not None:
            raise VerificationError(f"chain file is corrupt at block {bad_frame}")
        ledger = cls(chain_id, miners, **kwargs)
        bad = verify_blocks(blocks, chain_id, ledger.miners, ledger.policy)
        if bad is not None:
            raise VerificationError(f"chain file fails verification at height {bad}")
        ledger.blocks = tuple(blocks)
        for block in blocks:
            for pos, tx in enumerate(block.txs):
                ledger._known.add(tx.tx_id)
                ledger._index[tx.tx_id] = TxLocation(block.height, pos, tx)
                ledger.clock = max(ledger.clock, tx.timestamp)
        return ledger
