"""Prescription-batch NFTs: mint, transfer, verify, settle.

A token binds the content address of an encrypted prescription batch to
its metadata; ``token_id = H(content_addr || canonical metadata)``. Every
registry event is recorded on the minting hospital's health chain, and
settlements move funds on the financial chain before the bridge relays a
receipt back.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from typing import Optional

from . import crypto
from .consortium import ActorKind, Consortium
from .crypto import Ciphertext, hash_parts
from .errors import (AuthorizationError, ConfigError, DuplicateError, NotFoundError,
                     ProtocolError)
from .ledger import SignedTransaction, TxKind

_CID_HEX = re.compile(r"^[0-9a-f]{32}$")
PRIORITIES = ("critical", "routine")


@dataclass(frozen=True)
class PrescriptionMetadata:
    hospital_id: str
    doctor_ref: str
    period_start: int
    period_end: int
    patient_count: int
    # (patient CID hex, priority) pairs; pseudonyms only
    priority_flags: tuple = ()

    def __post_init__(self):
        if self.period_end < self.period_start:
            raise ConfigError("batch period ends before it starts")
        for cid, flag in self.priority_flags:
            if not _CID_HEX.match(cid):
                raise ConfigError(f"priority flag key {cid!r} is not a CID pseudonym")
            if flag not in PRIORITIES:
                raise ConfigError(f"unknown priority {flag!r}")

    def to_dict(self) -> dict:
        return {
            "hospital_id": self.hospital_id,
            "doctor_ref": self.doctor_ref,
            "period_start": self.period_start,
            "period_end": self.period_end,
            "patient_count": self.patient_count,
            "priority_flags": [list(p) for p in self.priority_flags],
        }

    def canonical(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, d: dict) -> "PrescriptionMetadata":
        return cls(d["hospital_id"], d["doctor_ref"], d["period_start"], d["period_end"],
                   d["patient_count"], tuple(tuple(p) for p in d["priority_flags"]))


def compute_token_id(content_addr: bytes, metadata: PrescriptionMetadata) -> bytes:
    return hash_parts(content_addr, metadata.canonical())


@dataclass(frozen=True)
class PrescriptionNft:
    token_id: bytes
    owner: str
    content_addr: bytes
    metadata: PrescriptionMetadata
    minted_at: int
    insurer_ref: Optional[str] = None

    def export(self) -> dict:
        return {
            "token_id": self.token_id.hex(),
            "owner": self.owner,
            "content_addr": self.content_addr.hex(),
            "metadata": self.metadata.to_dict(),
            "minted_at": self.minted_at,
            "insurer_ref": self.insurer_ref,
        }

    @classmethod
    def from_export(cls, d: dict) -> "PrescriptionNft":
        return cls(bytes.fromhex(d["token_id"]), d["owner"], bytes.fromhex(d["content_addr"]),
                   PrescriptionMetadata.from_dict(d["metadata"]), d["minted_at"], d.get("insurer_ref"))


@dataclass(frozen=True)
class TransferRecord:
    token_id: bytes
    sender: Optional[str]  # None for the mint entry
    recipient: str
    at: int


@dataclass
class VerifyReport:
    token_id: bytes
    problems: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def __bool__(self):
        return self.ok


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def seal_batch(consortium: Consortium, hospital: str, recipient: str, prescriptions: list) -> bytes:
    """Encrypt a prescription batch under the hospital<->recipient key."""
    key = consortium.shared_key(hospital, recipient)
    body = _json(prescriptions)
    ct = crypto.encrypt(key, body, consortium.rand(crypto.NONCE_SIZE), aad=hospital.encode())
    return ct.to_bytes()


def open_batch(consortium: Consortium, hospital: str, recipient: str, blob: bytes) -> list:
    key = consortium.shared_key(hospital, recipient)
    return json.loads(crypto.decrypt(key, Ciphertext.from_bytes(blob), aad=hospital.encode()))


class NftRegistry:

    def __init__(self, consortium: Consortium):
        self.consortium = consortium
        self.tokens: dict[bytes, PrescriptionNft] = {}
        self.provenance: dict[bytes, list[TransferRecord]] = {}
        self.settlements: dict[bytes, list[bytes]] = {}
        self._lock = threading.RLock()

    def _token(self, token_id: bytes) -> PrescriptionNft:
        try:
            return self.tokens[token_id]
        except KeyError:
            raise NotFoundError(f"unknown token {token_id.hex()}") from None

    def _record_event(self, token: PrescriptionNft, event: dict, submitter: str) -> SignedTransaction:
        chain = self.consortium.chain_for(token.metadata.hospital_id)
        return chain.record(TxKind.PRESCRIPTION_NFT_EVENT, _json(event), submitter).tx

    def mint(self, hospital: str, batch: bytes, metadata: PrescriptionMetadata,
             insurer: Optional[str] = None) -> PrescriptionNft:
        c = self.consortium
        if c.actor_kind(hospital) != ActorKind.HOSPITAL:
            raise AuthorizationError(f"{hospital!r} is not a hospital")
        if metadata.hospital_id != hospital:
            raise AuthorizationError("metadata names a different hospital")
        if not batch:
            raise ConfigError("prescription batch is empty")
        if insurer is not None and c.actor_kind(insurer) != ActorKind.INSURER:
            raise NotFoundError(f"unknown insurer {insurer!r}")
        with self._lock:
            content_addr = crypto.digest(batch)
            token_id = compute_token_id(content_addr, metadata)
            if token_id in self.tokens:
                raise DuplicateError(f"token {token_id.hex()} already minted")
            c.stores[hospital].put(batch)
            chain = c.chain_for(hospital)
            token = PrescriptionNft(token_id, hospital, content_addr, metadata, chain.clock + 1, insurer)
            self._record_event(token, {"event": "mint", **token.export()}, hospital)
            self.tokens[token_id] = token
            self.provenance[token_id] = [TransferRecord(token_id, None, hospital, token.minted_at)]
            return token

    def transfer(self, token_id: bytes, sender: str, recipient: str) -> TransferRecord:
        kind = self.consortium.actor_kind(recipient)
        if kind not in (ActorKind.PHARMACY, ActorKind.INSURER):
            raise NotFoundError(f"{recipient!r} is not a registered pharmacy or insurer")
        with self._lock:
            token = self._token(token_id)
            if token.owner != sender:
                raise AuthorizationError(f"{sender!r} does not own token {token_id.hex()}")
            tx = self._record_event(token, {"event": "transfer", "token_id": token_id.hex(),
                                            "from": sender, "to": recipient}, sender)
            self.tokens[token_id] = PrescriptionNft(token.token_id, recipient, token.content_addr,
                                                    token.metadata, token.minted_at, token.insurer_ref)
            record = TransferRecord(token_id, sender, recipient, tx.timestamp)
            self.provenance[token_id].append(record)
            return record

    def owner(self, token_id: bytes) -> str:
        return self._token(token_id).owner

    def verify_token(self, token_id: bytes, claimed: bytes,
                     presented: Optional[PrescriptionNft] = None) -> VerifyReport:
        """Check ``claimed`` batch bytes (and optionally a presented token copy).

        The registry's own record is the reference; a presented copy must
        recompute its own token id and agree with that record.
        """
        token = self._token(token_id)
        report = VerifyReport(token_id)
        if crypto.digest(claimed) != token.content_addr:
            report.problems.append("batch bytes do not hash to the token's content address")
        if compute_token_id(token.content_addr, token.metadata) != token.token_id:
            report.problems.append("registry record does not recompute its token id")
        if presented is not None:
            if presented.token_id != token_id:
                report.problems.append("presented token carries a different token id")
            if compute_token_id(presented.content_addr, presented.metadata) != presented.token_id:
                report.problems.append("presented token id does not recompute from its content and metadata")
            if presented.content_addr != token.content_addr or presented.metadata != token.metadata:
                report.problems.append("presented token differs from the registry record")
            if crypto.digest(claimed) != presented.content_addr:
                report.problems.append("batch bytes do not hash to the presented content address")
        return report

    def settle(self, token_id: bytes, payer: str, amount: int) -> SignedTransaction:
        c = self.consortium
        if c.actor_kind(payer) != ActorKind.INSURER:
            raise AuthorizationError(f"{payer!r} is not an insurer")
        with self._lock:
            token = self._token(token_id)
            if c.actor_kind(token.owner) != ActorKind.PHARMACY:
                raise ProtocolError("only a pharmacy-held token can be settled")
            fin = c.financial.transfer(payer, token.owner, amount, memo={"token_id": token_id.hex()})
            c.bridge_relay(fin.tx.tx_id, token.metadata.hospital_id, token_id)
            self.settlements.setdefault(token_id, []).append(fin.tx.tx_id)
            return fin.tx

    def to_dict(self) -> dict:
        return {
            "tokens": [t.export() for t in self.tokens.values()],
            "provenance": {tid.hex(): [[r.sender, r.recipient, r.at] for r in recs]
                           for tid, recs in self.provenance.items()},
            "settlements": {tid.hex(): [f.hex() for f in fins] for tid, fins in self.settlements.items()},
        }

    @classmethod
    def from_dict(cls, consortium: Consortium, d: dict) -> "NftRegistry":
        reg = cls(consortium)
        for t in d["tokens"]:
            token = PrescriptionNft.from_export(t)
            reg.tokens[token.token_id] = token
        for tid_hex, recs in d["provenance"].items():
            tid = bytes.fromhex(tid_hex)
            reg.provenance[tid] = [TransferRecord(tid, s, r, at) for s, r, at in recs]
        reg.settlements = {bytes.fromhex(t): [bytes.fromhex(f) for f in fins]
                           for t, fins in d["settlements"].items()}
        return reg
