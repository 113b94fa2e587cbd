import hashlib
import json
import random
from dataclasses import replace

import pytest

import oracle
from carechain.consortium import Consortium, TopologyConfig
from carechain.errors import AuthorizationError, ConfigError, DuplicateError, NotFoundError, ProtocolError
from carechain.ledger import TxKind
from carechain.nft import (NftRegistry, PrescriptionMetadata, compute_token_id, open_batch, seal_batch)

CID = "0f" * 16


@pytest.fixture
def world():
    c = Consortium(TopologyConfig(hospitals=["H1", "H2"], channels=[("H1", "H2")]),
                   rand=random.Random(9).randbytes)
    c.financial.issue("INS1", 1000)
    return c, NftRegistry(c)


def meta(hospital="H1"):
    return PrescriptionMetadata(hospital, "dr-1", 0, 10, 1, ((CID, "critical"),))


def test_token_id_oracle(world):
    c, reg = world
    batch = seal_batch(c, "H1", "P1", [{"cid": CID, "drug": "x"}])
    tok = reg.mint("H1", batch, meta(), insurer="INS1")
    canonical = json.dumps(meta().to_dict(), sort_keys=True, separators=(",", ":")).encode()
    assert tok.content_addr == hashlib.sha256(batch).digest()
    assert tok.token_id == oracle.H(tok.content_addr, canonical)
    assert compute_token_id(tok.content_addr, meta()) == tok.token_id


def test_mint_records_event_on_hospital_chain(world):
    c, reg = world
    tok = reg.mint("H1", seal_batch(c, "H1", "P1", [1]), meta())
    events = [json.loads(t.payload) for t in c.chain("health-H1").query(TxKind.PRESCRIPTION_NFT_EVENT)]
    assert events[-1]["event"] == "mint" and events[-1]["token_id"] == tok.token_id.hex()
    assert c.chain("health-H2").query(TxKind.PRESCRIPTION_NFT_EVENT) == []
    assert reg.owner(tok.token_id) == "H1"


def test_mint_rejections(world):
    c, reg = world
    batch = seal_batch(c, "H1", "P1", [1])
    with pytest.raises(AuthorizationError):
        reg.mint("P1", batch, meta(hospital="P1"))
    with pytest.raises(AuthorizationError):
        reg.mint("H1", batch, meta(hospital="H2"))
    with pytest.raises(ConfigError):
        reg.mint("H1", b"", meta())
    with pytest.raises(NotFoundError):
        reg.mint("H1", batch, meta(), insurer="NOPE")
    reg.mint("H1", batch, meta())
    with pytest.raises(DuplicateError):
        reg.mint("H1", batch, meta())


def test_metadata_validation():
    with pytest.raises(ConfigError):
        PrescriptionMetadata("H1", "d", 5, 1, 1)
    with pytest.raises(ConfigError):
        PrescriptionMetadata("H1", "d", 0, 1, 1, (("alice", "critical"),))
    with pytest.raises(ConfigError):
        PrescriptionMetadata("H1", "d", 0, 1, 1, ((CID, "urgent"),))


def test_transfer_and_provenance(world):
    c, reg = world
    tok = reg.mint("H1", seal_batch(c, "H1", "P1", [1]), meta())
    with pytest.raises(AuthorizationError):
        reg.transfer(tok.token_id, "H2", "P1")
    with pytest.raises(NotFoundError):
        reg.transfer(tok.token_id, "H1", "H2")
    reg.transfer(tok.token_id, "H1", "P1")
    assert reg.owner(tok.token_id) == "P1"
    assert [(r.sender, r.recipient) for r in reg.provenance[tok.token_id]] == [(None, "H1"), ("H1", "P1")]
    with pytest.raises(AuthorizationError):
        reg.transfer(tok.token_id, "H1", "P1")


def test_pharmacy_opens_batch(world):
    c, reg = world
    batch = seal_batch(c, "H1", "P1", [{"drug": "x"}])
    assert open_batch(c, "H1", "P1", batch) == [{"drug": "x"}]


def test_verify_token_forgeries(world):
    c, reg = world
    b1 = seal_batch(c, "H1", "P1", [1])
    b2 = seal_batch(c, "H1", "P1", [2])
    tok = reg.mint("H1", b1, meta())
    assert reg.verify_token(tok.token_id, b1).ok
    assert not reg.verify_token(tok.token_id, b2).ok
    tampered = replace(tok, metadata=replace(tok.metadata, patient_count=9))
    assert not reg.verify_token(tok.token_id, b1, presented=tampered).ok
    swapped = replace(tok, content_addr=hashlib.sha256(b2).digest())
    assert not reg.verify_token(tok.token_id, b2, presented=swapped).ok
    with pytest.raises(NotFoundError):
        reg.verify_token(bytes(32), b1)


def test_settle_requires_pharmacy_owner_and_insurer(world):
    c, reg = world
    tok = reg.mint("H1", seal_batch(c, "H1", "P1", [1]), meta(), insurer="INS1")
    with pytest.raises(ProtocolError):
        reg.settle(tok.token_id, "INS1", 10)
    reg.transfer(tok.token_id, "H1", "P1")
    with pytest.raises(AuthorizationError):
        reg.settle(tok.token_id, "P1", 10)
    fin = reg.settle(tok.token_id, "INS1", 10)
    assert c.financial.balance("P1") == 10
    receipt_id, fin_id = c.receipts[-1]
    assert fin_id == fin.tx_id
    assert c.verify_receipt(c.chain("health-H1").find(receipt_id).tx)


def test_registry_persistence(world):
    c, reg = world
    tok = reg.mint("H1", seal_batch(c, "H1", "P1", [1]), meta())
    reg.transfer(tok.token_id, "H1", "P1")
    again = NftRegistry.from_dict(c, json.loads(json.dumps(reg.to_dict())))
    assert again.tokens == reg.tokens and again.provenance == reg.provenance
