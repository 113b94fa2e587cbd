import json
import random

import pytest

from carechain import auth
from carechain.consortium import (Consortium, DeviceKind, DeviceStatus, TopologyConfig, check_inclusion,
                                  create_topology, inclusion_proof, validate_topology)
from carechain.errors import (AuthorizationError, ConfigError, DuplicateError, NotFoundError, ProtocolError)
from carechain.ledger import SignedTransaction, TxKind


def make(hospitals=("H1", "H2"), seed=3, **kw):
    kw.setdefault("channels", [("H1", "H2")])
    return Consortium(TopologyConfig(hospitals=list(hospitals), **kw), rand=random.Random(seed).randbytes)


def patient(c, hospital="H1", name="p1"):
    creds = auth.PatientCredentials.create(name, name.encode(), b"pw", rand=c.rand)
    card = auth.register(creds, c.gateways[hospital])
    return auth.login(card, creds, c.gateways[hospital], rand=c.rand)


def send(c, sessions, vitals, hospital="H1", device="D1"):
    mine, theirs = sessions
    return c.ingest_vitals(hospital, theirs, auth.send_encrypted(mine, json.dumps(vitals).encode()), device)


def test_per_hospital_and_shared_layouts():
    t = create_topology(TopologyConfig(hospitals=["A", "B", "C"]))
    assert [s.chain_id for s in t.chains] == ["health-A", "health-B", "health-C"]
    assert t.financial.chain_id == "financial" and t.miner_count() == 24
    s = create_topology(TopologyConfig(hospitals=["A", "B"], layout="shared", miners_per_chain=16))
    assert len(s.chains) == 1 and s.chain_of("B") == "health-shared"
    roles = [r.value for _, r in s.chains[0].miners]
    assert roles.count("insurance") == 1 and roles.count("device-manufacturer") == 1


@pytest.mark.parametrize("cfg", [
    dict(hospitals=[]),
    dict(hospitals=["A", "A"]),
    dict(hospitals=["A"], layout="ring"),
    dict(hospitals=["A"], miners_per_chain=2),
    dict(hospitals=["A", "B"], channels=[("A", "Z")]),
    dict(hospitals=["A", "B"], layout="shared", channels=[("A", "B")]),
])
def test_bad_topologies(cfg):
    with pytest.raises(ConfigError):
        create_topology(TopologyConfig(**cfg))


def test_topology_file(tmp_path):
    f = tmp_path / "t.cfg"
    f.write_text("[topology]\nhospitals = H1, H2, H3\nchannels = H1:H2, H2:H3\nminers_per_chain = 6\n")
    t = create_topology(TopologyConfig.load(f))
    validate_topology(t)
    assert t.channels == (("health-H1", "health-H2"), ("health-H2", "health-H3"))
    f.write_text("[topology]\nhospitals = H1\nminers = 3\n")
    with pytest.raises(ConfigError, match="unknown"):
        TopologyConfig.load(f)
    with pytest.raises(ConfigError):
        TopologyConfig.load(tmp_path / "missing.cfg")


def test_consortium_requires_financial_and_manufacturer_miner():
    with pytest.raises(ConfigError):
        make(financial_miners=0)
    with pytest.raises(ConfigError):
        make(manufacturer_miners=0)


def test_shard_isolation():
    c = make(hospitals=("H1", "H2", "H3"), channels=[])
    c.register_device("MFR1", "D1", DeviceKind.PATIENT_GATEWAY)
    locs = [send(c, patient(c, h, f"p-{h}"), {"heart_rate": 70}, hospital=h) for h in ("H1", "H2", "H3")]
    for h, loc in zip(("H1", "H2", "H3"), locs):
        for other in ("H1", "H2", "H3"):
            found = c.chain_for(other).find(loc.tx.tx_id)
            assert (found is not None) == (other == h)


def test_vitals_are_encrypted_at_rest_and_triaged():
    c = make()
    c.register_device("MFR1", "D1", DeviceKind.PATIENT_GATEWAY)
    s = patient(c)
    loc = send(c, s, {"heart_rate": 150})
    meta = json.loads(loc.tx.payload)
    assert meta["priority"] == "critical"
    addr = bytes.fromhex(meta["record"])
    assert b"heart_rate" not in c.stores["H1"].get(addr)
    assert json.loads(c.read_record("H1", s[0].cid, addr)) == {"heart_rate": 150}
    assert json.loads(send(c, s, {"heart_rate": 70}).tx.payload)["priority"] == "routine"


def test_wrong_hospital_session_rejected():
    c = make()
    c.register_device("MFR1", "D1", DeviceKind.PATIENT_GATEWAY)
    with pytest.raises(ProtocolError):
        send(c, patient(c, "H1"), {}, hospital="H2")


def test_device_lifecycle():
    c = make()
    c.register_device("MFR1", "D1", DeviceKind.WEARABLE_SENSOR, 2)
    with pytest.raises(DuplicateError):
        c.register_device("MFR1", "D1", DeviceKind.WEARABLE_SENSOR)
    with pytest.raises(AuthorizationError):
        c.register_device("H1", "D2", DeviceKind.WEARABLE_SENSOR)
    c.update_firmware("MFR1", "D1", 3)
    with pytest.raises(ProtocolError):
        c.update_firmware("MFR1", "D1", 3)
    with pytest.raises(NotFoundError):
        c.block_device("MFR1", "nope")
    c.block_device("MFR1", "D1")
    assert c.devices["D1"].status == DeviceStatus.BLOCKED
    # device events land on every health chain
    for ledger in c.chains.values():
        assert len(ledger.query(TxKind.DEVICE_EVENT)) == 3


def test_device_gate_sweep():
    c = make(hospitals=("H1", "H2", "H3"), channels=[])
    c.register_device("MFR1", "D1", DeviceKind.PATIENT_GATEWAY)
    sessions = {h: patient(c, h, f"p-{h}") for h in ("H1", "H2", "H3")}
    for h, s in sessions.items():
        send(c, s, {"heart_rate": 80}, hospital=h)
    c.block_device("MFR1", "D1")
    marks = {ledger.chain_id: ledger.height for ledger in c.all_ledgers()}
    for h, s in sessions.items():
        with pytest.raises(AuthorizationError):
            send(c, s, {"heart_rate": 80}, hospital=h)
        for kind in TxKind:
            ledger = c.chain_for(h)
            if kind == TxKind.FINANCIAL_TRANSFER:
                continue
            with pytest.raises(AuthorizationError):
                ledger.submit(SignedTransaction.create(kind, b"x", "D1", ledger.tick()))
    with pytest.raises(AuthorizationError):
        c.financial.ledger.submit(SignedTransaction.create(TxKind.FINANCIAL_TRANSFER, b"x", "D1", 999))
    for ledger in c.all_ledgers():
        after = ledger.query(submitter="D1", heights=(marks[ledger.chain_id] + 1, ledger.height))
        assert after == []


def test_role_gated_kinds():
    c = make()
    ledger = c.chain("health-H1")
    with pytest.raises(AuthorizationError):
        ledger.record(TxKind.INSURANCE_UPDATE, b"x", "H1")
    ledger.record(TxKind.INSURANCE_UPDATE, b"x", "INS1")
    with pytest.raises(AuthorizationError):
        ledger.record(TxKind.DEVICE_EVENT, b"x", "H1")
    with pytest.raises(AuthorizationError):
        ledger.record(TxKind.HEALTH_METADATA, b"x", "stranger")
    with pytest.raises(AuthorizationError):
        ledger.record(TxKind.FINANCIAL_TRANSFER, b"x", "H1")


def test_channel_share_and_verification():
    c = make()
    tx = c.chain("health-H1").record(TxKind.HEALTH_METADATA, b"meta", "H1").tx
    channel = c.channel_between("health-H1", "health-H2")
    share = c.share_metadata(channel, "health-H1", tx.tx_id).tx
    assert share.kind == TxKind.CHANNEL_SHARE and c.chain("health-H2").find(share.tx_id)
    assert c.verify_share(share)
    proof = json.loads(share.payload)
    proof["tx_id"] = "00" * 32
    assert not check_inclusion(proof)
    forged = json.loads(share.payload)
    forged["header"]["timestamp"] += 1
    assert not check_inclusion(forged)


def test_channel_authentication():
    c = make()
    channel = c.channel_between("health-H1", "health-H2")
    channel.send({"x": 1})
    body, tag = channel.queue[0]
    channel.queue[0] = (body.replace(b"1", b"2"), tag)
    with pytest.raises(ProtocolError):
        channel.receive()


def test_no_channel_no_share():
    c = make(hospitals=("H1", "H2", "H3"))
    with pytest.raises(ProtocolError):
        c.channel_between("health-H1", "health-H3")


def test_inclusion_proof_requires_commit():
    c = make()
    with pytest.raises(NotFoundError):
        inclusion_proof(c.chain("health-H1"), bytes(32))


def test_patient_transfer_between_hospitals():
    c = make()
    c.register_device("MFR1", "D1", DeviceKind.PATIENT_GATEWAY)
    s = patient(c)
    addr = bytes.fromhex(json.loads(send(c, s, {"spo2": 97}).tx.payload)["record"])
    with pytest.raises(AuthorizationError):
        c.read_record("H2", s[0].cid, addr)
    grant = c.transfer_patient(s[0].cid, "H1", "H2")
    assert grant.addresses == (addr,)
    assert json.loads(c.read_record("H2", s[0].cid, addr)) == {"spo2": 97}
    assert c.chain("health-H1").find(grant.source_tx) and c.chain("health-H2").find(grant.dest_tx)


def test_bridge_soundness():
    c = make()
    c.financial.issue("INS1", 100)
    fin = c.financial.transfer("INS1", "P1", 5, memo={"token_id": "aa" * 32})
    receipt = c.bridge_relay(fin.tx.tx_id, "H1", bytes.fromhex("aa" * 32))
    assert c.verify_receipt(receipt.tx)
    with pytest.raises(NotFoundError):
        c.bridge_relay(bytes(32), "H1")
    body = json.loads(receipt.tx.payload)
    body["financial_tx_id"] = "11" * 32
    forged = c.chain_for("H1").record(TxKind.BRIDGE_RECEIPT, json.dumps(body).encode(), "bridge").tx
    assert not c.verify_receipt(forged)
    body = json.loads(receipt.tx.payload)
    body["token_id"] = "bb" * 32
    other = c.chain_for("H1").record(TxKind.BRIDGE_RECEIPT, json.dumps(body).encode(), "bridge").tx
    assert not c.verify_receipt(other)
    # every receipt the bridge wrote names exactly one committed financial tx
    for rid, fid in c.receipts:
        assert sum(1 for t in c.financial.ledger.query() if t.tx_id == fid) == 1


def test_save_and_load(tmp_path):
    c = Consortium(TopologyConfig(hospitals=["H1", "H2"], channels=[("H1", "H2")]),
                   rand=random.Random(1).randbytes, store_root=tmp_path / "store")
    c.register_device("MFR1", "D1", DeviceKind.PATIENT_GATEWAY)
    s = patient(c)
    addr = bytes.fromhex(json.loads(send(c, s, {"spo2": 91}).tx.payload)["record"])
    c.financial.issue("INS1", 10)
    c.save(tmp_path)
    again = Consortium.load(tmp_path, rand=random.Random(2).randbytes)
    assert {l.chain_id: l.height for l in again.all_ledgers()} == {l.chain_id: l.height for l in c.all_ledgers()}
    assert all(v is None for v in again.verify_all().values())
    assert json.loads(again.read_record("H1", s[0].cid, addr)) == {"spo2": 91}
    assert again.financial.balance("INS1") == 10
    assert again.devices["D1"].status == DeviceStatus.AUTHORIZED
