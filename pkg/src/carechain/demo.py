"""Scripted end-to-end run through every component.

register -> login -> encrypted vitals -> triage -> prescription NFT mint
-> transfer to pharmacy -> insurer settlement -> bridge receipt, then
every chain is verified. Output is a transcript of plain lines; with the
same seed it is identical from run to run.
"""

from __future__ import annotations

import json
import random
from pathlib import Path
from typing import Callable, Optional

from . import auth
from .consortium import Consortium, DeviceKind
from .errors import VerificationError
from .nft import NftRegistry, PrescriptionMetadata, open_batch, seal_batch
from .workspace import INSURER_FLOAT, default_topology

HOSPITAL = "H1"
PHARMACY = "P1"
INSURER = "INS1"
MANUFACTURER = "MFR1"
DEVICE = "PGW-0001"

VITALS = {"heart_rate": 131, "spo2": 88, "temperature": 38.4, "systolic": 104}


class DemoAborted(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"demo aborted at {stage}: {cause}")
        self.stage = stage
        self.cause = cause


def run_demo(seed: int = 42, state_dir: Optional[Path] = None, block_device: bool = False,
             out: Callable[[str], None] = print) -> list[str]:
    rng = random.Random(seed)
    rand = rng.randbytes
    lines: list[str] = []

    def say(line: str):
        lines.append(line)
        out(line)

    stage = "setup"
    try:
        c = Consortium(default_topology(), rand=rand,
                       store_root=None if state_dir is None else Path(state_dir) / "store")
        registry = NftRegistry(c)
        c.financial.issue(INSURER, INSURER_FLOAT)
        c.register_device(MANUFACTURER, DEVICE, DeviceKind.PATIENT_GATEWAY)
        say(f"setup: chains {', '.join(l.chain_id for l in c.all_ledgers())}; device {DEVICE} authorized")
        if block_device:
            c.block_device(MANUFACTURER, DEVICE)
            say(f"setup: device {DEVICE} blocked by {MANUFACTURER}")

        stage = "register"
        creds = auth.PatientCredentials.create("patient-001", b"+15550100", b"correct horse", rand=rand)
        gateway = c.gateways[HOSPITAL]
        card = auth.register(creds, gateway)
        say(f"register: patient-001 at {HOSPITAL}, cid {card.cid.hex()}")

        stage = "login"
        patient, gw_session = auth.login(card, creds, gateway, rand=rand)
        if patient.session_key != gw_session.session_key:
            raise VerificationError("session keys differ")
        say(f"login: session key agreed, transcript {len(patient.transcript)} messages")

        stage = "send"
        ct = auth.send_encrypted(patient, json.dumps(VITALS, sort_keys=True).encode())
        loc = c.ingest_vitals(HOSPITAL, gw_session, ct, DEVICE)
        priority = json.loads(loc.tx.payload)["priority"]
        say(f"send: {len(ct.body)}-byte ciphertext, HealthMetadata at height {loc.height}")

        stage = "triage"
        say(f"triage: {priority}")

        stage = "mint"
        prescriptions = [{"cid": card.cid.hex(), "drug": "amoxicillin 500mg", "qty": 21, "priority": priority}]
        batch = seal_batch(c, HOSPITAL, PHARMACY, prescriptions)
        meta = PrescriptionMetadata(HOSPITAL, "dr-0042", 0, loc.tx.timestamp, 1,
                                    ((card.cid.hex(), priority),))
        token = registry.mint(HOSPITAL, batch, meta, insurer=INSURER)
        say(f"mint: token {token.token_id.hex()}")

        stage = "transfer"
        registry.transfer(token.token_id, HOSPITAL, PHARMACY)
        opened = open_batch(c, HOSPITAL, PHARMACY, c.stores[HOSPITAL].get(token.content_addr))
        say(f"transfer: owner {registry.owner(token.token_id)}, pharmacy opened {len(opened)} prescription(s)")
        if not registry.verify_token(token.token_id, batch):
            raise VerificationError("token does not verify against its batch")

        stage = "settle"
        fin_tx = registry.settle(token.token_id, INSURER, 250)
        say(f"settle: {INSURER} paid 250 to {PHARMACY}, balance {c.financial.balance(PHARMACY)}")

        stage = "bridge"
        receipt_id, fin_id = c.receipts[-1]
        receipt = c.chain_for(HOSPITAL).find(receipt_id)
        if fin_id != fin_tx.tx_id or not c.verify_receipt(receipt.tx):
            raise VerificationError("bridge receipt does not resolve to the financial transfer")
        say(f"bridge: receipt at {c.chain_for(HOSPITAL).chain_id} height {receipt.height}")

        stage = "verify"
        results = c.verify_all()
        for ledger in c.all_ledgers():
            bad = results[ledger.chain_id]
            say(f"verify: {ledger.chain_id} height {ledger.height} {'ok' if bad is None else f'FAILED at {bad}'}")
        if any(v is not None for v in results.values()):
            raise VerificationError("chain verification failed")
        if state_dir is not None:
            c.save(state_dir)
            (Path(state_dir) / "nft.json").write_text(json.dumps(registry.to_dict(), indent=1))
    except DemoAborted:
        raise
    except Exception as exc:
        raise DemoAborted(stage, exc) from exc
    say("demo: all verifications passed")
    return lines
