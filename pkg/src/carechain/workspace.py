"""On-disk state for the command line: one directory holds everything.

Layout::

    state/
      workspace.json      seed and RNG epoch
      consortium.json     actors, devices, gateways, keys
      chains/*.chain      framed block files (+ *.miners.json rosters)
      store/<hospital>/   content-addressed blobs
      nft.json            token registry
      cards/              patient cards and their device-side secrets
      sessions/           established sessions (both ends)
"""

from __future__ import annotations

import json
import random
from pathlib import Path
from typing import Optional

from .auth import PatientCard, PatientCredentials, SessionState, session_from_dict, session_to_dict
from .consortium import Consortium, TopologyConfig
from .errors import NotFoundError, StorageIOError
from .nft import NftRegistry

# every insurer starts with this many units on the financial chain
INSURER_FLOAT = 1_000_000


def default_topology() -> TopologyConfig:
    return TopologyConfig(hospitals=["H1", "H2"], channels=[("H1", "H2")])


class Workspace:

    def __init__(self, root, seed: int = 42):
        self.root = Path(root)
        self.seed = seed
        self.epoch = 0
        self.consortium: Optional[Consortium] = None
        self.registry: Optional[NftRegistry] = None
        self._rng: Optional[random.Random] = None

    # Each invocation draws from a fresh stream keyed by (seed, epoch) so
    # runs are reproducible without two commands ever sharing a nonce.
    def _rand(self, n: int) -> bytes:
        return self._rng.randbytes(n)

    @property
    def exists(self) -> bool:
        return (self.root / "consortium.json").exists()

    def open(self, topology: Optional[TopologyConfig] = None) -> "Workspace":
        meta = self.root / "workspace.json"
        try:
            if self.exists:
                d = json.loads(meta.read_text())
                self.seed, self.epoch = d["seed"], d["epoch"] + 1
                self._rng = random.Random(f"{self.seed}:{self.epoch}")
                self.consortium = Consortium.load(self.root, rand=self._rand)
                nft = self.root / "nft.json"
                self.registry = (NftRegistry.from_dict(self.consortium, json.loads(nft.read_text()))
                                 if nft.exists() else NftRegistry(self.consortium))
            else:
                self._rng = random.Random(f"{self.seed}:{self.epoch}")
                self.root.mkdir(parents=True, exist_ok=True)
                self.consortium = Consortium(topology or default_topology(), rand=self._rand,
                                             store_root=self.root / "store")
                for insurer in self.consortium.config.insurers:
                    self.consortium.financial.issue(insurer, INSURER_FLOAT)
                self.registry = NftRegistry(self.consortium)
        except OSError as exc:
            raise StorageIOError(f"cannot open state in {self.root}: {exc}") from None
        return self

    def save(self):
        try:
            self.consortium.save(self.root)
            (self.root / "nft.json").write_text(json.dumps(self.registry.to_dict(), indent=1))
            (self.root / "workspace.json").write_text(json.dumps({"seed": self.seed, "epoch": self.epoch}))
        except OSError as exc:
            raise StorageIOError(f"cannot write state in {self.root}: {exc}") from None

    # patient material
    def card_path(self, patient: str) -> Path:
        return self.root / "cards" / f"{patient}.card"

    def save_card(self, creds: PatientCredentials, card: PatientCard) -> Path:
        cards = self.root / "cards"
        cards.mkdir(parents=True, exist_ok=True)
        path = self.card_path(creds.patient_id)
        path.write_bytes(card.to_bytes())
        # what the patient's phone keeps besides the card; never the password
        secret = {"patient_id": creds.patient_id, "mobile_id": creds.mobile_id.hex(),
                  "n0": creds.n0.hex(), "counter": 0}
        (cards / f"{creds.patient_id}.device.json").write_text(json.dumps(secret))
        return path

    def load_device(self, patient: str) -> dict:
        path = self.root / "cards" / f"{patient}.device.json"
        try:
            return json.loads(path.read_text())
        except FileNotFoundError:
            raise NotFoundError(f"no device secret for patient {patient!r}") from None

    def bump_counter(self, patient: str, value: int):
        path = self.root / "cards" / f"{patient}.device.json"
        d = json.loads(path.read_text())
        d["counter"] = value
        path.write_text(json.dumps(d))

    def save_sessions(self, patient: str, hospital: str, mine: SessionState, theirs: SessionState):
        sessions = self.root / "sessions"
        sessions.mkdir(parents=True, exist_ok=True)
        body = {"hospital": hospital, "patient": session_to_dict(mine), "gateway": session_to_dict(theirs)}
        (sessions / f"{patient}.json").write_text(json.dumps(body, indent=1))

    def load_sessions(self, patient: str) -> tuple[str, SessionState, SessionState]:
        path = self.root / "sessions" / f"{patient}.json"
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise NotFoundError(f"patient {patient!r} has no session; run login first") from None
        return d["hospital"], session_from_dict(d["patient"]), session_from_dict(d["gateway"])
