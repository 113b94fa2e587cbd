"""Multi-chain orchestration: topology, devices, channels and the financial bridge.

Each hospital gets its own health chain (or all hospitals share one, for
the baseline layout). A single financial chain carries every payment, and
the bridge mirrors committed payments onto health chains as receipts.
"""

from __future__ import annotations

import configparser
import enum
import hmac
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import crypto, triage
from .auth import GatewayState, SessionState, receive_encrypted
from .crypto import Ciphertext
from .errors import (AuthorizationError, ConfigError, DuplicateError, NotFoundError,
                     ProtocolError, VerificationError)
from .finance import FinancialLedger, parse_transfer
from .ledger import Ledger, Miner, Role, SignedTransaction, TxKind, TxLocation, header_hash, tx_root
from .store import ContentStore

RandomSource = Callable[[int], bytes]

PER_HOSPITAL = "per-hospital"
SHARED = "shared"
BRIDGE_ACTOR = "bridge"
FINANCIAL_CHAIN = "financial"


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


# -- topology ----------------------------------------------------------------

def _csv(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


@dataclass
class TopologyConfig:
    hospitals: list
    layout: str = PER_HOSPITAL
    miners_per_chain: int = 8
    insurance_miners: int = 1
    manufacturer_miners: int = 1
    financial_miners: int = 4
    channels: list = field(default_factory=list)
    pharmacies: list = field(default_factory=lambda: ["P1"])
    insurers: list = field(default_factory=lambda: ["INS1"])
    manufacturers: list = field(default_factory=lambda: ["MFR1"])
    block_size: int = 10

    @classmethod
    def from_section(cls, section) -> "TopologyConfig":
        try:
            cfg = cls(
                hospitals=_csv(section.get("hospitals", "")),
                layout=section.get("layout", PER_HOSPITAL).strip(),
                miners_per_chain=section.getint("miners_per_chain", 8),
                insurance_miners=section.getint("insurance_miners", 1),
                manufacturer_miners=section.getint("manufacturer_miners", 1),
                financial_miners=section.getint("financial_miners", 4),
                channels=[tuple(p.split(":")) for p in _csv(section.get("channels", ""))],
                pharmacies=_csv(section.get("pharmacies", "P1")),
                insurers=_csv(section.get("insurers", "INS1")),
                manufacturers=_csv(section.get("manufacturers", "MFR1")),
                block_size=section.getint("block_size", 10),
            )
        except ValueError as exc:
            raise ConfigError(f"bad topology value: {exc}") from None
        known = {"hospitals", "layout", "miners_per_chain", "insurance_miners", "manufacturer_miners",
                 "financial_miners", "channels", "pharmacies", "insurers", "manufacturers", "block_size"}
        unknown = set(section.keys()) - known - set(section.parser.defaults())
        if unknown:
            raise ConfigError(f"unknown topology keys: {', '.join(sorted(unknown))}")
        return cls._checked(cfg)

    @classmethod
    def load(cls, path) -> "TopologyConfig":
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read topology file {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed topology file {path}: {exc}") from None
        if not parser.has_section("topology"):
            raise ConfigError(f"{path} has no [topology] section")
        return cls.from_section(parser["topology"])

    @classmethod
    def _checked(cls, cfg: "TopologyConfig") -> "TopologyConfig":
        for pair in cfg.channels:
            if len(pair) != 2:
                raise ConfigError(f"channel must be written A:B, got {':'.join(pair)}")
        return cfg

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["channels"] = [list(p) for p in self.channels]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TopologyConfig":
        d = dict(d)
        d["channels"] = [tuple(p) for p in d["channels"]]
        return cls(**d)


@dataclass(frozen=True)
class ChainSpec:
    chain_id: str
    hospitals: tuple
    miners: tuple  # (miner_id, Role) pairs


@dataclass(frozen=True)
class ChainTopology:
    chains: tuple
    financial: Optional[ChainSpec]
    channels: tuple

    def chain_of(self, hospital: str) -> str:
        for spec in self.chains:
            if hospital in spec.hospitals:
                return spec.chain_id
        raise NotFoundError(f"unknown hospital {hospital!r}")

    @property
    def hospitals(self) -> list:
        return [h for spec in self.chains for h in spec.hospitals]

    def miner_count(self) -> int:
        return sum(len(spec.miners) for spec in self.chains)


def _roles(n: int, insurance: int, manufacturer: int) -> list:
    return ([Role.INSURANCE] * insurance + [Role.DEVICE_MANUFACTURER] * manufacturer
            + [Role.HOSPITAL] * (n - insurance - manufacturer))


def create_topology(config: TopologyConfig) -> ChainTopology:
    if not config.hospitals:
        raise ConfigError("topology needs at least one hospital")
    if len(set(config.hospitals)) != len(config.hospitals):
        raise ConfigError("duplicate hospital ids")
    if config.layout not in (PER_HOSPITAL, SHARED):
        raise ConfigError(f"layout must be {PER_HOSPITAL!r} or {SHARED!r}")
    special = config.insurance_miners + config.manufacturer_miners
    if config.miners_per_chain < 1 or special >= config.miners_per_chain:
        raise ConfigError("each chain needs at least one hospital miner")
    if config.insurance_miners < 0 or config.manufacturer_miners < 0:
        raise ConfigError("miner role counts must be non-negative")

    groups = ([(f"health-{h}", (h,)) for h in config.hospitals] if config.layout == PER_HOSPITAL
              else [("health-shared", tuple(config.hospitals))])
    chains = []
    for chain_id, hospitals in groups:
        prefix = chain_id.removeprefix("health-")
        roles = _roles(config.miners_per_chain, config.insurance_miners, config.manufacturer_miners)
        miners = tuple((f"{prefix}-m{i + 1:02d}", role) for i, role in enumerate(roles))
        chains.append(ChainSpec(chain_id, hospitals, miners))

    financial = None
    if config.financial_miners > 0:
        financial = ChainSpec(FINANCIAL_CHAIN, (), tuple(
            (f"fin-m{i + 1:02d}", Role.INSURANCE if i == 0 else Role.HOSPITAL)
            for i in range(config.financial_miners)))

    topo_chains = tuple(chains)
    lookup = ChainTopology(topo_chains, financial, ())
    channels = []
    for a, b in config.channels:
        if a not in config.hospitals or b not in config.hospitals:
            raise ConfigError(f"channel {a}:{b} names an unknown hospital")
        ca, cb = lookup.chain_of(a), lookup.chain_of(b)
        if ca == cb:
            raise ConfigError(f"channel {a}:{b} joins a chain to itself")
        channels.append(tuple(sorted((ca, cb))))
    topology = ChainTopology(topo_chains, financial, tuple(dict.fromkeys(channels)))
    validate_topology(topology)
    return topology


def validate_topology(topology: ChainTopology):
    ids = [spec.chain_id for spec in topology.chains]
    if topology.financial is not None:
        ids.append(topology.financial.chain_id)
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate chain ids")
    miners = [m for spec in topology.chains for m, _ in spec.miners]
    if topology.financial is not None:
        miners += [m for m, _ in topology.financial.miners]
    if len(set(miners)) != len(miners):
        raise ConfigError("duplicate miner ids")
    for spec in topology.chains:
        if not spec.miners:
            raise ConfigError(f"chain {spec.chain_id} has no miners")
    for a, b in topology.channels:
        if a not in ids or b not in ids:
            raise ConfigError(f"channel endpoint missing: {a}:{b}")


# -- devices -----------------------------------------------------------------

class DeviceKind(str, enum.Enum):
    WEARABLE_SENSOR = "WearableSensor"
    PATIENT_GATEWAY = "PatientGateway"
    HOSPITAL_GATEWAY = "HospitalGateway"


class DeviceStatus(str, enum.Enum):
    AUTHORIZED = "Authorized"
    BLOCKED = "Blocked"


@dataclass
class DeviceRecord:
    device_id: str
    kind: DeviceKind
    firmware_version: int
    status: DeviceStatus
    manufacturer: str


class ActorKind(str, enum.Enum):
    HOSPITAL = "hospital"
    PHARMACY = "pharmacy"
    INSURER = "insurer"
    MANUFACTURER = "manufacturer"
    SYSTEM = "system"


# -- channels ----------------------------------------------------------------

@dataclass
class Channel:
    """Authenticated in-process queue between two chain coordinators."""
    chain_a: str
    chain_b: str
    key: bytes = field(repr=False)
    queue: list = field(default_factory=list)

    @property
    def endpoints(self) -> tuple:
        return self.chain_a, self.chain_b

    def send(self, message: dict):
        body = _json(message)
        self.queue.append((body, hmac.new(self.key, body, "sha256").digest()))

    def receive(self) -> dict:
        body, tag = self.queue.pop(0)
        if not hmac.compare_digest(tag, hmac.new(self.key, body, "sha256").digest()):
            raise ProtocolError("channel message failed authentication")
        return json.loads(body)


@dataclass(frozen=True)
class AccessGrant:
    cid: bytes
    from_hospital: str
    to_hospital: str
    addresses: tuple
    source_tx: bytes
    dest_tx: bytes


def inclusion_proof(ledger: Ledger, tx_id: bytes) -> dict:
    loc = ledger.find(tx_id)
    if loc is None:
        raise NotFoundError(f"transaction {tx_id.hex()} is not committed on {ledger.chain_id}")
    block = ledger.blocks[loc.height]
    return {
        "source_chain": ledger.chain_id,
        "tx_id": tx_id.hex(),
        "position": loc.position,
        "header": block.header(),
        "tx_ids": [t.tx_id.hex() for t in block.txs],
    }


def check_inclusion(proof: dict, trusted_header: Optional[dict] = None) -> bool:
    """Recompute the header hash and tx_root from the proof alone.

    With ``trusted_header`` the proof header must also equal the source
    chain's own exported header at that height.
    """
    header = proof["header"]
    try:
        ids = [bytes.fromhex(t) for t in proof["tx_ids"]]
        if ids[proof["position"]].hex() != proof["tx_id"]:
            return False
        if tx_root(ids).hex() != header["tx_root"]:
            return False
        if header_hash(header).hex() != header["block_hash"]:
            return False
    except (KeyError, IndexError, ValueError, TypeError):
        return False
    if trusted_header is not None and trusted_header != header:
        return False
    return True


# -- the consortium ----------------------------------------------------------

class Consortium:

    def __init__(self, config: TopologyConfig, *, rand: RandomSource = os.urandom,
                 store_root: Optional[Path] = None):
        self.config = config
        self.topology = create_topology(config)
        if self.topology.financial is None:
            raise ConfigError("a consortium needs exactly one financial chain")
        self.rand = rand
        self._lock = threading.RLock()

        self.actors: dict[str, ActorKind] = {BRIDGE_ACTOR: ActorKind.SYSTEM}
        for names, kind in ((self.topology.hospitals, ActorKind.HOSPITAL),
                            (config.pharmacies, ActorKind.PHARMACY),
                            (config.insurers, ActorKind.INSURER),
                            (config.manufacturers, ActorKind.MANUFACTURER)):
            for name in names:
                self._add_actor(name, kind)
        self.devices: dict[str, DeviceRecord] = {}

        self.chains: dict[str, Ledger] = {}
        for spec in self.topology.chains:
            if not any(r == Role.DEVICE_MANUFACTURER for _, r in spec.miners):
                raise ConfigError(f"chain {spec.chain_id} needs a device-manufacturer miner")
            self.chains[spec.chain_id] = Ledger(
                spec.chain_id, [Miner(m, r, rand(32)) for m, r in spec.miners],
                block_size=config.block_size, authorizer=self._authorize,
                allowed_kinds=[k for k in TxKind if k != TxKind.FINANCIAL_TRANSFER])
        fin = self.topology.financial
        self.financial = FinancialLedger(Ledger(
            fin.chain_id, [Miner(m, r, rand(32)) for m, r in fin.miners],
            block_size=config.block_size, authorizer=self._authorize_financial,
            allowed_kinds=[TxKind.FINANCIAL_TRANSFER]))

        self.store_root = Path(store_root) if store_root is not None else None
        self.stores = {h: ContentStore(None if self.store_root is None else self.store_root / h)
                       for h in self.topology.hospitals}
        self.gateways = {h: GatewayState(f"GW-{h}".encode(), rand=rand) for h in self.topology.hospitals}
        self.records: dict[str, dict[str, list]] = {h: {} for h in self.topology.hospitals}
        self.patient_keys: dict[str, dict[str, bytes]] = {h: {} for h in self.topology.hospitals}
        self.keyring: dict[str, bytes] = {}
        self.channels: dict[tuple, Channel] = {}
        self.receipts: list[tuple[str, bytes]] = []
        for a, b in self.topology.channels:
            self.open_channel(a, b)

    # actors / authorization
    def _add_actor(self, name: str, kind: ActorKind):
        if name in self.actors:
            raise ConfigError(f"duplicate actor id {name!r}")
        self.actors[name] = kind

    def actor_kind(self, name: str) -> Optional[ActorKind]:
        return self.actors.get(name)

    def check_submitter(self, submitter: str):
        device = self.devices.get(submitter)
        if device is not None:
            if device.status != DeviceStatus.AUTHORIZED:
                raise AuthorizationError(f"device {submitter} is blocked")
            return
        if submitter not in self.actors:
            raise AuthorizationError(f"unknown submitter {submitter!r}")

    def _authorize(self, ledger: Ledger, tx: SignedTransaction):
        self.check_submitter(tx.submitter)
        if tx.kind == TxKind.DEVICE_EVENT and self.actors.get(tx.submitter) != ActorKind.MANUFACTURER:
            raise AuthorizationError("device events require a device-manufacturer submitter")
        if tx.kind == TxKind.INSURANCE_UPDATE and self.actors.get(tx.submitter) != ActorKind.INSURER:
            raise AuthorizationError("insurance updates require an insurer submitter")

    def _authorize_financial(self, ledger: Ledger, tx: SignedTransaction):
        if tx.submitter != "issuer":
            self.check_submitter(tx.submitter)

    def shared_key(self, a: str, b: str) -> bytes:
        """Pairwise symmetric key between two actors, created on first use."""
        label = "|".join(sorted((a, b)))
        with self._lock:
            if label not in self.keyring:
                self.keyring[label] = self.rand(crypto.KEY_SIZE)
            return self.keyring[label]

    # chains
    def chain(self, chain_id: str) -> Ledger:
        if chain_id == FINANCIAL_CHAIN:
            return self.financial.ledger
        try:
            return self.chains[chain_id]
        except KeyError:
            raise NotFoundError(f"unknown chain {chain_id!r}") from None

    def chain_for(self, hospital: str) -> Ledger:
        return self.chains[self.topology.chain_of(hospital)]

    def all_ledgers(self) -> list[Ledger]:
        return list(self.chains.values()) + [self.financial.ledger]

    def verify_all(self) -> dict[str, Optional[int]]:
        return {ledger.chain_id: ledger.verify_chain() for ledger in self.all_ledgers()}

    # devices
    def _device_event(self, caller: str, event: dict) -> list[SignedTransaction]:
        if self.actors.get(caller) != ActorKind.MANUFACTURER:
            raise AuthorizationError(f"{caller!r} does not hold the device-manufacturer role")
        out = []
        for ledger in self.chains.values():
            out.append(ledger.record(TxKind.DEVICE_EVENT, _json(event), caller).tx)
        return out

    def register_device(self, caller: str, device_id: str, kind: DeviceKind,
                        firmware_version: int = 1) -> list[SignedTransaction]:
        with self._lock:
            if device_id in self.devices or device_id in self.actors:
                raise DuplicateError(f"device {device_id!r} already registered")
            txs = self._device_event(caller, {"event": "register", "device": device_id,
                                              "kind": DeviceKind(kind).value, "firmware": firmware_version})
            self.devices[device_id] = DeviceRecord(device_id, DeviceKind(kind), firmware_version,
                                                   DeviceStatus.AUTHORIZED, caller)
            return txs

    def _device(self, device_id: str) -> DeviceRecord:
        try:
            return self.devices[device_id]
        except KeyError:
            raise NotFoundError(f"unknown device {device_id!r}") from None

    def update_firmware(self, caller: str, device_id: str, version: int) -> list[SignedTransaction]:
        with self._lock:
            device = self._device(device_id)
            if version <= device.firmware_version:
                raise ProtocolError(f"firmware must increase past {device.firmware_version}")
            txs = self._device_event(caller, {"event": "update", "device": device_id, "firmware": version})
            device.firmware_version = version
            return txs

    def block_device(self, caller: str, device_id: str) -> list[SignedTransaction]:
        with self._lock:
            device = self._device(device_id)
            txs = self._device_event(caller, {"event": "block", "device": device_id})
            device.status = DeviceStatus.BLOCKED
            return txs

    # patient data
    def record_key(self, hospital: str, cid: bytes) -> bytes:
        keys = self.patient_keys[hospital]
        if cid.hex() not in keys:
            keys[cid.hex()] = self.rand(crypto.KEY_SIZE)
        return keys[cid.hex()]

    def ingest_vitals(self, hospital: str, session: SessionState, ct: Ciphertext,
                      device_id: str) -> TxLocation:
        """Gateway side of a vitals upload: decrypt, triage, store, record metadata."""
        self.check_submitter(device_id)
        if self.gateways[hospital].lookup_cid(session.cid) is None:
            raise ProtocolError("session does not belong to this hospital's gateway")
        plaintext = receive_encrypted(session, ct)
        priority = triage.classify_bytes(plaintext)
        records = self.records[hospital].setdefault(session.cid.hex(), [])
        key = self.record_key(hospital, session.cid)
        nonce = b"REC\x00" + len(records).to_bytes(8, "big")
        blob = crypto.encrypt(key, plaintext, nonce, aad=session.cid).to_bytes()
        addr = self.stores[hospital].put(blob)
        records.append(addr)
        payload = {"cid": session.cid.hex(), "record": addr.hex(), "size": len(plaintext),
                   "priority": priority}
        return self.chain_for(hospital).record(TxKind.HEALTH_METADATA, _json(payload), device_id)

    def read_record(self, hospital: str, cid: bytes, addr: bytes) -> bytes:
        key = self.patient_keys[hospital].get(cid.hex())
        if key is None:
            raise AuthorizationError(f"{hospital} holds no key for patient {cid.hex()}")
        return crypto.decrypt(key, Ciphertext.from_bytes(self.stores[hospital].get(addr)), aad=cid)

    # channels
    def open_channel(self, chain_a: str, chain_b: str) -> Channel:
        for c in (chain_a, chain_b):
            self.chain(c)
        if chain_a == chain_b:
            raise ConfigError("a channel needs two distinct chains")
        pair = tuple(sorted((chain_a, chain_b)))
        with self._lock:
            if pair not in self.channels:
                self.channels[pair] = Channel(pair[0], pair[1], self.rand(32))
            return self.channels[pair]

    def channel_between(self, chain_a: str, chain_b: str) -> Channel:
        try:
            return self.channels[tuple(sorted((chain_a, chain_b)))]
        except KeyError:
            raise ProtocolError(f"no channel between {chain_a} and {chain_b}") from None

    def share_metadata(self, channel: Channel, source_chain: str, tx_id: bytes) -> TxLocation:
        if source_chain not in channel.endpoints:
            raise ProtocolError(f"{source_chain} is not an endpoint of this channel")
        dest_chain = channel.chain_b if source_chain == channel.chain_a else channel.chain_a
        source = self.chain(source_chain)
        proof = inclusion_proof(source, tx_id)
        channel.send(proof)
        delivered = channel.receive()
        if not check_inclusion(delivered):
            raise VerificationError("inclusion proof does not verify")
        submitter = self._chain_submitter(source_chain)
        return self.chain(dest_chain).record(TxKind.CHANNEL_SHARE, _json(delivered), submitter)

    def _chain_submitter(self, chain_id: str) -> str:
        for spec in self.topology.chains:
            if spec.chain_id == chain_id:
                return spec.hospitals[0]
        return BRIDGE_ACTOR

    def verify_share(self, share_tx: SignedTransaction) -> bool:
        proof = json.loads(share_tx.payload)
        source = self.chain(proof["source_chain"])
        height = proof["header"]["height"]
        if height > source.height:
            return False
        return check_inclusion(proof, source.blocks[height].header())

    def transfer_patient(self, cid: bytes, from_hospital: str, to_hospital: str) -> AccessGrant:
        src_chain = self.topology.chain_of(from_hospital)
        dst_chain = self.topology.chain_of(to_hospital)
        if self.gateways[from_hospital].lookup_cid(cid) is None:
            raise NotFoundError(f"patient {cid.hex()} is not registered at {from_hospital}")
        addresses = tuple(self.records[from_hospital].get(cid.hex(), []))
        grant = {"event": "access-grant", "cid": cid.hex(), "from": from_hospital, "to": to_hospital,
                 "records": [a.hex() for a in addresses]}
        if src_chain != dst_chain:
            channel = self.channel_between(src_chain, dst_chain)
            # off-chain: record key wrapped under the channel key, then the blobs
            key = self.record_key(from_hospital, cid)
            wrapped = crypto.encrypt(channel.key, key, self.rand(crypto.NONCE_SIZE), aad=cid)
            channel.send({"cid": cid.hex(), "wrapped_key": wrapped.to_bytes().hex()})
            msg = channel.receive()
            key = crypto.decrypt(channel.key, Ciphertext.from_bytes(bytes.fromhex(msg["wrapped_key"])), aad=cid)
        else:
            key = self.record_key(from_hospital, cid)
        for addr in addresses:
            copied = self.stores[to_hospital].put(self.stores[from_hospital].get(addr))
            if copied != addr:
                raise VerificationError("record address changed in transit")
        self.patient_keys[to_hospital][cid.hex()] = key
        self.records[to_hospital].setdefault(cid.hex(), []).extend(
            a for a in addresses if a not in self.records[to_hospital].get(cid.hex(), []))
        src = self.chain(src_chain).record(TxKind.ACCESS_GRANT, _json(grant), from_hospital)
        dst = self.chain(dst_chain).record(TxKind.ACCESS_GRANT, _json(grant), to_hospital)
        return AccessGrant(cid, from_hospital, to_hospital, addresses, src.tx.tx_id, dst.tx.tx_id)

    # bridge
    def bridge_relay(self, financial_tx_id: bytes, hospital: str, token_id: Optional[bytes] = None) -> TxLocation:
        loc = self.financial.ledger.find(financial_tx_id)
        if loc is None:
            raise NotFoundError(f"financial transaction {financial_tx_id.hex()} is not committed")
        receipt = {
            "financial_chain": self.financial.chain_id,
            "financial_tx_id": financial_tx_id.hex(),
            "financial_height": loc.height,
            "token_id": token_id.hex() if token_id else None,
        }
        out = self.chain_for(hospital).record(TxKind.BRIDGE_RECEIPT, _json(receipt), BRIDGE_ACTOR)
        self.receipts.append((out.tx.tx_id, financial_tx_id))
        return out

    def verify_receipt(self, receipt_tx: SignedTransaction) -> bool:
        """A receipt is sound iff it names exactly one committed financial tx
        whose memo carries the same token id."""
        try:
            receipt = json.loads(receipt_tx.payload)
            fin_id = bytes.fromhex(receipt["financial_tx_id"])
        except (ValueError, KeyError, TypeError):
            return False
        loc = self.financial.ledger.find(fin_id)
        if loc is None or loc.height != receipt.get("financial_height"):
            return False
        memo = parse_transfer(loc.tx.payload).get("memo", {})
        return memo.get("token_id") == receipt.get("token_id")

    # persistence
    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "actors": {k: v.value for k, v in self.actors.items()},
            "devices": {d.device_id: {"kind": d.kind.value, "firmware": d.firmware_version,
                                      "status": d.status.value, "manufacturer": d.manufacturer}
                        for d in self.devices.values()},
            "miners": {ledger.chain_id: [m.to_dict() for m in ledger.miners] for ledger in self.all_ledgers()},
            "gateways": {h: gw.to_dict() for h, gw in self.gateways.items()},
            "records": {h: {cid: [a.hex() for a in addrs] for cid, addrs in recs.items()}
                        for h, recs in self.records.items()},
            "patient_keys": {h: {cid: k.hex() for cid, k in keys.items()} for h, keys in self.patient_keys.items()},
            "keyring": {label: k.hex() for label, k in self.keyring.items()},
            "channels": [{"a": c.chain_a, "b": c.chain_b, "key": c.key.hex()} for c in self.channels.values()],
            "receipts": [[r.hex(), f.hex()] for r, f in self.receipts],
        }

    def save(self, state_dir):
        state_dir = Path(state_dir)
        chains = state_dir / "chains"
        chains.mkdir(parents=True, exist_ok=True)
        for ledger in self.all_ledgers():
            (chains / f"{ledger.chain_id}.chain").write_bytes(ledger.export_bytes())
            (chains / f"{ledger.chain_id}.miners.json").write_text(
                json.dumps([m.to_dict() for m in ledger.miners], indent=1))
        (state_dir / "consortium.json").write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, state_dir, rand: RandomSource = os.urandom) -> "Consortium":
        state_dir = Path(state_dir)
        d = json.loads((state_dir / "consortium.json").read_text())
        c = cls(TopologyConfig.from_dict(d["config"]), rand=rand, store_root=state_dir / "store")
        for name, kind in d["actors"].items():
            c.actors[name] = ActorKind(kind)
        for device_id, r in d["devices"].items():
            c.devices[device_id] = DeviceRecord(device_id, DeviceKind(r["kind"]), r["firmware"],
                                                DeviceStatus(r["status"]), r["manufacturer"])
        for ledger in c.all_ledgers():
            miners = [Miner.from_dict(m) for m in d["miners"][ledger.chain_id]]
            data = (state_dir / "chains" / f"{ledger.chain_id}.chain").read_bytes()
            loaded = Ledger.from_bytes(ledger.chain_id, data, miners, policy=ledger.policy,
                                       block_size=ledger.block_size, authorizer=ledger.authorizer,
                                       allowed_kinds=ledger.allowed_kinds)
            if ledger.chain_id == FINANCIAL_CHAIN:
                c.financial = FinancialLedger(loaded)
            else:
                c.chains[ledger.chain_id] = loaded
        c.gateways = {h: GatewayState.from_dict(g, rand=rand) for h, g in d["gateways"].items()}
        c.records = {h: {cid: [bytes.fromhex(a) for a in addrs] for cid, addrs in recs.items()}
                     for h, recs in d["records"].items()}
        c.patient_keys = {h: {cid: bytes.fromhex(k) for cid, k in keys.items()}
                          for h, keys in d["patient_keys"].items()}
        c.keyring = {label: bytes.fromhex(k) for label, k in d["keyring"].items()}
        c.channels = {(ch["a"], ch["b"]): Channel(ch["a"], ch["b"], bytes.fromhex(ch["key"]))
                      for ch in d["channels"]}
        c.receipts = [(bytes.fromhex(r), bytes.fromhex(f)) for r, f in d["receipts"]]
        return c

