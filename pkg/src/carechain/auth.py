"""Patient <-> hospital gateway registration and session-key agreement.

Registration (over a secure channel)::

    A1 = H(CID || Rx || GID || Gj) xor H(MID || PW)
    A2 = H(MID || GID) xor H(MID || H(MID || PW))
    A3 = H(MID || PW) xor N0

Login (over an insecure channel). ``K = H(CID || Rx || GID || Gj)`` is the
value both ends can reconstruct: the patient as ``A1 xor H(MID || PW)``, the
gateway from its registry and ``Gj``::

    M1  patient -> gw : CID, Xp = Rp xor K, V1 = H(CID || Rp || K)
    M2  gw -> patient : Xg = Rg xor K, V2 = H(Rg || Rp || K)
    M3  patient -> gw : H("cfm" || Sk)
    Sk = H("sk" || CID || Rp || Rg || K)
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto
from .crypto import Ciphertext, NonceCounter, NonceWindow, concat, hash_parts, split, xor_mask
from .errors import AlreadyRegisteredError, ProtocolError

RandomSource = Callable[[int], bytes]

CARD_VERSION = 1
CID_SIZE = 16

PATIENT_PREFIX = b"PT\x00\x01"
GATEWAY_PREFIX = b"GW\x00\x01"


def _hmp(mid: bytes, pw: bytes) -> bytes:
    return hash_parts(mid, pw)


@dataclass(frozen=True)
class PatientCredentials:
    patient_id: str
    mobile_id: bytes
    password: bytes = field(repr=False)
    n0: bytes = field(repr=False)

    def __post_init__(self):
        if not self.mobile_id:
            raise ValueError("mobile_id must be nonempty")
        if len(self.n0) != crypto.DIGEST_SIZE:
            raise ValueError("n0 must be digest-sized")

    @classmethod
    def create(cls, patient_id: str, mobile_id: bytes, password: bytes,
               rand: RandomSource = os.urandom) -> "PatientCredentials":
        return cls(patient_id, mobile_id, password, rand(crypto.DIGEST_SIZE))


@dataclass(frozen=True)
class RegistrationRequest:
    mid: bytes
    hmp: bytes


@dataclass(frozen=True)
class RegistryEntry:
    cid: bytes
    r_x: bytes
    hmp: bytes


@dataclass(frozen=True)
class PatientCardPartial:
    gid: bytes
    cid: bytes
    a1: bytes
    a2: bytes


@dataclass(frozen=True)
class PatientCard:
    a1: bytes
    a2: bytes
    a3: bytes
    cid: bytes
    gid: bytes

    def to_bytes(self) -> bytes:
        record = {
            "version": CARD_VERSION,
            "gid": self.gid.hex(),
            "cid": self.cid.hex(),
            "a1": self.a1.hex(),
            "a2": self.a2.hex(),
            "a3": self.a3.hex(),
        }
        return json.dumps(record).encode() + b"\n"

    @classmethod
    def from_bytes(cls, data: bytes) -> "PatientCard":
        try:
            record = json.loads(data)
            if record["version"] != CARD_VERSION:
                raise ValueError(f"unsupported card version {record['version']}")
            card = cls(
                a1=bytes.fromhex(record["a1"]),
                a2=bytes.fromhex(record["a2"]),
                a3=bytes.fromhex(record["a3"]),
                cid=bytes.fromhex(record["cid"]),
                gid=bytes.fromhex(record["gid"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"unreadable patient card: {exc}") from None
        for name in ("a1", "a2", "a3"):
            if len(getattr(card, name)) != crypto.DIGEST_SIZE:
                raise ProtocolError(f"patient card field {name} has wrong length")
        return card


@dataclass
class SessionState:
    role: str
    cid: bytes
    session_key: bytes = field(repr=False)
    r_p: bytes
    r_g: bytes
    transcript: list = field(default_factory=list)
    send_counter: Optional[NonceCounter] = None
    receive_window: Optional[NonceWindow] = None

    def __post_init__(self):
        mine, theirs = (PATIENT_PREFIX, GATEWAY_PREFIX) if self.role == "patient" else (GATEWAY_PREFIX, PATIENT_PREFIX)
        if self.send_counter is None:
            self.send_counter = NonceCounter(mine)
        if self.receive_window is None:
            self.receive_window = NonceWindow(theirs)


# -- wire messages -----------------------------------------------------------

def _decode(data: bytes, n_fields: int, sizes: tuple) -> list[bytes]:
    try:
        fields = split(data)
    except ValueError as exc:
        raise ProtocolError(f"malformed message: {exc}") from None
    if len(fields) != n_fields:
        raise ProtocolError("malformed message: wrong field count")
    for f, size in zip(fields, sizes):
        if size is not None and len(f) != size:
            raise ProtocolError("malformed message: wrong field size")
    return fields


@dataclass(frozen=True)
class LoginRequest:
    cid: bytes
    x_p: bytes
    v1: bytes

    def to_bytes(self) -> bytes:
        return concat([b"M1", self.cid, self.x_p, self.v1])

    @classmethod
    def from_bytes(cls, data: bytes) -> "LoginRequest":
        tag, cid, x_p, v1 = _decode(data, 4, (2, CID_SIZE, 32, 32))
        if tag != b"M1":
            raise ProtocolError("unexpected message type")
        return cls(cid, x_p, v1)


@dataclass(frozen=True)
class LoginChallenge:
    x_g: bytes
    v2: bytes

    def to_bytes(self) -> bytes:
        return concat([b"M2", self.x_g, self.v2])

    @classmethod
    def from_bytes(cls, data: bytes) -> "LoginChallenge":
        tag, x_g, v2 = _decode(data, 3, (2, 32, 32))
        if tag != b"M2":
            raise ProtocolError("unexpected message type")
        return cls(x_g, v2)


@dataclass(frozen=True)
class LoginConfirm:
    confirmation: bytes

    def to_bytes(self) -> bytes:
        return concat([b"M3", self.confirmation])

    @classmethod
    def from_bytes(cls, data: bytes) -> "LoginConfirm":
        tag, confirmation = _decode(data, 2, (2, 32))
        if tag != b"M3":
            raise ProtocolError("unexpected message type")
        return cls(confirmation)


def _session_key(cid: bytes, r_p: bytes, r_g: bytes, k: bytes) -> bytes:
    return hash_parts(b"sk", cid, r_p, r_g, k)


# -- gateway -----------------------------------------------------------------

@dataclass
class PendingLogin:
    cid: bytes
    k: bytes = field(repr=False)
    r_p: bytes
    r_g: bytes
    session_key: bytes = field(repr=False)
    transcript: list


class GatewayState:
    """Hospital gateway: holds Gj, the patient registry and the replay cache."""

    def __init__(self, gateway_id: bytes, secret_key: Optional[bytes] = None,
                 rand: RandomSource = os.urandom):
        self.gateway_id = gateway_id
        self._rand = rand
        self._secret_key = secret_key if secret_key is not None else rand(crypto.DIGEST_SIZE)
        if len(self._secret_key) != crypto.DIGEST_SIZE:
            raise ValueError("gateway secret must be digest-sized")
        self.registry: dict[bytes, RegistryEntry] = {}
        self._by_cid: dict[bytes, bytes] = {}
        self._seen_rp: set[tuple[bytes, bytes]] = set()
        self._lock = threading.RLock()

    def _k(self, entry: RegistryEntry) -> bytes:
        return hash_parts(entry.cid, entry.r_x, self.gateway_id, self._secret_key)

    def register(self, req: RegistrationRequest) -> PatientCardPartial:
        with self._lock:
            if req.mid in self.registry:
                raise AlreadyRegisteredError(f"mobile id {req.mid!r} is already registered")
            cid = self._rand(CID_SIZE)
            while cid in self._by_cid:
                cid = self._rand(CID_SIZE)
            entry = RegistryEntry(cid=cid, r_x=self._rand(crypto.DIGEST_SIZE), hmp=req.hmp)
            self.registry[req.mid] = entry
            self._by_cid[cid] = req.mid
        a1 = xor_mask(self._k(entry), req.hmp)
        a2 = xor_mask(hash_parts(req.mid, self.gateway_id), hash_parts(req.mid, req.hmp))
        return PatientCardPartial(gid=self.gateway_id, cid=cid, a1=a1, a2=a2)

    def lookup_cid(self, cid: bytes) -> Optional[bytes]:
        return self._by_cid.get(cid)

    def answer(self, m1: LoginRequest) -> tuple[PendingLogin, LoginChallenge]:
        with self._lock:
            mid = self._by_cid.get(m1.cid)
            if mid is None:
                raise ProtocolError("unknown CID")
            k = self._k(self.registry[mid])
            r_p = xor_mask(m1.x_p, k)
            if hash_parts(m1.cid, r_p, k) != m1.v1:
                raise ProtocolError("login proof V1 does not verify")
            if (m1.cid, r_p) in self._seen_rp:
                raise ProtocolError("replayed login request")
            self._seen_rp.add((m1.cid, r_p))
        r_g = self._rand(crypto.DIGEST_SIZE)
        m2 = LoginChallenge(x_g=xor_mask(r_g, k), v2=hash_parts(r_g, r_p, k))
        pending = PendingLogin(m1.cid, k, r_p, r_g, _session_key(m1.cid, r_p, r_g, k),
                               [m1.to_bytes(), m2.to_bytes()])
        return pending, m2

    def confirm(self, pending: PendingLogin, m3: LoginConfirm) -> SessionState:
        if hash_parts(b"cfm", pending.session_key) != m3.confirmation:
            raise ProtocolError("key confirmation M3 does not verify")
        return SessionState("gateway", pending.cid, pending.session_key, pending.r_p, pending.r_g,
                            pending.transcript + [m3.to_bytes()])

    # persistence; the secret stays inside the gateway's own state file
    def to_dict(self) -> dict:
        return {
            "gateway_id": self.gateway_id.hex(),
            "secret_key": self._secret_key.hex(),
            "registry": {mid.hex(): {"cid": e.cid.hex(), "r_x": e.r_x.hex(), "hmp": e.hmp.hex()}
                         for mid, e in self.registry.items()},
            "seen_rp": sorted([c.hex(), r.hex()] for c, r in self._seen_rp),
        }

    @classmethod
    def from_dict(cls, d: dict, rand: RandomSource = os.urandom) -> "GatewayState":
        gw = cls(bytes.fromhex(d["gateway_id"]), bytes.fromhex(d["secret_key"]), rand=rand)
        for mid_hex, e in d["registry"].items():
            entry = RegistryEntry(bytes.fromhex(e["cid"]), bytes.fromhex(e["r_x"]), bytes.fromhex(e["hmp"]))
            gw.registry[bytes.fromhex(mid_hex)] = entry
            gw._by_cid[entry.cid] = bytes.fromhex(mid_hex)
        gw._seen_rp = {(bytes.fromhex(c), bytes.fromhex(r)) for c, r in d.get("seen_rp", [])}
        return gw


# -- patient -----------------------------------------------------------------

def register_step1(creds: PatientCredentials) -> RegistrationRequest:
    return RegistrationRequest(mid=creds.mobile_id, hmp=_hmp(creds.mobile_id, creds.password))


def register_step2(gw: GatewayState, req: RegistrationRequest) -> PatientCardPartial:
    return gw.register(req)


def register_step3(creds: PatientCredentials, partial: PatientCardPartial) -> PatientCard:
    a3 = xor_mask(_hmp(creds.mobile_id, creds.password), creds.n0)
    return PatientCard(a1=partial.a1, a2=partial.a2, a3=a3, cid=partial.cid, gid=partial.gid)


def register(creds: PatientCredentials, gw: GatewayState) -> PatientCard:
    return register_step3(creds, register_step2(gw, register_step1(creds)))


class PatientLogin:
    """Patient side of one login run.

    ``Rp`` mixes fresh randomness with a per-device counter keyed by ``N0`` so
    two runs from one card never reuse ``Rp`` even under a weak RNG.
    """

    def __init__(self, card: PatientCard, creds: PatientCredentials, counter: int = 0,
                 rand: RandomSource = os.urandom):
        hmp = _hmp(creds.mobile_id, creds.password)
        if xor_mask(card.a3, hmp) != creds.n0:
            raise ProtocolError("password does not match patient card")
        self.card = card
        self._k = xor_mask(card.a1, hmp)
        self.r_p = hash_parts(b"rp", creds.n0, counter, rand(crypto.DIGEST_SIZE))
        self.transcript: list[bytes] = []
        self._session_key: Optional[bytes] = None
        self._r_g: Optional[bytes] = None

    def start(self) -> LoginRequest:
        m1 = LoginRequest(self.card.cid, xor_mask(self.r_p, self._k),
                          hash_parts(self.card.cid, self.r_p, self._k))
        self.transcript.append(m1.to_bytes())
        return m1

    def finish(self, m2: LoginChallenge) -> LoginConfirm:
        self.transcript.append(m2.to_bytes())
        r_g = xor_mask(m2.x_g, self._k)
        if hash_parts(r_g, self.r_p, self._k) != m2.v2:
            raise ProtocolError("gateway proof V2 does not verify")
        self._r_g = r_g
        self._session_key = _session_key(self.card.cid, self.r_p, r_g, self._k)
        m3 = LoginConfirm(hash_parts(b"cfm", self._session_key))
        self.transcript.append(m3.to_bytes())
        return m3

    def session(self) -> SessionState:
        if self._session_key is None:
            raise ProtocolError("login not finished")
        return SessionState("patient", self.card.cid, self._session_key, self.r_p, self._r_g,
                            list(self.transcript))


Tamper = Callable[[int, bytes], bytes]


def login(card: PatientCard, creds: PatientCredentials, gw: GatewayState, *,
          counter: int = 0, rand: RandomSource = os.urandom,
          channel: Optional[Tamper] = None) -> tuple[SessionState, SessionState]:
    """Run the three-message login; returns (patient session, gateway session).

    ``channel(i, wire)`` sees every message (i = 0, 1, 2) as bytes on the
    insecure channel and returns what gets delivered, which lets tests play
    the active attacker.
    """
    deliver = channel or (lambda i, wire: wire)
    patient = PatientLogin(card, creds, counter=counter, rand=rand)

    m1 = LoginRequest.from_bytes(deliver(0, patient.start().to_bytes()))
    pending, m2 = gw.answer(m1)
    m2 = LoginChallenge.from_bytes(deliver(1, m2.to_bytes()))
    m3 = patient.finish(m2)
    m3 = LoginConfirm.from_bytes(deliver(2, m3.to_bytes()))
    gw_session = gw.confirm(pending, m3)
    return patient.session(), gw_session


# -- data transport ----------------------------------------------------------

def send_encrypted(session: SessionState, payload: bytes) -> Ciphertext:
    nonce = session.send_counter.next()
    return crypto.encrypt(session.session_key, payload, nonce, aad=session.cid)


def receive_encrypted(session: SessionState, ct: Ciphertext) -> bytes:
    value = session.receive_window.check(ct.nonce)
    plaintext = crypto.decrypt(session.session_key, ct, aad=session.cid)
    session.receive_window.accept(value)
    return plaintext


def session_to_dict(s: SessionState) -> dict:
    return {
        "role": s.role,
        "cid": s.cid.hex(),
        "session_key": s.session_key.hex(),
        "r_p": s.r_p.hex(),
        "r_g": s.r_g.hex(),
        "transcript": [m.hex() for m in s.transcript],
        "send_counter": s.send_counter.next_value,
        "last_received": s.receive_window.last_seen,
    }


def session_from_dict(d: dict) -> SessionState:
    s = SessionState(d["role"], bytes.fromhex(d["cid"]), bytes.fromhex(d["session_key"]),
                     bytes.fromhex(d["r_p"]), bytes.fromhex(d["r_g"]),
                     [bytes.fromhex(m) for m in d["transcript"]])
    s.send_counter.next_value = d["send_counter"]
    s.receive_window.last_seen = d["last_received"]
    return s

