"""Account-balance state machine on top of a FinancialTransfer-only ledger."""

from __future__ import annotations

import json
import threading
from typing import Optional

from .errors import ConfigError, InsufficientFundsError
from .ledger import Ledger, TxKind, TxLocation

ISSUER = "issuer"


def _payload(sender: str, recipient: str, amount: int, memo: Optional[dict]) -> bytes:
    body = {"from": sender, "to": recipient, "amount": amount, "memo": memo or {}}
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


def parse_transfer(payload: bytes) -> dict:
    return json.loads(payload)


class FinancialLedger:
    """Balances are a pure function of the committed transfers (see :meth:`replay`)."""

    def __init__(self, ledger: Ledger):
        if ledger.allowed_kinds != frozenset({TxKind.FINANCIAL_TRANSFER}):
            ledger.allowed_kinds = frozenset({TxKind.FINANCIAL_TRANSFER})
        self.ledger = ledger
        self.balances: dict[str, int] = {}
        self._lock = threading.Lock()
        self.replay()

    @property
    def chain_id(self) -> str:
        return self.ledger.chain_id

    def balance(self, account: str) -> int:
        return self.balances.get(account, 0)

    def total_supply(self) -> int:
        return sum(self.balances.values())

    def issue(self, account: str, amount: int) -> TxLocation:
        """Create new units; the only operation that changes total supply."""
        if amount <= 0:
            raise ConfigError("issued amount must be positive")
        with self._lock:
            loc = self.ledger.record(TxKind.FINANCIAL_TRANSFER, _payload(ISSUER, account, amount, None), ISSUER)
            self.balances[account] = self.balance(account) + amount
        return loc

    def transfer(self, sender: str, recipient: str, amount: int, memo: Optional[dict] = None) -> TxLocation:
        if not isinstance(amount, int) or amount <= 0:
            raise ConfigError("transfer amount must be a positive integer")
        if sender == ISSUER:
            raise ConfigError("use issue() to create units")
        with self._lock:
            if self.balance(sender) < amount:
                raise InsufficientFundsError(
                    f"{sender} holds {self.balance(sender)}, cannot pay {amount}")
            loc = self.ledger.record(TxKind.FINANCIAL_TRANSFER, _payload(sender, recipient, amount, memo), sender)
            self.balances[sender] -= amount
            self.balances[recipient] = self.balance(recipient) + amount
        return loc

    def replay(self) -> dict[str, int]:
        balances: dict[str, int] = {}
        for tx in self.ledger.query(kind=TxKind.FINANCIAL_TRANSFER):
            t = parse_transfer(tx.payload)
            if t["from"] != ISSUER:
                balances[t["from"]] = balances.get(t["from"], 0) - t["amount"]
            balances[t["to"]] = balances.get(t["to"], 0) + t["amount"]
        self.balances = balances
        return balances
