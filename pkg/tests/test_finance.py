import random

import pytest

from carechain.errors import AuthorizationError, ConfigError, InsufficientFundsError
from carechain.finance import FinancialLedger
from carechain.ledger import Ledger, Miner, Role, TxKind


def fin():
    miners = [Miner(f"f{i}", Role.HOSPITAL, bytes([i]) * 32) for i in range(4)]
    return FinancialLedger(Ledger("financial", miners, allowed_kinds=[TxKind.FINANCIAL_TRANSFER]))


def test_issue_and_transfer():
    f = fin()
    f.issue("INS1", 100)
    f.transfer("INS1", "P1", 30, memo={"token_id": "ab"})
    assert f.balance("INS1") == 70 and f.balance("P1") == 30 and f.total_supply() == 100


def test_overdraft_leaves_state_unchanged():
    f = fin()
    f.issue("A", 10)
    height = f.ledger.height
    with pytest.raises(InsufficientFundsError):
        f.transfer("A", "B", 11)
    assert f.balances == {"A": 10} and f.ledger.height == height


@pytest.mark.parametrize("amount", [0, -5, 1.5])
def test_bad_amounts(amount):
    f = fin()
    f.issue("A", 10)
    with pytest.raises(ConfigError):
        f.transfer("A", "B", amount)


def test_issuer_cannot_transfer():
    with pytest.raises(ConfigError):
        fin().transfer("issuer", "B", 1)


def test_only_financial_kind_on_chain():
    f = fin()
    with pytest.raises(AuthorizationError):
        f.ledger.record(TxKind.HEALTH_METADATA, b"x", "A")


def test_replay_rebuilds_balances_from_chain():
    f = fin()
    f.issue("A", 50)
    rng = random.Random(1)
    for _ in range(200):
        a, b = rng.sample("ABCD", 2)
        amt = rng.randint(1, 20)
        try:
            f.transfer(a, b, amt)
        except InsufficientFundsError:
            pass
    live = {k: v for k, v in f.balances.items() if v}
    again = FinancialLedger(Ledger.from_bytes("financial", f.ledger.export_bytes(), f.ledger.miners))
    assert {k: v for k, v in again.balances.items() if v} == live
    assert again.total_supply() == 50
