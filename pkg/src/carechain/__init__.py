"""Permissioned multi-chain health data toolkit.

Patient authentication, per-hospital ledgers, content-addressed storage,
prescription NFTs, a financial chain with a bridge, and a discrete-event
benchmark of chain layouts.
"""

__version__ = "0.1.0"
