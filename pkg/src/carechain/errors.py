"""Exception hierarchy.

Every error class carries the exit code the CLI maps it to, so a command
never has to guess which code an error deserves.
"""


class CareChainError(Exception):
    exit_code = 1


class ConfigError(CareChainError, ValueError):
    """Invalid configuration or arguments."""

    exit_code = 2


class ProtocolError(CareChainError):
    """A protocol step or a ledger admission was rejected."""

    exit_code = 3


class TamperError(ProtocolError):
    """Authenticated decryption failed."""


class NonceReuseError(ProtocolError):
    pass


class ReplayError(ProtocolError):
    pass


class AlreadyRegisteredError(ProtocolError):
    pass


class DuplicateError(ProtocolError):
    pass


class AuthorizationError(ProtocolError):
    pass


class QuorumError(ProtocolError):
    """Not enough live miners of the required role to endorse a block."""


class InsufficientFundsError(ProtocolError):
    pass


class VerificationError(CareChainError):
    exit_code = 4


class NotFoundError(CareChainError, KeyError):
    exit_code = 5

    def __str__(self):
        return str(self.args[0]) if self.args else "not found"


class StorageIOError(CareChainError, OSError):
    exit_code = 5
