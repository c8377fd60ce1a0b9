"""Exception hierarchy shared across the package."""

from __future__ import annotations


class BridgeBenchError(Exception):
    pass


class CodecError(BridgeBenchError):
    pass


class MalformedPacket(CodecError):
    pass


class UnsupportedPacket(CodecError):
    pass


class InvariantViolation(CodecError):
    pass


class OversizePacket(CodecError):
    pass


class NeedMoreBytes(CodecError):
    """Raised when the buffer holds only a prefix of a packet.

    ``hint`` is the minimum number of additional bytes needed before the
    decoder can make progress (a lower bound when the length is not yet known).
    """

    def __init__(self, hint: int):
        super().__init__(f"need at least {hint} more byte(s)")
        self.hint = hint


class InvalidTopic(BridgeBenchError, ValueError):
    pass


class ProtocolError(BridgeBenchError):
    def __init__(self, message: str, reason_code: int = 0x82):
        super().__init__(message)
        self.reason_code = reason_code


class AuthFailure(BridgeBenchError):
    pass


class ConnectTimeout(BridgeBenchError):
    pass


class RetryExhausted(BridgeBenchError):
    pass


class ConnectionLost(BridgeBenchError):
    pass


class SubackFailure(BridgeBenchError):
    pass


class MalformedPayload(BridgeBenchError):
    pass


class InvalidTopology(BridgeBenchError, ValueError):
    pass


class ConfigInvalid(BridgeBenchError, ValueError):
    pass


class UnknownPreset(BridgeBenchError, KeyError):
    pass


class MissingData(BridgeBenchError):
    pass


class BrokerStartFailure(BridgeBenchError):
    pass
