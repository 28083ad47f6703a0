from .base import ConnectionLost, Endpoint, Timeout, Transport, TransportError, UnknownPeer
from .codec import (
    BadMagic,
    ChecksumMismatch,
    CodecError,
    Envelope,
    Kind,
    PayloadTooLarge,
    Truncated,
    UnsupportedVersion,
    decode,
    encode,
)
from .inproc import InProcTransport
from .tcp import TcpTransport, loopback_addresses, parse_address

__all__ = [
    "BadMagic",
    "ChecksumMismatch",
    "CodecError",
    "ConnectionLost",
    "Endpoint",
    "Envelope",
    "InProcTransport",
    "Kind",
    "PayloadTooLarge",
    "TcpTransport",
    "Timeout",
    "Transport",
    "TransportError",
    "Truncated",
    "UnknownPeer",
    "UnsupportedVersion",
    "decode",
    "encode",
    "loopback_addresses",
    "parse_address",
]
