"""Binary envelope codec.

Frame layout, all integers little-endian::

    magic 0x4F46 ("OF") | version u8 = 1 | kind u8 | round u64 | group_id u32
    | sender-len u16, sender utf-8
    | aux-count u16, then (key-len u16, key, val-len u16, val) per pair
    | tensor-count u16, then (name-len u16, name, count u32, count * f64) per tensor
    | crc32 u32 over every byte after the version byte
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from ..params import ParamVector

MAGIC = b"OF"
VERSION = 1
MAX_FRAME = 2**32 - 1

_HEAD = struct.Struct("<2sBBQI")


class Kind(enum.IntEnum):
    GLOBAL_MODEL = 1
    MODEL_UPDATE = 2
    CONTROL_VARIATE = 3
    META = 4
    JOIN = 5
    LEAVE = 6
    ABORT = 7


PARAM_KINDS = frozenset({Kind.GLOBAL_MODEL, Kind.MODEL_UPDATE, Kind.CONTROL_VARIATE})


class CodecError(ValueError):
    pass


class BadMagic(CodecError):
    pass


class UnsupportedVersion(CodecError):
    pass


class Truncated(CodecError):
    pass


class ChecksumMismatch(CodecError):
    pass


class PayloadTooLarge(CodecError):
    pass


@dataclass(frozen=True)
class Envelope:
    kind: Kind
    round: int
    sender: str
    group_id: int = 0
    params: ParamVector | None = None
    aux: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind in PARAM_KINDS and self.params is None:
            raise ValueError(f"{self.kind.name} envelopes carry params")
        if self.kind not in PARAM_KINDS and self.params is not None:
            raise ValueError(f"{self.kind.name} envelopes do not carry params")
        if not 0 <= self.round < 2**64:
            raise ValueError("round must fit in u64")
        if not 0 <= self.group_id < 2**32:
            raise ValueError("group_id must fit in u32")
        for k, v in self.aux.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise TypeError("aux keys and values must be strings")
        object.__setattr__(self, "aux", MappingProxyType(dict(sorted(self.aux.items()))))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Envelope):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.round == other.round
            and self.sender == other.sender
            and self.group_id == other.group_id
            and self.params == other.params
            and dict(self.aux) == dict(other.aux)
        )

    __hash__ = None  # type: ignore[assignment]


def _short_str(s: str, what: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise PayloadTooLarge(f"{what} longer than 65535 bytes")
    return struct.pack("<H", len(raw)) + raw


def encode(e: Envelope) -> bytes:
    parts = [_HEAD.pack(MAGIC, VERSION, int(e.kind), e.round, e.group_id), _short_str(e.sender, "sender")]
    if len(e.aux) > 0xFFFF:
        raise PayloadTooLarge("too many aux entries")
    parts.append(struct.pack("<H", len(e.aux)))
    for k, v in e.aux.items():
        parts.append(_short_str(k, "aux key"))
        parts.append(_short_str(v, "aux value"))
    tensors = e.params or {}
    if len(tensors) > 0xFFFF:
        raise PayloadTooLarge("too many tensors")
    parts.append(struct.pack("<H", len(tensors)))
    for name, arr in tensors.items():
        parts.append(_short_str(name, "tensor name"))
        if arr.size > 0xFFFFFFFF:
            raise PayloadTooLarge(f"tensor {name!r} too long")
        parts.append(struct.pack("<I", arr.size))
        parts.append(arr.astype("<f8", copy=False).tobytes())
    body = b"".join(parts)
    if len(body) + 4 > MAX_FRAME:
        raise PayloadTooLarge("frame exceeds 2^32-1 bytes")
    return body + struct.pack("<I", zlib.crc32(body[3:]))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise Truncated(f"needed {n} bytes at offset {self.pos}, frame body ends at {self.end}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CodecError(f"invalid utf-8 at offset {self.pos}") from exc


def _parse(b: bytes, end: int) -> Envelope:
    r = _Reader(b, end)
    _, _, kind, rnd, group_id = _HEAD.unpack(r.take(_HEAD.size))
    sender = r.text()
    aux = {}
    for _ in range(r.u16()):
        key = r.text()
        aux[key] = r.text()
    tensors = {}
    for _ in range(r.u16()):
        name = r.text()
        count = r.u32()
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
    if r.pos != end:
        raise CodecError(f"{end - r.pos} trailing bytes before checksum")
    try:
        kind = Kind(kind)
    except ValueError as exc:
        raise CodecError(f"unknown kind {kind}") from exc
    params = ParamVector(tensors) if kind in PARAM_KINDS else None
    if params is None and tensors:
        raise CodecError(f"{kind.name} frame carries tensors")
    return Envelope(kind, rnd, sender, group_id, params, aux)


def decode(b: bytes) -> Envelope:
    """Inverse of :func:`encode`.

    Structure is parsed before the checksum is trusted, so a short frame
    reports :class:`Truncated` rather than a checksum failure.
    """
    b = bytes(b)
    if len(b) < 2:
        raise Truncated("frame shorter than magic")
    if b[:2] != MAGIC:
        raise BadMagic(f"bad magic {b[:2]!r}")
    if len(b) < 3:
        raise Truncated("frame ends before version")
    if b[2] != VERSION:
        raise UnsupportedVersion(f"unsupported version {b[2]}")
    if len(b) < _HEAD.size + 4:
        raise Truncated("frame shorter than header")
    end = len(b) - 4
    crc_ok = zlib.crc32(b[3:end]) == struct.unpack("<I", b[end:])[0]
    if crc_ok:
        return _parse(b, end)
    try:
        _parse(b, end)
    except Truncated:
        raise
    except (CodecError, ValueError):
        pass
    raise ChecksumMismatch("crc32 mismatch")
