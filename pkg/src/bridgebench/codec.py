"""MQTT 5.0 wire codec for the packet subset used by the benchmark.

Packets are immutable dataclasses; ``encode`` produces exact wire bytes and
``decode_packet`` parses one packet from the front of a buffer.  Only the
User Property (0x26) and Message Expiry Interval (0x02) properties are
understood; any other property identifier is rejected as malformed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Union

from .errors import (
    InvariantViolation,
    MalformedPacket,
    NeedMoreBytes,
    OversizePacket,
    UnsupportedPacket,
)

VARINT_MAX = 268_435_455
PROTOCOL_NAME = b"\x00\x04MQTT"
PROTOCOL_LEVEL = 5

PROP_MESSAGE_EXPIRY = 0x02
PROP_USER_PROPERTY = 0x26

# reason codes used by the broker and client
SUCCESS = 0x00
UNSPECIFIED_ERROR = 0x80
MALFORMED = 0x81
PROTOCOL_ERROR = 0x82
BAD_CREDENTIALS = 0x86
NOT_AUTHORIZED = 0x87
KEEP_ALIVE_TIMEOUT = 0x8D
SESSION_TAKEN_OVER = 0x8E
TOPIC_FILTER_INVALID = 0x8F
PACKET_TOO_LARGE = 0x95
QUOTA_EXCEEDED = 0x97
NO_SUBSCRIPTION_EXISTED = 0x11


class PacketType(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    PUBREC = 5
    PUBREL = 6
    PUBCOMP = 7
    SUBSCRIBE = 8
    SUBACK = 9
    UNSUBSCRIBE = 10
    UNSUBACK = 11
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14
    AUTH = 15


# required fixed-header flags for every type except PUBLISH
_FIXED_FLAGS = {
    PacketType.CONNECT: 0,
    PacketType.CONNACK: 0,
    PacketType.PUBACK: 0,
    PacketType.PUBREC: 0,
    PacketType.PUBREL: 2,
    PacketType.PUBCOMP: 0,
    PacketType.SUBSCRIBE: 2,
    PacketType.SUBACK: 0,
    PacketType.UNSUBSCRIBE: 2,
    PacketType.UNSUBACK: 0,
    PacketType.PINGREQ: 0,
    PacketType.PINGRESP: 0,
    PacketType.DISCONNECT: 0,
    PacketType.AUTH: 0,
}


@dataclass(frozen=True)
class FixedHeader:
    packet_type: PacketType
    flags: int
    remaining_length: int

    @property
    def header_length(self) -> int:
        return 1 + varint_size(self.remaining_length)


@dataclass(frozen=True)
class SubscribeOptions:
    max_qos: int = 0
    no_local: bool = False
    retain_as_published: bool = False

    def to_byte(self) -> int:
        return self.max_qos | (self.no_local << 2) | (self.retain_as_published << 3)

    @classmethod
    def from_byte(cls, value: int) -> SubscribeOptions:
        if value & 0xC0:
            raise MalformedPacket("reserved subscription option bits set")
        if (value >> 4) & 0x03 == 3:
            raise MalformedPacket("invalid retain handling value")
        qos = value & 0x03
        if qos == 3:
            raise MalformedPacket("subscription max QoS 3")
        return cls(qos, bool(value & 0x04), bool(value & 0x08))


@dataclass(frozen=True)
class Connect:
    client_id: str
    clean_start: bool = True
    keep_alive: int = 60
    username: str | None = None
    password: bytes | None = None
    packet_type = PacketType.CONNECT


@dataclass(frozen=True)
class Connack:
    session_present: bool = False
    reason_code: int = SUCCESS
    packet_type = PacketType.CONNACK


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes = b""
    qos: int = 0
    dup: bool = False
    retain: bool = False
    packet_id: int | None = None
    user_properties: tuple[tuple[str, str], ...] = ()
    message_expiry: int | None = None
    packet_type = PacketType.PUBLISH

    def property(self, key: str) -> str | None:
        for k, v in self.user_properties:
            if k == key:
                return v
        return None


@dataclass(frozen=True)
class Puback:
    packet_id: int
    reason_code: int = SUCCESS
    packet_type = PacketType.PUBACK


@dataclass(frozen=True)
class Pubrec:
    packet_id: int
    reason_code: int = SUCCESS
    packet_type = PacketType.PUBREC


@dataclass(frozen=True)
class Pubrel:
    packet_id: int
    reason_code: int = SUCCESS
    packet_type = PacketType.PUBREL


@dataclass(frozen=True)
class Pubcomp:
    packet_id: int
    reason_code: int = SUCCESS
    packet_type = PacketType.PUBCOMP


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    subscriptions: tuple[tuple[str, SubscribeOptions], ...]
    packet_type = PacketType.SUBSCRIBE


@dataclass(frozen=True)
class Suback:
    packet_id: int
    reason_codes: tuple[int, ...]
    packet_type = PacketType.SUBACK


@dataclass(frozen=True)
class Unsubscribe:
    packet_id: int
    filters: tuple[str, ...]
    packet_type = PacketType.UNSUBSCRIBE


@dataclass(frozen=True)
class Unsuback:
    packet_id: int
    reason_codes: tuple[int, ...]
    packet_type = PacketType.UNSUBACK


@dataclass(frozen=True)
class Pingreq:
    packet_type = PacketType.PINGREQ


@dataclass(frozen=True)
class Pingresp:
    packet_type = PacketType.PINGRESP


@dataclass(frozen=True)
class Disconnect:
    reason_code: int = SUCCESS
    packet_type = PacketType.DISCONNECT


ControlPacket = Union[
    Connect, Connack, Publish, Puback, Pubrec, Pubrel, Pubcomp, Subscribe, Suback,
    Unsubscribe, Unsuback, Pingreq, Pingresp, Disconnect,
]

_ACK_TYPES = {
    PacketType.PUBACK: Puback,
    PacketType.PUBREC: Pubrec,
    PacketType.PUBREL: Pubrel,
    PacketType.PUBCOMP: Pubcomp,
}


# -- primitives ---------------------------------------------------------------

def varint_size(value: int) -> int:
    if value < 128:
        return 1
    if value < 16_384:
        return 2
    if value < 2_097_152:
        return 3
    return 4


def encode_varint(value: int) -> bytes:
    if not 0 <= value <= VARINT_MAX:
        raise OversizePacket(f"variable byte integer out of range: {value}")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_varint(data: bytes | memoryview, offset: int = 0) -> tuple[int, int]:
    """Return ``(value, next_offset)``.

    Raises NeedMoreBytes if the buffer ends mid-integer and MalformedPacket on
    a fifth continuation byte or a non-minimal encoding.
    """
    value = 0
    shift = 0
    for i in range(4):
        pos = offset + i
        if pos >= len(data):
            raise NeedMoreBytes(1)
        byte = data[pos]
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            if i and byte == 0:
                raise MalformedPacket("non-minimal variable byte integer")
            return value, pos + 1
        shift += 7
    raise MalformedPacket("variable byte integer longer than 4 bytes")


def _utf8(value: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise InvariantViolation("UTF-8 string longer than 65535 bytes")
    return struct.pack("!H", len(raw)) + raw


def _binary(value: bytes) -> bytes:
    if len(value) > 0xFFFF:
        raise InvariantViolation("binary field longer than 65535 bytes")
    return struct.pack("!H", len(value)) + value


class _Cursor:
    """Bounds-checked reader over a complete packet body."""

    __slots__ = ("data", "pos", "end")

    def __init__(self, data: memoryview, pos: int, end: int):
        self.data = data
        self.pos = pos
        self.end = end

    def remaining(self) -> int:
        return self.end - self.pos

    def take(self, n: int) -> memoryview:
        if self.pos + n > self.end:
            raise MalformedPacket("field runs past end of packet")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("!H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("!I", self.take(4))[0]

    def varint(self) -> int:
        try:
            value, pos = decode_varint(self.data[:self.end], self.pos)
        except NeedMoreBytes:
            raise MalformedPacket("truncated variable byte integer") from None
        self.pos = pos
        return value

    def utf8(self) -> str:
        raw = bytes(self.take(self.u16()))
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedPacket("invalid UTF-8 string") from None
        if "\x00" in text:
            raise MalformedPacket("null character in UTF-8 string")
        return text

    def binary(self) -> bytes:
        return bytes(self.take(self.u16()))

    def rest(self) -> bytes:
        return bytes(self.take(self.remaining()))


# -- properties ---------------------------------------------------------------

def _encode_properties(user_properties=(), message_expiry: int | None = None) -> bytes:
    body = bytearray()
    if message_expiry is not None:
        if not 0 <= message_expiry <= 0xFFFFFFFF:
            raise InvariantViolation("message expiry out of range")
        body.append(PROP_MESSAGE_EXPIRY)
        body += struct.pack("!I", message_expiry)
    for key, value in user_properties:
        body.append(PROP_USER_PROPERTY)
        body += _utf8(key) + _utf8(value)
    return encode_varint(len(body)) + bytes(body)


def _decode_properties(cur: _Cursor) -> tuple[tuple[tuple[str, str], ...], int | None]:
    length = cur.varint()
    if length > cur.remaining():
        raise MalformedPacket("property length exceeds packet")
    end = cur.pos + length
    sub = _Cursor(cur.data, cur.pos, end)
    user: list[tuple[str, str]] = []
    expiry = None
    while sub.remaining():
        ident = sub.varint()
        if ident == PROP_USER_PROPERTY:
            user.append((sub.utf8(), sub.utf8()))
        elif ident == PROP_MESSAGE_EXPIRY:
            if expiry is not None:
                raise MalformedPacket("message expiry given twice")
            expiry = sub.u32()
        else:
            raise MalformedPacket(f"unsupported property identifier 0x{ident:02x}")
    cur.pos = end
    return tuple(user), expiry


# -- encoding -----------------------------------------------------------------

def _check_packet_id(packet_id) -> None:
    if packet_id is None or not 1 <= packet_id <= 0xFFFF:
        raise InvariantViolation(f"packet id must be in 1..65535, got {packet_id!r}")


def _check_qos(qos: int) -> None:
    if qos not in (0, 1, 2):
        raise InvariantViolation(f"QoS must be 0, 1 or 2, got {qos!r}")


def _body(packet: ControlPacket) -> tuple[int, bytes]:
    """Return (fixed-header flags, variable header + payload)."""
    t = packet.packet_type
    if t is PacketType.PUBLISH:
        _check_qos(packet.qos)
        if not packet.topic:
            raise InvariantViolation("PUBLISH topic must be non-empty")
        if "+" in packet.topic or "#" in packet.topic:
            raise InvariantViolation("PUBLISH topic must not contain wildcards")
        if packet.qos == 0:
            if packet.packet_id is not None:
                raise InvariantViolation("QoS 0 PUBLISH must not carry a packet id")
            if packet.dup:
                raise InvariantViolation("QoS 0 PUBLISH must not set DUP")
        else:
            _check_packet_id(packet.packet_id)
        flags = (packet.dup << 3) | (packet.qos << 1) | int(packet.retain)
        body = _utf8(packet.topic)
        if packet.qos:
            body += struct.pack("!H", packet.packet_id)
        body += _encode_properties(packet.user_properties, packet.message_expiry)
        return flags, body + bytes(packet.payload)

    if t in _ACK_TYPES:
        _check_packet_id(packet.packet_id)
        body = struct.pack("!H", packet.packet_id)
        if packet.reason_code != SUCCESS:
            body += bytes([packet.reason_code])
        return _FIXED_FLAGS[t], body

    if t is PacketType.CONNECT:
        if not packet.client_id:
            raise InvariantViolation("client id must be non-empty")
        if not 0 <= packet.keep_alive <= 0xFFFF:
            raise InvariantViolation("keep alive out of range")
        flags = (packet.clean_start << 1)
        if packet.username is not None:
            flags |= 0x80
        if packet.password is not None:
            flags |= 0x40
        body = PROTOCOL_NAME + bytes([PROTOCOL_LEVEL, flags]) + struct.pack("!H", packet.keep_alive)
        body += _encode_properties()
        body += _utf8(packet.client_id)
        if packet.username is not None:
            body += _utf8(packet.username)
        if packet.password is not None:
            body += _binary(packet.password)
        return 0, body

    if t is PacketType.CONNACK:
        return 0, bytes([int(packet.session_present), packet.reason_code]) + _encode_properties()

    if t is PacketType.SUBSCRIBE:
        _check_packet_id(packet.packet_id)
        if not packet.subscriptions:
            raise InvariantViolation("SUBSCRIBE needs at least one filter")
        body = struct.pack("!H", packet.packet_id) + _encode_properties()
        for topic_filter, opts in packet.subscriptions:
            _check_qos(opts.max_qos)
            if not topic_filter:
                raise InvariantViolation("empty topic filter")
            body += _utf8(topic_filter) + bytes([opts.to_byte()])
        return 2, body

    if t in (PacketType.SUBACK, PacketType.UNSUBACK):
        _check_packet_id(packet.packet_id)
        return 0, struct.pack("!H", packet.packet_id) + _encode_properties() + bytes(packet.reason_codes)

    if t is PacketType.UNSUBSCRIBE:
        _check_packet_id(packet.packet_id)
        if not packet.filters:
            raise InvariantViolation("UNSUBSCRIBE needs at least one filter")
        body = struct.pack("!H", packet.packet_id) + _encode_properties()
        for topic_filter in packet.filters:
            body += _utf8(topic_filter)
        return 2, body

    if t in (PacketType.PINGREQ, PacketType.PINGRESP):
        return 0, b""

    if t is PacketType.DISCONNECT:
        if packet.reason_code == SUCCESS:
            return 0, b""
        return 0, bytes([packet.reason_code])

    raise InvariantViolation(f"cannot encode {packet!r}")


def encode(packet: ControlPacket) -> bytes:
    flags, body = _body(packet)
    if len(body) > VARINT_MAX:
        raise OversizePacket(f"remaining length {len(body)} exceeds {VARINT_MAX}")
    return bytes([(packet.packet_type << 4) | flags]) + encode_varint(len(body)) + body


def packet_size(packet: ControlPacket) -> int:
    """Total encoded size in bytes (fixed header included)."""
    _, body = _body(packet)
    if len(body) > VARINT_MAX:
        raise OversizePacket(f"remaining length {len(body)} exceeds {VARINT_MAX}")
    return 1 + varint_size(len(body)) + len(body)


# -- decoding -----------------------------------------------------------------

def decode_fixed_header(data: bytes | memoryview) -> FixedHeader:
    if not data:
        raise NeedMoreBytes(2)
    first = data[0]
    code = first >> 4
    if code == 0:
        raise MalformedPacket("reserved packet type 0")
    ptype = PacketType(code)
    remaining, _ = decode_varint(data, 1)
    return FixedHeader(ptype, first & 0x0F, remaining)


def decode_packet(data: bytes | bytearray | memoryview,
                  max_packet_size: int = VARINT_MAX + 5) -> tuple[ControlPacket, int]:
    """Decode one packet from the start of ``data``.

    Returns ``(packet, bytes_consumed)``; raises NeedMoreBytes on a prefix.
    """
    view = memoryview(data)
    if len(view) < 2:
        if len(view) == 1 and view[0] >> 4 == 0:
            raise MalformedPacket("reserved packet type 0")
        raise NeedMoreBytes(2 - len(view))
    header = decode_fixed_header(view)
    total = header.header_length + header.remaining_length
    if total > max_packet_size:
        raise OversizePacket(f"packet of {total} bytes exceeds limit {max_packet_size}")
    ptype = header.packet_type
    if ptype is PacketType.AUTH:
        raise UnsupportedPacket("AUTH packets are not supported")
    if ptype is not PacketType.PUBLISH and header.flags != _FIXED_FLAGS[ptype]:
        raise MalformedPacket(f"invalid flags 0x{header.flags:x} for {ptype.name}")
    if len(view) < total:
        raise NeedMoreBytes(total - len(view))
    cur = _Cursor(view, header.header_length, total)
    packet = _decode_body(ptype, header.flags, cur)
    if cur.remaining():
        raise MalformedPacket(f"{cur.remaining()} trailing byte(s) in {ptype.name}")
    return packet, total


def decode(data: bytes | bytearray | memoryview) -> ControlPacket:
    """Decode exactly one packet; trailing bytes are an error."""
    packet, used = decode_packet(data)
    if used != len(data):
        raise MalformedPacket("bytes left over after packet")
    return packet


def _decode_body(ptype: PacketType, flags: int, cur: _Cursor) -> ControlPacket:
    if ptype is PacketType.PUBLISH:
        qos = (flags >> 1) & 0x03
        dup = bool(flags & 0x08)
        if qos == 3:
            raise MalformedPacket("PUBLISH with QoS 3")
        if qos == 0 and dup:
            raise MalformedPacket("QoS 0 PUBLISH with DUP set")
        topic = cur.utf8()
        if not topic or "+" in topic or "#" in topic:
            raise MalformedPacket("invalid PUBLISH topic name")
        packet_id = None
        if qos:
            packet_id = cur.u16()
            if packet_id == 0:
                raise MalformedPacket("packet id 0")
        user, expiry = _decode_properties(cur)
        return Publish(topic, cur.rest(), qos, dup, bool(flags & 0x01), packet_id, user, expiry)

    if ptype in _ACK_TYPES:
        packet_id = cur.u16()
        if packet_id == 0:
            raise MalformedPacket("packet id 0")
        reason = SUCCESS
        if cur.remaining():
            reason = cur.u8()
            if cur.remaining():
                _decode_properties(cur)
        return _ACK_TYPES[ptype](packet_id, reason)

    if ptype is PacketType.CONNECT:
        if bytes(cur.take(6)) != PROTOCOL_NAME:
            raise MalformedPacket("bad protocol name")
        if cur.u8() != PROTOCOL_LEVEL:
            raise MalformedPacket("unsupported protocol level")
        cflags = cur.u8()
        if cflags & 0x01:
            raise MalformedPacket("reserved connect flag set")
        if cflags & 0x3C:
            raise MalformedPacket("will messages are not supported")
        keep_alive = cur.u16()
        _decode_properties(cur)
        client_id = cur.utf8()
        if not client_id:
            raise MalformedPacket("empty client id")
        username = cur.utf8() if cflags & 0x80 else None
        password = cur.binary() if cflags & 0x40 else None
        return Connect(client_id, bool(cflags & 0x02), keep_alive, username, password)

    if ptype is PacketType.CONNACK:
        ack = cur.u8()
        if ack & 0xFE:
            raise MalformedPacket("reserved CONNACK flag bits")
        reason = cur.u8()
        _decode_properties(cur)
        return Connack(bool(ack & 0x01), reason)

    if ptype is PacketType.SUBSCRIBE:
        packet_id = cur.u16()
        if packet_id == 0:
            raise MalformedPacket("packet id 0")
        _decode_properties(cur)
        subs = []
        while cur.remaining():
            topic_filter = cur.utf8()
            if not topic_filter:
                raise MalformedPacket("empty topic filter")
            subs.append((topic_filter, SubscribeOptions.from_byte(cur.u8())))
        if not subs:
            raise MalformedPacket("SUBSCRIBE without filters")
        return Subscribe(packet_id, tuple(subs))

    if ptype in (PacketType.SUBACK, PacketType.UNSUBACK):
        packet_id = cur.u16()
        if packet_id == 0:
            raise MalformedPacket("packet id 0")
        _decode_properties(cur)
        codes = tuple(cur.rest())
        cls = Suback if ptype is PacketType.SUBACK else Unsuback
        return cls(packet_id, codes)

    if ptype is PacketType.UNSUBSCRIBE:
        packet_id = cur.u16()
        if packet_id == 0:
            raise MalformedPacket("packet id 0")
        _decode_properties(cur)
        filters = []
        while cur.remaining():
            filters.append(cur.utf8())
        if not filters:
            raise MalformedPacket("UNSUBSCRIBE without filters")
        return Unsubscribe(packet_id, tuple(filters))

    if ptype is PacketType.PINGREQ:
        return Pingreq()
    if ptype is PacketType.PINGRESP:
        return Pingresp()

    if ptype is PacketType.DISCONNECT:
        reason = SUCCESS
        if cur.remaining():
            reason = cur.u8()
            if cur.remaining():
                _decode_properties(cur)
        return Disconnect(reason)

    raise UnsupportedPacket(ptype.name)  # pragma: no cover


@dataclass
class PacketReader:
    """Incremental decoder for a byte stream."""

    max_packet_size: int = VARINT_MAX + 5
    _buffer: bytearray = field(default_factory=bytearray)

    def feed(self, data: bytes) -> list[ControlPacket]:
        self._buffer += data
        packets = []
        while self._buffer:
            try:
                packet, used = decode_packet(self._buffer, self.max_packet_size)
            except NeedMoreBytes:
                break
            packets.append(packet)
            del self._buffer[:used]
        return packets

    def split(self, data: bytes) -> list[bytes]:
        """Like ``feed`` but returns the raw bytes of each complete packet."""
        self._buffer += data
        frames = []
        while len(self._buffer) >= 2:
            try:
                header = decode_fixed_header(self._buffer)
            except NeedMoreBytes:
                break
            total = header.header_length + header.remaining_length
            if total > self.max_packet_size:
                raise OversizePacket(f"packet of {total} bytes exceeds limit")
            if len(self._buffer) < total:
                break
            frames.append(bytes(self._buffer[:total]))
            del self._buffer[:total]
        return frames
