import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bridgebench import codec
from bridgebench.codec import (
    Connack,
    Connect,
    Disconnect,
    PacketReader,
    PacketType,
    Pingreq,
    Pingresp,
    Puback,
    Pubcomp,
    Publish,
    Pubrec,
    Pubrel,
    Suback,
    Subscribe,
    SubscribeOptions,
    Unsuback,
    Unsubscribe,
)
from bridgebench.errors import (
    InvariantViolation,
    MalformedPacket,
    NeedMoreBytes,
    OversizePacket,
    UnsupportedPacket,
)


def oracle_varint(value):
    """Independent encoder: base-128 digits, little end first."""
    digits = []
    while True:
        digits.append(value % 128)
        value //= 128
        if value == 0:
            break
    return bytes([d + 128 for d in digits[:-1]] + [digits[-1]])


def oracle_unvarint(data):
    return sum((b % 128) * 128 ** i for i, b in enumerate(data))


BOUNDARIES = [0, 127, 128, 16383, 16384, 2097151, 2097152, 268435455]


def test_varint_agrees_with_oracle_exhaustively_up_to_2_16():
    for v in list(range(65537)) + BOUNDARIES:
        enc = codec.encode_varint(v)
        assert enc == oracle_varint(v)
        assert oracle_unvarint(enc) == v
        assert codec.decode_varint(enc) == (v, len(enc))
        assert codec.varint_size(v) == len(enc)


def test_varint_321_is_c1_02():
    # 321 = 2*128 + 65 -> low 7 bits 65 | 0x80 = 0xC1, then 2
    assert codec.encode_varint(321) == bytes([0xC1, 0x02])


@pytest.mark.parametrize("bad", [-1, 268435456])
def test_varint_out_of_range(bad):
    with pytest.raises(OversizePacket):
        codec.encode_varint(bad)


def test_varint_rejects_five_bytes_and_non_minimal():
    with pytest.raises(MalformedPacket):
        codec.decode_varint(bytes([0xFF, 0xFF, 0xFF, 0xFF, 0x7F]))
    with pytest.raises(MalformedPacket):
        codec.decode_varint(bytes([0x80, 0x00]))
    with pytest.raises(NeedMoreBytes):
        codec.decode_varint(bytes([0x80]))


def test_pingreq_bytes():
    assert codec.encode(Pingreq()) == bytes([0xC0, 0x00])
    assert codec.packet_size(Pingreq()) == 2


def test_publish_topic_delta_is_exactly_14():
    payload = bytes(1500)
    short = Publish("a" * 15, payload, 0)
    long = Publish("a" * 29, payload, 0)
    assert len(codec.encode(long)) - len(codec.encode(short)) == 14
    assert codec.packet_size(long) - codec.packet_size(short) == 14


def test_large_payload_is_carried_verbatim():
    p = Publish("src/provider1/gateway1/hub001", bytes(125_000), 1, packet_id=7)
    assert codec.packet_size(p) >= 125_000 + 29 + 2
    assert codec.decode(codec.encode(p)) == p


def test_packet_size_matches_encode_and_total_length():
    p = Publish("t", b"xyz", 2, packet_id=9, user_properties=(("ts_us", "12"),))
    data = codec.encode(p)
    header = codec.decode_fixed_header(data)
    assert len(data) == header.header_length + header.remaining_length == codec.packet_size(p)


def test_known_layouts():
    assert codec.encode(Puback(10)) == bytes([0x40, 0x02, 0x00, 0x0A])
    assert codec.encode(Puback(10, 0x10)) == bytes([0x40, 0x03, 0x00, 0x0A, 0x10])
    assert codec.encode(Pubrel(1)) == bytes([0x62, 0x02, 0x00, 0x01])
    assert codec.encode(Disconnect()) == bytes([0xE0, 0x00])
    assert codec.encode(Pingresp()) == bytes([0xD0, 0x00])
    # QoS 1 PUBLISH: flags 0b0010, topic "a", id 1, empty properties, payload "x"
    assert codec.encode(Publish("a", b"x", 1, packet_id=1)) == bytes(
        [0x32, 0x07, 0x00, 0x01, ord("a"), 0x00, 0x01, 0x00, ord("x")])


@pytest.mark.parametrize("packet", [
    Publish("t", b"", 3, packet_id=1),
    Publish("t", b"", 1),
    Publish("t", b"", 0, packet_id=4),
    Publish("t", b"", 0, dup=True),
    Publish("a/+", b"", 0),
    Publish("", b"", 0),
    Puback(0),
    Subscribe(1, ()),
    Connect(""),
])
def test_encode_invariants(packet):
    with pytest.raises(InvariantViolation):
        codec.encode(packet)


def test_decode_errors():
    with pytest.raises(MalformedPacket):
        codec.decode(bytes([0x00, 0x00]))
    with pytest.raises(UnsupportedPacket):
        codec.decode(bytes([0xF0, 0x00]))
    with pytest.raises(MalformedPacket):
        codec.decode(bytes([0xC1, 0x00]))  # PINGREQ with flag bits
    with pytest.raises(MalformedPacket):
        codec.decode(bytes([0x36, 0x04, 0x00, 0x01, ord("a"), 0x00]))  # QoS 3
    with pytest.raises(MalformedPacket):
        codec.decode(codec.encode(Pingreq()) + b"\x00")


def test_unknown_property_is_malformed():
    body = struct.pack("!H", 1) + b"a" + bytes([0x02, 0x01, 0x00])  # property 0x01 (payload format)
    with pytest.raises(MalformedPacket):
        codec.decode(bytes([0x30, len(body)]) + body)


def test_oversize_against_configured_limit():
    data = codec.encode(Publish("t", bytes(100)))
    with pytest.raises(OversizePacket):
        codec.decode_packet(data, max_packet_size=50)


def test_every_prefix_of_publish_needs_more_bytes():
    data = codec.encode(Publish("src/provider1/gateway1/hub001", bytes(300), 2, packet_id=5,
                                user_properties=(("ts_us", "1000"), ("seq", "3"))))
    for cut in range(len(data)):
        with pytest.raises(NeedMoreBytes) as info:
            codec.decode_packet(data[:cut])
        if cut >= 2 + 1:
            assert info.value.hint >= 1


def test_packet_reader_reassembles_fragments():
    packets = [Publish("a/b", bytes(range(200)), 1, packet_id=3), Pingreq(), Puback(3)]
    stream = b"".join(codec.encode(p) for p in packets)
    reader = PacketReader()
    out = []
    for i in range(0, len(stream), 7):
        out.extend(reader.feed(stream[i:i + 7]))
    assert out == packets


def test_packet_type_count():
    # 15 codes in use plus the reserved 0: the sixteen control packet types
    assert len(PacketType) == 15
    assert PacketType.AUTH == 15


# -- randomized round trip --------------------------------------------------------

text = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00"), max_size=20)
topic = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00+#"),
                min_size=1, max_size=30)
pid = st.integers(1, 0xFFFF)
props = st.lists(st.tuples(text, text), max_size=3).map(tuple)
options = st.builds(SubscribeOptions, st.integers(0, 2), st.booleans(), st.booleans())
reason = st.sampled_from([0x00, 0x10, 0x80, 0x83, 0x87, 0x91, 0x92, 0x97])


@st.composite
def publishes(draw):
    qos = draw(st.integers(0, 2))
    return Publish(draw(topic), draw(st.binary(max_size=300)), qos,
                   draw(st.booleans()) if qos else False, draw(st.booleans()),
                   draw(pid) if qos else None, draw(props),
                   draw(st.none() | st.integers(0, 0xFFFFFFFF)))


packets = st.one_of(
    publishes(),
    st.builds(Connect, text.filter(bool), st.booleans(), st.integers(0, 0xFFFF), st.none() | text,
              st.none() | st.binary(max_size=20)),
    st.builds(Connack, st.booleans(), reason),
    st.builds(Puback, pid, reason), st.builds(Pubrec, pid, reason),
    st.builds(Pubrel, pid, st.sampled_from([0x00, 0x92])), st.builds(Pubcomp, pid, st.sampled_from([0x00, 0x92])),
    st.builds(Subscribe, pid, st.lists(st.tuples(topic, options), min_size=1, max_size=4).map(tuple)),
    st.builds(Suback, pid, st.lists(st.sampled_from([0, 1, 2, 0x80, 0x8F]), min_size=1, max_size=4).map(tuple)),
    st.builds(Unsubscribe, pid, st.lists(topic, min_size=1, max_size=4).map(tuple)),
    st.builds(Unsuback, pid, st.lists(st.sampled_from([0, 0x11]), min_size=1, max_size=4).map(tuple)),
    st.just(Pingreq()), st.just(Pingresp()),
    st.builds(Disconnect, st.sampled_from([0x00, 0x04, 0x8D, 0x8E])),
)


@settings(max_examples=1000)
@given(packets)
def test_round_trip(packet):
    data = codec.encode(packet)
    assert codec.decode(data) == packet
    assert codec.packet_size(packet) == len(data)


@given(st.binary(max_size=64))
def test_decoder_totality(data):
    try:
        codec.decode_packet(data)
    except (MalformedPacket, UnsupportedPacket, NeedMoreBytes, OversizePacket):
        pass


@given(publishes(), st.integers(0, 100))
def test_decoder_totality_on_mutated_packets(packet, seed):
    data = bytearray(codec.encode(packet))
    i = seed % len(data)
    data[i] ^= 1 + seed % 255
    try:
        codec.decode(bytes(data))
    except (MalformedPacket, UnsupportedPacket, NeedMoreBytes, OversizePacket):
        pass


@given(st.integers(0, 2000), st.integers(1, 40))
def test_packet_size_strictly_increasing(n, t):
    a = Publish("x" * t, bytes(n), 1, packet_id=1)
    assert codec.packet_size(Publish("x" * t, bytes(n + 1), 1, packet_id=1)) > codec.packet_size(a)
    assert codec.packet_size(Publish("x" * (t + 1), bytes(n), 1, packet_id=1)) > codec.packet_size(a)
