import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bridgebench import codec
from bridgebench.broker import Broker, BrokerConfig, Close, Send
from bridgebench.codec import (
    Connect,
    Disconnect,
    Pingreq,
    Pingresp,
    Puback,
    Pubcomp,
    Publish,
    Pubrec,
    Pubrel,
    Subscribe,
    SubscribeOptions,
    Unsubscribe,
)
from bridgebench.topics import matches


def connect(broker, cid, **kw):
    session, actions = broker.open_session(Connect(cid, **kw))
    assert session is not None
    return session


def subscribe(broker, session, *filters, qos=2, no_local=False):
    opts = SubscribeOptions(qos, no_local, False)
    return broker.handle_packet(session, Subscribe(1, tuple((f, opts) for f in filters)))


def sends(actions, cid=None):
    return [a.packet for a in actions if isinstance(a, Send) and (cid is None or a.client_id == cid)]


def test_fresh_counters_are_zero():
    c = Broker().counters_snapshot()
    assert c.publishes_received == c.messages_forwarded == c.connections_accepted == 0
    assert c.per_topic_received == {}


def test_qos0_forward_without_ack():
    b = Broker()
    pub, sub = connect(b, "pub"), connect(b, "sub")
    subscribe(b, sub, "a/#")
    actions = b.handle_packet(pub, Publish("a/b", b"x", 0))
    assert [type(p) for p in sends(actions, "pub")] == []
    assert [p.topic for p in sends(actions, "sub")] == ["a/b"]


def test_qos2_handshake_sequence():
    b = Broker()
    pub, sub = connect(b, "pub"), connect(b, "sub")
    subscribe(b, sub, "a/#", qos=0)
    first = b.handle_packet(pub, Publish("a/b", b"x", 2, packet_id=5))
    assert sends(first) == [Pubrec(5)]  # held: nothing forwarded yet
    assert pub.inbound_qos2_ids == {5}
    # duplicate before PUBREL is suppressed, still answered
    again = b.handle_packet(pub, Publish("a/b", b"x", 2, dup=True, packet_id=5))
    assert sends(again) == [Pubrec(5)]
    assert b.counters.duplicates_suppressed == 1
    release = b.handle_packet(pub, Pubrel(5))
    assert [type(p) for p in sends(release, "sub")] == [Publish]
    assert sends(release, "pub") == [Pubcomp(5)]
    # PUBREC, (await PUBREL), forward, PUBCOMP: three broker-side packets
    assert [type(p) for p in sends(first + release)] == [Pubrec, Publish, Pubcomp]
    assert b.handle_packet(pub, Pubrel(5)) == [Send("pub", Pubcomp(5, 0x92))]
    assert b.counters.accepted("a/b") == 1


def test_qos1_forward_and_ack_even_on_duplicate():
    b = Broker()
    pub, sub = connect(b, "pub"), connect(b, "sub")
    subscribe(b, sub, "a/b", qos=1)
    for dup in (False, True):
        actions = b.handle_packet(pub, Publish("a/b", b"x", 1, dup=dup, packet_id=9))
        assert sends(actions, "pub") == [Puback(9)]
        assert len(sends(actions, "sub")) == 1
    assert b.counters.publishes_received == 2


def test_no_local_and_min_qos():
    b = Broker()
    a = connect(b, "A")
    subscribe(b, a, "t/#", qos=1, no_local=True)
    assert b.route("t/x", "A") == []
    assert b.route("t/x", "B", qos=2) == [("A", 1, False)]
    assert b.route("t/x", "B", qos=0) == [("A", 0, False)]


FILTERS = ["+", "#"] + ["/".join(p) for d in (1, 2, 3) for p in itertools.product("ab+", repeat=d)] + \
          ["/".join(p) + "/#" for d in (1, 2) for p in itertools.product("ab+", repeat=d)]
NAMES = ["/".join(p) for d in (1, 2, 3) for p in itertools.product("ab", repeat=d)]


def test_overlapping_filters_deliver_once():
    for f1, f2 in itertools.combinations(FILTERS, 2):
        b = Broker()
        s = connect(b, "s")
        b.handle_packet(s, Subscribe(1, ((f1, SubscribeOptions(1)), (f2, SubscribeOptions(2)))))
        for name in NAMES:
            hits = b.route(name, "p")
            expect = matches(f1, name) or matches(f2, name)
            assert len(hits) == int(expect), (f1, f2, name)
            if expect:
                want = max(q for f, q in ((f1, 1), (f2, 2)) if matches(f, name))
                assert hits[0][1] == want


def test_retransmit_sweep_resends_with_dup():
    b = Broker(BrokerConfig(retry_interval=1.0, max_retries=2))
    pub, sub = connect(b, "pub"), connect(b, "sub")
    subscribe(b, sub, "t", qos=1)
    [out] = sends(b.handle_packet(pub, Publish("t", b"x", 1, packet_id=1), now=0.0), "sub")
    assert not out.dup
    assert b.retransmit_sweep(sub, 0.5) == []
    [again] = sends(b.retransmit_sweep(sub, 1.0))
    assert again.dup and again.packet_id == out.packet_id
    sends(b.retransmit_sweep(sub, 2.0))
    assert b.retransmit_sweep(sub, 3.0) == []  # exhausted after 2 retries
    assert b.counters.retries_exhausted == 1 and not sub.outbound_inflight
    assert b.next_deadline() is None


def test_no_inflight_no_actions():
    b = Broker()
    s = connect(b, "s")
    assert b.retransmit_sweep(s, 100.0) == []


def test_qos2_outbound_pubrec_pubrel_pubcomp():
    b = Broker()
    pub, sub = connect(b, "pub"), connect(b, "sub")
    subscribe(b, sub, "t", qos=2)
    [out] = sends(b.handle_packet(pub, Publish("t", b"x", 0)), "sub")
    assert out.qos == 0  # min(publish 0, sub 2)
    b.handle_packet(pub, Publish("t", b"x", 2, packet_id=3))
    [out] = sends(b.handle_packet(pub, Pubrel(3)), "sub")
    assert sends(b.handle_packet(sub, Pubrec(out.packet_id))) == [Pubrel(out.packet_id)]
    assert sub.outbound_inflight[out.packet_id].stage == "pubcomp"
    [rel] = sends(b.retransmit_sweep(sub, 10.0))
    assert rel == Pubrel(out.packet_id)
    b.handle_packet(sub, Pubcomp(out.packet_id))
    assert not sub.outbound_inflight


def test_queue_overflow_counts_exact_discards():
    b = Broker(BrokerConfig(max_inflight=2, queue_capacity=3))
    pub, sub = connect(b, "pub"), connect(b, "sub")
    subscribe(b, sub, "t", qos=1)
    for i in range(10):
        b.handle_packet(pub, Publish("t", b"x", 1, packet_id=i + 1))
    assert len(sub.outbound_inflight) == 2 and len(sub.outbound_queue) == 3
    assert b.counters.messages_dropped_queue == 5
    pid = next(iter(sub.outbound_inflight))
    drained = sends(b.handle_packet(sub, Puback(pid)))
    assert len(drained) == 1 and len(sub.outbound_queue) == 2


def test_auth_table():
    b = Broker(BrokerConfig(credentials={"u": "pw"}))
    session, actions = b.open_session(Connect("c", username="u", password=b"bad"))
    assert session is None and sends(actions)[0].reason_code == codec.BAD_CREDENTIALS
    session, actions = b.open_session(Connect("c", username="u", password=b"pw"))
    assert session is not None and sends(actions)[0].reason_code == 0


def test_takeover_and_clean_start():
    b = Broker()
    s1 = connect(b, "c")
    subscribe(b, s1, "t")
    session, actions = b.open_session(Connect("c"))
    assert Close("c", codec.SESSION_TAKEN_OVER) in actions
    assert session.subscriptions == {} and b.route("t", "x") == []
    assert b.counters.connections_accepted == 2


def test_misc_packets():
    b = Broker()
    s = connect(b, "c")
    assert sends(b.handle_packet(s, Pingreq())) == [Pingresp()]
    subscribe(b, s, "t")
    [unsub] = sends(b.handle_packet(s, Unsubscribe(2, ("t", "zz"))))
    assert unsub.reason_codes == (0, codec.NO_SUBSCRIPTION_EXISTED)
    assert b.handle_packet(s, Disconnect()) == [Close("c", 0)]
    err = b.handle_packet(s, Connect("c"))
    assert isinstance(err[-1], Close) and err[-1].reason_code == codec.PROTOCOL_ERROR


ops = st.lists(st.tuples(st.integers(0, 2), st.booleans(), st.booleans(), st.sampled_from(["t/a", "t/b", "u"])),
               max_size=60)


@given(ops, st.integers(1, 4), st.integers(0, 5))
def test_conservation(ops, inflight, capacity):
    """received == forwarded + dropped_queue + suppressed + unrouted once the handshakes settle."""
    b = Broker(BrokerConfig(max_inflight=inflight, queue_capacity=capacity))
    pub, sub = connect(b, "pub"), connect(b, "sub")
    subscribe(b, sub, "t/#", qos=1)
    pid = itertools.count(1)
    for qos, dup_resend, release, topic in ops:
        p = next(pid) if qos else None
        b.handle_packet(pub, Publish(topic, b"", qos, packet_id=p))
        if qos == 2 and dup_resend:
            b.handle_packet(pub, Publish(topic, b"", 2, dup=True, packet_id=p))
        if qos == 2:
            b.handle_packet(pub, Pubrel(p))
        if release:
            for q in list(sub.outbound_inflight):
                b.handle_packet(sub, Puback(q))
        assert len(sub.outbound_queue) <= capacity
    c = b.counters
    assert c.publishes_received == (c.messages_forwarded + c.messages_dropped_queue
                                    + c.duplicates_suppressed + c.messages_unrouted)
    assert sum(c.per_topic_received.values()) == c.publishes_received


def test_to_json_round_trip():
    import json
    b = Broker()
    connect(b, "x")
    doc = json.loads(b.counters_snapshot().to_json())
    assert doc["connections_accepted"] == 1 and "per_topic_suppressed" in doc


@pytest.mark.parametrize("bad", ["a/#/b", "a+"])
def test_invalid_filter_gets_failure_code(bad):
    b = Broker()
    s = connect(b, "c")
    [suback] = sends(b.handle_packet(s, Subscribe(1, ((bad, SubscribeOptions(1)),))))
    assert suback.reason_codes == (codec.TOPIC_FILTER_INVALID,)
