import asyncio

import pytest

from bridgebench.clock import run_virtual
from bridgebench.codec import SubscribeOptions
from bridgebench.errors import AuthFailure
from bridgebench.netem import DOWN, UP, LinkProfile

from helpers import Rig, seed_with_pattern


def virtual(coro_fn):
    return run_virtual(coro_fn)


def test_connect_and_publish_lossless():
    async def main():
        rig = Rig()
        await rig.broker()
        sub = await rig.client("sub").connect()
        got = []
        await sub.subscribe("providers/p1/#", SubscribeOptions(1), got.append)
        pub = await rig.client("pub").connect()
        out = await pub.publish("providers/p1/hub1", b"hello", 0)
        await asyncio.sleep(0.1)
        await rig.close()
        return out, got

    out, got = virtual(main)
    assert out.ok and out.retries == 0 and out.result == "ok"
    assert len(got) == 1 and got[0].payload == b"hello"
    assert got[0].property("ts_us") == str(out.t_publish) and got[0].property("seq") == "0"


def test_connect_retries_after_dropped_connect():
    seed = seed_with_pattern("gw", UP, [True, False])

    async def main():
        rig = Rig()
        await rig.broker()
        prof = LinkProfile(one_way_delay_ms=5, segment_loss_p=0.5, loss_direction="up", seed=seed)
        client = rig.client("gw", profile=prof, ack_timeout=1.0)
        await client.connect()
        await rig.close()
        return client.last_connect_attempts, client.link.drop_trace()

    attempts, trace = virtual(main)
    assert attempts == 2
    assert [d.dropped for d in trace[:2]] == [True, False]


def test_wrong_password():
    async def main():
        rig = Rig()
        await rig.broker(credentials={"gw": "secret"})
        ok = await rig.client("a", username="gw", password="secret").connect()
        assert ok.connected
        with pytest.raises(AuthFailure):
            await rig.client("b", username="gw", password="nope").connect()
        await rig.close()

    virtual(main)


def test_qos2_exchanges_exactly_four_packets():
    async def main():
        rig = Rig()
        await rig.broker()
        pub = await rig.client("pub").connect()
        before = dict(pub.stats.sent_by_type), dict(pub.stats.received_by_type)
        out = await pub.publish("t", b"x", 2)
        await rig.close()
        return out, before, pub.stats

    out, (sent0, recv0), stats = virtual(main)
    sent = {k: v - sent0.get(k, 0) for k, v in stats.sent_by_type.items() if v - sent0.get(k, 0)}
    recv = {k: v - recv0.get(k, 0) for k, v in stats.received_by_type.items() if v - recv0.get(k, 0)}
    assert sent == {"PUBLISH": 1, "PUBREL": 1}
    assert recv == {"PUBREC": 1, "PUBCOMP": 1}
    assert out.ok and out.retries == 0


def test_puback_dropped_once_means_one_retry():
    # down-direction ordinals: 0 = CONNACK, 1 = first PUBACK (dropped), 2 = second PUBACK
    seed = seed_with_pattern("pub", DOWN, [False, True, False])

    async def main():
        rig = Rig()
        b = await rig.broker()
        prof = LinkProfile(one_way_delay_ms=10, segment_loss_p=0.5, loss_direction="down", seed=seed)
        pub = await rig.client("pub", profile=prof, ack_timeout=0.5).connect()
        out = await pub.publish("t", b"x", 1)
        await rig.close()
        return out, b.counters_snapshot()

    out, counters = virtual(main)
    assert out.ok and out.retries == 1
    assert counters.publishes_received == 2  # the broker saw the duplicate


@pytest.mark.parametrize("qos", [0, 1, 2])
def test_publish_cost_grows_with_qos(qos):
    d = 0.010

    async def main():
        rig = Rig()
        await rig.broker()
        pub = await rig.client("pub", profile=LinkProfile(one_way_delay_ms=d * 1000)).connect()
        outs = [await pub.publish("t", b"x", qos) for _ in range(5)]
        await rig.close()
        return outs

    outs = virtual(main)
    mean = sum(o.t_complete - o.t_publish for o in outs) / len(outs) / 1e6
    assert mean == pytest.approx(2 * qos * d, abs=1e-4)
    assert all(o.t_complete >= o.t_publish for o in outs)


def test_no_local_and_min_qos_on_subscribe():
    async def main():
        rig = Rig()
        await rig.broker()
        me = await rig.client("me").connect()
        mine, other = [], []
        await me.subscribe("loop/#", SubscribeOptions(2, no_local=True), mine.append)
        peer = await rig.client("peer").connect()
        await peer.subscribe("loop/#", SubscribeOptions(0), other.append)
        await me.publish("loop/x", b"1", 2)
        await asyncio.sleep(0.1)
        await rig.close()
        return mine, other

    mine, other = virtual(main)
    assert mine == []
    assert len(other) == 1 and other[0].qos == 0


def test_keep_alive_pings_and_stays_up():
    async def main():
        rig = Rig()
        b = await rig.broker()
        c = await rig.client("idle", keep_alive=60).connect()
        await asyncio.sleep(200)
        up = c.connected
        await rig.close()
        return up, c.stats.pings_sent, c.stats.received_by_type.get("PINGRESP", 0), b.counters_snapshot()

    up, pings, pongs, counters = virtual(main)
    assert up and pings >= 4 and pongs == pings
    assert counters.connections_accepted == 1


def test_connect_cycle_counts_connections():
    async def main():
        rig = Rig()
        b = await rig.broker()
        c = rig.client("gw")
        for _ in range(3):
            await c.connect()
            await c.publish("t", b"x", 1)
            await c.disconnect()
        await asyncio.sleep(0.1)
        await rig.close()
        return b.counters_snapshot().connections_accepted

    assert virtual(main) == 3


def test_disconnect_with_unacked_qos1_fails_outcome():
    async def main():
        rig = Rig()
        await rig.broker()
        c = await rig.client("gw", profile=LinkProfile(one_way_delay_ms=50)).connect()
        task = asyncio.ensure_future(c.publish("t", b"x", 1))
        await asyncio.sleep(0.06)  # PUBLISH arrived, PUBACK still on the wire
        await c.disconnect()
        out = await task
        await rig.close()
        return out

    out = virtual(main)
    assert not out.ok and out.error.startswith("ConnectionLost")


def test_retry_exhaustion_marks_outcome_failed():
    async def main():
        rig = Rig()
        await rig.broker()
        prof = LinkProfile(segment_loss_p=1.0, loss_direction="down")
        c = rig.client("gw", profile=prof, ack_timeout=0.1, max_retries=2, connect_attempts=2)
        with pytest.raises(Exception):
            await c.connect()
        await rig.close()

    virtual(main)


def test_unbounded_retries_survive_ack_loss():
    async def main():
        rig = Rig()
        b = await rig.broker()
        prof = LinkProfile(one_way_delay_ms=5, segment_loss_p=0.5, seed=3)
        sub = await rig.client("sub").connect()
        got = []
        await sub.subscribe("t", SubscribeOptions(2), got.append)
        c = await rig.client("gw", profile=prof, ack_timeout=0.2, max_retries=None).connect()
        outs = [await c.publish("t", bytes([i]), 2) for i in range(30)]
        await asyncio.sleep(1)
        await rig.close()
        return outs, got, b.counters_snapshot()

    outs, got, counters = virtual(main)
    assert all(o.ok for o in outs)
    assert sum(o.retries for o in outs) > 0
    # exactly once at the subscriber
    assert sorted(m.property("seq") for m in got) == sorted(str(o.seq) for o in outs)
