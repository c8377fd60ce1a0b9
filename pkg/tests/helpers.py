"""Shared wiring for tests that need live brokers and clients."""

from __future__ import annotations

from bridgebench.broker import BrokerConfig, BrokerServer
from bridgebench.client import ClientConfig, MQTTClient
from bridgebench.clock import RunClock
from bridgebench.netem import Link, LinkProfile
from bridgebench.transport import MemoryNetwork, make_opener


class Rig:
    """One memory network, any number of brokers, clients sharing a clock."""

    def __init__(self):
        self.network = MemoryNetwork()
        self.opener = make_opener(self.network)
        self.clock = RunClock()
        self.servers: list[BrokerServer] = []

    async def broker(self, name="b", **kw) -> BrokerServer:
        server = BrokerServer(BrokerConfig(name, **kw))
        await server.start(self.network)
        self.servers.append(server)
        return server

    def client(self, client_id, broker="b", profile: LinkProfile | None = None, link_id=None, **kw) -> MQTTClient:
        link = Link(link_id or client_id, profile) if profile is not None else None
        return MQTTClient(ClientConfig(client_id, f"mem://{broker}", **kw), self.opener, self.clock, link)

    async def close(self):
        for s in self.servers:
            await s.stop()


def seed_with_pattern(link_id: str, direction: int, pattern: list[bool], p: float = 0.5) -> int:
    """Smallest seed whose first drop decisions on ``direction`` equal ``pattern``.

    Assumes single-segment packets, so the per-packet drop probability is ``p``.
    """
    from bridgebench import _kernels
    from bridgebench.netem import _STREAM_DROP, link_key

    key = link_key(link_id)
    for seed in range(100_000):
        got = [_kernels.counter_uniform(seed, key, direction, _STREAM_DROP, i) < p for i in range(len(pattern))]
        if got == pattern:
            return seed
    raise AssertionError("no seed found")
