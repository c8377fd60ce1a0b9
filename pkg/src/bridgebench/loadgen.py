"""Fan-in load driver: providers, gateways, sensor hubs and their payloads."""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field

from . import _kernels
from .client import MQTTClient, PublishOutcome
from .errors import BridgeBenchError, ConfigInvalid
from .netem import link_key
from .topics import source_topic

log = logging.getLogger(__name__)

CYCLE_BATCH = "batch"
CYCLE_MESSAGE = "message"
CYCLE_PERSISTENT = "persistent"
CYCLE_MODES = (CYCLE_BATCH, CYCLE_MESSAGE, CYCLE_PERSISTENT)


@dataclass(frozen=True)
class HubSpec:
    hub_id: int
    payload_size: int
    topic: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.payload_size < 0:
            raise ConfigInvalid("payload_size must be >= 0")


@dataclass(frozen=True)
class GatewaySpec:
    gateway_id: int
    hubs: tuple[HubSpec, ...]
    rate: float = 1.0  # batches per second
    messages_per_hub: int = 1000
    cycling: str = CYCLE_BATCH

    def __post_init__(self):
        if self.rate <= 0:
            raise ConfigInvalid("gateway rate must be > 0")
        if self.messages_per_hub < 0:
            raise ConfigInvalid("messages_per_hub must be >= 0")
        if self.cycling not in CYCLE_MODES:
            raise ConfigInvalid(f"cycling must be one of {CYCLE_MODES}")

    @property
    def period(self) -> float:
        return 1.0 / self.rate


@dataclass(frozen=True)
class ProviderSpec:
    provider_id: int
    gateways: tuple[GatewaySpec, ...]
    transform_ratio: float = 1.0

    def __post_init__(self):
        if not self.gateways:
            raise ConfigInvalid(f"provider {self.provider_id} needs at least one gateway")

    @property
    def hubs(self) -> list[tuple[GatewaySpec, HubSpec]]:
        return [(g, h) for g in self.gateways for h in g.hubs]


def hub_key(hub: HubSpec) -> int:
    return link_key(hub.topic or f"hub{hub.hub_id}")


def _header(hub_id: int, seq: int, n_records: int) -> bytes:
    return f"H,{hub_id},{seq},{n_records}".encode("ascii")


def generate_payload(spec: HubSpec, seq: int) -> bytes:
    """Synthetic sensor document of exactly ``payload_size`` bytes.

    A header line is followed by fixed-width records
    ``R,<hub>,<ts>,<param>,<value>``; the header is space-padded so the total
    size hits the target.  Deterministic in (seed, hub, seq).
    """
    size = spec.payload_size
    width = _kernels.RECORD_WIDTH
    n = max(0, (size - len(_header(spec.hub_id, seq, 0)) - 1) // width)
    while n > 0 and len(_header(spec.hub_id, seq, n)) + 1 + n * width > size:
        n -= 1
    header = _header(spec.hub_id, seq, n)
    pad = size - len(header) - 1 - n * width
    if pad < 0:
        return (header + b"\n")[:max(size, 0)] if size > 0 else b""
    records = _kernels.sensor_records(n, spec.seed, hub_key(spec), spec.hub_id, seq)
    return header + b" " * pad + b"\n" + records.tobytes()


@dataclass
class GatewayRun:
    spec: GatewaySpec
    outcomes: list[PublishOutcome] = field(default_factory=list)
    batch_starts: list[float] = field(default_factory=list)
    connect_attempts: int = 0


async def run_gateway(spec: GatewaySpec, client: MQTTClient, qos: int,
                      pacing_scale: float = 1.0) -> GatewayRun:
    """Publish every hub's payload ``messages_per_hub`` times.

    Batches start on a fixed schedule (period scaled by ``pacing_scale``);
    a batch that overruns delays the next one but never skips it.  Failed
    publishes are recorded as failed outcomes.
    """
    loop = asyncio.get_running_loop()
    run = GatewayRun(spec)
    period = spec.period * pacing_scale
    t0 = loop.time()
    seq = 0

    async def ensure_connected() -> bool:
        if client.connected:
            return True
        try:
            await client.connect()
            return True
        except BridgeBenchError as exc:
            log.debug("gateway %s connect failed: %s", spec.gateway_id, exc)
            return False

    def failed(topic: str, s: int, error: str) -> PublishOutcome:
        now = client.clock.now_us()
        return PublishOutcome(s, qos, topic, now, now, 0, False, error)

    for batch in range(spec.messages_per_hub):
        start = t0 + batch * period
        delay = start - loop.time()
        if delay > 0:
            await asyncio.sleep(delay)
        run.batch_starts.append(loop.time())
        for hub in spec.hubs:
            payload = generate_payload(hub, batch)
            if spec.cycling == CYCLE_MESSAGE or not client.connected:
                ok = await ensure_connected()
            else:
                ok = True
            if not ok:
                run.outcomes.append(failed(hub.topic, seq, "ConnectFailed"))
            else:
                run.outcomes.append(await client.publish(hub.topic, payload, qos, seq=seq))
            seq += 1
            if spec.cycling == CYCLE_MESSAGE:
                await client.disconnect()
        if spec.cycling == CYCLE_BATCH:
            await client.disconnect()
    if client.connected:
        await client.disconnect()
    run.connect_attempts = client.stats.connect_attempts
    return run


def paper_topology(messages_per_hub: int = 1000, p1_ratio: float = 0.12, p2_ratio: float = 1.0,
                   cycling: str = CYCLE_BATCH, seed: int = 0) -> tuple[ProviderSpec, ...]:
    """Two providers: P1 = two gateways with one hub each (125 KB, 35 KB) at
    one batch per second; P2 = one gateway with two 1.5 KB hubs."""
    def hub(p, g, h, size):
        return HubSpec(h, size, source_topic(p, g, h), seed)

    p1 = ProviderSpec(1, (
        GatewaySpec(1, (hub(1, 1, 1, 125_000),), 1.0, messages_per_hub, cycling),
        GatewaySpec(2, (hub(1, 2, 2, 35_000),), 1.0, messages_per_hub, cycling),
    ), p1_ratio)
    p2 = ProviderSpec(2, (
        GatewaySpec(1, (hub(2, 1, 1, 1_500), hub(2, 1, 2, 1_500)), 1.0, messages_per_hub, cycling),
    ), p2_ratio)
    return p1, p2


def total_messages(providers) -> int:
    return sum(g.messages_per_hub * len(g.hubs) for p in providers for g in p.gateways)

