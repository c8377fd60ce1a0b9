"""Client-side bridge: subscribe on a source broker, transform, republish.

Deployment plans follow the two architectures under test: AUT 1 runs one
bridge per data provider, AUT 2 one bridge per sensor-hub stream.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .client import InboundMessage, MQTTClient, PublishOutcome
from .codec import SubscribeOptions
from .errors import BridgeBenchError, ConfigInvalid, InvalidTopology, MalformedPayload
from .topics import (
    SCHEME_EXPLICIT,
    SCHEME_WILDCARD,
    bridge_output_topic,
    matches,
    provider_filter,
    scheme_topic_bytes,
)

log = logging.getLogger(__name__)

MODE_SYNC = "sync"
MODE_ASYNC = "async"

_W = _kernels.RECORD_WIDTH


@dataclass(frozen=True)
class TransformSpec:
    mode: str = "identity"  # identity | unify
    ratio: float = 1.0

    def __post_init__(self):
        if self.mode not in ("identity", "unify"):
            raise ConfigInvalid(f"transform mode must be identity or unify, got {self.mode!r}")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigInvalid("transform ratio must be in (0, 1]")


def _parse_sensor_document(payload: bytes) -> tuple[int, int, np.ndarray]:
    """Return (hub_id, seq, records[n, W]) of a synthetic sensor document."""
    nl = payload.find(b"\n")
    if nl < 0 or not payload.startswith(b"H,"):
        raise MalformedPayload("missing sensor header")
    fields = payload[:nl].rstrip(b" ").split(b",")
    if len(fields) != 4:
        raise MalformedPayload("bad sensor header")
    try:
        hub_id, seq, n = (int(f) for f in fields[1:])
    except ValueError:
        raise MalformedPayload("non-numeric sensor header field") from None
    body = payload[nl + 1:]
    if n < 0 or len(body) != n * _W:
        raise MalformedPayload(f"expected {n} records, body has {len(body)} bytes")
    recs = np.frombuffer(body, dtype=np.uint8).reshape(n, _W)
    if n and (np.any(recs[:, 0] != ord("R")) or np.any(recs[:, _W - 1] != ord("\n"))
              or np.any(recs[:, [1, 5, 16, 21]] != ord(","))):
        raise MalformedPayload("corrupted sensor record framing")
    digit_cols = np.r_[2:5, 6:16, 23:29, 30:33]
    if n and np.any((recs[:, digit_cols] < 48) | (recs[:, digit_cols] > 57)):
        raise MalformedPayload("non-digit in numeric sensor field")
    return hub_id, seq, recs


def _digits_value(recs: np.ndarray, start: int, width: int) -> np.ndarray:
    cols = recs[:, start:start + width].astype(np.int64) - 48
    weights = 10 ** np.arange(width - 1, -1, -1, dtype=np.int64)
    return cols @ weights


def transform(spec: TransformSpec, payload: bytes, provider_id: int) -> bytes:
    """Identity passes bytes through; unify merges sensor records into the
    canonical (hub, timestamp, parameter, value) stream, keeping about
    ``ratio`` of the input size plus a one-line envelope."""
    if spec.mode == "identity":
        return payload
    hub_id, seq, recs = _parse_sensor_document(payload)
    n = recs.shape[0]
    keep = min(n, max(1, int(round(spec.ratio * n)))) if n else 0
    envelope = f"UNIFIED,provider={provider_id},hub={hub_id},seq={seq},n={keep}\n".encode("ascii")
    if keep == 0:
        return envelope
    values = _digits_value(recs, 23, 6) * 1000 + _digits_value(recs, 30, 3)
    values = np.where(recs[:, 22] == ord("-"), -values, values)
    starts = (np.arange(keep, dtype=np.int64) * n) // keep
    sums = np.add.reduceat(values, starts)
    counts = np.diff(np.append(starts, n))
    merged = np.round(sums / counts).astype(np.int64)
    out = recs[starts].copy()
    out[:, 0] = ord("U")
    out[:, 22] = np.where(merged < 0, ord("-"), ord("+"))
    mag = np.abs(merged)
    for k, col in enumerate(range(28, 22, -1)):
        out[:, col] = 48 + (mag // 1000 // 10 ** k) % 10
    for k, col in enumerate(range(32, 29, -1)):
        out[:, col] = 48 + (mag % 1000 // 10 ** k) % 10
    return envelope + out.tobytes()


@dataclass(frozen=True)
class BridgeSpec:
    name: str
    provider_id: int
    source_address: str
    destination_address: str
    filters: tuple[str, ...]
    topic_map: dict[str, str]
    qos: int = 1
    mode: str = MODE_SYNC
    transform: TransformSpec = TransformSpec()
    options: SubscribeOptions | None = None

    def __post_init__(self):
        if self.mode not in (MODE_SYNC, MODE_ASYNC):
            raise ConfigInvalid(f"republish mode must be sync or async, got {self.mode!r}")
        if self.options is not None and not self.options.no_local:
            raise ConfigInvalid("bridge subscriptions must set no_local")
        for out in self.topic_map.values():
            for topic_filter in self.filters:
                if matches(topic_filter, out):
                    raise ConfigInvalid(f"output topic {out} matches bridge filter {topic_filter}")

    @property
    def subscribe_options(self) -> SubscribeOptions:
        return self.options or SubscribeOptions(self.qos, no_local=True, retain_as_published=True)

    def output_topic(self, topic: str) -> str:
        return self.topic_map[topic]


@dataclass(frozen=True)
class DeploymentPlan:
    aut: int
    scheme: str
    bridges: tuple[BridgeSpec, ...]
    bridge_topic_bytes: int


def source_broker_name(provider_id: int) -> str:
    return f"source-{provider_id}"


DESTINATION_BROKER = "destination"


def plan_deployment(providers, aut: int, scheme: str = SCHEME_WILDCARD, qos: int = 1,
                    mode: str = MODE_SYNC, transform_mode: str = "unify",
                    address: Callable[[str], str] = lambda name: f"mem://{name}") -> DeploymentPlan:
    """AUT 1: one bridge per provider; AUT 2: one bridge per hub stream."""
    providers = list(providers)
    if not providers:
        raise InvalidTopology("no providers")
    if aut not in (1, 2):
        raise InvalidTopology(f"aut must be 1 or 2, got {aut!r}")
    if scheme not in (SCHEME_WILDCARD, SCHEME_EXPLICIT):
        raise InvalidTopology(f"unknown topic scheme {scheme!r}")
    bridges = []
    dst = address(DESTINATION_BROKER)
    for prov in providers:
        hubs = prov.hubs
        if not hubs:
            raise InvalidTopology(f"provider {prov.provider_id} has no hubs")
        src = address(source_broker_name(prov.provider_id))
        tspec = TransformSpec(transform_mode, prov.transform_ratio)
        topic_map = {h.topic: bridge_output_topic(prov.provider_id, g.gateway_id, h.hub_id, scheme)
                     for g, h in hubs}
        if aut == 1:
            if scheme == SCHEME_WILDCARD:
                filters = (provider_filter(prov.provider_id),)
            else:
                filters = tuple(h.topic for _, h in hubs)
            bridges.append(BridgeSpec(f"bridge-p{prov.provider_id}", prov.provider_id, src, dst,
                                      filters, topic_map, qos, mode, tspec))
        else:
            for g, h in hubs:
                bridges.append(BridgeSpec(
                    f"bridge-p{prov.provider_id}g{g.gateway_id}h{h.hub_id}", prov.provider_id, src, dst,
                    (h.topic,), {h.topic: topic_map[h.topic]}, qos, mode, tspec))
    return DeploymentPlan(aut, scheme, tuple(bridges), scheme_topic_bytes(scheme))


@dataclass
class BridgeStats:
    received: int = 0
    forwarded: int = 0
    transform_failed: int = 0
    dropped_queue: int = 0
    publish_failed: int = 0
    per_topic_in: dict[str, int] = field(default_factory=dict)
    forwarding_delay_us: list[int] = field(default_factory=list)


class Bridge:
    def __init__(self, spec: BridgeSpec, inbound: MQTTClient, outbound: MQTTClient,
                 queue_capacity: int = 1000, reconnect_interval: float = 1.0):
        self.spec = spec
        self.inbound = inbound
        self.outbound = outbound
        self.stats = BridgeStats()
        self.queue_capacity = queue_capacity
        self.reconnect_interval = reconnect_interval
        self._queue: asyncio.Queue[InboundMessage] = asyncio.Queue()
        self._worker: asyncio.Task | None = None
        self._pending: set[asyncio.Task] = set()
        self._busy = False

    async def start(self) -> None:
        await self.outbound.connect()
        await self.inbound.connect()
        for topic_filter in self.spec.filters:
            await self.inbound.subscribe(topic_filter, self.spec.subscribe_options, self._on_message)
        self._worker = asyncio.ensure_future(self._run())

    @property
    def idle(self) -> bool:
        return self._queue.empty() and not self._busy and not self._pending

    def _on_message(self, msg: InboundMessage) -> None:
        self.stats.received += 1
        self.stats.per_topic_in[msg.topic] = self.stats.per_topic_in.get(msg.topic, 0) + 1
        if self._queue.qsize() >= self.queue_capacity:
            self.stats.dropped_queue += 1
            return
        self._queue.put_nowait(msg)

    async def _ensure_outbound(self) -> None:
        while not self.outbound.connected:
            try:
                await self.outbound.connect()
            except (BridgeBenchError, OSError) as exc:
                log.debug("%s: destination reconnect failed: %s", self.spec.name, exc)
                await asyncio.sleep(self.reconnect_interval)

    async def _run(self) -> None:
        while True:
            msg = await self._queue.get()
            self._busy = True
            try:
                try:
                    payload = transform(self.spec.transform, msg.payload, self.spec.provider_id)
                except MalformedPayload as exc:
                    log.debug("%s: transform failed: %s", self.spec.name, exc)
                    self.stats.transform_failed += 1
                    continue
                await self._ensure_outbound()
                out_topic = self.spec.output_topic(msg.topic)
                if self.spec.mode == MODE_SYNC:
                    self._account(msg, await self.outbound.publish(
                        out_topic, payload, self.spec.qos, msg.user_properties))
                else:
                    task = asyncio.ensure_future(self.outbound.publish(
                        out_topic, payload, self.spec.qos, msg.user_properties))
                    self._pending.add(task)
                    task.add_done_callback(lambda t, m=msg: self._async_done(t, m))
            finally:
                self._busy = False

    def _async_done(self, task: asyncio.Task, msg: InboundMessage) -> None:
        self._pending.discard(task)
        if not task.cancelled() and task.exception() is None:
            self._account(msg, task.result())

    def _account(self, msg: InboundMessage, outcome: PublishOutcome) -> None:
        if outcome.ok:
            self.stats.forwarded += 1
            self.stats.forwarding_delay_us.append(outcome.t_complete - msg.arrival_us)
        else:
            self.stats.publish_failed += 1

    async def stop(self) -> None:
        if self._worker is not None:
            self._worker.cancel()
            await asyncio.gather(self._worker, return_exceptions=True)
        for task in list(self._pending):
            task.cancel()
        await self.inbound.disconnect()
        await self.outbound.disconnect()
