"""Asyncio MQTT 5 client used by gateways, bridges and the subscriber."""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Callable

from . import codec
from .clock import RunClock
from .codec import (
    Connack,
    Connect,
    ControlPacket,
    Disconnect,
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
from .errors import AuthFailure, CodecError, ConnectionLost, ConnectTimeout, SubackFailure
from .netem import Link
from .topics import TopicFilter, matches
from .transport import ImpairedChannel, Opener, PacketChannel

log = logging.getLogger(__name__)

TS_KEY = "ts_us"
SEQ_KEY = "seq"


@dataclass(frozen=True)
class ClientConfig:
    client_id: str
    address: str
    keep_alive: int = 60
    clean_start: bool = True
    username: str | None = None
    password: str | None = None
    ack_timeout: float = 1.0
    max_retries: int | None = 10
    connect_attempts: int = 10


@dataclass
class PublishOutcome:
    seq: int
    qos: int
    topic: str
    t_publish: int
    t_complete: int
    retries: int = 0
    ok: bool = True
    error: str = ""
    reconnects: int = 0

    @property
    def result(self) -> str:
        return "ok" if self.ok else "failed"


@dataclass(frozen=True)
class InboundMessage:
    topic: str
    payload: bytes
    qos: int
    dup: bool
    retain: bool
    user_properties: tuple[tuple[str, str], ...]
    arrival_us: int

    def property(self, key: str) -> str | None:
        for k, v in self.user_properties:
            if k == key:
                return v
        return None


Sink = Callable[[InboundMessage], None]


@dataclass
class _Subscription:
    topic_filter: str
    options: SubscribeOptions
    sink: Sink


@dataclass
class ClientStats:
    packets_sent: int = 0
    packets_received: int = 0
    pings_sent: int = 0
    connect_attempts: int = 0
    inbound_duplicates: int = 0
    sent_by_type: dict[str, int] = field(default_factory=dict)
    received_by_type: dict[str, int] = field(default_factory=dict)


class MQTTClient:
    def __init__(self, config: ClientConfig, opener: Opener, clock: RunClock, link: Link | None = None):
        self.config = config
        self._opener = opener
        self.clock = clock
        self.link = link
        self.stats = ClientStats()
        self.connected = False
        self._channel: ImpairedChannel | PacketChannel | None = None
        self._reader: asyncio.Task | None = None
        self._pinger: asyncio.Task | None = None
        self._waiters: dict[tuple[str, int], asyncio.Future] = {}
        self._connack: asyncio.Future | None = None
        self._subs: list[_Subscription] = []
        self._inbound_qos2: set[int] = set()
        self._next_pid = 1
        self._seq = 0
        self._last_send = 0.0
        self._loop = asyncio.get_running_loop()
        self._lost = asyncio.Event()

    # -- lifecycle ------------------------------------------------------------

    async def connect(self) -> MQTTClient:
        cfg = self.config
        password = cfg.password.encode("utf-8") if cfg.password is not None else None
        packet = Connect(cfg.client_id, cfg.clean_start, cfg.keep_alive, cfg.username, password)
        for attempt in range(1, cfg.connect_attempts + 1):
            self.stats.connect_attempts += 1
            raw = await self._opener(cfg.address)
            channel = ImpairedChannel(raw, self.link) if self.link is not None else PacketChannel(raw)
            self._start_channel(channel)
            self._connack = self._loop.create_future()
            self._send(packet)
            try:
                connack = await asyncio.wait_for(asyncio.shield(self._connack), cfg.ack_timeout)
            except (asyncio.TimeoutError, ConnectionLost):
                self._teardown(ConnectionLost("connect attempt abandoned"))
                continue
            # refusals first: the broker closes right after a failing CONNACK
            if connack.reason_code == codec.BAD_CREDENTIALS or connack.reason_code == codec.NOT_AUTHORIZED:
                self._teardown(AuthFailure("broker rejected credentials"))
                raise AuthFailure(f"{cfg.client_id}: CONNACK reason 0x{connack.reason_code:02x}")
            if connack.reason_code != codec.SUCCESS:
                self._teardown(ConnectionLost("connect refused"))
                raise ConnectionLost(f"{cfg.client_id}: CONNACK reason 0x{connack.reason_code:02x}")
            if self._channel is not channel:
                # closed between CONNACK arrival and this resumption
                continue
            self.connected = True
            if cfg.keep_alive:
                self._pinger = asyncio.ensure_future(self._keep_alive())
            return self
        raise ConnectTimeout(f"{cfg.client_id}: no CONNACK after {cfg.connect_attempts} attempt(s)")

    @property
    def last_connect_attempts(self) -> int:
        return self.stats.connect_attempts

    def _start_channel(self, channel) -> None:
        self._channel = channel
        self._lost = asyncio.Event()
        self._reader = asyncio.ensure_future(self._read_loop(channel))

    async def disconnect(self) -> None:
        if self._channel is None:
            return
        if self.connected:
            self._send(Disconnect())
        self._teardown(ConnectionLost("disconnected"))

    def _teardown(self, exc: Exception) -> None:
        self.connected = False
        channel, self._channel = self._channel, None
        if channel is not None:
            channel.close()
        for task in (self._reader, self._pinger):
            if task is not None and task is not asyncio.current_task():
                task.cancel()
        self._reader = self._pinger = None
        self._fail_waiters(exc)
        self._inbound_qos2.clear()
        self._lost.set()

    def _fail_waiters(self, exc: Exception) -> None:
        waiters = list(self._waiters.values())
        if self._connack is not None:
            waiters.append(self._connack)
        self._waiters.clear()
        for fut in waiters:
            if not fut.done():
                fut.set_exception(exc)
                fut.exception()  # mark retrieved

    # -- I/O ------------------------------------------------------------------

    def _send(self, packet: ControlPacket) -> None:
        if self._channel is None:
            raise ConnectionLost(f"{self.config.client_id}: not connected")
        self.stats.packets_sent += 1
        name = packet.packet_type.name
        self.stats.sent_by_type[name] = self.stats.sent_by_type.get(name, 0) + 1
        self._last_send = self._loop.time()
        self._channel.send(packet)

    async def _read_loop(self, channel) -> None:
        try:
            while True:
                try:
                    packet = await channel.recv()
                except CodecError as exc:
                    log.debug("%s: bad packet from broker: %s", self.config.client_id, exc)
                    packet = None
                if packet is None:
                    break
                self.stats.packets_received += 1
                name = packet.packet_type.name
                self.stats.received_by_type[name] = self.stats.received_by_type.get(name, 0) + 1
                self._on_packet(packet)
        except asyncio.CancelledError:
            raise
        if self._channel is channel:
            self._teardown(ConnectionLost("connection closed by broker"))

    def _on_packet(self, packet: ControlPacket) -> None:
        if isinstance(packet, Publish):
            self._on_publish(packet)
        elif isinstance(packet, Connack):
            if self._connack is not None and not self._connack.done():
                self._connack.set_result(packet)
        elif isinstance(packet, (Puback, Pubrec, Pubcomp, Suback, Unsuback)):
            fut = self._waiters.pop((packet.packet_type.name, packet.packet_id), None)
            if fut is not None and not fut.done():
                fut.set_result(packet)
            elif isinstance(packet, Pubrec):
                # late PUBREC for an exchange already past this stage
                self._send(Pubrel(packet.packet_id))
        elif isinstance(packet, Pubrel):
            self._inbound_qos2.discard(packet.packet_id)
            self._send(Pubcomp(packet.packet_id))
        elif isinstance(packet, Disconnect):
            self._teardown(ConnectionLost(f"broker sent DISCONNECT 0x{packet.reason_code:02x}"))
        elif isinstance(packet, Pingresp):
            pass

    def _on_publish(self, packet: Publish) -> None:
        arrival = self.clock.now_us()
        if packet.qos == 1:
            self._send(Puback(packet.packet_id))
        elif packet.qos == 2:
            if packet.packet_id in self._inbound_qos2:
                self.stats.inbound_duplicates += 1
                self._send(Pubrec(packet.packet_id))
                return
            self._inbound_qos2.add(packet.packet_id)
            self._send(Pubrec(packet.packet_id))
        msg = InboundMessage(packet.topic, packet.payload, packet.qos, packet.dup, packet.retain,
                             packet.user_properties, arrival)
        for sub in self._subs:
            if matches(sub.topic_filter, packet.topic):
                try:
                    sub.sink(msg)
                except Exception:
                    log.exception("%s: sink raised", self.config.client_id)

    async def _keep_alive(self) -> None:
        interval = self.config.keep_alive * 0.75
        while True:
            due = self._last_send + interval
            now = self._loop.time()
            if now < due:
                await asyncio.sleep(due - now)
                continue
            self.stats.pings_sent += 1
            self._send(Pingreq())

    def _allocate_pid(self) -> int:
        for _ in range(0xFFFF):
            pid = self._next_pid
            self._next_pid = pid % 0xFFFF + 1
            if not any(k[1] == pid for k in self._waiters):
                return pid
        raise ConnectionLost("packet identifiers exhausted")

    async def _exchange(self, build: Callable[[bool], ControlPacket], expect: str, pid: int) -> tuple[ControlPacket, int]:
        """Send until the expected ack arrives; returns (ack, retries)."""
        retries = 0
        limit = self.config.max_retries
        while True:
            if not self.connected:
                raise ConnectionLost(f"{self.config.client_id}: connection lost")
            fut = self._loop.create_future()
            self._waiters[(expect, pid)] = fut
            self._send(build(retries > 0))
            try:
                ack = await asyncio.wait_for(asyncio.shield(fut), self.config.ack_timeout)
                return ack, retries
            except asyncio.TimeoutError:
                self._waiters.pop((expect, pid), None)
                if limit is not None and retries >= limit:
                    raise
                retries += 1

    # -- public API -----------------------------------------------------------

    async def publish(self, topic: str, payload: bytes, qos: int = 0,
                      user_properties: tuple[tuple[str, str], ...] = (), seq: int | None = None) -> PublishOutcome:
        """Publish and wait for the QoS handshake to complete.

        ``ts_us`` and ``seq`` are stamped unless already present in
        ``user_properties`` (the bridge forwards them verbatim).
        """
        props = tuple(user_properties)
        keys = {k for k, _ in props}
        if seq is None:
            prior = next((v for k, v in props if k == SEQ_KEY), None)
            seq = int(prior) if prior is not None else self._seq
            if prior is None:
                self._seq += 1
        t_pub = self.clock.now_us()
        if TS_KEY not in keys:
            props += ((TS_KEY, str(t_pub)),)
        if SEQ_KEY not in keys:
            props += ((SEQ_KEY, str(seq)),)
        outcome = PublishOutcome(seq, qos, topic, t_pub, t_pub)
        # with unbounded retries a QoS>0 exchange survives reconnects and
        # resumes at its current stage (PUBLISH again, or PUBREL only)
        persist = qos > 0 and self.config.max_retries is None
        stage = "publish"
        while True:
            try:
                if qos == 0:
                    self._send(Publish(topic, payload, 0, False, False, None, props))
                elif qos == 1:
                    pid = self._allocate_pid()
                    _, r = await self._exchange(
                        lambda dup: Publish(topic, payload, 1, dup or stage == "resend", False, pid, props),
                        "PUBACK", pid)
                    outcome.retries += r
                else:
                    pid = self._allocate_pid()
                    if stage != "pubrel":
                        rec, r = await self._exchange(
                            lambda dup: Publish(topic, payload, 2, dup or stage == "resend", False, pid, props),
                            "PUBREC", pid)
                        outcome.retries += r
                        if rec.reason_code >= 0x80:
                            break
                        stage = "pubrel"
                    _, r = await self._exchange(lambda dup: Pubrel(pid), "PUBCOMP", pid)
                    outcome.retries += r
                break
            except asyncio.TimeoutError:
                outcome.ok = False
                outcome.error = "RetryExhausted"
                break
            except ConnectionLost as exc:
                if not persist:
                    outcome.ok = False
                    outcome.error = f"ConnectionLost: {exc}"
                    break
                outcome.reconnects += 1
                if stage == "publish":
                    stage = "resend"
                try:
                    await self._reconnect()
                except (AuthFailure, ConnectTimeout) as exc2:
                    outcome.ok = False
                    outcome.error = f"{type(exc2).__name__}: {exc2}"
                    break
        outcome.t_complete = self.clock.now_us()
        return outcome

    async def _reconnect(self) -> None:
        while not self.connected:
            try:
                await self.connect()
            except ConnectTimeout:
                continue
            except ConnectionLost:
                await asyncio.sleep(self.config.ack_timeout)

    async def subscribe(self, topic_filter: str, options: SubscribeOptions, sink: Sink) -> _Subscription:
        TopicFilter.parse(topic_filter)
        sub = _Subscription(topic_filter, options, sink)
        self._subs.append(sub)
        pid = self._allocate_pid()
        try:
            ack, _ = await self._exchange(
                lambda dup: Subscribe(pid, ((topic_filter, options),)), "SUBACK", pid)
        except (asyncio.TimeoutError, ConnectionLost) as exc:
            self._subs.remove(sub)
            raise SubackFailure(f"{self.config.client_id}: no SUBACK for {topic_filter}") from exc
        if not ack.reason_codes or ack.reason_codes[0] >= 0x80:
            self._subs.remove(sub)
            raise SubackFailure(f"{self.config.client_id}: SUBACK refused {topic_filter}: {ack.reason_codes}")
        return sub

    async def unsubscribe(self, topic_filter: str) -> None:
        pid = self._allocate_pid()
        await self._exchange(lambda dup: Unsubscribe(pid, (topic_filter,)), "UNSUBACK", pid)
        self._subs = [s for s in self._subs if s.topic_filter != topic_filter]

    async def wait_closed(self) -> None:
        await self._lost.wait()
