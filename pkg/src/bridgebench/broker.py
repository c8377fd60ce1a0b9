"""Single-instance MQTT 5 broker.

``Broker`` is the protocol state machine: it consumes decoded packets for a
session and returns the packets to emit (possibly to other sessions).  It
performs no I/O.  ``BrokerServer`` binds it to channels from a
``MemoryNetwork`` or a TCP listener and runs keep-alive and retransmission
timers.
"""

from __future__ import annotations

import asyncio
import collections
import dataclasses
import json
import logging
from dataclasses import dataclass, field

from . import codec
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
from .errors import BrokerStartFailure, CodecError, ProtocolError
from .topics import SubscriptionTrie, TopicFilter, TopicName
from .transport import MemoryNetwork, PacketChannel, RawEndpoint, TcpEndpoint

log = logging.getLogger(__name__)

PACKET_ID_NOT_FOUND = 0x92


@dataclass(frozen=True)
class BrokerConfig:
    name: str = "broker"
    queue_capacity: int = 1000
    max_inflight: int = 20
    retry_interval: float = 1.0
    max_retries: int | None = 10
    max_packet_size: int = codec.VARINT_MAX + 5
    credentials: dict[str, str] | None = None
    connect_timeout: float = 10.0


@dataclass(frozen=True)
class Message:
    topic: str
    payload: bytes
    qos: int
    retain: bool
    user_properties: tuple[tuple[str, str], ...]
    publisher_id: str


@dataclass
class InflightMessage:
    message: Message
    qos: int
    stage: str  # "puback" | "pubrec" | "pubcomp"
    deadline: float
    retries: int = 0
    retain: bool = False


@dataclass
class SessionState:
    client_id: str
    clean_start: bool = True
    keep_alive: int = 60
    subscriptions: dict[str, SubscribeOptions] = field(default_factory=dict)
    inbound_qos2: dict[int, Message] = field(default_factory=dict)
    outbound_inflight: dict[int, InflightMessage] = field(default_factory=dict)
    outbound_queue: collections.deque = field(default_factory=collections.deque)
    next_packet_id: int = 1

    @property
    def inbound_qos2_ids(self) -> set[int]:
        return set(self.inbound_qos2)

    def allocate_packet_id(self) -> int:
        for _ in range(0xFFFF):
            pid = self.next_packet_id
            self.next_packet_id = pid % 0xFFFF + 1
            if pid not in self.outbound_inflight:
                return pid
        raise ProtocolError("no free packet identifier", codec.QUOTA_EXCEEDED)


@dataclass
class BrokerCounters:
    publishes_received: int = 0
    messages_forwarded: int = 0
    messages_dropped_queue: int = 0
    duplicates_suppressed: int = 0
    messages_unrouted: int = 0
    deliveries: int = 0
    retransmissions: int = 0
    retries_exhausted: int = 0
    connections_accepted: int = 0
    per_topic_received: dict[str, int] = field(default_factory=dict)
    per_topic_suppressed: dict[str, int] = field(default_factory=dict)

    def copy(self) -> BrokerCounters:
        return dataclasses.replace(self, per_topic_received=dict(self.per_topic_received),
                                   per_topic_suppressed=dict(self.per_topic_suppressed))

    def accepted(self, topic: str) -> int:
        """PUBLISH packets on ``topic`` minus suppressed QoS 2 retransmissions."""
        return self.per_topic_received.get(topic, 0) - self.per_topic_suppressed.get(topic, 0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class Send:
    client_id: str
    packet: ControlPacket


@dataclass(frozen=True)
class Close:
    client_id: str
    reason_code: int = codec.SUCCESS


Action = Send | Close


class Broker:
    def __init__(self, config: BrokerConfig | None = None):
        self.config = config or BrokerConfig()
        self.sessions: dict[str, SessionState] = {}
        self.subscriptions: SubscriptionTrie[SubscribeOptions] = SubscriptionTrie()
        self.counters = BrokerCounters()

    # -- session lifecycle ----------------------------------------------------

    def open_session(self, connect: Connect) -> tuple[SessionState | None, list[Action]]:
        """Handle CONNECT; returns the new session (None if refused)."""
        creds = self.config.credentials
        if creds is not None:
            password = connect.password.decode("utf-8", "replace") if connect.password is not None else None
            if connect.username is None or creds.get(connect.username) != password:
                return None, [Send(connect.client_id, Connack(False, codec.BAD_CREDENTIALS))]
        actions: list[Action] = []
        if connect.client_id in self.sessions:
            actions.append(Send(connect.client_id, Disconnect(codec.SESSION_TAKEN_OVER)))
            actions.append(Close(connect.client_id, codec.SESSION_TAKEN_OVER))
            self.close_session(connect.client_id)
        session = SessionState(connect.client_id, connect.clean_start, connect.keep_alive)
        self.sessions[connect.client_id] = session
        self.counters.connections_accepted += 1
        actions.append(Send(connect.client_id, Connack(False, codec.SUCCESS)))
        return session, actions

    def close_session(self, client_id: str) -> None:
        # clean start only: nothing survives the connection
        session = self.sessions.pop(client_id, None)
        if session is None:
            return
        for topic_filter in session.subscriptions:
            self.subscriptions.remove(topic_filter, client_id)

    # -- packet handling ------------------------------------------------------

    def handle_packet(self, session: SessionState, packet: ControlPacket, now: float = 0.0) -> list[Action]:
        try:
            return self._dispatch(session, packet, now)
        except ProtocolError as exc:
            log.debug("%s: protocol error from %s: %s", self.config.name, session.client_id, exc)
            return [Send(session.client_id, Disconnect(exc.reason_code)),
                    Close(session.client_id, exc.reason_code)]

    def _dispatch(self, session: SessionState, packet: ControlPacket, now: float) -> list[Action]:
        cid = session.client_id
        if isinstance(packet, Publish):
            return self._on_publish(session, packet, now)
        if isinstance(packet, Pubrel):
            message = session.inbound_qos2.pop(packet.packet_id, None)
            if message is None:
                return [Send(cid, Pubcomp(packet.packet_id, PACKET_ID_NOT_FOUND))]
            actions = self._forward(message, now)
            actions.append(Send(cid, Pubcomp(packet.packet_id)))
            return actions
        if isinstance(packet, Puback):
            entry = session.outbound_inflight.get(packet.packet_id)
            if entry is not None and entry.stage == "puback":
                del session.outbound_inflight[packet.packet_id]
                return self._drain_queue(session, now)
            return []
        if isinstance(packet, Pubrec):
            entry = session.outbound_inflight.get(packet.packet_id)
            if entry is None:
                return [Send(cid, Pubrel(packet.packet_id, PACKET_ID_NOT_FOUND))]
            if packet.reason_code >= 0x80:
                del session.outbound_inflight[packet.packet_id]
                return self._drain_queue(session, now)
            entry.stage = "pubcomp"
            entry.deadline = now + self.config.retry_interval
            return [Send(cid, Pubrel(packet.packet_id))]
        if isinstance(packet, Pubcomp):
            entry = session.outbound_inflight.get(packet.packet_id)
            if entry is not None and entry.stage == "pubcomp":
                del session.outbound_inflight[packet.packet_id]
                return self._drain_queue(session, now)
            return []
        if isinstance(packet, Subscribe):
            return self._on_subscribe(session, packet)
        if isinstance(packet, Unsubscribe):
            codes = []
            for topic_filter in packet.filters:
                if session.subscriptions.pop(topic_filter, None) is not None:
                    self.subscriptions.remove(topic_filter, cid)
                    codes.append(codec.SUCCESS)
                else:
                    codes.append(codec.NO_SUBSCRIPTION_EXISTED)
            return [Send(cid, Unsuback(packet.packet_id, tuple(codes)))]
        if isinstance(packet, Pingreq):
            return [Send(cid, Pingresp())]
        if isinstance(packet, Disconnect):
            return [Close(cid, packet.reason_code)]
        if isinstance(packet, Connect):
            raise ProtocolError("second CONNECT on an established session")
        raise ProtocolError(f"unexpected {packet.packet_type.name} from client")

    def _on_publish(self, session: SessionState, packet: Publish, now: float) -> list[Action]:
        c = self.counters
        c.publishes_received += 1
        c.per_topic_received[packet.topic] = c.per_topic_received.get(packet.topic, 0) + 1
        message = Message(packet.topic, packet.payload, packet.qos, packet.retain,
                          packet.user_properties, session.client_id)
        cid = session.client_id
        if packet.qos == 0:
            return self._forward(message, now)
        if packet.qos == 1:
            actions = self._forward(message, now)
            actions.append(Send(cid, Puback(packet.packet_id)))
            return actions
        # QoS 2: hold until PUBREL
        if packet.packet_id in session.inbound_qos2:
            c.duplicates_suppressed += 1
            c.per_topic_suppressed[packet.topic] = c.per_topic_suppressed.get(packet.topic, 0) + 1
        else:
            session.inbound_qos2[packet.packet_id] = message
        return [Send(cid, Pubrec(packet.packet_id))]

    def _on_subscribe(self, session: SessionState, packet: Subscribe) -> list[Action]:
        codes = []
        for text, options in packet.subscriptions:
            try:
                TopicFilter.parse(text)
            except ValueError:
                codes.append(codec.TOPIC_FILTER_INVALID)
                continue
            session.subscriptions[text] = options
            self.subscriptions.insert(text, session.client_id, options)
            codes.append(options.max_qos)
        return [Send(session.client_id, Suback(packet.packet_id, tuple(codes)))]

    # -- routing --------------------------------------------------------------

    def route(self, topic: TopicName | str, publisher_id: str, qos: int = 2) -> list[tuple[str, int, bool]]:
        """Sessions receiving a publish: (client_id, delivery qos, retain_as_published).

        Overlapping filters on one session yield a single delivery at the
        highest granted QoS; ``no_local`` subscriptions never match the
        publisher's own session.
        """
        best: dict[str, tuple[int, bool]] = {}
        for client_id, options in self.subscriptions.match(topic):
            if options.no_local and client_id == publisher_id:
                continue
            granted = min(qos, options.max_qos)
            prev = best.get(client_id)
            if prev is None:
                best[client_id] = (granted, options.retain_as_published)
            else:
                best[client_id] = (max(prev[0], granted), prev[1] or options.retain_as_published)
        return [(cid, q, rap) for cid, (q, rap) in best.items()]

    def _forward(self, message: Message, now: float) -> list[Action]:
        targets = self.route(message.topic, message.publisher_id, message.qos)
        if not targets:
            self.counters.messages_unrouted += 1
            return []
        actions: list[Action] = []
        delivered = 0
        for client_id, qos, rap in targets:
            session = self.sessions.get(client_id)
            if session is None:
                continue
            retain = message.retain if rap else False
            if self._deliver(session, message, qos, retain, now, actions):
                delivered += 1
        if delivered:
            self.counters.messages_forwarded += 1
        return actions

    def _deliver(self, session: SessionState, message: Message, qos: int, retain: bool,
                 now: float, actions: list[Action]) -> bool:
        c = self.counters
        if qos == 0:
            c.deliveries += 1
            actions.append(Send(session.client_id, Publish(
                message.topic, message.payload, 0, False, retain, None, message.user_properties)))
            return True
        if len(session.outbound_inflight) < self.config.max_inflight:
            actions.append(self._start_inflight(session, message, qos, retain, now))
            return True
        if len(session.outbound_queue) < self.config.queue_capacity:
            session.outbound_queue.append((message, qos, retain))
            return True
        c.messages_dropped_queue += 1
        return False

    def _start_inflight(self, session: SessionState, message: Message, qos: int,
                        retain: bool, now: float) -> Send:
        pid = session.allocate_packet_id()
        session.outbound_inflight[pid] = InflightMessage(
            message, qos, "puback" if qos == 1 else "pubrec", now + self.config.retry_interval, 0, retain)
        self.counters.deliveries += 1
        return Send(session.client_id, Publish(
            message.topic, message.payload, qos, False, retain, pid, message.user_properties))

    def _drain_queue(self, session: SessionState, now: float) -> list[Action]:
        actions: list[Action] = []
        while session.outbound_queue and len(session.outbound_inflight) < self.config.max_inflight:
            message, qos, retain = session.outbound_queue.popleft()
            actions.append(self._start_inflight(session, message, qos, retain, now))
        return actions

    # -- timers ---------------------------------------------------------------

    def retransmit_sweep(self, session: SessionState, now: float) -> list[Action]:
        actions: list[Action] = []
        limit = self.config.max_retries
        exhausted = False
        for pid, entry in list(session.outbound_inflight.items()):
            if entry.deadline > now:
                continue
            if limit is not None and entry.retries >= limit:
                del session.outbound_inflight[pid]
                self.counters.retries_exhausted += 1
                exhausted = True
                continue
            entry.retries += 1
            entry.deadline = now + self.config.retry_interval
            self.counters.retransmissions += 1
            if entry.stage == "pubcomp":
                actions.append(Send(session.client_id, Pubrel(pid)))
            else:
                m = entry.message
                actions.append(Send(session.client_id, Publish(
                    m.topic, m.payload, entry.qos, True, entry.retain, pid, m.user_properties)))
        if exhausted:
            actions.extend(self._drain_queue(session, now))
        return actions

    def next_deadline(self) -> float | None:
        deadlines = [e.deadline for s in self.sessions.values() for e in s.outbound_inflight.values()]
        return min(deadlines) if deadlines else None

    def counters_snapshot(self) -> BrokerCounters:
        return self.counters.copy()


class BrokerServer:
    """Runs a ``Broker`` over real or in-memory connections."""

    def __init__(self, config: BrokerConfig | None = None):
        self.broker = Broker(config)
        self.config = self.broker.config
        self._channels: dict[str, PacketChannel] = {}
        self._tasks: set[asyncio.Task] = set()
        self._sweeper: asyncio.Task | None = None
        self._wake: asyncio.Event | None = None
        self._tcp_server: asyncio.base_events.Server | None = None
        self._network: MemoryNetwork | None = None
        self.address: str | None = None

    async def start(self, network: MemoryNetwork | None = None, host: str = "127.0.0.1",
                    port: int | None = None) -> str:
        self._wake = asyncio.Event()
        self._sweeper = asyncio.ensure_future(self._sweep_loop())
        if port is None:
            if network is None:
                raise BrokerStartFailure("need a memory network or a TCP port")
            self._network = network
            try:
                self.address = network.listen(self.config.name, self.accept)
            except OSError as exc:
                raise BrokerStartFailure(str(exc)) from exc
        else:
            try:
                self._tcp_server = await asyncio.start_server(self._on_tcp, host, port)
            except OSError as exc:
                raise BrokerStartFailure(str(exc)) from exc
            bound = self._tcp_server.sockets[0].getsockname()
            self.address = f"tcp://{bound[0]}:{bound[1]}"
        return self.address

    async def stop(self) -> None:
        if self._network is not None:
            self._network.unlisten(self.config.name)
        if self._tcp_server is not None:
            self._tcp_server.close()
            await self._tcp_server.wait_closed()
        for channel in list(self._channels.values()):
            channel.close()
        tasks = list(self._tasks)
        if self._sweeper is not None:
            tasks.append(self._sweeper)
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)

    def counters_snapshot(self) -> BrokerCounters:
        return self.broker.counters_snapshot()

    def write_counters(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.counters_snapshot().to_json() + "\n")

    async def _on_tcp(self, reader, writer) -> None:
        await self.accept(TcpEndpoint(reader, writer, self.config.max_packet_size))

    async def accept(self, raw: RawEndpoint) -> None:
        task = asyncio.current_task()
        if task is not None:
            self._tasks.add(task)
        try:
            await self._serve(PacketChannel(raw))
        finally:
            if task is not None:
                self._tasks.discard(task)

    def _execute(self, actions: list[Action]) -> None:
        for action in actions:
            channel = self._channels.get(action.client_id)
            if isinstance(action, Send):
                if channel is not None:
                    channel.send(action.packet)
            else:
                if channel is not None:
                    channel.close()
        if self.broker.next_deadline() is not None and self._wake is not None:
            self._wake.set()

    async def _serve(self, channel: PacketChannel) -> None:
        loop = asyncio.get_running_loop()
        try:
            first = await asyncio.wait_for(channel.recv(), self.config.connect_timeout)
        except (asyncio.TimeoutError, CodecError):
            channel.close()
            return
        if not isinstance(first, Connect):
            channel.close()
            return
        session, actions = self.broker.open_session(first)
        old = self._channels.get(first.client_id)
        if session is None:
            channel.send(actions[0].packet)
            channel.close()
            return
        # the takeover Disconnect/Close target the previous channel
        self._execute(actions[:-1])
        if old is not None:
            old.close()
        self._channels[first.client_id] = channel
        self._execute(actions[-1:])
        cid = first.client_id
        timeout = session.keep_alive * 1.5 if session.keep_alive else None
        try:
            while not channel.closed:
                try:
                    packet = await asyncio.wait_for(channel.recv(), timeout)
                except asyncio.TimeoutError:
                    self._execute([Send(cid, Disconnect(codec.KEEP_ALIVE_TIMEOUT)), Close(cid)])
                    break
                except CodecError as exc:
                    log.debug("%s: malformed packet from %s: %s", self.config.name, cid, exc)
                    self._execute([Send(cid, Disconnect(codec.MALFORMED)), Close(cid)])
                    break
                if packet is None:
                    break
                if self._channels.get(cid) is not channel:
                    # taken over; frames still buffered on the old connection are void
                    break
                self._execute(self.broker.handle_packet(session, packet, loop.time()))
        finally:
            if self._channels.get(cid) is channel:
                del self._channels[cid]
                if self.broker.sessions.get(cid) is session:
                    self.broker.close_session(cid)
            channel.close()

    async def _sweep_loop(self) -> None:
        loop = asyncio.get_running_loop()
        while True:
            deadline = self.broker.next_deadline()
            if deadline is None:
                self._wake.clear()
                await self._wake.wait()
                continue
            delay = deadline - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            now = loop.time()
            for session in list(self.broker.sessions.values()):
                self._execute(self.broker.retransmit_sweep(session, now))
