"""Byte transports and packet channels.

A raw endpoint moves whole MQTT frames (``bytes``) and signals EOF with
``None``.  Two kinds exist: in-memory pipes registered on a
``MemoryNetwork`` and TCP streams.  ``PacketChannel`` adds the codec on
top; ``ImpairedChannel`` additionally routes every frame through a
``Link`` in both directions.
"""

from __future__ import annotations

import asyncio
import collections
from typing import Awaitable, Callable, Protocol

from .codec import VARINT_MAX, Connect, ControlPacket, PacketReader, decode, encode
from .netem import DOWN, UP, Link


class RawEndpoint(Protocol):
    def send_bytes(self, data: bytes) -> None: ...

    async def recv_bytes(self) -> bytes | None: ...

    def close(self) -> None: ...


AcceptCallback = Callable[[RawEndpoint], Awaitable[None]]


class MemoryEndpoint:
    def __init__(self, name: str):
        self.name = name
        self.peer: MemoryEndpoint | None = None
        self._inbox: asyncio.Queue[bytes | None] = asyncio.Queue()
        self._closed = False

    def send_bytes(self, data: bytes) -> None:
        if self._closed or self.peer is None or self.peer._closed:
            return
        self.peer._inbox.put_nowait(data)

    async def recv_bytes(self) -> bytes | None:
        if self._closed and self._inbox.empty():
            return None
        return await self._inbox.get()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._inbox.put_nowait(None)
        if self.peer is not None and not self.peer._closed:
            self.peer._inbox.put_nowait(None)


class MemoryNetwork:
    """Address registry for in-process brokers (``mem://<name>``)."""

    def __init__(self):
        self._listeners: dict[str, AcceptCallback] = {}
        self._tasks: set[asyncio.Task] = set()

    def listen(self, name: str, accept: AcceptCallback) -> str:
        if name in self._listeners:
            raise OSError(f"address already in use: mem://{name}")
        self._listeners[name] = accept
        return f"mem://{name}"

    def unlisten(self, name: str) -> None:
        self._listeners.pop(name, None)

    async def connect(self, address: str) -> MemoryEndpoint:
        name = address.removeprefix("mem://")
        accept = self._listeners.get(name)
        if accept is None:
            raise ConnectionRefusedError(f"nothing listening on {address}")
        client, server = MemoryEndpoint(f"{name}:client"), MemoryEndpoint(f"{name}:server")
        client.peer, server.peer = server, client
        task = asyncio.ensure_future(accept(server))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return client


class TcpEndpoint:
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                 max_packet_size: int = VARINT_MAX + 5):
        self._reader = reader
        self._writer = writer
        self._splitter = PacketReader(max_packet_size)
        self._frames: collections.deque[bytes] = collections.deque()
        self._eof = False

    def send_bytes(self, data: bytes) -> None:
        if not self._writer.is_closing():
            self._writer.write(data)

    async def recv_bytes(self) -> bytes | None:
        while not self._frames:
            if self._eof:
                return None
            try:
                chunk = await self._reader.read(65536)
            except (ConnectionError, OSError):
                chunk = b""
            if not chunk:
                self._eof = True
                return None
            self._frames.extend(self._splitter.split(chunk))
        return self._frames.popleft()

    def close(self) -> None:
        if not self._writer.is_closing():
            self._writer.close()


async def open_tcp(address: str) -> TcpEndpoint:
    host, _, port = address.removeprefix("tcp://").rpartition(":")
    reader, writer = await asyncio.open_connection(host or "127.0.0.1", int(port))
    return TcpEndpoint(reader, writer)


Opener = Callable[[str], Awaitable[RawEndpoint]]


def make_opener(network: MemoryNetwork | None = None) -> Opener:
    async def opener(address: str) -> RawEndpoint:
        if address.startswith("mem://"):
            if network is None:
                raise ConnectionRefusedError("no memory network configured")
            return await network.connect(address)
        if address.startswith("tcp://"):
            return await open_tcp(address)
        raise ValueError(f"unsupported address scheme: {address}")

    return opener


class PacketChannel:
    """Codec-level view of a raw endpoint (no impairment)."""

    def __init__(self, raw: RawEndpoint):
        self.raw = raw
        self.closed = False

    def send(self, packet: ControlPacket) -> None:
        if not self.closed:
            self.raw.send_bytes(encode(packet))

    async def recv(self) -> ControlPacket | None:
        frame = await self.raw.recv_bytes()
        if frame is None:
            return None
        return decode(frame)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.raw.close()


class DelayLine:
    """Releases callbacks in push order at non-decreasing times."""

    def __init__(self, loop: asyncio.AbstractEventLoop):
        self._loop = loop
        self._queue: collections.deque[tuple[float, Callable[[], None]]] = collections.deque()
        self._handle: asyncio.TimerHandle | None = None

    def push(self, at: float, fn: Callable[[], None]) -> None:
        self._queue.append((at, fn))
        if self._handle is None:
            self._arm()

    def _arm(self) -> None:
        at = self._queue[0][0]
        if at <= self._loop.time():
            self._handle = self._loop.call_soon(self._fire)
        else:
            self._handle = self._loop.call_at(at, self._fire)

    def _fire(self) -> None:
        self._handle = None
        now = self._loop.time() + 1e-9
        while self._queue and self._queue[0][0] <= now:
            _, fn = self._queue.popleft()
            fn()
        if self._queue:
            self._arm()

    def cancel(self) -> None:
        if self._handle is not None:
            self._handle.cancel()
            self._handle = None
        self._queue.clear()


class ImpairedChannel:
    """Client-side channel whose traffic crosses an emulated link."""

    def __init__(self, raw: RawEndpoint, link: Link):
        self.raw = raw
        self.link = link
        self.closed = False
        self._loop = asyncio.get_running_loop()
        self._up = DelayLine(self._loop)
        self._down = DelayLine(self._loop)
        self._inbox: asyncio.Queue[bytes | None] = asyncio.Queue()
        self._pump = asyncio.ensure_future(self._pump_down())
        if link.host is not None:
            link.host.open_connections += 1

    def send(self, packet: ControlPacket) -> None:
        if self.closed:
            return
        data = encode(packet)
        at = self.link.transit(UP, len(data), self._loop.time(), connecting=isinstance(packet, Connect))
        if at is not None:
            self._up.push(at, lambda: self.raw.send_bytes(data))

    async def _pump_down(self) -> None:
        while True:
            frame = await self.raw.recv_bytes()
            if frame is None:
                at = self.link.close_time(DOWN, self._loop.time())
                self._down.push(at, lambda: self._inbox.put_nowait(None))
                return
            at = self.link.transit(DOWN, len(frame), self._loop.time())
            if at is not None:
                self._down.push(at, lambda f=frame: self._inbox.put_nowait(f))

    async def recv(self) -> ControlPacket | None:
        frame = await self._inbox.get()
        if frame is None:
            self._inbox.put_nowait(None)
            return None
        return decode(frame)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self.link.host is not None:
            self.link.host.open_connections -= 1
        at = self.link.close_time(UP, self._loop.time())
        self._up.push(at, self.raw.close)
        self._pump.cancel()
        self._inbox.put_nowait(None)
