"""Seeded network impairment between clients and brokers.

Each client owns one ``Link`` to its broker.  Every MQTT packet crossing
the link is either dropped or delivered after a delay.  Drop and jitter
draws come from a counter-based hash of (seed, link id, direction,
ordinal), so outcomes do not depend on scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import _kernels
from .errors import ConfigInvalid

UP = 0  # client -> broker
DOWN = 1  # broker -> client
DIRECTION_NAMES = {UP: "up", DOWN: "down"}

_STREAM_DROP = 0
_STREAM_JITTER = 1

FIFO_EPSILON_S = 1e-6


@dataclass(frozen=True)
class LinkProfile:
    one_way_delay_ms: float = 0.0
    jitter_ms: float = 0.0
    bandwidth_bps: float = 0.0  # bytes per second, 0 = unlimited
    segment_size: int = 1460
    segment_loss_p: float = 0.0
    seed: int = 0
    per_connection_overhead_ms: float = 0.0
    loss_direction: str = "both"  # both | up | down

    def __post_init__(self):
        if not 0.0 <= self.segment_loss_p <= 1.0:
            raise ConfigInvalid(f"segment_loss_p must be in [0, 1], got {self.segment_loss_p}")
        if self.one_way_delay_ms < 0:
            raise ConfigInvalid("one_way_delay_ms must be >= 0")
        if not 0 <= self.jitter_ms <= self.one_way_delay_ms:
            raise ConfigInvalid("jitter_ms must be within [0, one_way_delay_ms]")
        if self.bandwidth_bps < 0:
            raise ConfigInvalid("bandwidth_bps must be >= 0")
        if self.segment_size < 1:
            raise ConfigInvalid("segment_size must be >= 1")
        if self.per_connection_overhead_ms < 0:
            raise ConfigInvalid("per_connection_overhead_ms must be >= 0")
        if self.loss_direction not in ("both", "up", "down"):
            raise ConfigInvalid(f"loss_direction must be both/up/down, got {self.loss_direction!r}")

    def with_seed(self, seed: int) -> LinkProfile:
        return LinkProfile(**{**self.__dict__, "seed": seed})

    def loss_for(self, direction: int) -> float:
        if self.loss_direction == "both" or self.loss_direction == DIRECTION_NAMES[direction]:
            return self.segment_loss_p
        return 0.0


@dataclass(frozen=True)
class DropDecision:
    link: str
    direction: int
    ordinal: int
    dropped: bool


def drop_probability(nbytes: int, profile: LinkProfile, direction: int = UP) -> float:
    """1 - (1 - p)^ceil(n / segment_size) for a packet of ``nbytes``."""
    return _kernels.segment_drop_probability(nbytes, profile.loss_for(direction), profile.segment_size)


def link_key(link_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(link_id.encode("utf-8"), digest_size=8).digest(), "big")


class Host:
    """Groups links that share one machine.

    Each packet on a link of a host with k open connections pays
    ``per_connection_overhead_ms * (k - 1)`` of dispatch delay.
    """

    def __init__(self, name: str):
        self.name = name
        self.open_connections = 0


@dataclass
class Link:
    link_id: str
    profile: LinkProfile
    host: Host | None = None
    trace: list[DropDecision] = field(default_factory=list)
    record_trace: bool = True

    def __post_init__(self):
        self._key = link_key(self.link_id)
        self._ordinal = [0, 0]
        self._sizes: list[list[int]] = [[], []]
        # per-direction delivery watermark keeps FIFO order
        self._last_delivery = [-1.0, -1.0]

    def next_ordinal(self, direction: int) -> int:
        return self._ordinal[direction]

    def decide(self, direction: int, nbytes: int) -> tuple[int, bool]:
        ordinal = self._ordinal[direction]
        self._ordinal[direction] += 1
        p = drop_probability(nbytes, self.profile, direction)
        if p <= 0.0:
            dropped = False
        elif p >= 1.0:
            dropped = True
        else:
            u = _kernels.counter_uniform(self.profile.seed, self._key, direction, _STREAM_DROP, ordinal)
            dropped = u < p
        self._sizes[direction].append(nbytes)
        if self.record_trace:
            self.trace.append(DropDecision(self.link_id, direction, ordinal, dropped))
        return ordinal, dropped

    def latency(self, direction: int, ordinal: int, nbytes: int, connecting: bool = False) -> float:
        """Seconds from send to delivery, before FIFO adjustment."""
        prof = self.profile
        delay_ms = prof.one_way_delay_ms
        if prof.jitter_ms:
            u = _kernels.counter_uniform(prof.seed, self._key, direction, _STREAM_JITTER, ordinal)
            delay_ms += (2.0 * u - 1.0) * prof.jitter_ms
        if prof.per_connection_overhead_ms:
            if connecting:
                delay_ms += prof.per_connection_overhead_ms
            if self.host is not None and self.host.open_connections > 1:
                delay_ms += prof.per_connection_overhead_ms * (self.host.open_connections - 1)
        seconds = delay_ms / 1000.0
        if prof.bandwidth_bps:
            seconds += nbytes / prof.bandwidth_bps
        return seconds

    def transit(self, direction: int, nbytes: int, now: float, connecting: bool = False) -> float | None:
        """Absolute delivery time for a packet sent at ``now``, or None if dropped."""
        ordinal, dropped = self.decide(direction, nbytes)
        if dropped:
            return None
        return self._after_watermark(direction, now + self.latency(direction, ordinal, nbytes, connecting))

    def close_time(self, direction: int, now: float) -> float:
        """Time a connection close sent now would arrive (after queued data)."""
        return self._after_watermark(direction, now + self.profile.one_way_delay_ms / 1000.0)

    def _after_watermark(self, direction: int, at: float) -> float:
        # strictly increasing: a frame never ties with the one before it, so
        # the receiver drains an old connection before a new one's CONNECT
        at = max(at, self._last_delivery[direction] + FIFO_EPSILON_S)
        self._last_delivery[direction] = at
        return at

    def drop_trace(self) -> list[DropDecision]:
        return list(self.trace)

    def replay_trace(self) -> list[DropDecision]:
        """Recompute the decision log from the seed and the recorded sizes.

        Uses the batch kernels, so it doubles as a cross-check of the scalar
        per-packet path.
        """
        out = []
        for direction in (UP, DOWN):
            sizes = np.asarray(self._sizes[direction], dtype=np.int64)
            if sizes.size == 0:
                continue
            ordinals = np.arange(sizes.size, dtype=np.uint64)
            u = _kernels.uniform_batch(self.profile.seed, self._key, direction, _STREAM_DROP, ordinals)
            p = _kernels.drop_probability(sizes, self.profile.loss_for(direction), self.profile.segment_size)
            dropped = np.where(p >= 1.0, True, np.where(p <= 0.0, False, u < p))
            out.extend(DropDecision(self.link_id, direction, i, bool(d)) for i, d in enumerate(dropped))
        return out


def expected_drop_sd(n_packets: int, p: float) -> float:
    return math.sqrt(n_packets * p * (1.0 - p))


DROPS_HEADER = ("run_id", "link", "direction", "ordinal", "dropped")


def write_drops_csv(rows: Iterable[tuple[str, DropDecision]], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(DROPS_HEADER)
    for run_id, d in rows:
        writer.writerow((run_id, d.link, DIRECTION_NAMES[d.direction], d.ordinal, int(d.dropped)))


def drops_csv_text(rows: Iterable[tuple[str, DropDecision]]) -> str:
    buf = io.StringIO()
    write_drops_csv(rows, buf)
    return buf.getvalue()
