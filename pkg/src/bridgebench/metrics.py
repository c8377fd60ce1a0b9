"""Measuring subscriber and metric computation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import _kernels
from .client import SEQ_KEY, TS_KEY, InboundMessage, PublishOutcome


@dataclass(frozen=True)
class GatewayKey:
    provider: int
    gateway: int

    @property
    def label(self) -> str:
        return f"p{self.provider}g{self.gateway}"

    @property
    def index(self) -> int:
        return self.provider * 10_000 + self.gateway


@dataclass(frozen=True)
class MeasurementRecord:
    arrival_ts: int
    topic: str
    order: int
    provider: int
    gateway: int
    seq: int
    publish_ts: int
    payload_size: int
    duplicate: bool = False

    @property
    def latency_ms(self) -> float:
        return (self.arrival_ts - self.publish_ts) / 1000.0

    @property
    def gateway_key(self) -> GatewayKey:
        return GatewayKey(self.provider, self.gateway)


class MetricsSink:
    """Subscriber-side recorder; install ``sink.record`` as the MQTT sink.

    ``topic_index`` maps each delivered topic to the (provider, gateway)
    that originated it.
    """

    def __init__(self, topic_index: dict[str, GatewayKey] | None = None):
        self.topic_index = dict(topic_index or {})
        self.records: list[MeasurementRecord] = []
        self.unstamped = 0
        self.unknown_topic = 0
        self.last_arrival_us = -1
        self._seen: set[tuple[int, int, int]] = set()

    def record(self, msg: InboundMessage) -> MeasurementRecord | None:
        self.last_arrival_us = msg.arrival_us
        ts, seq = msg.property(TS_KEY), msg.property(SEQ_KEY)
        if ts is None or seq is None:
            self.unstamped += 1
            return None
        key = self.topic_index.get(msg.topic)
        if key is None:
            self.unknown_topic += 1
            return None
        try:
            publish_ts, seq_no = int(ts), int(seq)
        except ValueError:
            self.unstamped += 1
            return None
        ident = (key.provider, key.gateway, seq_no)
        dup = ident in self._seen
        self._seen.add(ident)
        rec = MeasurementRecord(msg.arrival_us, msg.topic, len(self.records), key.provider, key.gateway,
                                seq_no, publish_ts, len(msg.payload), dup)
        self.records.append(rec)
        return rec

    __call__ = record


@dataclass
class MetricSet:
    published: int = 0
    published_ok: int = 0
    received_unique: int = 0
    received_total: int = 0
    duplicates: int = 0
    lost: int = 0
    received_source: int = 0
    received_destination: int = 0
    lost_source: int = 0
    latency_samples: int = 0
    latency_mean_ms: float = math.nan
    latency_median_ms: float = math.nan
    latency_p95_ms: float = math.nan
    payload_mean_bytes: float = math.nan

    @property
    def loss_per_1000(self) -> float:
        return 1000.0 * self.lost / self.published if self.published else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


METRIC_FIELDS = tuple(f.name for f in fields(MetricSet))


def duplicate_flags(records) -> np.ndarray:
    if not records:
        return np.zeros(0, dtype=bool)
    gw = np.fromiter((r.gateway_key.index for r in records), dtype=np.int64, count=len(records))
    seq = np.fromiter((r.seq for r in records), dtype=np.int64, count=len(records))
    return _kernels.duplicate_flags(gw, seq)


def _fill_latency(m: MetricSet, latencies: np.ndarray, payloads: np.ndarray) -> None:
    m.latency_samples = int(latencies.size)
    if latencies.size:
        m.latency_mean_ms = float(latencies.mean())
        m.latency_median_ms = float(np.median(latencies))
        m.latency_p95_ms = float(np.percentile(latencies, 95))
    if payloads.size:
        m.payload_mean_bytes = float(payloads.mean())


def compute_metrics(records, outcomes: dict[GatewayKey, list[PublishOutcome]],
                    source_received: dict[GatewayKey, int] | None = None,
                    destination_received: dict[GatewayKey, int] | None = None,
                    ) -> tuple[dict[GatewayKey, MetricSet], MetricSet]:
    """Per-gateway and aggregate metrics for one repetition.

    Latency uses only the first arrival of each (gateway, seq); duplicates
    are counted separately and never contribute samples.
    """
    records = list(records)
    source_received = source_received or {}
    destination_received = destination_received or {}
    flags = duplicate_flags(records)
    keys = list(outcomes)
    for r in records:
        if r.gateway_key not in outcomes:
            keys.append(r.gateway_key)
    keys = sorted(set(keys), key=lambda k: (k.provider, k.gateway))

    per: dict[GatewayKey, MetricSet] = {}
    lat_by: dict[GatewayKey, list[float]] = {k: [] for k in keys}
    pay_by: dict[GatewayKey, list[int]] = {k: [] for k in keys}
    for k in keys:
        outs = outcomes.get(k, [])
        per[k] = MetricSet(published=len(outs), published_ok=sum(o.ok for o in outs))
    for r, dup in zip(records, flags):
        m = per[r.gateway_key]
        m.received_total += 1
        if dup:
            m.duplicates += 1
            continue
        m.received_unique += 1
        lat_by[r.gateway_key].append(r.latency_ms)
        pay_by[r.gateway_key].append(r.payload_size)

    agg = MetricSet()
    all_lat: list[float] = []
    all_pay: list[int] = []
    for k in keys:
        m = per[k]
        m.lost = m.published - m.received_unique
        m.received_source = int(source_received.get(k, 0))
        m.received_destination = int(destination_received.get(k, 0))
        m.lost_source = max(0, m.published - m.received_source)
        _fill_latency(m, np.asarray(lat_by[k]), np.asarray(pay_by[k]))
        for name in ("published", "published_ok", "received_unique", "received_total", "duplicates",
                     "lost", "received_source", "received_destination", "lost_source"):
            setattr(agg, name, getattr(agg, name) + getattr(m, name))
        all_lat += lat_by[k]
        all_pay += pay_by[k]
    _fill_latency(agg, np.asarray(all_lat), np.asarray(all_pay))
    return per, agg


def per_gateway_loss(repetitions: list[dict[GatewayKey, MetricSet]], provider: int, gateway: int) -> float:
    """Mean messages lost per 1000 published for one gateway across repetitions."""
    key = GatewayKey(provider, gateway)
    values = [rep[key].loss_per_1000 for rep in repetitions if key in rep and rep[key].published]
    return float(np.mean(values)) if values else 0.0


RECORD_COLUMNS = ("run_id", "repetition", "aut", "qos", "topic_size", "provider", "gateway", "seq",
                  "publish_ts_us", "arrival_ts_us", "latency_ms", "payload_bytes", "duplicate_flag")


@dataclass
class RecordContext:
    run_id: str
    repetition: int
    aut: int
    qos: int
    topic_size: int


def write_records_csv(fh, rows: list[tuple[RecordContext, MeasurementRecord]], header: bool = True) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    if header:
        writer.writerow(RECORD_COLUMNS)
    for ctx, r in rows:
        writer.writerow((ctx.run_id, ctx.repetition, ctx.aut, ctx.qos, ctx.topic_size, r.provider, r.gateway,
                         r.seq, r.publish_ts, r.arrival_ts, f"{r.latency_ms:.3f}", r.payload_size,
                         int(r.duplicate)))
