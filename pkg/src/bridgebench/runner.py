"""Run orchestration: repetitions, sweeps and report regeneration.

Raw outputs of a run directory:

- ``results.csv``   one row per cell per repetition (aggregate MetricSet)
- ``gateways.csv``  same, per gateway
- ``records.csv``   every subscriber observation
- ``drops.csv``     every link drop decision
- ``counters.jsonl`` broker counter snapshots

``report`` rebuilds ``table.txt`` and ``results.json`` from the CSVs alone.
"""

from __future__ import annotations

import asyncio
import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .bridge import DESTINATION_BROKER, Bridge, plan_deployment, source_broker_name
from .broker import BrokerConfig, BrokerCounters, BrokerServer
from .client import ClientConfig, MQTTClient
from .clock import RunClock, run_realtime, run_virtual
from .codec import SubscribeOptions
from .config import ScenarioConfig
from .errors import BridgeBenchError, BrokerStartFailure, MissingData
from .loadgen import run_gateway
from .metrics import (
    METRIC_FIELDS,
    GatewayKey,
    MetricSet,
    MetricsSink,
    RecordContext,
    compute_metrics,
    write_records_csv,
)
from .netem import DropDecision, Host, Link, write_drops_csv
from .topics import scheme_topic_bytes
from .transport import MemoryNetwork, make_opener

log = logging.getLogger(__name__)

# the nine cells of the results table, in column order
TABLE_CELLS = tuple((aut, scheme, qos)
                    for aut, scheme in ((1, "wildcard-15"), (1, "explicit-29"), (2, "explicit-29"))
                    for qos in (0, 1, 2))

BRIDGE_FIELDS = ("bridge_received", "bridge_forwarded", "bridge_transform_failed", "bridge_dropped_queue",
                 "bridge_publish_failed", "bridge_delay_mean_ms")
RESULT_COLUMNS = ("cell", "aut", "topic_scheme", "topic_size", "qos", "repetition", "run_id", "status",
                  "config_digest", "seed") + METRIC_FIELDS + ("unstamped",) + BRIDGE_FIELDS
GATEWAY_COLUMNS = ("cell", "aut", "topic_scheme", "topic_size", "qos", "repetition", "run_id", "status",
                   "provider", "gateway") + METRIC_FIELDS


def cell_name(aut: int, scheme: str, qos: int) -> str:
    return f"AUT{aut}-{scheme_topic_bytes(scheme)}B-QoS{qos}"


def repetition_seed(seed: int, repetition: int) -> int:
    return _kernels.mix64((seed * 0x100000001B3 + repetition) & 0xFFFFFFFFFFFFFFFF) & 0x7FFFFFFFFFFFFFFF


@dataclass
class RepetitionResult:
    run_id: str
    repetition: int
    ok: bool
    error: str = ""
    aggregate: MetricSet = field(default_factory=MetricSet)
    per_gateway: dict[GatewayKey, MetricSet] = field(default_factory=dict)
    records: list = field(default_factory=list)
    drops: list[DropDecision] = field(default_factory=list)
    counters: dict[str, BrokerCounters] = field(default_factory=dict)
    bridge: dict[str, float] = field(default_factory=dict)
    unstamped: int = 0
    virtual_seconds: float = 0.0


@dataclass
class CellResult:
    config: ScenarioConfig
    repetitions: list[RepetitionResult]

    @property
    def name(self) -> str:
        return cell_name(self.config.aut, self.config.topic_scheme, self.config.qos)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.repetitions)

    @property
    def good(self) -> list[RepetitionResult]:
        return [r for r in self.repetitions if r.ok]

    def mean(self, name: str) -> float:
        vals = [getattr(r.aggregate, name) for r in self.good]
        vals = [v for v in vals if not (isinstance(v, float) and math.isnan(v))]
        return float(np.mean(vals)) if vals else math.nan


# -- one repetition -----------------------------------------------------------

async def _repetition(cfg: ScenarioConfig, repetition: int, run_id: str) -> RepetitionResult:
    loop = asyncio.get_running_loop()
    clock = RunClock()
    rep_seed = repetition_seed(cfg.seed, repetition)
    network = MemoryNetwork() if cfg.transport == "memory" else None
    opener = make_opener(network)

    names = [source_broker_name(p.provider_id) for p in cfg.providers] + [DESTINATION_BROKER]
    servers: dict[str, BrokerServer] = {}
    addresses: dict[str, str] = {}
    for name in names:
        b = cfg.broker
        server = BrokerServer(BrokerConfig(name, b.queue_capacity, b.max_inflight, b.retry_interval,
                                           b.max_retries))
        try:
            addresses[name] = await server.start(network, port=None if network is not None else 0)
        except BrokerStartFailure:
            for s in servers.values():
                await s.stop()
            raise
        servers[name] = server

    plan = plan_deployment(cfg.providers, cfg.aut, cfg.topic_scheme, cfg.qos, cfg.republish_mode,
                           cfg.transform, address=addresses.__getitem__)
    links: list[Link] = []

    def make_link(link_id: str, cls: str, host: Host) -> Link:
        link = Link(link_id, cfg.link(cls).with_seed(rep_seed), host)
        links.append(link)
        return link

    def make_client(client_id: str, address: str, link: Link) -> MQTTClient:
        c = cfg.client
        return MQTTClient(ClientConfig(client_id, address, cfg.keep_alive, True, None, None, c.ack_timeout,
                                       c.max_retries, c.connect_attempts), opener, clock, link)

    topic_index = {}
    for prov in cfg.providers:
        for g, h in prov.hubs:
            for spec in plan.bridges:
                if h.topic in spec.topic_map:
                    topic_index[spec.topic_map[h.topic]] = GatewayKey(prov.provider_id, g.gateway_id)
    sink = MetricsSink(topic_index)
    subscriber = make_client("subscriber", addresses[DESTINATION_BROKER],
                             make_link("subscriber", "subscriber", Host("subscriber-host")))
    bridges: list[Bridge] = []
    gateways = []
    result = RepetitionResult(run_id, repetition, True)
    try:
        # subscriber first, so nothing published can miss the subscription
        await subscriber.connect()
        await subscriber.subscribe("dst/#", SubscribeOptions(cfg.qos), sink)
        bridge_host = Host("bridge-host")
        for spec in plan.bridges:
            inbound = make_client(f"{spec.name}-in", spec.source_address,
                                  make_link(f"{spec.name}-in", "bridge", bridge_host))
            outbound = make_client(f"{spec.name}-out", spec.destination_address,
                                   make_link(f"{spec.name}-out", "bridge", bridge_host))
            bridge = Bridge(spec, inbound, outbound, cfg.broker.queue_capacity)
            await bridge.start()
            bridges.append(bridge)

        runs = []
        for prov in cfg.providers:
            for g in prov.gateways:
                label = f"gw-p{prov.provider_id}g{g.gateway_id}"
                client = make_client(label, addresses[source_broker_name(prov.provider_id)],
                                     make_link(label, "gateway", Host(f"{label}-host")))
                gateways.append((GatewayKey(prov.provider_id, g.gateway_id), g))
                runs.append(run_gateway(g, client, cfg.qos, cfg.pacing_scale))
        gateway_runs = await asyncio.gather(*runs)
        await _quiesce(cfg, loop, sink, bridges, servers)
    except BridgeBenchError as exc:
        log.warning("%s: repetition failed: %s", run_id, exc)
        result.ok = False
        result.error = f"{type(exc).__name__}: {exc}"
        gateway_runs = None
    finally:
        counters = {name: s.counters_snapshot() for name, s in servers.items()}
        for bridge in bridges:
            await bridge.stop()
        await subscriber.disconnect()
        for s in servers.values():
            await s.stop()

    result.counters = counters
    result.drops = [d for link in links for d in link.drop_trace()]
    result.unstamped = sink.unstamped
    result.records = sink.records
    result.virtual_seconds = clock.now()
    stats = [b.stats for b in bridges]
    delays = [d for s in stats for d in s.forwarding_delay_us]
    result.bridge = {
        "bridge_received": sum(s.received for s in stats),
        "bridge_forwarded": sum(s.forwarded for s in stats),
        "bridge_transform_failed": sum(s.transform_failed for s in stats),
        "bridge_dropped_queue": sum(s.dropped_queue for s in stats),
        "bridge_publish_failed": sum(s.publish_failed for s in stats),
        "bridge_delay_mean_ms": float(np.mean(delays)) / 1000.0 if delays else math.nan,
    }
    if gateway_runs is None:
        return result

    outcomes = {key: run.outcomes for (key, _), run in zip(gateways, gateway_runs)}
    source_received, dest_received = {}, {}
    out_topics = {t: o for spec in plan.bridges for t, o in spec.topic_map.items()}
    for prov in cfg.providers:
        src = counters[source_broker_name(prov.provider_id)]
        dst = counters[DESTINATION_BROKER]
        for g, h in prov.hubs:
            key = GatewayKey(prov.provider_id, g.gateway_id)
            source_received[key] = source_received.get(key, 0) + src.accepted(h.topic)
            dest_received[key] = dest_received.get(key, 0) + dst.accepted(out_topics[h.topic])
    result.per_gateway, result.aggregate = compute_metrics(sink.records, outcomes, source_received,
                                                           dest_received)
    return result


async def _quiesce(cfg: ScenarioConfig, loop, sink: MetricsSink, bridges, servers) -> None:
    """Wait until nothing moved for ``quiescence_s`` and no broker holds in-flight work."""
    step = min(0.1, cfg.quiescence_s) or 0.01
    deadline = loop.time() + cfg.max_run_s
    last_seen = (sink.last_arrival_us, sum(b.stats.received for b in bridges))
    quiet_since = loop.time()
    while loop.time() < deadline:
        await asyncio.sleep(step)
        seen = (sink.last_arrival_us, sum(b.stats.received for b in bridges))
        busy = any(not b.idle for b in bridges) or any(s.broker.next_deadline() is not None
                                                        for s in servers.values())
        if seen != last_seen or busy:
            last_seen = seen
            quiet_since = loop.time()
        elif loop.time() - quiet_since >= cfg.quiescence_s:
            return
    log.warning("run did not quiesce within max_run_s=%s", cfg.max_run_s)


def run_repetition(cfg: ScenarioConfig, repetition: int, run_id: str | None = None) -> RepetitionResult:
    run_id = run_id or f"{cell_name(cfg.aut, cfg.topic_scheme, cfg.qos)}-r{repetition}"
    runner = run_virtual if cfg.transport == "memory" else run_realtime
    return runner(lambda: _repetition(cfg, repetition, run_id))


def run_cell(cfg: ScenarioConfig, progress=None) -> CellResult:
    reps = []
    for r in range(cfg.repetitions):
        t0 = time.perf_counter()
        rep = run_repetition(cfg, r)
        if progress:
            progress(f"{cell_name(cfg.aut, cfg.topic_scheme, cfg.qos)} rep {r}: "
                     f"{'ok' if rep.ok else 'FAILED ' + rep.error} ({time.perf_counter() - t0:.1f}s)")
        reps.append(rep)
    failed = [r for r in reps if not r.ok]
    if failed:
        log.warning("%d repetition(s) failed and are excluded from means", len(failed))
    return CellResult(cfg, reps)


# -- outputs --------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def _result_row(cell: CellResult, rep: RepetitionResult) -> list[str]:
    cfg = cell.config
    m = rep.aggregate
    return [cell.name, cfg.aut, cfg.topic_scheme, scheme_topic_bytes(cfg.topic_scheme), cfg.qos, rep.repetition,
            rep.run_id, "ok" if rep.ok else "failed", cfg.digest, cfg.seed] \
        + [getattr(m, f) for f in METRIC_FIELDS] + [rep.unstamped] + [rep.bridge.get(f, 0) for f in BRIDGE_FIELDS]


def write_outputs(cells: list[CellResult], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for cell in cells:
            for rep in cell.repetitions:
                w.writerow([_fmt(v) for v in _result_row(cell, rep)])
    with open(out / "gateways.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GATEWAY_COLUMNS)
        for cell in cells:
            cfg = cell.config
            for rep in cell.repetitions:
                for key, m in rep.per_gateway.items():
                    w.writerow([_fmt(v) for v in
                                [cell.name, cfg.aut, cfg.topic_scheme, scheme_topic_bytes(cfg.topic_scheme),
                                 cfg.qos, rep.repetition, rep.run_id, "ok" if rep.ok else "failed",
                                 key.provider, key.gateway] + [getattr(m, f) for f in METRIC_FIELDS]])
    with open(out / "records.csv", "w", newline="") as fh:
        rows = []
        for cell in cells:
            cfg = cell.config
            for rep in cell.repetitions:
                ctx = RecordContext(rep.run_id, rep.repetition, cfg.aut, cfg.qos, scheme_topic_bytes(cfg.topic_scheme))
                rows.extend((ctx, r) for r in rep.records)
        write_records_csv(fh, rows)
    with open(out / "drops.csv", "w", newline="") as fh:
        write_drops_csv(((rep.run_id, d) for cell in cells for rep in cell.repetitions for d in rep.drops), fh)
    with open(out / "counters.jsonl", "w") as fh:
        for cell in cells:
            for rep in cell.repetitions:
                for name, c in rep.counters.items():
                    fh.write(json.dumps({"run_id": rep.run_id, "broker": name, "counters": c.to_dict()},
                                        sort_keys=True) + "\n")
    if cells:
        (out / "config.yaml").write_text(cells[0].config.to_yaml())
    return out


def run(cfg: ScenarioConfig, out_dir: str | Path | None = None, progress=None) -> CellResult:
    cell = run_cell(cfg, progress)
    out_dir = out_dir or cfg.output_dir
    if out_dir is not None:
        write_outputs([cell], out_dir)
        report(out_dir)
    return cell


def sweep(cfg: ScenarioConfig, cells=TABLE_CELLS, out_dir: str | Path | None = None,
          progress=None) -> list[CellResult]:
    """Run every (aut, scheme, qos) cell; a failing cell is marked and the sweep continues."""
    results = []
    for aut, scheme, qos in cells:
        cell_cfg = cfg.replace(aut=aut, topic_scheme=scheme, qos=qos)
        try:
            results.append(run_cell(cell_cfg, progress))
        except BridgeBenchError as exc:
            log.warning("cell %s failed: %s", cell_name(aut, scheme, qos), exc)
            results.append(CellResult(cell_cfg, [RepetitionResult("", 0, False, f"{type(exc).__name__}: {exc}")]))
    out_dir = out_dir or cfg.output_dir
    if out_dir is not None:
        write_outputs(results, out_dir)
        report(out_dir)
    return results


# -- report ------------------------------------------------------------------------

TABLE_ROWS = (
    ("Latency (ms)", "latency_mean_ms", 1),
    ("Latency median (ms)", "latency_median_ms", 1),
    ("Latency p95 (ms)", "latency_p95_ms", 1),
    ("Published Messages (Gateways)", "published", 0),
    ("Received Messages (End-to-end)", "received_unique", 0),
    ("Received Messages (Source Brokers)", "received_source", 0),
    ("Received Messages (Dest. Brokers)", "received_destination", 0),
    ("Lost Messages (End-to-end)", "lost", 0),
    ("Lost Messages (Source Broker)", "lost_source", 0),
    ("Duplicated Messages", "duplicates", 0),
    ("Payload (bytes)", "payload_mean_bytes", 0),
)


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _mean(values: list[str]) -> float:
    nums = [float(v) for v in values if v not in ("", "nan")]
    return float(np.mean(nums)) if nums else math.nan


def _cell_key(row: dict) -> tuple:
    return int(row["aut"]), int(row["topic_size"]), int(row["qos"])


def aggregate_rows(rows: list[dict[str, str]]) -> list[dict]:
    """Mean of every metric per cell over its successful repetitions."""
    cells: dict[str, list[dict]] = {}
    order: dict[str, tuple] = {}
    for row in rows:
        cells.setdefault(row["cell"], []).append(row)
        order[row["cell"]] = _cell_key(row)
    out = []
    for name in sorted(cells, key=order.__getitem__):
        reps = cells[name]
        good = [r for r in reps if r["status"] == "ok"]
        first = reps[0]
        entry = {"cell": name, "aut": int(first["aut"]), "topic_scheme": first["topic_scheme"],
                 "topic_size": int(first["topic_size"]), "qos": int(first["qos"]),
                 "repetitions": len(reps), "failed_repetitions": len(reps) - len(good),
                 "config_digest": first["config_digest"]}
        for f in METRIC_FIELDS + ("unstamped",) + BRIDGE_FIELDS:
            entry[f] = _mean([r[f] for r in good])
        out.append(entry)
    return out


def qos_latency_violations(cells: list[dict]) -> list[str]:
    """Cells where mean latency decreases as QoS increases within one (aut, topic size)."""
    groups: dict[tuple, list[dict]] = {}
    for c in cells:
        groups.setdefault((c["aut"], c["topic_size"]), []).append(c)
    flags = []
    for (aut, size), group in sorted(groups.items()):
        group.sort(key=lambda c: c["qos"])
        for lo, hi in zip(group, group[1:]):
            a, b = lo["latency_mean_ms"], hi["latency_mean_ms"]
            if not (math.isnan(a) or math.isnan(b)) and b < a:
                flags.append(f"AUT{aut}-{size}B: QoS{hi['qos']} latency {b:.1f} < QoS{lo['qos']} {a:.1f}")
    return flags


def _render_value(v: float, digits: int) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "n/a"
    return f"{v:.{digits}f}"


def render_table(cells: list[dict], gateway_rows: list[dict] | None = None) -> str:
    header = ["Metric"] + [c["cell"] for c in cells]
    body = [[label] + [_render_value(c[f], d) for c in cells] for label, f, d in TABLE_ROWS]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(widths[0]) if i == 0 else h.rjust(widths[i]) for i, h in enumerate(header))]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(v.ljust(widths[0]) if i == 0 else v.rjust(widths[i]) for i, v in enumerate(r)))
    failed = [c["cell"] for c in cells if c["failed_repetitions"]]
    if failed:
        lines.append("")
        lines.append("failed repetitions excluded from means: " + ", ".join(failed))
    flags = qos_latency_violations(cells)
    lines.append("")
    lines.append("QoS latency ordering: " + ("ok" if not flags else "VIOLATED"))
    lines.extend(f"  {f}" for f in flags)
    if gateway_rows:
        lines.append("")
        lines.append("Mean loss per 1000 published, by gateway")
        loss = gateway_loss(gateway_rows)
        names = [c["cell"] for c in cells]
        gws = sorted({g for (_, g) in loss})
        gw_header = ["Gateway"] + names
        gw_body = [[g] + [_render_value(loss.get((n, g), math.nan), 1) for n in names] for g in gws]
        w2 = [max(len(r[i]) for r in [gw_header] + gw_body) for i in range(len(gw_header))]
        for r in [gw_header] + gw_body:
            lines.append("  ".join(v.ljust(w2[0]) if i == 0 else v.rjust(w2[i]) for i, v in enumerate(r)))
    return "\n".join(lines) + "\n"


def gateway_loss(gateway_rows: list[dict]) -> dict[tuple[str, str], float]:
    vals: dict[tuple[str, str], list[float]] = {}
    for r in gateway_rows:
        if r["status"] != "ok" or int(r["published"]) == 0:
            continue
        key = (r["cell"], f"p{r['provider']}g{r['gateway']}")
        vals.setdefault(key, []).append(1000.0 * int(r["lost"]) / int(r["published"]))
    return {k: float(np.mean(v)) for k, v in vals.items()}


def _json_safe(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def report(raw_dir: str | Path) -> tuple[str, dict]:
    """Aggregate raw CSVs into ``table.txt`` and ``results.json``; pure over the CSVs."""
    raw = Path(raw_dir)
    results_csv = raw / "results.csv"
    if not results_csv.is_file():
        raise MissingData(f"no results.csv in {raw}")
    rows = _read_csv(results_csv)
    if not rows:
        raise MissingData(f"{results_csv} has no data rows")
    gw_path = raw / "gateways.csv"
    gw_rows = _read_csv(gw_path) if gw_path.is_file() else []
    cells = aggregate_rows(rows)
    table = render_table(cells, gw_rows)
    doc = {
        "cells": [{k: _json_safe(v) for k, v in c.items()} for c in cells],
        "gateway_loss_per_1000": [
            {"cell": c, "gateway": g, "loss_per_1000": v} for (c, g), v in sorted(gateway_loss(gw_rows).items())],
        "qos_latency_violations": qos_latency_violations(cells),
        "repetitions": [{k: rows[i][k] for k in ("cell", "repetition", "run_id", "status")}
                        for i in range(len(rows))],
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    (raw / "table.txt").write_text(table)
    (raw / "results.json").write_text(text)
    return table, doc


def exit_status(cells: list[CellResult]) -> int:
    return 0 if all(c.ok for c in cells) else 1


def summarize(cell: CellResult) -> str:
    buf = io.StringIO()
    for rep in cell.repetitions:
        m = rep.aggregate
        buf.write(f"{rep.run_id}: {'ok' if rep.ok else 'failed'} published={m.published} "
                  f"unique={m.received_unique} lost={m.lost} dup={m.duplicates} "
                  f"latency={m.latency_mean_ms:.1f}ms\n")
    return buf.getvalue()


__all__ = ["TABLE_CELLS", "CellResult", "RepetitionResult", "cell_name", "report", "run", "run_cell",
           "run_repetition", "sweep", "write_outputs", "exit_status"]
