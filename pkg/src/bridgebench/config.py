"""Scenario configuration: YAML schema, validation and named presets.

A scenario document looks like::

    name: desk
    seed: 7
    repetitions: 3
    aut: 1                      # 1 | 2
    topic_scheme: wildcard-15   # wildcard-15 | explicit-29
    qos: 1
    republish_mode: sync        # sync | async
    transform: unify            # unify | identity
    messages_per_hub: 100
    pacing_scale: 0.1           # multiplies every gateway's batch period
    keep_alive: 60
    quiescence_s: 5
    transport: memory           # memory (virtual time) | tcp (loopback, wall clock)
    broker: {queue_capacity: 1000, max_inflight: 20, retry_interval: 1.0, max_retries: 10}
    client: {ack_timeout: 1.0, max_retries: 10, connect_attempts: 10}
    links:
      gateway: {one_way_delay_ms: 30, segment_loss_p: 0.001}
      cloud: {one_way_delay_ms: 1}
    providers:
      - id: 1
        transform_ratio: 0.12
        gateways:
          - {id: 1, rate: 1.0, cycling: batch, hubs: [{id: 1, payload_size: 125000}]}

Link classes are ``gateway`` (gateway to source broker), ``bridge`` (both
bridge connections), ``subscriber`` (measuring subscriber); ``cloud`` is the
default for the last two.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .bridge import MODE_ASYNC, MODE_SYNC
from .errors import ConfigInvalid, UnknownPreset
from .loadgen import CYCLE_MODES, GatewaySpec, HubSpec, ProviderSpec
from .netem import LinkProfile
from .topics import SCHEMES, TopicName, source_topic

LINK_CLASSES = ("gateway", "bridge", "subscriber")

_TOP_KEYS = {
    "name", "description", "seed", "repetitions", "aut", "topic_scheme", "qos", "republish_mode",
    "transform", "messages_per_hub", "pacing_scale", "keep_alive", "quiescence_s", "max_run_s",
    "transport", "broker", "client", "links", "providers", "output_dir", "notes",
}
_BROKER_KEYS = {"queue_capacity", "max_inflight", "retry_interval", "max_retries"}
_CLIENT_KEYS = {"ack_timeout", "max_retries", "connect_attempts"}
_LINK_KEYS = {f.name for f in dataclasses.fields(LinkProfile)} - {"seed"}


@dataclass(frozen=True)
class BrokerSettings:
    queue_capacity: int = 1000
    max_inflight: int = 20
    retry_interval: float = 1.0
    max_retries: int | None = 10


@dataclass(frozen=True)
class ClientSettings:
    ack_timeout: float = 1.0
    max_retries: int | None = 10
    connect_attempts: int = 10


@dataclass(frozen=True)
class ScenarioConfig:
    providers: tuple[ProviderSpec, ...]
    name: str = "scenario"
    seed: int = 0
    repetitions: int = 10
    aut: int = 1
    topic_scheme: str = "wildcard-15"
    qos: int = 1
    republish_mode: str = MODE_SYNC
    transform: str = "unify"
    messages_per_hub: int = 1000
    pacing_scale: float = 1.0
    keep_alive: int = 60
    quiescence_s: float = 5.0
    max_run_s: float = 36_000.0
    transport: str = "memory"
    broker: BrokerSettings = BrokerSettings()
    client: ClientSettings = ClientSettings()
    links: dict[str, LinkProfile] = field(default_factory=dict)
    output_dir: str | None = None
    source: dict = field(default_factory=dict, compare=False, repr=False)

    def link(self, cls: str) -> LinkProfile:
        return self.links[cls]

    @property
    def total_messages(self) -> int:
        return sum(g.messages_per_hub * len(g.hubs) for p in self.providers for g in p.gateways)

    def replace(self, **changes) -> ScenarioConfig:
        """Copy with top-level fields changed; keeps ``source`` in sync."""
        src = copy.deepcopy(self.source)
        for key, value in changes.items():
            if key in ("providers", "links", "broker", "client", "source"):
                raise ConfigInvalid(f"replace() only handles scalar fields, not {key}")
            src[key] = value
        return from_dict(src)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.source)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.source, sort_keys=True)

    @property
    def digest(self) -> str:
        canon = json.dumps(self.source, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _check_keys(where: str, data: dict, allowed: set[str]) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigInvalid(f"{where}: unknown field(s) {sorted(unknown)}")


def _num(where: str, value: Any, kind=float, minimum=None, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigInvalid(f"{where} must be a number, got {value!r}")
    if kind is int and int(value) != value:
        raise ConfigInvalid(f"{where} must be an integer, got {value!r}")
    value = kind(value)
    if minimum is not None and value < minimum:
        raise ConfigInvalid(f"{where} must be >= {minimum}, got {value!r}")
    return value


def _parse_links(data: dict, seed: int) -> dict[str, LinkProfile]:
    if not isinstance(data, dict):
        raise ConfigInvalid("links must be a mapping")
    _check_keys("links", data, set(LINK_CLASSES) | {"cloud"})
    profiles = {}
    cloud = data.get("cloud", {})
    for cls in LINK_CLASSES:
        body = data.get(cls, cloud if cls != "gateway" else {})
        if not isinstance(body, dict):
            raise ConfigInvalid(f"links.{cls} must be a mapping")
        _check_keys(f"links.{cls}", body, _LINK_KEYS)
        try:
            profiles[cls] = LinkProfile(**body, seed=seed)
        except TypeError as exc:
            raise ConfigInvalid(f"links.{cls}: {exc}") from None
    return profiles


def _parse_providers(data, messages_per_hub: int, seed: int) -> tuple[ProviderSpec, ...]:
    if not isinstance(data, list) or not data:
        raise ConfigInvalid("providers must be a non-empty list")
    providers = []
    seen_p = set()
    for i, p in enumerate(data):
        where = f"providers[{i}]"
        if not isinstance(p, dict):
            raise ConfigInvalid(f"{where} must be a mapping")
        _check_keys(where, p, {"id", "transform_ratio", "gateways"})
        pid = _num(f"{where}.id", p.get("id"), int, 1)
        if pid in seen_p:
            raise ConfigInvalid(f"duplicate provider id {pid}")
        seen_p.add(pid)
        gateways = []
        seen_g = set()
        for j, g in enumerate(p.get("gateways") or []):
            gw_where = f"{where}.gateways[{j}]"
            if not isinstance(g, dict):
                raise ConfigInvalid(f"{gw_where} must be a mapping")
            _check_keys(gw_where, g, {"id", "rate", "cycling", "hubs", "messages_per_hub"})
            gid = _num(f"{gw_where}.id", g.get("id"), int, 1)
            if gid in seen_g:
                raise ConfigInvalid(f"duplicate gateway id {gid} in provider {pid}")
            seen_g.add(gid)
            hubs = []
            for k, h in enumerate(g.get("hubs") or []):
                hub_where = f"{gw_where}.hubs[{k}]"
                if not isinstance(h, dict):
                    raise ConfigInvalid(f"{hub_where} must be a mapping")
                _check_keys(hub_where, h, {"id", "payload_size", "topic"})
                hid = _num(f"{hub_where}.id", h.get("id"), int, 0)
                size = _num(f"{hub_where}.payload_size", h.get("payload_size"), int, 0)
                topic = h.get("topic") or source_topic(pid, gid, hid)
                try:
                    TopicName.parse(topic)
                except ValueError as exc:
                    raise ConfigInvalid(f"{hub_where}.topic: {exc}") from None
                hubs.append(HubSpec(hid, size, topic, seed))
            cycling = g.get("cycling", "batch")
            if cycling not in CYCLE_MODES:
                raise ConfigInvalid(f"{gw_where}.cycling must be one of {CYCLE_MODES}")
            mph = _num(f"{gw_where}.messages_per_hub", g.get("messages_per_hub", messages_per_hub), int, 0)
            rate = _num(f"{gw_where}.rate", g.get("rate", 1.0))
            if rate <= 0:
                raise ConfigInvalid(f"{gw_where}.rate must be > 0")
            gateways.append(GatewaySpec(gid, tuple(hubs), rate, mph, cycling))
        if not gateways:
            raise ConfigInvalid(f"{where} needs at least one gateway")
        ratio = _num(f"{where}.transform_ratio", p.get("transform_ratio", 1.0))
        if not 0 < ratio <= 1:
            raise ConfigInvalid(f"{where}.transform_ratio must be in (0, 1]")
        providers.append(ProviderSpec(pid, tuple(gateways), ratio))
    topics = [h.topic for p in providers for _, h in p.hubs]
    if len(set(topics)) != len(topics):
        raise ConfigInvalid("hub topics must be unique")
    return tuple(providers)


def from_dict(data: dict) -> ScenarioConfig:
    """Validate a scenario mapping and build a ScenarioConfig."""
    if not isinstance(data, dict):
        raise ConfigInvalid("scenario document must be a mapping")
    _check_keys("scenario", data, _TOP_KEYS)
    source = copy.deepcopy(data)
    seed = _num("seed", data.get("seed", 0), int, 0)
    reps = _num("repetitions", data.get("repetitions", 10), int, 1)
    aut = data.get("aut", 1)
    if aut not in (1, 2):
        raise ConfigInvalid(f"aut must be 1 or 2, got {aut!r}")
    scheme = data.get("topic_scheme", "wildcard-15")
    if scheme not in SCHEMES:
        raise ConfigInvalid(f"topic_scheme must be one of {SCHEMES}, got {scheme!r}")
    qos = data.get("qos", 1)
    if qos not in (0, 1, 2):
        raise ConfigInvalid(f"qos must be 0, 1 or 2, got {qos!r}")
    mode = data.get("republish_mode", MODE_SYNC)
    if mode not in (MODE_SYNC, MODE_ASYNC):
        raise ConfigInvalid(f"republish_mode must be sync or async, got {mode!r}")
    transform = data.get("transform", "unify")
    if transform not in ("unify", "identity"):
        raise ConfigInvalid(f"transform must be unify or identity, got {transform!r}")
    transport = data.get("transport", "memory")
    if transport not in ("memory", "tcp"):
        raise ConfigInvalid(f"transport must be memory or tcp, got {transport!r}")
    mph = _num("messages_per_hub", data.get("messages_per_hub", 1000), int, 0)
    pacing = _num("pacing_scale", data.get("pacing_scale", 1.0), float, 0)
    keep_alive = _num("keep_alive", data.get("keep_alive", 60), int, 0)
    quiescence = _num("quiescence_s", data.get("quiescence_s", 5.0), float, 0)
    max_run = _num("max_run_s", data.get("max_run_s", 36_000.0), float, 1)

    b = data.get("broker") or {}
    _check_keys("broker", b, _BROKER_KEYS)
    broker = BrokerSettings(
        _num("broker.queue_capacity", b.get("queue_capacity", 1000), int, 1),
        _num("broker.max_inflight", b.get("max_inflight", 20), int, 1),
        _num("broker.retry_interval", b.get("retry_interval", 1.0), float, 0.001),
        _num("broker.max_retries", b.get("max_retries", 10), int, 0, allow_none=True),
    )
    c = data.get("client") or {}
    _check_keys("client", c, _CLIENT_KEYS)
    client = ClientSettings(
        _num("client.ack_timeout", c.get("ack_timeout", 1.0), float, 0.001),
        _num("client.max_retries", c.get("max_retries", 10), int, 0, allow_none=True),
        _num("client.connect_attempts", c.get("connect_attempts", 10), int, 1),
    )
    links = _parse_links(data.get("links") or {}, seed)
    providers = _parse_providers(data.get("providers"), mph, seed)
    out = data.get("output_dir")
    return ScenarioConfig(
        providers=providers, name=str(data.get("name", "scenario")), seed=seed, repetitions=reps,
        aut=aut, topic_scheme=scheme, qos=qos, republish_mode=mode, transform=transform,
        messages_per_hub=mph, pacing_scale=pacing, keep_alive=keep_alive, quiescence_s=quiescence,
        max_run_s=max_run, transport=transport, broker=broker, client=client, links=links,
        output_dir=str(out) if out is not None else None, source=source)


def loads(text: str) -> ScenarioConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"not a valid YAML document: {exc}") from None
    return from_dict(data)


def load(path: str | Path) -> ScenarioConfig:
    return loads(Path(path).read_text())


def preset_names() -> list[str]:
    files = resources.files("bridgebench").joinpath("presets")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml"))


def preset_text(name: str) -> str:
    if name not in preset_names():
        raise UnknownPreset(f"unknown preset {name!r}; known: {', '.join(preset_names())}")
    return resources.files("bridgebench").joinpath("presets", f"{name}.yaml").read_text()


def load_preset(name: str) -> ScenarioConfig:
    return loads(preset_text(name))
