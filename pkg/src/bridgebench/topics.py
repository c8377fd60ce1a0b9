"""Topic names, topic filters and a level-trie for subscription matching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Generic, Iterator, TypeVar

from .errors import InvalidTopic

V = TypeVar("V")


@dataclass(frozen=True)
class TopicName:
    levels: tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> TopicName:
        if not text:
            raise InvalidTopic("topic name must be non-empty")
        if "+" in text or "#" in text:
            raise InvalidTopic(f"wildcards are not allowed in a topic name: {text!r}")
        if "\x00" in text:
            raise InvalidTopic("null character in topic")
        return cls(tuple(text.split("/")))

    def __str__(self) -> str:
        return "/".join(self.levels)


@dataclass(frozen=True)
class TopicFilter:
    levels: tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> TopicFilter:
        if not text:
            raise InvalidTopic("topic filter must be non-empty")
        if "\x00" in text:
            raise InvalidTopic("null character in topic filter")
        levels = tuple(text.split("/"))
        for i, level in enumerate(levels):
            if "#" in level and (level != "#" or i != len(levels) - 1):
                raise InvalidTopic(f"'#' must be the whole last level: {text!r}")
            if "+" in level and level != "+":
                raise InvalidTopic(f"'+' must occupy a whole level: {text!r}")
        return cls(levels)

    @property
    def has_wildcards(self) -> bool:
        return any(level in ("+", "#") for level in self.levels)

    def __str__(self) -> str:
        return "/".join(self.levels)


def _as_name(name: TopicName | str) -> TopicName:
    return name if isinstance(name, TopicName) else TopicName.parse(name)


def _as_filter(topic_filter: TopicFilter | str) -> TopicFilter:
    return topic_filter if isinstance(topic_filter, TopicFilter) else TopicFilter.parse(topic_filter)


def matches(topic_filter: TopicFilter | str, name: TopicName | str) -> bool:
    f = _as_filter(topic_filter).levels
    n = _as_name(name).levels
    for i, level in enumerate(f):
        if level == "#":
            return True
        if i >= len(n):
            return False
        if level != "+" and level != n[i]:
            return False
    return len(f) == len(n)


def topic_overhead_bytes(topic: TopicName | TopicFilter | str) -> int:
    return len(str(topic).encode("utf-8"))


class _Node(Generic[V]):
    __slots__ = ("children", "values")

    def __init__(self):
        self.children: dict[str, _Node[V]] = {}
        self.values: dict[str, V] = {}


class SubscriptionTrie(Generic[V]):
    """Maps (filter, subscriber key) to a value; lookup walks topic levels."""

    def __init__(self):
        self._root: _Node[V] = _Node()
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def insert(self, topic_filter: TopicFilter | str, key: str, value: V) -> None:
        node = self._root
        for level in _as_filter(topic_filter).levels:
            node = node.children.setdefault(level, _Node())
        if key not in node.values:
            self._count += 1
        node.values[key] = value

    def remove(self, topic_filter: TopicFilter | str, key: str) -> bool:
        path = [self._root]
        levels = _as_filter(topic_filter).levels
        for level in levels:
            nxt = path[-1].children.get(level)
            if nxt is None:
                return False
            path.append(nxt)
        if key not in path[-1].values:
            return False
        del path[-1].values[key]
        self._count -= 1
        # prune empty branches
        for depth in range(len(levels), 0, -1):
            node = path[depth]
            if node.values or node.children:
                break
            del path[depth - 1].children[levels[depth - 1]]
        return True

    def remove_key(self, key: str) -> int:
        removed = 0
        for topic_filter, k, _ in list(self.items()):
            if k == key and self.remove(topic_filter, key):
                removed += 1
        return removed

    def items(self) -> Iterator[tuple[str, str, V]]:
        stack: list[tuple[tuple[str, ...], _Node[V]]] = [((), self._root)]
        while stack:
            prefix, node = stack.pop()
            for key, value in node.values.items():
                yield "/".join(prefix), key, value
            for level, child in reversed(node.children.items()):
                stack.append((prefix + (level,), child))

    def match(self, name: TopicName | str) -> list[tuple[str, V]]:
        """All (key, value) pairs whose filter matches ``name``.

        One key may appear several times if it holds overlapping filters.
        """
        levels = _as_name(name).levels
        out: list[tuple[str, V]] = []
        self._walk(self._root, levels, 0, out)
        return out

    def _walk(self, node: _Node[V], levels: tuple[str, ...], depth: int, out: list) -> None:
        hash_node = node.children.get("#")
        if hash_node is not None:
            out.extend(hash_node.values.items())
        if depth == len(levels):
            out.extend(node.values.items())
            return
        child = node.children.get(levels[depth])
        if child is not None:
            self._walk(child, levels, depth + 1, out)
        plus = node.children.get("+")
        if plus is not None:
            self._walk(plus, levels, depth + 1, out)


# -- benchmark naming scheme -------------------------------------------------
# Only the byte sizes are normative: gateways publish on 29-byte names, the
# bridge topic configuration is 15 bytes (wildcard scheme) or 29 bytes
# (explicit scheme).

SOURCE_TOPIC_BYTES = 29
WILDCARD_TOPIC_BYTES = 15
EXPLICIT_TOPIC_BYTES = 29

SCHEME_WILDCARD = "wildcard-15"
SCHEME_EXPLICIT = "explicit-29"
SCHEMES = (SCHEME_WILDCARD, SCHEME_EXPLICIT)


def _fit(prefix: str, number: int, size: int) -> str:
    width = size - len(prefix.encode("utf-8"))
    digits = str(number)
    if width < len(digits):
        raise InvalidTopic(f"cannot fit {prefix}{digits} into {size} bytes")
    return prefix + digits.zfill(width)


def source_topic(provider: int, gateway: int, hub: int) -> str:
    """Topic a gateway publishes a hub's payload on (29 bytes)."""
    return _fit(f"src/provider{provider}/gateway{gateway}/hub", hub, SOURCE_TOPIC_BYTES)


def provider_filter(provider: int) -> str:
    """Wildcard filter covering every hub of a provider (15 bytes for 1-digit ids)."""
    return f"src/provider{provider}/#"


def bridge_output_topic(provider: int, gateway: int, hub: int, scheme: str) -> str:
    """Topic the bridge republishes on at the destination broker."""
    if scheme == SCHEME_WILDCARD:
        return _fit(f"dst/p{provider}/g{gateway}/hub", hub, WILDCARD_TOPIC_BYTES)
    if scheme == SCHEME_EXPLICIT:
        return _fit(f"dst/provider{provider}/gateway{gateway}/hub", hub, EXPLICIT_TOPIC_BYTES)
    raise InvalidTopic(f"unknown topic scheme {scheme!r}")


def scheme_topic_bytes(scheme: str) -> int:
    if scheme == SCHEME_WILDCARD:
        return WILDCARD_TOPIC_BYTES
    if scheme == SCHEME_EXPLICIT:
        return EXPLICIT_TOPIC_BYTES
    raise InvalidTopic(f"unknown topic scheme {scheme!r}")
