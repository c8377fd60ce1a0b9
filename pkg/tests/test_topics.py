import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bridgebench import topics
from bridgebench.errors import InvalidTopic
from bridgebench.topics import SubscriptionTrie, matches, topic_overhead_bytes

ALPHABET = ("a", "b", "c")


def oracle(filter_levels, name_levels):
    """Recursive definition of MQTT matching, written independently of the trie."""
    if not filter_levels:
        return not name_levels
    head, rest = filter_levels[0], filter_levels[1:]
    if head == "#":
        return True
    if not name_levels:
        return False
    return (head == "+" or head == name_levels[0]) and oracle(rest, name_levels[1:])


def all_names(depth=4):
    for d in range(1, depth + 1):
        yield from itertools.product(ALPHABET, repeat=d)


def all_filters(depth=4):
    inner = ALPHABET + ("+",)
    for d in range(1, depth + 1):
        for body in itertools.product(inner, repeat=d):
            yield body
        for body in itertools.product(inner, repeat=d - 1):
            yield body + ("#",)


def test_exhaustive_oracle_agreement():
    names = ["/".join(n) for n in all_names()]
    name_levels = [tuple(n.split("/")) for n in names]
    trie = SubscriptionTrie()
    filters = list(all_filters())
    for i, f in enumerate(filters):
        trie.insert("/".join(f), f"s{i}", i)
    assert len(trie) == len(filters)
    for name, levels in zip(names, name_levels):
        expected = {i for i, f in enumerate(filters) if oracle(f, levels)}
        by_matches = {i for i, f in enumerate(filters) if matches("/".join(f), name)}
        by_trie = {v for _, v in trie.match(name)}
        assert by_matches == expected, name
        assert by_trie == expected, name


@pytest.mark.parametrize("f,n,want", [
    ("providers/p1/#", "providers/p1/hub1", True),
    ("providers/+/hub1", "providers/p2/hub1", True),
    ("providers/p1/#", "providers/p2/hub1", False),
    ("providers/p1/#", "providers/p1", True),  # '#' covers the parent level
    ("+", "a/b", False),
    ("+/+", "/x", True),  # empty level is a level
    ("#", "a/b/c", True),
])
def test_examples(f, n, want):
    assert matches(f, n) is want


def test_overhead_bytes():
    assert topic_overhead_bytes("a") == 1
    assert topic_overhead_bytes(topics.provider_filter(1)) == 15
    assert topic_overhead_bytes(topics.source_topic(1, 1, 1)) == 29
    assert topic_overhead_bytes("é") == 2


@pytest.mark.parametrize("scheme,size", [(topics.SCHEME_WILDCARD, 15), (topics.SCHEME_EXPLICIT, 29)])
def test_bridge_topic_sizes(scheme, size):
    for p, g, h in itertools.product((1, 2), (1, 2), (1, 2, 99)):
        assert len(topics.bridge_output_topic(p, g, h, scheme).encode()) == size
    assert topics.scheme_topic_bytes(scheme) == size


def test_output_topics_never_match_source_filters():
    for scheme in topics.SCHEMES:
        out = topics.bridge_output_topic(1, 1, 1, scheme)
        assert not matches(topics.provider_filter(1), out)


@pytest.mark.parametrize("bad", ["", "a/+", "#", "a\x00"])
def test_invalid_names(bad):
    with pytest.raises(InvalidTopic):
        topics.TopicName.parse(bad)


@pytest.mark.parametrize("bad", ["", "a/#/b", "a#", "a/b+", "##"])
def test_invalid_filters(bad):
    with pytest.raises(InvalidTopic):
        topics.TopicFilter.parse(bad)


level = st.text(st.sampled_from("ab/é"), max_size=3).filter(lambda s: "/" not in s)
names = st.lists(level, min_size=1, max_size=5).map("/".join).filter(bool)


@given(names)
def test_name_matches_itself_and_hash(name):
    assert matches(name, name)
    assert matches("#", name)
    assert topic_overhead_bytes(name) == len(name.encode("utf-8"))


@given(st.lists(st.tuples(st.sampled_from(["a/#", "a/+", "+/b", "a/b", "#"]), st.sampled_from("xyz")), max_size=12))
def test_trie_insert_remove(ops):
    trie = SubscriptionTrie()
    model = {}
    for f, key in ops:
        trie.insert(f, key, 1)
        model[(f, key)] = 1
    assert len(trie) == len(model)
    assert sorted((f, k) for f, k, _ in trie.items()) == sorted(model)
    for f, key in list(model):
        assert trie.remove(f, key)
    assert len(trie) == 0 and trie.match("a/b") == []
    assert not trie.remove("a/b", "x")
