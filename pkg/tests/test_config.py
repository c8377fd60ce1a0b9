import pytest
import yaml

from bridgebench import config
from bridgebench.bridge import plan_deployment
from bridgebench.errors import ConfigInvalid, UnknownPreset


def test_presets_listed_and_valid():
    names = config.preset_names()
    assert {"paper", "desk", "lossless"} <= set(names)
    for name in names:
        cfg = config.load_preset(name)
        plan_deployment(cfg.providers, cfg.aut, cfg.topic_scheme, cfg.qos, cfg.republish_mode, cfg.transform)


def test_paper_preset_counts():
    cfg = config.load_preset("paper")
    assert cfg.total_messages == 4000 and cfg.repetitions == 10 and cfg.keep_alive == 60
    p1, p2 = cfg.providers
    assert [[h.payload_size for h in g.hubs] for g in p1.gateways] == [[125_000], [35_000]]
    assert [[h.payload_size for h in g.hubs] for g in p2.gateways] == [[1_500, 1_500]]
    # 1 batch/s with one hub = 1 msg/s; two hubs = 2 msg/s
    assert all(g.rate == 1.0 for p in cfg.providers for g in p.gateways)
    assert all(len(h.topic.encode()) == 29 for p in cfg.providers for _, h in p.hubs)
    for aut, scheme, bridges, size in ((1, "wildcard-15", 2, 15), (2, "explicit-29", 4, 29)):
        plan = plan_deployment(cfg.providers, aut, scheme)
        assert (len(plan.bridges), plan.bridge_topic_bytes) == (bridges, size)


def test_desk_and_lossless_scaling():
    desk, paper, lossless = (config.load_preset(n) for n in ("desk", "paper", "lossless"))
    assert desk.messages_per_hub == 100 and desk.total_messages == 400
    assert desk.pacing_scale < 1.0
    assert [h.payload_size for p in desk.providers for _, h in p.hubs] == \
        [h.payload_size for p in paper.providers for _, h in p.hubs]
    assert all(lossless.link(c).segment_loss_p == 0 for c in config.LINK_CLASSES)


def test_unknown_preset():
    with pytest.raises(UnknownPreset):
        config.load_preset("nope")


def base():
    return yaml.safe_load(config.preset_text("desk"))


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(bogus=1),
    lambda d: d["links"]["gateway"].update(delay=3),
    lambda d: d["providers"][0].update(colour="red"),
    lambda d: d.update(aut=3),
    lambda d: d.update(qos="1"),
    lambda d: d.update(repetitions=0),
    lambda d: d.update(topic_scheme="short"),
    lambda d: d["links"]["gateway"].update(segment_loss_p=2),
    lambda d: d["providers"][0]["gateways"][0]["hubs"][0].update(topic="a/+"),
    lambda d: d["providers"][0].update(transform_ratio=0),
    lambda d: d.update(providers=[]),
    lambda d: d["providers"][1].update(id=1),
    lambda d: d.update(broker={"max_retries": -1}),
])
def test_invalid_documents(mutate):
    doc = base()
    mutate(doc)
    with pytest.raises(ConfigInvalid):
        config.from_dict(doc)


def test_not_yaml():
    with pytest.raises(ConfigInvalid):
        config.loads("a: [1, 2")
    with pytest.raises(ConfigInvalid):
        config.loads("- just a list")


def test_replace_digest_and_round_trip(tmp_path):
    cfg = config.load_preset("desk")
    other = cfg.replace(qos=2, seed=5)
    assert (other.qos, other.seed) == (2, 5) and cfg.qos == 1
    assert other.digest != cfg.digest and cfg.replace().digest == cfg.digest
    path = tmp_path / "c.yaml"
    path.write_text(other.to_yaml())
    again = config.load(path)
    assert again.digest == other.digest and again == other
    with pytest.raises(ConfigInvalid):
        cfg.replace(providers=[])


def test_link_class_defaults():
    doc = base()
    doc["links"] = {"gateway": {"one_way_delay_ms": 30}, "cloud": {"one_way_delay_ms": 2}}
    cfg = config.from_dict(doc)
    assert cfg.link("bridge").one_way_delay_ms == 2 and cfg.link("subscriber").one_way_delay_ms == 2
    doc["links"]["bridge"] = {"one_way_delay_ms": 7}
    assert config.from_dict(doc).link("bridge").one_way_delay_ms == 7
    assert config.from_dict(doc).link("gateway").seed == doc["seed"]


def test_unbounded_retries_accepted():
    doc = base()
    doc["client"]["max_retries"] = None
    doc["broker"]["max_retries"] = None
    cfg = config.from_dict(doc)
    assert cfg.client.max_retries is None and cfg.broker.max_retries is None
