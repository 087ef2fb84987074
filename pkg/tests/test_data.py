import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ememndt.data import (
    AgentState,
    BehaviorTaxonomy,
    DataError,
    Dataset,
    EdgePolicy,
    Frame,
    Instance,
    build_interaction_graphs,
    load_dataset,
    load_taxonomy,
    read_instances,
    save_dataset,
    save_taxonomy,
    split,
    taxonomy_from_labels,
)
from ememndt.synthetic import SYNTHETIC_TAXONOMY

from _util import tiny_dataset


def _agent(uid, x=0.0, y=0.0, cls="car", orientation=0.0):
    return AgentState(uid, cls, x, y, 0.0, orientation)


def _instance(iid="a", label="stopping", T=3, agents=None):
    agents = agents or (_agent(0), _agent(1, 5.0))
    frames = tuple(Frame(t, agents, 0) for t in range(T))
    return Instance(iid, frames, label, 2, 10.0)


def test_agent_rejects_unknown_class_and_bad_orientation():
    with pytest.raises(DataError, match="unknown agent class"):
        _agent(0, cls="spaceship")
    with pytest.raises(DataError, match="orientation"):
        _agent(0, orientation=math.pi)
    with pytest.raises(DataError, match="non-finite"):
        _agent(0, x=float("nan"))


def test_frame_invariants():
    with pytest.raises(DataError, match="duplicate"):
        Frame(0, (_agent(1), _agent(1)), 1)
    with pytest.raises(DataError, match="target_uid"):
        Frame(0, (_agent(1),), 2)


def test_instance_requires_contiguous_frames():
    a = (_agent(0),)
    with pytest.raises(DataError, match="gaps"):
        Instance("x", (Frame(0, a, 0), Frame(2, a, 0)), "stopping", 1, 10.0)
    b = (_agent(0), _agent(1))
    with pytest.raises(DataError, match="target_uid changes"):
        Instance("x", (Frame(0, b, 0), Frame(1, b, 1)), "stopping", 1, 10.0)


def test_instance_dict_roundtrip():
    inst = tiny_dataset().instances[3]
    assert Instance.from_dict(inst.to_dict()) == inst
    assert inst.ttb_seconds == pytest.approx(0.2)


def test_from_dict_reports_frame_index():
    d = _instance().to_dict()
    d["frames"][1]["agents"][0]["class"] = "blimp"
    with pytest.raises(DataError, match=r"instance 'a'.*frame 1.*blimp"):
        Instance.from_dict(d)


def test_missing_frame_rate_uses_fallback():
    d = _instance().to_dict()
    del d["frame_rate_hz"]
    with pytest.raises(DataError, match="frame_rate_hz"):
        Instance.from_dict(d)
    assert Instance.from_dict(d, frame_rate_hz=10.0).frame_rate_hz == 10.0


def test_read_instances_reports_line_numbers(tmp_path):
    p = tmp_path / "d.jsonl"
    good = json.dumps(_instance().to_dict())
    p.write_text(good + "\n" + "{not json\n")
    with pytest.raises(DataError, match=r"d.jsonl:2: JSON parse error"):
        read_instances(p)
    p.write_text(good + "\n\n" + json.dumps({"instance_id": "b"}) + "\n")
    with pytest.raises(DataError, match=r":3: .*missing field"):
        read_instances(p)


def test_dataset_roundtrip_and_taxonomy_choice(tmp_path):
    data = tiny_dataset()
    p = tmp_path / "d.jsonl"
    save_dataset(data, p)
    back = load_dataset(p)
    assert back.instances == data.instances
    assert back.taxonomy is SYNTHETIC_TAXONOMY

    save_dataset([_instance(label="zig"), _instance("b", label="alpha")], p)
    derived = load_dataset(p)
    assert derived.taxonomy.names == ["alpha", "zig"]


def test_dataset_rejects_unknown_label():
    with pytest.raises(DataError, match="not in taxonomy"):
        Dataset((_instance(label="flying"),), SYNTHETIC_TAXONOMY)


def test_observation_length_must_be_uniform():
    ds = Dataset((_instance(T=3), _instance("b", T=4)), SYNTHETIC_TAXONOMY)
    with pytest.raises(DataError, match="differing observation lengths"):
        ds.observation_length


def test_taxonomy_io(tmp_path):
    p = tmp_path / "tax.json"
    save_taxonomy(SYNTHETIC_TAXONOMY, p)
    assert load_taxonomy(p) == SYNTHETIC_TAXONOMY
    p.write_text(json.dumps([{"label": "a"}]))
    with pytest.raises(DataError, match="missing"):
        load_taxonomy(p)
    with pytest.raises(DataError, match="unique"):
        BehaviorTaxonomy((("a", "x"), ("a", "y")))
    assert taxonomy_from_labels(["turn_left", "b"]).labels == (("b", "b"), ("turn_left", "turn left"))


def test_edge_policy_parse_and_graphs():
    assert EdgePolicy.parse("complete") == EdgePolicy()
    pol = EdgePolicy.parse("radius(30)")
    assert pol.radius_m == 30.0 and str(pol) == "radius(30)"
    with pytest.raises(ValueError):
        EdgePolicy.parse("knn(3)")
    inst = _instance(agents=(_agent(0), _agent(1, 5.0), _agent(2, 50.0)))
    full = build_interaction_graphs(inst)
    assert full[0].edges == ((0, 1), (0, 2), (1, 2))
    near = build_interaction_graphs(inst, EdgePolicy("radius", 10.0))
    assert near[0].edges == ((0, 1),)
    assert sorted(near[0].neighbors(1)) == [0]
    assert len(full) == inst.T


def test_isolated_target_has_no_edges():
    inst = _instance(agents=(_agent(0),))
    assert build_interaction_graphs(inst)[0].edges == ()


def test_split_is_stratified_and_deterministic():
    data = tiny_dataset(n_per_class=5)
    train, test = split(data, 0.8, seed=3)
    again = split(data, 0.8, seed=3)
    assert train.instances == again[0].instances
    assert Counter(train.labels) == {lab: 4 for lab in data.taxonomy.names}
    assert len(train) + len(test) == len(data)
    ids = [i.instance_id for i in data.instances]
    assert [i.instance_id for i in train.instances] == [x for x in ids if x in {i.instance_id for i in train.instances}]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=40),
       st.floats(0.05, 0.95), st.integers(0, 2**31 - 1))
def test_split_partitions(labels, frac, seed):
    names = ["a", "b", "c", "d"]
    tax = BehaviorTaxonomy(tuple((n, n) for n in names))
    insts = tuple(_instance(f"i{k}", names[lab]) for k, lab in enumerate(labels))
    train, test = split(Dataset(insts, tax), frac, seed)
    tr = {i.instance_id for i in train.instances}
    te = {i.instance_id for i in test.instances}
    assert not tr & te and len(tr | te) == len(insts)
    for lab, n in Counter(labels).items():
        k = sum(1 for i in train.instances if i.label == names[lab])
        if n >= 2:
            assert 1 <= k <= n - 1


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        split(tiny_dataset(), 1.0, 0)
