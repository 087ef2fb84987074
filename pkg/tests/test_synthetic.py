from collections import Counter

import numpy as np
import pytest

from ememndt.data import instance_to_line
from ememndt.synthetic import SYNTHETIC_TAXONOMY, SyntheticConfig, generate_synthetic, target_track
from ememndt.tree import build_tree, embed_taxonomy


def test_generation_is_a_pure_function_of_config_and_seed():
    cfg = SyntheticConfig(n_per_class=3)
    a = generate_synthetic(cfg, 11)
    b = generate_synthetic(cfg, 11)
    assert [instance_to_line(i) for i in a.instances] == [instance_to_line(i) for i in b.instances]
    c = generate_synthetic(cfg, 12)
    assert [instance_to_line(i) for i in a.instances] != [instance_to_line(i) for i in c.instances]


def test_counts_shape_and_target():
    cfg = SyntheticConfig(T=6, n_per_class=4)
    data = generate_synthetic(cfg, 0)
    assert Counter(data.labels) == {lab: 4 for lab in SYNTHETIC_TAXONOMY.names}
    assert data.observation_length == 6
    for inst in data.instances:
        assert inst.target_uid == 0
        assert all(fr.target.cls == "car" for fr in inst.frames)
        assert inst.ttb_frames == cfg.ttb_frames


def test_class_counts_override_allows_imbalance():
    data = generate_synthetic(SyntheticConfig(class_counts={"stopping": 5, "turn-left": 1}), 0)
    assert Counter(data.labels) == {"stopping": 5, "turn-left": 1}


@pytest.mark.parametrize("bad", [
    {"T": 0}, {"frame_rate_hz": 0.0}, {"sigma_pos": -1.0}, {"neighbor_range": (3, 1)},
    {"class_counts": {"flying": 3}}, {"class_counts": {"stopping": 0}},
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SyntheticConfig(**bad)


def _track(label, seed=0, n=25, dt=0.1):
    return target_track(label, n, dt, np.random.default_rng(seed))


def test_kinematic_signatures():
    for seed in range(5):
        x, y, yaw = _track("stopping", seed)
        step = np.hypot(np.diff(x), np.diff(y))
        assert step[-1] < 1e-9 and step[0] > 0.3
        x, y, yaw = _track("accelerating-straight", seed)
        assert np.all(np.diff(np.diff(x)) > 0) and np.allclose(y, 0)
        x, y, yaw = _track("decelerating-straight", seed)
        assert np.all(np.diff(np.diff(x)) < 0) and np.all(np.diff(x) > 0)
        _, _, yaw_l = _track("turn-left", seed)
        _, _, yaw_r = _track("turn-right", seed)
        assert np.all(np.diff(yaw_l) > 0) and np.all(np.diff(yaw_r) < 0)


def test_lane_change_moves_one_lane():
    for label, sign in (("lane-change-left", 1.0), ("lane-change-right", -1.0)):
        _, y, yaw = _track(label, n=40)  # 4 s, past the longest maneuver
        assert sign * y[-1] == pytest.approx(3.5, abs=0.05)
        assert abs(yaw[-1]) < 1e-9


def test_noise_free_generation_is_exact():
    data = generate_synthetic(SyntheticConfig(n_per_class=1, sigma_pos=0.0), 0)
    for inst in data.instances:
        assert inst.frames[0].target.x == 0.0 and inst.frames[0].target.y == 0.0


def test_unknown_label_raises():
    with pytest.raises(ValueError):
        _track("reversing")


def test_synthetic_taxonomy_tree_is_balanced():
    tree = build_tree(embed_taxonomy(SYNTHETIC_TAXONOMY))
    assert {tree.depth(n) for n in tree.leaf_ids} == {3}
    pairs = {frozenset(tree.nodes[n].children) for n in tree.nodes
             if tree.nodes[n].kind != "leaf" and all(c < 8 for c in tree.nodes[n].children)}
    assert pairs == {frozenset(p) for p in ((0, 1), (2, 3), (4, 5), (6, 7))}
