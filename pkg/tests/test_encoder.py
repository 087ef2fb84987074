import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ememndt.data import Dataset, Frame, Instance, build_interaction_graphs
from ememndt.encoder import (
    BaseTrainConfig,
    EncoderConfig,
    EncoderParams,
    embed,
    embed_instance,
    encode_graphs,
    encode_states,
    evolved_weights,
    featurize,
    forward,
    fuse_and_classify,
    grad_check,
    is_graph_param,
    loss_and_grads,
    make_optimizer,
    param_shapes,
    predict_base,
    state_array,
    train_base,
)

from _util import tiny_dataset

SMALL = dict(d_model=8, n_heads=2, n_layers=2, d_graph=6, d_ff=8)


def small_params(T=4, M=8, seed=0):
    return EncoderParams.init(EncoderConfig(T=T, M=M, **SMALL), seed)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(T=4, M=8, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(T=0, M=8)


def test_init_is_seeded_and_shaped():
    a, b, c = small_params(seed=1), small_params(seed=1), small_params(seed=2)
    assert set(a.weights) == set(param_shapes(a.config))
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)
    assert not np.array_equal(a.weights["state.W_in"], c.weights["state.W_in"])
    assert a.weights["state.l0.alpha_attn"][0] == 1.0
    assert is_graph_param("graph.Uz") and not is_graph_param("fuse.W")


def test_forward_shapes_and_probabilities():
    data = tiny_dataset()
    p = small_params()
    res = forward(p, featurize(data.instances, p.config))
    B = len(data)
    assert res.f_state.shape == (B, 8) and res.f_graph.shape == (B, 6) and res.g.shape == (B, 8)
    assert np.allclose(res.probs.sum(1), 1.0)


def test_single_instance_api_matches_batch():
    data = tiny_dataset()
    p = small_params()
    res = forward(p, featurize(data.instances, p.config))
    for b, inst in enumerate(data.instances[:4]):
        fs = encode_states(state_array(inst), p)
        fg = encode_graphs(build_interaction_graphs(inst), p)
        g, probs = fuse_and_classify(fs, fg, p)
        assert np.allclose(fs, res.f_state[b], atol=1e-12)
        assert np.allclose(fg, res.f_graph[b], atol=1e-12)
        assert np.allclose(g, res.g[b], atol=1e-12)
        assert np.allclose(probs, res.probs[b], atol=1e-12)
        assert np.allclose(embed_instance(p, inst).g, g, atol=1e-12)


def test_encode_input_validation():
    p = small_params()
    with pytest.raises(ValueError, match="shape"):
        encode_states(np.zeros((3, 6)), p)
    with pytest.raises(ValueError, match="at least one graph"):
        encode_graphs([], p)


def test_evolution_toggle():
    p = small_params()
    frozen = evolved_weights(p, 4, evolve=False)
    assert all(np.array_equal(w, p.weights["graph.W0"]) for w in frozen)
    live = evolved_weights(p, 4)
    assert np.array_equal(live[0], p.weights["graph.W0"])
    assert not np.allclose(live[1], live[0])
    inst = tiny_dataset().instances[0]
    graphs = build_interaction_graphs(inst)
    assert not np.allclose(encode_graphs(graphs, p), encode_graphs(graphs, p, evolve=False))


def test_isolated_target_graph_features_are_its_own():
    inst = tiny_dataset().instances[0]
    lone = Instance("lone", tuple(Frame(f.t, (f.target,), 0) for f in inst.frames), inst.label,
                    inst.ttb_frames, inst.frame_rate_hz)
    p = small_params()
    feats = featurize([lone], p.config)
    assert np.allclose(feats.graph_num, feats.state_num)
    assert np.all(np.isfinite(embed_instance(p, lone).g))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 15), st.randoms(use_true_random=False))
def test_agent_order_does_not_matter(k, rnd):
    inst = tiny_dataset().instances[k]
    frames = []
    for f in inst.frames:
        agents = list(f.agents)
        rnd.shuffle(agents)
        frames.append(Frame(f.t, tuple(agents), f.target_uid))
    shuffled = Instance(inst.instance_id, tuple(frames), inst.label, inst.ttb_frames, inst.frame_rate_hz)
    p = small_params()
    assert np.allclose(embed_instance(p, inst).g, embed_instance(p, shuffled).g, atol=1e-12)


def test_gradients_match_finite_differences():
    data = tiny_dataset()
    p = small_params(seed=3)
    # perturb zero-initialized biases and unit alphas so every path carries signal
    rng = np.random.default_rng(0)
    for k in p.weights:
        p.weights[k] = p.weights[k] + 0.1 * rng.normal(size=p.weights[k].shape)
    res = grad_check(p, data.instances[:5], epsilon=1e-5, n_coords=300, seed=1,
                     labels=data.taxonomy.names)
    assert res.max_rel_error <= 1e-4, res.worst()


def test_gradient_check_detects_injected_fault():
    data = tiny_dataset()
    p = small_params(seed=3)

    def faulty(params, feats, targets):
        _, grads = loss_and_grads(params, feats, targets)
        grads["graph.Uz"] = grads["graph.Uz"] * 1.05
        return grads

    res = grad_check(p, data.instances[:3], labels=data.taxonomy.names, grad_fn=faulty,
                     names=["graph.Uz"], n_coords=20)
    assert res.max_rel_error > 1e-2


def test_save_load_roundtrip_and_hash(tmp_path):
    p = small_params()
    path = tmp_path / "enc.json"
    p.save(path)
    q = EncoderParams.load(path)
    assert q.config == p.config
    assert all(np.array_equal(p.weights[k], q.weights[k]) for k in p.weights)
    assert q.content_hash() == p.content_hash()
    doc = json.loads(path.read_text())
    doc["version"] = "encoder/v0"
    with pytest.raises(ValueError, match="version"):
        EncoderParams.from_json(doc)
    doc = json.loads(path.read_text())
    doc["weights"]["cls.b"]["shape"] = [3]
    with pytest.raises(ValueError, match="shape"):
        EncoderParams.from_json(doc)


def test_optimizer_groups():
    p = small_params()
    opt = make_optimizer(p, BaseTrainConfig(lr_state=1e-3, lr_graph=2e-2))
    assert opt.lr["graph.W0"] == 2e-2 and opt.lr["state.W_in"] == 1e-3 and opt.lr["cls.W"] == 1e-3


def test_training_reduces_loss_and_is_deterministic():
    data = tiny_dataset(n_per_class=4)
    cfg = BaseTrainConfig(epochs=15, batch_size=8, lr_state=5e-3, lr_graph=5e-3, seed=2)
    enc = EncoderConfig(T=4, M=8, **SMALL)
    h1, h2 = [], []
    a = train_base(data, cfg, enc, history=h1)
    b = train_base(data, cfg, enc, history=h2)
    assert h1 == h2 and a.dumps() == b.dumps()
    assert h1[-1] < h1[0]
    preds = predict_base(a, data.instances, data.taxonomy.names)
    assert sum(p == i.label for p, i in zip(preds, data.instances)) > len(data) / 8


def test_training_rejects_mismatched_config():
    data = tiny_dataset()
    with pytest.raises(ValueError, match="does not match"):
        train_base(data, BaseTrainConfig(epochs=1), EncoderConfig(T=5, M=8))
    with pytest.raises(ValueError, match="empty"):
        train_base(Dataset((), data.taxonomy), BaseTrainConfig(epochs=1))


def test_embed_empty_and_wrong_length():
    p = small_params()
    assert embed(p, []).shape == (0, 8)
    with pytest.raises(ValueError, match="T=6"):
        featurize(tiny_dataset(T=6).instances[:1], p.config)
