import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ememndt.layers import (
    Adam,
    attention_backward,
    attention_forward,
    check_gradients,
    log_softmax,
    relative_error,
    sigmoid,
    sinusoidal_encoding,
    softmax,
    softmax_backward,
)


def test_softmax_two_logits():
    assert softmax(np.array([1.0, 0.0]))[0] == pytest.approx(0.7311, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-300, 300)))
def test_softmax_normalizes_and_matches_log(z):
    p = softmax(z)
    assert np.allclose(p.sum(-1), 1.0)
    assert np.all(p >= 0)
    assert np.allclose(np.exp(log_softmax(z)), p)


def test_softmax_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    z, w = rng.normal(size=5), rng.normal(size=5)
    analytic = softmax_backward(w, softmax(z))
    eps = 1e-6
    numeric = np.array([(w @ softmax(z + eps * e) - w @ softmax(z - eps * e)) / (2 * eps)
                        for e in np.eye(5)])
    assert np.allclose(analytic, numeric, atol=1e-9)


def test_sinusoidal_encoding_values():
    pe = sinusoidal_encoding(3, 4)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert pe[1, 0] == pytest.approx(math.sin(1.0))
    assert pe[1, 3] == pytest.approx(math.cos(1.0 / 100.0))


def _attention_oracle(X, Wq, Wk, Wv, n_heads, Wo):
    """Per-sequence, per-head loops with explicit sums."""
    T, d = X.shape[0], Wq.shape[1]
    dh = d // n_heads
    Q, K, V = X @ Wq, X @ Wk, X @ Wv
    out = np.zeros((T, d))
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(T):
            scores = [sum(Q[i, sl] * K[j, sl]) / math.sqrt(dh) for j in range(T)]
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            tot = sum(w)
            out[i, sl] = sum((w[j] / tot) * V[j, sl] for j in range(T))
    return out @ Wo


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(3, 5, 6))
    Wq, Wk, Wv = (rng.normal(size=(6, 8)) for _ in range(3))
    Wo = rng.normal(size=(8, 8))
    out, _ = attention_forward(X, Wq, Wk, Wv, 2, Wo)
    for b in range(3):
        assert np.allclose(out[b], _attention_oracle(X[b], Wq, Wk, Wv, 2, Wo), atol=1e-12)


def test_attention_backward_gradcheck():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(2, 4, 6))
    params = {"X": X, "Wq": rng.normal(size=(6, 8)) * 0.5, "Wk": rng.normal(size=(6, 8)) * 0.5,
              "Wv": rng.normal(size=(6, 8)), "Wo": rng.normal(size=(8, 8))}
    R = rng.normal(size=(2, 4, 8))

    def loss():
        out, _ = attention_forward(params["X"], params["Wq"], params["Wk"], params["Wv"], 4, params["Wo"])
        return float((out * R).sum())

    out, cache = attention_forward(params["X"], params["Wq"], params["Wk"], params["Wv"], 4, params["Wo"])
    dX, grads = attention_backward(R, cache)
    grads["X"] = dX
    res = check_gradients(loss, params, grads, 1e-5, n_coords=150, seed=0)
    assert res.max_rel_error < 1e-6


def test_gradient_checker_catches_a_wrong_gradient():
    params = {"w": np.array([1.0, 2.0, 3.0])}
    good = {"w": 2 * params["w"]}
    loss = lambda: float((params["w"] ** 2).sum())  # noqa: E731
    assert check_gradients(loss, params, good, 1e-5, n_coords=3).max_rel_error < 1e-8
    bad = {"w": good["w"] * np.array([1.0, 1.0, 1.01])}
    res = check_gradients(loss, params, bad, 1e-5, n_coords=3)
    assert res.max_rel_error > 5e-3
    assert res.worst()[:2] == ("w", (2,))
    assert params["w"].tolist() == [1.0, 2.0, 3.0]  # restored


@pytest.mark.parametrize("eps", [1e-7, 1e-2])
def test_gradient_checker_epsilon_range(eps):
    with pytest.raises(ValueError, match="epsilon"):
        check_gradients(lambda: 0.0, {"w": np.zeros(1)}, {"w": np.zeros(1)}, eps)


def test_relative_error_floor():
    assert relative_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(1e-3)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == pytest.approx(0.5)


def test_sigmoid_is_stable():
    z = np.array([-800.0, 0.0, 800.0])
    assert sigmoid(z).tolist() == [0.0, 0.5, 1.0]


def test_adam_first_step_and_groups():
    p = {"a": np.array([1.0, -1.0]), "b": np.array([0.0])}
    opt = Adam({"a": 0.1, "b": 0.01})
    opt.step(p, {"a": np.array([3.0, -0.5]), "b": np.array([2.0])})
    # bias-corrected first step moves by lr * sign(g)
    assert np.allclose(p["a"], [0.9, -0.9], atol=1e-6)
    assert np.allclose(p["b"], [-0.01], atol=1e-6)


def test_adam_weight_decay_pulls_toward_zero():
    p = {"a": np.array([2.0])}
    Adam({"a": 0.1}, weight_decay=1.0).step(p, {"a": np.array([0.0])})
    assert p["a"][0] < 2.0
