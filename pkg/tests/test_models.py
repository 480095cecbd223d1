import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metamix import autodiff as ad
from metamix.autodiff import Node, finite_diff_check, grad
from metamix.models import (
    ArchitectureError,
    FrozenSplit,
    MlpArchitecture,
    accuracy,
    cross_entropy,
    forward,
    glorot_bound,
    init_params,
)


def test_init_is_deterministic():
    arch = MlpArchitecture(4, (8,), 5)
    a, b = init_params(arch, 7), init_params(arch, 7)
    assert list(a) == list(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_param_count_and_order():
    arch = MlpArchitecture(4, (8,), 5)
    assert arch.num_params() == 4 * 8 + 8 + 8 * 5 + 5 == 85
    assert list(init_params(arch, 0)) == ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"]


def test_single_layer_bound():
    assert glorot_bound(2, 3) == pytest.approx(1.0954, abs=1e-4)
    p = init_params(MlpArchitecture(2, (), 3), 1)
    assert np.all(np.abs(p["layer0.weight"]) <= math.sqrt(6 / 5))
    np.testing.assert_array_equal(p["layer0.bias"], 0.0)


def test_init_weight_mean_is_centred():
    arch = MlpArchitecture(100, (), 100)
    w = init_params(arch, 3)["layer0.weight"].ravel()
    assert w.size == 10**4
    sigma = glorot_bound(100, 100) / math.sqrt(3)
    assert abs(w.mean()) <= 3 * sigma / 100


@pytest.mark.parametrize("bad", [dict(output_dim=1), dict(hidden_dims=(0,)), dict(activation="tanh")])
def test_architecture_validation(bad):
    kw = dict(input_dim=3, hidden_dims=(4,), output_dim=2) | bad
    with pytest.raises(ArchitectureError):
        MlpArchitecture(**kw)


@given(st.integers(1, 50), st.lists(st.integers(1, 50), max_size=4), st.integers(2, 20))
def test_serialize_roundtrip(d, hidden, n):
    arch = MlpArchitecture(d, tuple(hidden), n)
    assert MlpArchitecture.parse(arch.serialize()) == arch


def test_zero_params_give_zero_logits():
    arch = MlpArchitecture(3, (4,), 2)
    zeros = {k: np.zeros(s) for k, s in arch.param_shapes().items()}
    out = forward(arch, zeros, np.random.default_rng(0).normal(size=(5, 3)))
    np.testing.assert_array_equal(out.value, np.zeros((5, 2)))


def test_identity_layer():
    arch = MlpArchitecture(2, (), 2)
    out = forward(arch, {"layer0.weight": np.eye(2), "layer0.bias": np.zeros(2)}, np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(out.value, [[1.0, 2.0]])


def test_forward_under_node_params_matches_arrays():
    arch = MlpArchitecture(4, (6, 5), 3)
    p = init_params(arch, 2)
    x = np.random.default_rng(1).normal(size=(7, 4))
    a = forward(arch, p, x).value
    b = forward(arch, {k: Node(v) for k, v in p.items()}, x).value
    assert a.tobytes() == b.tobytes()


def test_forward_errors_name_layer():
    arch = MlpArchitecture(4, (6,), 3)
    p = dict(init_params(arch, 0))
    with pytest.raises(ArchitectureError, match="layer0"):
        forward(arch, p, np.ones((2, 5)))
    p["layer1.weight"] = np.ones((5, 3))
    with pytest.raises(ArchitectureError, match="layer1"):
        forward(arch, p, np.ones((2, 4)))


def test_forward_differentiable_in_x():
    arch = MlpArchitecture(3, (4,), 2)
    p = init_params(arch, 5)
    x = np.random.default_rng(2).normal(size=(2, 3))
    errs = finite_diff_check(lambda q: ad.sum(forward(arch, p, q["x"]) * forward(arch, p, q["x"])), {"x": x})
    assert errs["x"] <= 1e-6


def test_uniform_logits_give_log_n():
    loss = cross_entropy(Node(np.zeros((3, 5))), np.eye(5)[[0, 3, 4]])
    assert float(loss.value) == pytest.approx(math.log(5), abs=1e-12)
    assert float(cross_entropy(Node([[0.0, 0.0]]), [[0.5, 0.5]]).value) == pytest.approx(0.69315, abs=1e-5)


def test_loss_decreases_with_margin():
    y = [[1.0, 0.0, 0.0]]
    small = float(cross_entropy(Node([[1.0, 0.0, 0.0]]), y).value)
    large = float(cross_entropy(Node([[3.0, 0.0, 0.0]]), y).value)
    assert large < small


@pytest.mark.parametrize("bad", [[[0.6, 0.6]], [[1.2, -0.2]], [1.0, 0.0]])
def test_cross_entropy_rejects_non_distributions(bad):
    with pytest.raises(ValueError):
        cross_entropy(Node(np.zeros((1, 2))), bad)


@settings(max_examples=80, deadline=None)
@given(
    arrays(np.float64, (4, 5), elements=st.floats(-5, 5)),
    st.lists(st.integers(0, 4), min_size=4, max_size=4),
    st.lists(st.integers(0, 4), min_size=4, max_size=4),
    st.floats(0, 1),
)
def test_cross_entropy_linear_in_target(logits, m, n, lam):
    ym, yn = np.eye(5)[m], np.eye(5)[n]
    z = Node(logits)
    mixed = float(cross_entropy(z, lam * ym + (1 - lam) * yn).value)
    split = lam * float(cross_entropy(z, ym).value) + (1 - lam) * float(cross_entropy(z, yn).value)
    assert mixed == pytest.approx(split, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), st.floats(0.05, 0.95))
def test_cross_entropy_gradient_is_softmax_minus_target(logits, lam):
    t = lam * np.eye(4)[[0, 1, 2]] + (1 - lam) * np.eye(4)[[3, 3, 0]]
    z = Node(logits)
    g = grad(cross_entropy(z, t), z).value
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    np.testing.assert_allclose(g, (p - t) / 3, atol=1e-14)
    errs = finite_diff_check(lambda q: cross_entropy(q["z"], t), {"z": logits})
    assert errs["z"] <= 1e-6


def test_accuracy_counts_argmax_hits():
    arch = MlpArchitecture(2, (), 2)
    p = {"layer0.weight": np.eye(2), "layer0.bias": np.zeros(2)}
    x = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 1.0], [0.0, 3.0]])
    assert accuracy(arch, p, x, np.array([0, 1, 1, 1])) == 0.75


def test_frozen_split_invariants():
    with pytest.raises(ValueError):
        FrozenSplit(("a", "b"), ("b",))
    fs = FrozenSplit(("a",), ("b",))
    fs.check_covers({"a": 1, "b": 2})
    with pytest.raises(ValueError):
        fs.check_covers({"a": 1, "b": 2, "c": 3})
