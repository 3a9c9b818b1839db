import itertools
import math

import numpy as np
import pytest

from drcl.errors import ConfigError, DataError, NumericalError
from drcl.model import (Batch, NetworkSpec, accuracy, flatten, init_params, layer_slices, layout, loss_and_grad,
                        predict_logits, unflatten)


def random_batch(spec, n, task_id=0, seed=0):
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(n, spec.input_dim)), rng.integers(0, spec.classes_per_head, n), task_id)


def central_diff(fun, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def test_param_count_small_spec():
    spec = NetworkSpec(2, [3], 1, 2)
    assert init_params(spec, 0).size == 2 * 3 + 3 + 3 * 2 + 2 == 17


def test_init_is_deterministic():
    spec = NetworkSpec(2, [3], 1, 2)
    assert init_params(spec, 0).tobytes() == init_params(spec, 0).tobytes()
    assert not np.array_equal(init_params(spec, 0), init_params(spec, 1))


def test_init_biases_zero_and_fan_in_bounded():
    spec = NetworkSpec(8, [5], 2, 3)
    for (w, b), s in zip(unflatten(init_params(spec, 3), spec), layout(spec)):
        assert np.all(b == 0)
        assert np.abs(w).max() <= math.sqrt(6.0 / s.rows)


@pytest.mark.parametrize("kwargs", [
    dict(input_dim=2, hidden_dims=[0]),
    dict(input_dim=0, hidden_dims=[3]),
    dict(input_dim=2, hidden_dims=[3], num_heads=0),
    dict(input_dim=2, hidden_dims=[3], activation="gelu"),
])
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        NetworkSpec(**kwargs)


def test_uniform_logits_give_log2():
    spec = NetworkSpec(3, [4], 1, 2)
    x = init_params(spec, 0)
    x[layer_slices(spec)[-1]] = 0.0
    loss, _ = loss_and_grad(x, Batch(np.ones((1, 3)), [1]), spec)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("classes", [2, 3, 7])
def test_uniform_logits_give_log_c(classes):
    spec = NetworkSpec(3, [4], 2, classes)
    x = init_params(spec, 1)
    for s in layer_slices(spec)[-2:]:
        x[s] = 0.0
    loss, _ = loss_and_grad(x, random_batch(spec, 5, task_id=1), spec)
    assert loss == pytest.approx(math.log(classes), abs=1e-14)


def test_inactive_head_gradient_is_exactly_zero():
    spec = NetworkSpec(4, [6, 5], 2, 3)
    x = init_params(spec, 2)
    _, g = loss_and_grad(x, random_batch(spec, 9, task_id=1), spec)
    head0 = layer_slices(spec)[2]
    assert np.all(g[head0] == 0.0)
    assert np.any(g[layer_slices(spec)[3]] != 0.0)


GRID = list(itertools.product([(3, [4], 1, 2), (2, [], 2, 3), (4, [3, 2], 2, 2), (3, [5, 4, 3], 1, 4)],
                              ["relu", "tanh"]))


@pytest.mark.parametrize("shape,act", GRID)
def test_gradient_matches_finite_differences(shape, act):
    spec = NetworkSpec(*shape, activation=act)
    assert spec.n_params <= 80
    rng = np.random.default_rng(7)
    x = rng.normal(size=spec.n_params)
    batch = random_batch(spec, 6, task_id=spec.num_heads - 1, seed=11)
    _, g = loss_and_grad(x, batch, spec)
    fd = central_diff(lambda p: loss_and_grad(p, batch, spec)[0], x)
    rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-4)
    assert rel.max() < 1e-5


def test_head_isolation_of_logits():
    spec = NetworkSpec(3, [4], 3, 2)
    x = init_params(spec, 0)
    inputs = np.random.default_rng(0).normal(size=(5, 3))
    before = [predict_logits(x, inputs, h, spec) for h in range(3)]
    x2 = x.copy()
    x2[layer_slices(spec)[1 + 1]] += 1.0  # head 1
    after = [predict_logits(x2, inputs, h, spec) for h in range(3)]
    assert np.array_equal(before[0], after[0]) and np.array_equal(before[2], after[2])
    assert not np.array_equal(before[1], after[1])


def test_flatten_unflatten_round_trip():
    spec = NetworkSpec(5, [4, 3], 2, 3)
    x = np.random.default_rng(1).normal(size=spec.n_params)
    layers = unflatten(x, spec)
    assert [w.shape for w, _ in layers] == [(5, 4), (4, 3), (3, 3), (3, 3)]
    assert flatten(layers).tobytes() == x.tobytes()


def test_loss_non_negative():
    spec = NetworkSpec(3, [4], 1, 3)
    for seed in range(20):
        x = np.random.default_rng(seed).normal(scale=3, size=spec.n_params)
        assert loss_and_grad(x, random_batch(spec, 4, seed=seed), spec)[0] >= 0


def test_label_out_of_range():
    spec = NetworkSpec(2, [3], 1, 2)
    with pytest.raises(DataError, match="label 2"):
        loss_and_grad(init_params(spec, 0), Batch(np.zeros((1, 2)), [2]), spec)


def test_non_finite_activation_names_layer():
    spec = NetworkSpec(2, [3, 3], 1, 2)
    x = init_params(spec, 0)
    x[layer_slices(spec)[1]] = np.inf
    with pytest.raises(NumericalError) as err:
        loss_and_grad(x, Batch(np.ones((1, 2)), [0]), spec)
    assert err.value.layer == 1


def test_accuracy_constant_output_all_correct():
    spec = NetworkSpec(2, [3], 1, 2)
    x = init_params(spec, 0)
    x[layer_slices(spec)[-1]] = 0.0
    x[-1] = 1.0  # bias of class 1
    assert accuracy(x, Batch(np.random.default_rng(0).normal(size=(10, 2)), np.ones(10)), spec) == 1.0


def test_accuracy_half_correct():
    spec = NetworkSpec(2, [3], 1, 2)
    x = init_params(spec, 0)
    x[layer_slices(spec)[-1]] = 0.0
    x[-1] = 1.0
    assert accuracy(x, Batch(np.zeros((4, 2)), [0, 1, 0, 1]), spec) == 0.5


def test_accuracy_ties_go_to_lowest_class():
    spec = NetworkSpec(2, [3], 1, 3)
    x = init_params(spec, 0)
    x[layer_slices(spec)[-1]] = 0.0
    assert accuracy(x, Batch(np.ones((3, 2)), [0, 0, 0]), spec) == 1.0


def test_accuracy_matches_per_sample_loop():
    spec = NetworkSpec(4, [5], 2, 3)
    x = np.random.default_rng(3).normal(size=spec.n_params)
    batch = random_batch(spec, 50, task_id=1, seed=4)
    correct = 0
    for u, v in zip(batch.inputs, batch.labels):
        h = u
        layers = unflatten(x, spec)
        w, b = layers[0]
        h = np.maximum(h @ w + b, 0)
        w, b = layers[2]
        logits = h @ w + b
        correct += int(np.argmax(logits) == v)
    assert accuracy(x, batch, spec) == correct / 50


def test_accuracy_empty_dataset():
    spec = NetworkSpec(2, [3], 1, 2)
    with pytest.raises(DataError):
        accuracy(init_params(spec, 0), Batch(np.zeros((0, 2)), np.zeros(0)), spec)
