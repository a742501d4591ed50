import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stam.attention import (
    GlobalAttentionLayerParams,
    LayerNormParams,
    StamStack,
    attention_scores,
    default_hidden_dim,
    layer_forward,
    layer_norm,
    stack_forward,
)
from stam.autodiff import ParamStore, Tensor, check_gradients
from stam.errors import DimensionError
from stam.initializers import init_avg


def identity_layer(dim=1):
    eye = np.eye(dim)
    return GlobalAttentionLayerParams(Tensor(eye), Tensor(eye), Tensor(eye))


def random_stack(seed, layers, feat, d, normalize=True, zero_query=False):
    store = ParamStore(seed)
    return store, StamStack.create(store, layers, feat, d, normalize, zero_query)


def test_scores_identity_projection():
    scores = attention_scores(Tensor([1.0]), Tensor([[1.0], [3.0]]), identity_layer())
    np.testing.assert_allclose(scores.values, [1.0, 3.0], atol=1e-15)


def test_scores_zero_query():
    store = ParamStore(0)
    params = GlobalAttentionLayerParams.create(store, "l", 5, 3, normalize=False, zero_query=True)
    clips = Tensor(np.random.default_rng(0).normal(size=(4, 5)))
    assert np.all(attention_scores(Tensor(np.ones(5)), clips, params).values == 0.0)


def test_scores_identical_clips_equal():
    store = ParamStore(1)
    params = GlobalAttentionLayerParams.create(store, "l", 4, 2)
    clips = Tensor(np.tile([0.3, -1.0, 2.0, 0.5], (5, 1)))
    scores = attention_scores(Tensor([1.0, 2.0, 3.0, 4.0]), clips, params).values
    assert np.all(scores == scores[0])


def test_scores_dimension_error():
    params = identity_layer(2)
    with pytest.raises(DimensionError, match="expected"):
        attention_scores(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones((4, 2))), params)


def test_layer_forward_hand_evaluated():
    g, w = layer_forward(Tensor([1.0]), Tensor([[1.0], [3.0]]), identity_layer())
    lo = 1 / (1 + math.exp(2))
    np.testing.assert_allclose(w.values, [lo, 1 - lo], atol=1e-15)
    np.testing.assert_allclose(g.values, [lo * 1 + (1 - lo) * 3], atol=1e-15)
    assert g.values[0] == pytest.approx(2.76159, abs=5e-6)


def test_layer_forward_single_clip():
    store = ParamStore(2)
    params = GlobalAttentionLayerParams.create(store, "l", 3, 2)
    f = np.array([[0.5, -1.0, 2.0]])
    g, w = layer_forward(Tensor([1.0, 0.0, 1.0]), Tensor(f), params)
    assert w.values.tolist() == [1.0]
    np.testing.assert_allclose(g.values, params.W_v.values @ f[0], atol=1e-15)


def test_layer_forward_zero_query_gives_mean_of_values():
    store = ParamStore(3)
    params = GlobalAttentionLayerParams.create(store, "l", 3, 2, zero_query=True)
    f = np.random.default_rng(1).normal(size=(5, 3))
    g, w = layer_forward(Tensor(f.mean(axis=0)), Tensor(f), params)
    np.testing.assert_array_equal(w.values, np.full(5, 0.2))
    np.testing.assert_allclose(g.values, (f @ params.W_v.values.T).mean(axis=0), atol=1e-12)


def test_batched_matches_single():
    store, stack = random_stack(4, 2, 6, 3)
    f = np.random.default_rng(2).normal(size=(3, 5, 6))
    batch = stack_forward(init_avg(Tensor(f)), Tensor(f), stack)
    for b in range(3):
        single = stack_forward(init_avg(Tensor(f[b])), Tensor(f[b]), stack)
        for gb, gs in zip(batch.per_layer_globals, single.per_layer_globals):
            np.testing.assert_allclose(gb.values[b], gs.values, atol=1e-13)


def test_stack_of_one_is_layer_forward():
    store, stack = random_stack(5, 1, 4, 2)
    f = Tensor(np.random.default_rng(3).normal(size=(3, 4)))
    g0 = init_avg(f)
    trace = stack_forward(g0, f, stack)
    g1, w1 = layer_forward(g0, f, stack.layers[0])
    np.testing.assert_array_equal(trace.per_layer_globals[1].values, g1.values)
    np.testing.assert_array_equal(trace.per_layer_weights[1].values, w1.values)
    assert trace.per_layer_weights[0] is None and trace.depth == 1


def test_stack_zero_query_chain():
    store, stack = random_stack(6, 3, 4, 2, zero_query=True)
    f = np.random.default_rng(4).normal(size=(5, 4))
    trace = stack_forward(init_avg(Tensor(f)), Tensor(f), stack)
    for layer, g, w in zip(stack.layers, trace.per_layer_globals[1:], trace.per_layer_weights[1:]):
        np.testing.assert_array_equal(w.values, np.full(5, 0.2))
        np.testing.assert_allclose(g.values, (f @ layer.W_v.values.T).mean(axis=0), atol=1e-12)


def test_stack_is_composition_of_layers():
    store, stack = random_stack(7, 2, 2, 2)
    f = Tensor(np.random.default_rng(5).normal(size=(3, 2)))
    g0 = init_avg(f)
    trace = stack_forward(g0, f, stack)
    g1, a1 = layer_forward(g0, f, stack.layers[0])
    g2, a2 = layer_forward(g1, f, stack.layers[1])
    assert len(trace.per_layer_globals) == 3 and len(trace.per_layer_weights) == 3
    np.testing.assert_array_equal(trace.per_layer_globals[2].values, g2.values)
    np.testing.assert_array_equal(trace.per_layer_weights[1].values, a1.values)
    np.testing.assert_array_equal(trace.per_layer_weights[2].values, a2.values)


def test_stack_requires_matching_layers():
    store = ParamStore(0)
    a = GlobalAttentionLayerParams.create(store, "a", 4, 2)
    b = GlobalAttentionLayerParams.create(store, "b", 4, 3)
    with pytest.raises(DimensionError):
        StamStack([a, b])
    with pytest.raises(DimensionError):
        StamStack([])


def test_default_hidden_dim():
    assert default_hidden_dim(2048) == 512
    assert default_hidden_dim(512) == 512
    assert default_hidden_dim(32) == 32


def test_layer_norm_statistics():
    store = ParamStore(0)
    norm = LayerNormParams.create(store, "n", 6)
    x = Tensor(np.random.default_rng(6).normal(3.0, 2.0, size=(4, 6)))
    y = layer_norm(x, norm).values
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-4)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n=st.integers(1, 8),
    feat=st.integers(1, 6),
    d=st.integers(1, 4),
    layers=st.integers(1, 3),
    scale=st.floats(0.01, 20.0),
)
def test_probability_and_convex_hull(seed, n, feat, d, layers, scale):
    store, stack = random_stack(seed, layers, feat, d, normalize=seed % 2 == 0)
    f = np.random.default_rng(seed).normal(scale=scale, size=(n, feat))
    trace = stack_forward(init_avg(Tensor(f)), Tensor(f), stack)
    for layer, g, w in zip(stack.layers, trace.per_layer_globals[1:], trace.per_layer_weights[1:]):
        a = w.values
        assert np.all(a >= 0) and abs(a.sum() - 1) <= 1e-9
        v = f @ layer.W_v.values.T
        assert np.all(g.values >= v.min(axis=0) - 1e-9)
        assert np.all(g.values <= v.max(axis=0) + 1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 7))
def test_permutation_equivariance(seed, n):
    store, stack = random_stack(seed, 3, 5, 3)
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(n, 5))
    perm = rng.permutation(n)
    base = stack_forward(init_avg(Tensor(f)), Tensor(f), stack)
    moved = stack_forward(init_avg(Tensor(f[perm])), Tensor(f[perm]), stack)
    for g, gp in zip(base.per_layer_globals, moved.per_layer_globals):
        np.testing.assert_allclose(gp.values, g.values, atol=1e-12)
    for w, wp in zip(base.per_layer_weights[1:], moved.per_layer_weights[1:]):
        np.testing.assert_allclose(wp.values, w.values[perm], atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 5, 9])
def test_identical_clips_uniform_everywhere(n):
    store, stack = random_stack(8, 3, 4, 2)
    f = np.tile([0.7, -0.2, 1.5, 0.1], (n, 1))
    trace = stack_forward(init_avg(Tensor(f)), Tensor(f), stack)
    for layer, g, w in zip(stack.layers, trace.per_layer_globals[1:], trace.per_layer_weights[1:]):
        np.testing.assert_array_equal(w.values, np.full(n, 1.0 / n))
        # every clip's value is W_v f, independent of N
        np.testing.assert_allclose(g.values, layer.W_v.values @ f[0], atol=1e-12)


def test_single_layer_gradients():
    store = ParamStore(9)
    layer = GlobalAttentionLayerParams.create(store, "l", 4, 4)
    f = Tensor(np.random.default_rng(7).normal(size=(3, 4)))
    target = np.random.default_rng(8).normal(size=4)

    def build(_):
        g, _w = layer_forward(init_avg(f), f, layer)
        return ((g - Tensor(target)) ** 2.0).sum()

    report = check_gradients(build, store)
    assert report.passed(1e-4), report.max_relative_error
