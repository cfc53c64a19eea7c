import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmaa2c.comms import FEATURE_DIM, SceneGraph, build_scene_graph
from cmaa2c.encoder import (
    EMBED,
    FC_NEIGHBORS,
    GraphWindow,
    attention_weights,
    encode,
    encode_batch,
    fc_input,
    gcn_forward,
    init_encoder,
    normalized_adjacency,
    temporal_attention,
)
from cmaa2c.numeric import Eval, Tape, grad
from cmaa2c.scenario import builtin_spec, spawn, step_world

from oracles import central_fd, rel_error, scalar


def _random_graph(rng, n, p=0.4, t=0):
    kinds = ["vehicle"] * n
    edges = [(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < p]
    return SceneGraph(kinds, rng.normal(size=(n, FEATURE_DIM)), edges, 0, t, [f"vehicle:{k}" for k in range(n)])


def _window(rng, n=4, t=5):
    return [_random_graph(rng, n, t=k) for k in range(t)]


def test_normalized_adjacency_pair():
    np.testing.assert_allclose(normalized_adjacency(np.array([[0, 1], [1, 0]])), np.full((2, 2), 0.5))


def test_normalized_adjacency_isolated_node_is_identity():
    np.testing.assert_allclose(normalized_adjacency(np.zeros((3, 3))), np.eye(3))


def test_normalized_adjacency_path_oracle():
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    d = np.array([2.0, 3.0, 2.0])
    expected = (a + np.eye(3)) / np.sqrt(np.outer(d, d))
    np.testing.assert_allclose(normalized_adjacency(a), expected)


def test_empty_graph_rejected():
    with pytest.raises(ValueError):
        normalized_adjacency(np.zeros((0, 0)))


def test_gcn_matches_dense_oracle():
    rng = np.random.default_rng(0)
    g = _random_graph(rng, 5)
    p = init_encoder(rng)
    a = normalized_adjacency(g.adjacency())
    relu = lambda z: np.maximum(z, 0)
    expected = relu(a @ relu(a @ g.features @ p["enc.W1"]) @ p["enc.W2"])
    np.testing.assert_allclose(gcn_forward(g, p), expected, atol=1e-12)


@settings(max_examples=40)
@given(st.integers(2, 9), st.randoms(use_true_random=False))
def test_gcn_is_permutation_equivariant(n, rnd):
    rng = np.random.default_rng(rnd.randint(0, 2**31))
    g = _random_graph(rng, n)
    p = init_encoder(rng)
    order = list(rng.permutation(n))
    np.testing.assert_allclose(gcn_forward(g.permuted(order), p), gcn_forward(g, p)[order], atol=1e-10)


@settings(max_examples=25)
@given(st.integers(2, 7), st.randoms(use_true_random=False))
def test_embedding_ignores_node_order(n, rnd):
    rng = np.random.default_rng(rnd.randint(0, 2**31))
    win = _window(rng, n)
    p = init_encoder(rng)
    perm = [g.permuted(list(rng.permutation(n))) for g in win]
    np.testing.assert_allclose(encode(perm, p), encode(win, p), atol=1e-10)


def test_attention_oracle():
    rng = np.random.default_rng(1)
    p = init_encoder(rng)
    seq = rng.normal(size=(5, 32))
    q = seq[-1] @ p["enc.Wq"]
    k = seq @ p["enc.Wk"]
    s = k @ q / math.sqrt(32)
    w = np.exp(s - s.max())
    w /= w.sum()
    np.testing.assert_allclose(attention_weights(seq, p), w)
    np.testing.assert_allclose(temporal_attention(seq, p)[0], w @ (seq @ p["enc.Wv"]), atol=1e-12)


def test_single_step_attention_is_value_projection():
    rng = np.random.default_rng(2)
    p = init_encoder(rng)
    seq = rng.normal(size=(1, 32))
    np.testing.assert_allclose(temporal_attention(seq, p), seq @ p["enc.Wv"], atol=1e-12)


def test_batch_equals_individual_windows():
    rng = np.random.default_rng(3)
    p = init_encoder(rng)
    shared = _random_graph(rng, 4)
    wins = [_window(rng) for _ in range(3)]
    wins[1][2] = shared
    wins[2][4] = shared
    batch = encode_batch(wins, p)
    assert batch.shape == (3, EMBED)
    for b, w in enumerate(wins):
        np.testing.assert_allclose(batch[b], encode(w, p)[0], atol=1e-12)


def test_ragged_batch_rejected():
    rng = np.random.default_rng(4)
    p = init_encoder(rng)
    with pytest.raises(ValueError):
        encode_batch([_window(rng, t=5), _window(rng, t=3)], p)


def test_embedding_is_bounded():
    rng = np.random.default_rng(5)
    p = init_encoder(rng)
    out = encode(_window(rng), p)
    assert np.all(np.abs(out) <= 1.0)


@pytest.mark.parametrize("kind", ["gcn-transformer", "fc"])
def test_encoder_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(6)
    p = init_encoder(rng, kind, hidden=4, embed=3)
    wins = [_window(rng, n=4, t=3) for _ in range(2)]
    probe = rng.normal(size=(2, 3))

    def loss(ops, params):
        return ops.sum(ops.mul(encode_batch(wins, params, ops), probe))

    t = Tape()
    bound = t.bind(p)
    analytic = grad(t, loss(t, bound), bound)
    numeric = central_fd(lambda q: scalar(loss(Eval(), q)), p)
    assert rel_error(analytic, numeric) <= 1e-4


def test_tape_and_eval_agree():
    rng = np.random.default_rng(7)
    p = init_encoder(rng)
    win = _window(rng)
    t = Tape()
    np.testing.assert_array_equal(encode(win, t.bind(p), t).value, encode(win, p))


def test_fc_input_orders_by_distance_and_pads():
    feats = np.zeros((4, FEATURE_DIM))
    feats[0, 2] = 0.3
    feats[1, :2] = [0.5, 0.0]
    feats[2, :2] = [0.1, 0.1]
    feats[3, 7] = 0.5  # road node, never a neighbor
    g = SceneGraph(["vehicle", "vehicle", "vehicle", "road"], feats, [], 0, 0)
    x = fc_input(g).reshape(FC_NEIGHBORS + 1, FEATURE_DIM)
    assert x.shape[0] * x.shape[1] == 56
    np.testing.assert_array_equal(x[0], feats[0])
    np.testing.assert_array_equal(x[1], feats[2])
    np.testing.assert_array_equal(x[2], feats[1])
    assert not x[3:].any()


def test_fc_input_keeps_k_nearest():
    rng = np.random.default_rng(8)
    feats = rng.normal(size=(10, FEATURE_DIM))
    g = SceneGraph(["vehicle"] * 10, feats, [], 0, 0)
    x = fc_input(g).reshape(FC_NEIGHBORS + 1, FEATURE_DIM)
    d = np.hypot(feats[1:, 0], feats[1:, 1])
    keep = 1 + np.argsort(d, kind="stable")[:FC_NEIGHBORS]
    np.testing.assert_array_equal(x[1:], feats[keep])


def test_window_left_pads_with_oldest():
    rng = np.random.default_rng(9)
    w = GraphWindow(5)
    with pytest.raises(ValueError):
        w.graphs
    a, b = _random_graph(rng, 3), _random_graph(rng, 3)
    w.push(a)
    w.push(b)
    assert w.graphs == [a, a, a, a, b]
    for _ in range(6):
        w.push(b)
    assert w.graphs == [b] * 5


def test_unknown_encoder():
    with pytest.raises(ValueError):
        init_encoder(np.random.default_rng(0), "lstm")


def test_real_scene_graphs_encode():
    world = spawn(builtin_spec("Intersection"))
    p = init_encoder(np.random.default_rng(0))
    win = GraphWindow()
    for _ in range(3):
        win.push(build_scene_graph(world.observation(0), world))
        step_world(world, {})
    assert encode(win, p).shape == (1, EMBED)
