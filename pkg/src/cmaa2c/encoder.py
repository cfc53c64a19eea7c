"""Spatial-temporal scene encoders: GCN plus temporal attention, and an FC baseline.

Every function takes an ``ops`` object (``numeric.Eval`` or a ``numeric.Tape``)
so the same code runs plain or recorded for differentiation.
"""

from __future__ import annotations

import math
from collections import deque
from typing import Sequence

import numpy as np

from .comms import FEATURE_DIM, SceneGraph
from .numeric import Eval

HIDDEN = 32
EMBED = 32
WINDOW = 5
FC_NEIGHBORS = 6
FC_HIDDEN = 64
ENCODERS = ("gcn-transformer", "fc")
_MASKED = -1e9


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(rng: np.random.Generator, kind: str = "gcn-transformer", features: int = FEATURE_DIM,
                 hidden: int = HIDDEN, embed: int = EMBED) -> dict[str, np.ndarray]:
    if kind == "gcn-transformer":
        return {
            "enc.W1": _uniform(rng, features, (features, hidden)),
            "enc.W2": _uniform(rng, hidden, (hidden, hidden)),
            "enc.Wq": _uniform(rng, hidden, (hidden, hidden)),
            "enc.Wk": _uniform(rng, hidden, (hidden, hidden)),
            "enc.Wv": _uniform(rng, hidden, (hidden, hidden)),
            "enc.Wo": _uniform(rng, hidden, (hidden, embed)),
        }
    if kind == "fc":
        n_in = (FC_NEIGHBORS + 1) * features
        return {
            "enc.fc1.W": _uniform(rng, n_in, (n_in, FC_HIDDEN)),
            "enc.fc1.b": _uniform(rng, n_in, (1, FC_HIDDEN)),
            "enc.fc2.W": _uniform(rng, FC_HIDDEN, (FC_HIDDEN, embed)),
            "enc.fc2.b": _uniform(rng, FC_HIDDEN, (1, embed)),
        }
    raise ValueError(f"unknown encoder {kind!r}; expected one of {ENCODERS}")


def encoder_kind(params) -> str:
    return "fc" if "enc.fc1.W" in params else "gcn-transformer"


def embed_dim(params) -> int:
    return params["enc.fc2.W"].shape[1] if "enc.fc2.W" in params else params["enc.Wo"].shape[1]


# ---------------------------------------------------------------------------
# graph convolution


def normalized_adjacency(adj: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a = np.asarray(adj, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise ValueError(f"adjacency must be a non-empty square matrix, got shape {a.shape}")
    a = a + np.eye(len(a))
    inv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * inv[:, None] * inv[None, :]


def _graph_arrays(graph) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(graph, SceneGraph):
        if graph.n_nodes == 0:
            raise ValueError("empty scene graph")
        a_hat = graph.cache.get("a_hat")
        if a_hat is None:
            a_hat = graph.cache["a_hat"] = normalized_adjacency(graph.adjacency())
        return a_hat, graph.features
    a_hat, x = graph
    return np.asarray(a_hat, dtype=np.float64), np.asarray(x, dtype=np.float64)


def gcn_forward(graph, params, ops=None):
    """Two relu graph-convolution layers; ``graph`` is a SceneGraph or (A_hat, X)."""
    ops = ops or Eval()
    a_hat, x = _graph_arrays(graph)
    if len(x) == 0:
        raise ValueError("empty scene graph")
    h1 = ops.relu(ops.matmul(ops.matmul(a_hat, x), params["enc.W1"]))
    return ops.relu(ops.matmul(ops.matmul(a_hat, h1), params["enc.W2"]))


def _block_diag(mats: Sequence[np.ndarray]) -> np.ndarray:
    n = sum(len(m) for m in mats)
    out = np.zeros((n, n))
    k = 0
    for m in mats:
        out[k:k + len(m), k:k + len(m)] = m
        k += len(m)
    return out


def gcn_ego_rows(graphs: Sequence[SceneGraph], params, ops=None):
    """Ego-node embedding of each graph (G x H), all graphs in one block-diagonal pass."""
    ops = ops or Eval()
    if not graphs:
        raise ValueError("no graphs to encode")
    a_hats, feats, rows = [], [], []
    offset = 0
    for g in graphs:
        a_hat, x = _graph_arrays(g)
        a_hats.append(a_hat)
        feats.append(x)
        rows.append(offset + g.ego_index)
        offset += len(x)
    h = gcn_forward((_block_diag(a_hats), np.concatenate(feats)), params, ops)
    select = np.zeros((len(graphs), offset))
    select[np.arange(len(graphs)), rows] = 1.0
    return ops.matmul(select, h)


# ---------------------------------------------------------------------------
# temporal attention


def attention_weights(seq: np.ndarray, params) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or len(seq) == 0:
        raise ValueError("attention needs a non-empty T x H sequence")
    q = seq[-1:] @ params["enc.Wq"]
    k = seq @ params["enc.Wk"]
    scores = q @ k.T / math.sqrt(seq.shape[1])
    e = np.exp(scores - scores.max())
    return (e / e.sum())[0]


def attend_windows(rows, index: np.ndarray, params, ops=None):
    """Single-head attention of each window's last step over its own steps.

    ``rows`` holds per-graph ego embeddings (G x H); ``index`` is a B x T array
    of row numbers, oldest first. Returns the B x H contexts.
    """
    ops = ops or Eval()
    index = np.asarray(index, dtype=int)
    if index.ndim != 2 or index.shape[1] == 0:
        raise ValueError("attention needs a non-empty window")
    b, t = index.shape
    n_rows = rows.shape[0]
    hdim = params["enc.Wq"].shape[0]
    gather = np.zeros((b * t, n_rows))
    gather[np.arange(b * t), index.reshape(-1)] = 1.0
    last = np.zeros((b, n_rows))
    last[np.arange(b), index[:, -1]] = 1.0
    seq = ops.matmul(gather, rows)
    q = ops.matmul(ops.matmul(last, rows), params["enc.Wq"])
    k = ops.matmul(seq, params["enc.Wk"])
    v = ops.matmul(seq, params["enc.Wv"])
    mask = np.full((b, b * t), _MASKED)
    for w in range(b):
        mask[w, w * t:(w + 1) * t] = 0.0
    scores = ops.add(ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(hdim)), mask)
    return ops.matmul(ops.softmax(scores), v)


def temporal_attention(seq, params, ops=None):
    """Context vector (1 x H) for one T x H sequence of ego embeddings."""
    ops = ops or Eval()
    if not hasattr(seq, "shape"):
        seq = np.asarray(seq, dtype=np.float64)
    t = seq.shape[0]
    if t == 0:
        raise ValueError("empty sequence")
    return attend_windows(seq, np.arange(t)[None, :], params, ops)


def project(context, params, ops=None):
    ops = ops or Eval()
    return ops.tanh(ops.matmul(context, params["enc.Wo"]))


# ---------------------------------------------------------------------------
# windows and full encoders


class GraphWindow:
    """The last ``size`` scene graphs of one agent, oldest first, left-padded."""

    def __init__(self, size: int = WINDOW):
        if size < 1:
            raise ValueError("window size must be >= 1")
        self.size = size
        self._graphs: deque = deque(maxlen=size)

    def push(self, graph: SceneGraph) -> None:
        self._graphs.append(graph)

    @property
    def graphs(self) -> list[SceneGraph]:
        if not self._graphs:
            raise ValueError("window is empty")
        g = list(self._graphs)
        return [g[0]] * (self.size - len(g)) + g

    def snapshot(self) -> tuple[SceneGraph, ...]:
        return tuple(self.graphs)


def _as_graphs(window) -> list[SceneGraph]:
    if isinstance(window, GraphWindow):
        return window.graphs
    graphs = list(window)
    if not graphs:
        raise ValueError("window is empty")
    return graphs


def fc_input(graph: SceneGraph) -> np.ndarray:
    """Ego features followed by the K nearest vehicles' features, zero-padded."""
    f = graph.features
    ego = graph.ego_index
    others = [k for k, kind in enumerate(graph.kinds) if kind == "vehicle" and k != ego]
    others.sort(key=lambda k: (math.hypot(f[k, 0], f[k, 1]), k))
    out = np.zeros((FC_NEIGHBORS + 1, f.shape[1]))
    out[0] = f[ego]
    for slot, k in enumerate(others[:FC_NEIGHBORS]):
        out[slot + 1] = f[k]
    return out.reshape(1, -1)


def encode_fc_inputs(x, params, ops=None):
    ops = ops or Eval()
    h = ops.relu(ops.linear(x, params["enc.fc1.W"], params["enc.fc1.b"]))
    return ops.tanh(ops.linear(h, params["enc.fc2.W"], params["enc.fc2.b"]))


def encode_fc(window, params, ops=None):
    return encode_fc_inputs(fc_input(_as_graphs(window)[-1]), params, ops)


def encode(window, params, ops=None):
    """1 x E embedding of one window of scene graphs."""
    return encode_batch([window], params, ops)


def encode_batch(windows, params, ops=None):
    """B x E embeddings; graphs shared between windows are convolved once."""
    ops = ops or Eval()
    windows = [_as_graphs(w) for w in windows]
    if not windows:
        raise ValueError("no windows to encode")
    if encoder_kind(params) == "fc":
        x = np.concatenate([fc_input(w[-1]) for w in windows])
        return encode_fc_inputs(x, params, ops)
    lengths = {len(w) for w in windows}
    if len(lengths) != 1:
        raise ValueError("all windows in a batch need the same length")
    unique: dict[int, int] = {}
    graphs: list[SceneGraph] = []
    index = np.zeros((len(windows), lengths.pop()), dtype=int)
    for b, w in enumerate(windows):
        for t, g in enumerate(w):
            k = unique.get(id(g))
            if k is None:
                k = unique[id(g)] = len(graphs)
                graphs.append(g)
            index[b, t] = k
    rows = gcn_ego_rows(graphs, params, ops)
    return project(attend_windows(rows, index, params, ops), params, ops)
