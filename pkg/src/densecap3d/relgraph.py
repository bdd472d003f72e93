"""Message passing over object proposals.

Each step computes a message per directed edge ``i -> j`` from
``[g_i, g_j - g_i]`` with a step-specific MLP, then replaces every node
feature with the sum of its outgoing-edge messages.  One extra message layer
on the final node features yields per-edge relation features, which also
feed a 6-way relative-orientation classifier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from densecap3d import diffcore as dc
from densecap3d.diffcore import Tensor
from densecap3d.errors import DimensionError
from densecap3d.geometry import NUM_ORIENTATION_BINS, knn_graph


@dataclass(frozen=True, eq=False)
class SceneGraph:
    node_features: np.ndarray     # (M, D)
    edges: np.ndarray             # (E, 2) int, source then neighbor
    objectness_mask: np.ndarray   # (M,) bool

    @property
    def num_nodes(self) -> int:
        return len(self.node_features)


def build_scene_graph(features, centers, valid, k: int) -> SceneGraph:
    """KNN graph over the valid proposals only, keeping original node indices.

    Invalid (non-object) proposals stay in the node list but get no edges.
    """
    features = np.asarray(features)
    valid = np.asarray(valid, dtype=bool)
    keep = np.flatnonzero(valid)
    if len(keep) == 0:
        edges = np.zeros((0, 2), dtype=np.int64)
    else:
        local = knn_graph(np.asarray(centers)[keep], k)
        edges = keep[local] if len(local) else np.zeros((0, 2), dtype=np.int64)
    return SceneGraph(features, edges, valid)


def mlp(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = dc.relu(dc.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return dc.linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def init_mlp(rng: np.random.Generator, prefix: str, sizes: Sequence[int]) -> dict[str, Tensor]:
    n_in, n_hidden, n_out = sizes
    return {
        f"{prefix}.w1": dc.glorot(rng, n_in, n_hidden, name=f"{prefix}.w1"),
        f"{prefix}.b1": dc.zeros(n_hidden, name=f"{prefix}.b1"),
        f"{prefix}.w2": dc.glorot(rng, n_hidden, n_out, name=f"{prefix}.w2"),
        f"{prefix}.b2": dc.zeros(n_out, name=f"{prefix}.b2"),
    }


def init_graph_params(rng: np.random.Generator, steps: int, dim: int = 128, hidden: int = 128,
                      orientation_hidden: int = 128) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for step in range(steps):
        params.update(init_mlp(rng, f"graph.msg{step}", (2 * dim, hidden, dim)))
    params.update(init_mlp(rng, "graph.rel", (2 * dim, hidden, dim)))
    params.update(init_mlp(rng, "graph.ori", (dim, orientation_hidden, NUM_ORIENTATION_BINS)))
    return params


def message(g_i: Tensor, g_j: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Message along edge ``i -> j``; works row-wise on batches of edges."""
    if g_i.shape != g_j.shape:
        raise DimensionError(f"message endpoints differ in shape: {g_i.shape} vs {g_j.shape}")
    axis = g_i.ndim - 1
    return mlp(dc.concat([g_i, dc.sub(g_j, g_i)], axis=axis), params, prefix)


def aggregate(messages: Sequence[Tensor], dim: int = 128) -> Tensor:
    if not messages:
        return Tensor(np.zeros(dim))
    total = messages[0]
    for m in messages[1:]:
        total = dc.add(total, m)
    return total


def _edge_messages(g: Tensor, edges: np.ndarray, params, prefix: str) -> Tensor:
    src = dc.take_rows(g, edges[:, 0])
    dst = dc.take_rows(g, edges[:, 1])
    return message(src, dst, params, prefix)


def propagate(graph: SceneGraph, params: dict[str, Tensor], steps: int,
              residual: bool = False) -> tuple[Tensor, Tensor | None]:
    """Run ``steps`` rounds of message passing plus the relation layer.

    Returns the enhanced node features (M, D) and the relation features
    (E, D) aligned with ``graph.edges``, or ``None`` when there are no edges.
    With ``steps == 0`` the node features come back unchanged.
    """
    g = Tensor(graph.node_features)
    m = graph.num_nodes
    edges = graph.edges
    if len(edges) == 0:
        if steps > 0 and not residual:
            g = Tensor(np.zeros_like(g.data))
        return g, None
    for step in range(steps):
        msgs = _edge_messages(g, edges, params, f"graph.msg{step}")
        agg = dc.index_add(msgs, edges[:, 0], m)
        g = dc.add(g, agg) if residual else agg
    return g, _edge_messages(g, edges, params, "graph.rel")


def orientation_head(relations: Tensor, params: dict[str, Tensor]) -> Tensor:
    return mlp(relations, params, "graph.ori")
