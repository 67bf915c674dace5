"""Interaction graphs over particle states."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np


class Material(enum.IntEnum):
    FLUID = 0
    RIGID = 1
    GRANULAR = 2
    ACTUATED = 3
    ENVIRONMENT = 4


N_MATERIALS = len(Material)
# teacher-forced materials: positions come from the given trajectory
DRIVEN = (Material.ACTUATED, Material.ENVIRONMENT)


def default_relation_table() -> dict[tuple[int, int], int]:
    """Unordered material pair -> relation type id; the last id is the generic type."""
    pairs = combinations_with_replacement(range(N_MATERIALS), 2)
    return {pair: i for i, pair in enumerate(pairs)}


@dataclass
class ParticleState:
    positions: np.ndarray  # (N, 3) metres
    velocity_history: np.ndarray  # (N, n_s, 3) metres/frame, oldest first
    materials: np.ndarray  # (N,) Material values
    group_ids: np.ndarray  # (N,)
    frame_index: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocity_history = np.asarray(self.velocity_history, dtype=np.float64)
        self.materials = np.asarray(self.materials, dtype=np.int64)
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3):
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.velocity_history.ndim != 3 or self.velocity_history.shape[0] != n or self.velocity_history.shape[2] != 3:
            raise ValueError(f"velocity_history must be (N, n_s, 3), got {self.velocity_history.shape}")
        if self.materials.shape != (n,) or self.group_ids.shape != (n,):
            raise ValueError("materials and group_ids need one entry per particle")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def n_history(self) -> int:
        return self.velocity_history.shape[1]

    @property
    def driven(self) -> np.ndarray:
        return np.isin(self.materials, DRIVEN)

    def translated(self, offset) -> "ParticleState":
        return replace(self, positions=self.positions + np.asarray(offset, dtype=np.float64))

    def permuted(self, perm) -> "ParticleState":
        perm = np.asarray(perm)
        return ParticleState(
            self.positions[perm],
            self.velocity_history[perm],
            self.materials[perm],
            self.group_ids[perm],
            self.frame_index,
        )


@dataclass(frozen=True)
class GraphConfig:
    delta: float = 0.15
    n_history: int = 3
    relation_table: dict = field(default_factory=default_relation_table, compare=False)

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.n_history < 1:
            raise ValueError("n_history must be at least 1")

    @property
    def n_relations(self) -> int:
        return len(self.relation_table) + 1

    @property
    def vertex_dim(self) -> int:
        return 3 * self.n_history + N_MATERIALS

    @property
    def edge_dim(self) -> int:
        return self.n_relations + 4


@dataclass
class SceneGraph:
    state: ParticleState
    edge_i: np.ndarray  # i of edge (i, j); messages aggregate at i
    edge_j: np.ndarray  # j of edge (i, j)
    vertex_attr: np.ndarray  # (N, vertex_dim)
    edge_attr: np.ndarray  # (E, edge_dim)
    relation: np.ndarray  # (E,) relation type ids

    @property
    def n_vertices(self) -> int:
        return self.state.n

    @property
    def n_edges(self) -> int:
        return self.edge_i.shape[0]

    def to_json(self) -> dict:
        return {
            "n_vertices": self.n_vertices,
            "positions": self.state.positions.tolist(),
            "materials": self.state.materials.tolist(),
            "group_ids": self.state.group_ids.tolist(),
            "edges": np.stack([self.edge_i, self.edge_j], axis=1).tolist(),
            "relation": self.relation.tolist(),
            "vertex_attr": self.vertex_attr.tolist(),
            "edge_attr": self.edge_attr.tolist(),
        }

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


def _check_positions(positions: np.ndarray, delta: float) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    if delta <= 0:
        raise ValueError("delta must be positive")
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValueError(f"positions must be (N, 3), got {positions.shape}")
    if not np.all(np.isfinite(positions)):
        raise ValueError("non-finite particle positions")
    return positions


def neighbor_search_brute(positions: np.ndarray, delta: float) -> np.ndarray:
    """O(N^2) reference: all ordered pairs closer than ``delta``, sorted."""
    p = _check_positions(positions, delta)
    close = _sqdist(p[:, None, :] - p[None, :, :]) < delta * delta
    np.fill_diagonal(close, False)
    i, j = np.nonzero(close)
    return np.stack([i, j], axis=1).astype(np.int64)


def _sqdist(diff: np.ndarray) -> np.ndarray:
    # one fixed summation order so hash and brute force agree bit for bit
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]


_OFFSETS = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.int64)


def neighbor_search(positions: np.ndarray, delta: float) -> np.ndarray:
    """Ordered pairs (i, j), i != j, with |x_i - x_j| < delta, via a uniform hash.

    Cells have edge ``delta`` so every neighbour lies in the 27-cell block.
    The result is sorted lexicographically and equals :func:`neighbor_search_brute`.
    """
    p = _check_positions(positions, delta)
    n = p.shape[0]
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    cells = np.floor(p / delta).astype(np.int64)
    cells -= cells.min(axis=0)
    dims = cells.max(axis=0) + 3
    # pad by one so offset cells never wrap
    keys = _cell_key(cells + 1, dims)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    pairs_i, pairs_j = [], []
    for off in _OFFSETS:
        nk = _cell_key(cells + 1 + off, dims)
        lo = np.searchsorted(sorted_keys, nk, side="left")
        hi = np.searchsorted(sorted_keys, nk, side="right")
        counts = hi - lo
        if not counts.any():
            continue
        src = np.repeat(np.arange(n), counts)
        starts = np.repeat(lo - np.cumsum(counts) + counts, counts)
        dst = order[np.arange(counts.sum()) + starts]
        pairs_i.append(src)
        pairs_j.append(dst)
    i = np.concatenate(pairs_i)
    j = np.concatenate(pairs_j)
    diff = p[i] - p[j]
    keep = (i != j) & (_sqdist(diff) < delta * delta)
    i, j = i[keep], j[keep]
    sort = np.lexsort((j, i))
    return np.stack([i[sort], j[sort]], axis=1)


def _cell_key(cells: np.ndarray, dims: np.ndarray) -> np.ndarray:
    return (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]


def relation_ids(mat_i: np.ndarray, mat_j: np.ndarray, table: dict) -> np.ndarray:
    generic = len(table)
    lo = np.minimum(mat_i, mat_j)
    hi = np.maximum(mat_i, mat_j)
    lookup = np.full((N_MATERIALS + 1, N_MATERIALS + 1), generic, dtype=np.int64)
    for (a, b), rid in table.items():
        lookup[a, b] = rid
    lo = np.clip(lo, 0, N_MATERIALS)
    hi = np.clip(hi, 0, N_MATERIALS)
    return lookup[lo, hi]


def vertex_attributes(state: ParticleState) -> np.ndarray:
    onehot = np.zeros((state.n, N_MATERIALS))
    onehot[np.arange(state.n), state.materials] = 1.0
    return np.concatenate([state.velocity_history.reshape(state.n, -1), onehot], axis=1)


def build_graph(state: ParticleState, config: GraphConfig) -> SceneGraph:
    """Distance-threshold graph with vertex and edge attributes."""
    if state.n_history != config.n_history:
        raise ValueError(f"state carries {state.n_history} history frames, config expects {config.n_history}")
    edges = neighbor_search(state.positions, config.delta)
    edge_i, edge_j = edges[:, 0], edges[:, 1]
    rel = relation_ids(state.materials[edge_i], state.materials[edge_j], config.relation_table)
    onehot = np.zeros((len(edge_i), config.n_relations))
    onehot[np.arange(len(edge_i)), rel] = 1.0
    disp = state.positions[edge_j] - state.positions[edge_i]
    dist = np.sqrt(np.einsum("ij,ij->i", disp, disp))[:, None]
    edge_attr = np.concatenate([onehot, disp, dist], axis=1)
    return SceneGraph(state, edge_i, edge_j, vertex_attributes(state), edge_attr, rel)


def mean_degree(graph: SceneGraph) -> float:
    if graph.n_vertices < 1:
        raise ValueError("graph has no vertices")
    return graph.n_edges / graph.n_vertices
