"""Message-passing point dynamics: encoders, propagation, state prediction, rollout.

Parameters live in a flat ``dict[str, ndarray]`` so they can be handed to
Adam and the checkpoint format directly.  Every fully connected layer that
consumes a concatenation is stored as one weight block per concatenated
piece; ``[a, b] @ [[Wa], [Wb]] == a @ Wa + b @ Wb``, and the per-vertex
pieces are computed once per vertex before being gathered onto edges.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .graph import GraphConfig, Material, ParticleState, SceneGraph, build_graph
from .numerics import autodiff as ad
from .numerics import init_linear

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 150
    propagation_steps: int = 3
    encoder_layers: int = 3
    # fixed normalisers; both are linear so translation invariance survives
    velocity_scale: float = 0.01  # metres/frame
    length_scale: float = 0.15  # metres

    def __post_init__(self):
        if self.propagation_steps < 1:
            raise ValueError("propagation_steps must be at least 1")
        if self.encoder_layers < 1 or self.hidden < 1:
            raise ValueError("encoder_layers and hidden must be positive")


class DynamicsModel:
    """Q_e, Q_v encoders, P_e, P_v propagators and the f_s velocity head."""

    def __init__(self, graph_config: GraphConfig, config: ModelConfig = ModelConfig(), params: Params | None = None):
        self.graph_config = graph_config
        self.config = config
        self.params: Params = params if params is not None else self.zero_params()
        expected = self._shapes()
        if set(self.params) != set(expected):
            raise ValueError(f"parameter names mismatch: {sorted(set(self.params) ^ set(expected))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name!r} has shape {self.params[name].shape}, expected {shape}")

    # layout -------------------------------------------------------------

    def _blocks(self) -> dict[str, tuple[list[tuple[str, int]], int]]:
        """layer -> ([(weight name, fan-in piece)], fan-out)."""
        h = self.config.hidden
        vd = self.graph_config.vertex_dim
        ed = self.graph_config.edge_dim
        layers: dict[str, tuple[list[tuple[str, int]], int]] = {}
        layers["qe0"] = ([("qe0_wi", vd), ("qe0_wj", vd), ("qe0_we", ed)], h)
        layers["qv0"] = ([("qv0_wv", vd), ("qv0_wa", h)], h)
        for k in range(1, self.config.encoder_layers):
            layers[f"qe{k}"] = ([(f"qe{k}_w", h)], h)
            layers[f"qv{k}"] = ([(f"qv{k}_w", h)], h)
        layers["pe"] = ([("pe_wg", h), ("pe_wi", h), ("pe_wj", h)], h)
        layers["pv"] = ([("pv_wh", h), ("pv_wa", h)], h)
        layers["fs"] = ([("fs_w", h)], 3)
        return layers

    def _shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer, (pieces, out) in self._blocks().items():
            for name, fan in pieces:
                shapes[name] = (fan, out)
            shapes[f"{layer}_b"] = (out,)
        return shapes

    def zero_params(self) -> Params:
        return {name: np.zeros(shape) for name, shape in self._shapes().items()}

    @classmethod
    def initialized(cls, graph_config: GraphConfig, config: ModelConfig = ModelConfig(), seed: int = 0) -> "DynamicsModel":
        model = cls(graph_config, config)
        rng = np.random.default_rng(seed)
        params = {}
        for layer, (pieces, out) in model._blocks().items():
            fan_in = sum(f for _, f in pieces)
            w, b = init_linear(rng, fan_in, out)
            row = 0
            for name, fan in pieces:
                params[name] = w[row : row + fan].copy()
                row += fan
            params[f"{layer}_b"] = b
        return cls(graph_config, config, params)

    def with_params(self, params: Params) -> "DynamicsModel":
        return DynamicsModel(self.graph_config, self.config, params)

    def param_nodes(self) -> dict[str, ad.Node]:
        return {name: ad.param(value, name) for name, value in self.params.items()}

    def describe(self) -> dict:
        return {
            "model": asdict(self.config),
            "graph": {"delta": self.graph_config.delta, "n_history": self.graph_config.n_history},
        }


@dataclass
class PropagationState:
    edge_effect: ad.Node  # g, (E, hidden)
    hidden: ad.Node  # h, (N, hidden)
    step: int = 0


def _vertex_features(graph: SceneGraph, model: DynamicsModel) -> np.ndarray:
    n_hist = 3 * graph.state.n_history
    feats = graph.vertex_attr.copy()
    feats[:, :n_hist] /= model.config.velocity_scale
    return feats


def edge_features(positions: ad.Node, graph: SceneGraph, model: DynamicsModel) -> ad.Node:
    """Relation one-hot, normalised displacement x_j - x_i and distance.

    Displacements are rebuilt from ``positions`` so gradients reach the
    particle positions that shaped the graph.
    """
    nrel = model.graph_config.n_relations
    disp = ad.sub(ad.gather(positions, graph.edge_j), ad.gather(positions, graph.edge_i))
    disp = ad.scale(disp, 1.0 / model.config.length_scale)
    dist = ad.reshape(ad.sqrt(ad.sqnorm(disp)), (-1, 1))
    return ad.concat([ad.const(graph.edge_attr[:, :nrel]), disp, dist], axis=1)


def _split_fc(
    vertex_parts: list[tuple[ad.Node, str, np.ndarray]],
    edge_parts: list[tuple[ad.Node, str]],
    bias: str,
    p: dict[str, ad.Node],
) -> ad.Node:
    """relu of a linear layer over [edge pieces, vertex pieces gathered per edge]."""
    (x0, w0), *rest = edge_parts
    out = ad.linear(x0, p[w0], p[bias])
    for x, w in rest:
        out = ad.add(out, ad.linear(x, p[w]))
    for x, w, idx in vertex_parts:
        out = ad.add(out, ad.gather(ad.linear(x, p[w]), idx))
    return ad.relu(out)


def _mlp_tail(x: ad.Node, prefix: str, model: DynamicsModel, p: dict[str, ad.Node]) -> ad.Node:
    for k in range(1, model.config.encoder_layers):
        x = ad.relu(ad.linear(x, p[f"{prefix}{k}_w"], p[f"{prefix}{k}_b"]))
    return x


def message_passing(
    graph: SceneGraph,
    model: DynamicsModel,
    params: dict[str, ad.Node] | None = None,
    positions: ad.Node | None = None,
) -> PropagationState:
    """g_ij = Q_e(v_i, v_j, a_ij);  h_i = Q_v(v_i, sum_k g_ik)."""
    p = params if params is not None else model.param_nodes()
    pos = positions if positions is not None else ad.const(graph.state.positions)
    v = ad.const(_vertex_features(graph, model))
    a = edge_features(pos, graph, model)
    n = graph.n_vertices
    h_dim = model.config.hidden
    if graph.n_edges:
        g = _split_fc(
            [(v, "qe0_wi", graph.edge_i), (v, "qe0_wj", graph.edge_j)],
            [(a, "qe0_we")],
            "qe0_b",
            p,
        )
        g = _mlp_tail(g, "qe", model, p)
        agg = ad.segment_sum(g, graph.edge_i, n)
    else:
        g = ad.const(np.zeros((0, h_dim)))
        agg = ad.const(np.zeros((n, h_dim)))
    h = ad.relu(ad.add(ad.linear(v, p["qv0_wv"], p["qv0_b"]), ad.linear(agg, p["qv0_wa"])))
    h = _mlp_tail(h, "qv", model, p)
    return PropagationState(g, h, 0)


def propagate(
    state: PropagationState,
    graph: SceneGraph,
    model: DynamicsModel,
    steps: int | None = None,
    params: dict[str, ad.Node] | None = None,
) -> ad.Node:
    """L rounds of g^l = P_e(g^{l-1}, h_i^{l-1}, h_j^{l-1}); h^l = P_v(h^{l-1}, sum_k g^l_ik)."""
    steps = model.config.propagation_steps if steps is None else steps
    if steps < 1:
        raise ValueError("propagation needs at least one step")
    p = params if params is not None else model.param_nodes()
    g, h = state.edge_effect, state.hidden
    n = graph.n_vertices
    for _ in range(steps):
        if graph.n_edges:
            g = _split_fc(
                [(h, "pe_wi", graph.edge_i), (h, "pe_wj", graph.edge_j)],
                [(g, "pe_wg")],
                "pe_b",
                p,
            )
            agg = ad.segment_sum(g, graph.edge_i, n)
        else:
            agg = ad.const(np.zeros((n, model.config.hidden)))
        h = ad.relu(ad.add(ad.linear(h, p["pv_wh"], p["pv_b"]), ad.linear(agg, p["pv_wa"])))
    return h


def predict_velocity(
    graph: SceneGraph,
    model: DynamicsModel,
    params: dict[str, ad.Node] | None = None,
    positions: ad.Node | None = None,
) -> ad.Node:
    """f_s(h^L) in metres/frame, (N, 3)."""
    p = params if params is not None else model.param_nodes()
    prop = message_passing(graph, model, p, positions)
    h = propagate(prop, graph, model, params=p)
    return ad.scale(ad.linear(h, p["fs_w"], p["fs_b"]), model.config.velocity_scale)


# rigid constraint -------------------------------------------------------


@dataclass
class CanonicalShape:
    group_id: int
    reference: np.ndarray  # (k, 3), centred

    @classmethod
    def from_positions(cls, group_id: int, positions: np.ndarray) -> "CanonicalShape":
        positions = np.asarray(positions, dtype=np.float64)
        return cls(int(group_id), positions - positions.mean(axis=0))


def kabsch(reference: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R (det +1) and translation t minimising |R ref + t - target|^2."""
    ref = np.asarray(reference, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if ref.shape != tgt.shape or ref.ndim != 2 or ref.shape[1] != 3:
        raise ValueError(f"kabsch needs matching (k, 3) arrays, got {ref.shape} and {tgt.shape}")
    ref_c = ref.mean(axis=0)
    tgt_c = tgt.mean(axis=0)
    cov = (ref - ref_c).T @ (tgt - tgt_c)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, tgt_c - rot @ ref_c


def rigid_project(predicted: np.ndarray, canonical: CanonicalShape) -> np.ndarray:
    """Nearest rigid placement of the canonical shape onto ``predicted``."""
    ref = canonical.reference
    if ref.shape[0] < 3:
        raise ValueError(f"rigid group {canonical.group_id} needs at least 3 points")
    sv = np.linalg.svd(ref, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise ValueError(f"rigid group {canonical.group_id} has a degenerate (rank < 2) shape")
    rot, t = kabsch(ref, predicted)
    return ref @ rot.T + t


def canonical_shapes(state: ParticleState, rigid_material: int) -> dict[int, CanonicalShape]:
    shapes = {}
    rigid = state.materials == rigid_material
    for gid in np.unique(state.group_ids[rigid]):
        sel = rigid & (state.group_ids == gid)
        shapes[int(gid)] = CanonicalShape.from_positions(int(gid), state.positions[sel])
    return shapes


# state prediction -------------------------------------------------------


def _next_history(state: ParticleState, next_positions: np.ndarray) -> np.ndarray:
    """Driven particles shift in their true velocity; others keep all-zero history."""
    hist = np.zeros_like(state.velocity_history)
    driven = state.driven
    if state.n_history > 1:
        hist[driven, :-1] = state.velocity_history[driven, 1:]
    hist[driven, -1] = next_positions[driven] - state.positions[driven]
    return hist


def predict_positions(
    state: ParticleState,
    actuated_next: np.ndarray,
    model: DynamicsModel,
    params: dict[str, ad.Node] | None = None,
    positions: ad.Node | None = None,
    shapes: dict[int, CanonicalShape] | None = None,
    rigid: bool = True,
) -> ad.Node:
    """Differentiable next positions, (N, 3).

    ``positions`` (optional) is a node carrying ``state.positions`` so that
    gradients can flow back through a previous prediction.
    """
    driven = np.flatnonzero(state.driven)
    free = np.flatnonzero(~state.driven)
    actuated_next = np.asarray(actuated_next, dtype=np.float64).reshape(-1, 3)
    if actuated_next.shape[0] != driven.size:
        raise ValueError(
            f"actuated_next has {actuated_next.shape[0]} points but the state has {driven.size} actuated particles"
        )
    pos = positions if positions is not None else ad.const(state.positions)
    graph = build_graph(state, model.graph_config)
    vel = predict_velocity(graph, model, params, pos)

    n = state.n
    moved = ad.add(ad.gather(pos, free), ad.gather(vel, free))
    pieces_idx = [free]
    pieces = [moved]
    if rigid and free.size:
        shapes = shapes if shapes is not None else canonical_shapes(state, Material.RIGID)
        free_mat = state.materials[free]
        free_gid = state.group_ids[free]
        rigid_rows = np.zeros(free.size, dtype=bool)
        out_idx, out_nodes = [], []
        for gid, shape in sorted(shapes.items()):
            rows = np.flatnonzero((free_mat == Material.RIGID) & (free_gid == gid))
            if rows.size == 0:
                continue
            if rows.size != shape.reference.shape[0]:
                raise ValueError(f"rigid group {gid} has {rows.size} points, canonical shape has {shape.reference.shape[0]}")
            rigid_rows[rows] = True
            proj = ad.straight_through(ad.gather(moved, rows), lambda x, s=shape: rigid_project(x, s))
            out_idx.append(free[rows])
            out_nodes.append(proj)
        if out_nodes:
            keep = np.flatnonzero(~rigid_rows)
            pieces_idx = [free[keep]] + out_idx
            pieces = [ad.gather(moved, keep)] + out_nodes
    full = ad.const(_scatter_const(n, driven, actuated_next))
    for idx, node in zip(pieces_idx, pieces):
        if idx.size:
            full = ad.add(full, ad.segment_sum(node, idx, n))
    return full


def _scatter_const(n: int, idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = np.zeros((n, 3))
    out[idx] = values
    return out


def advance(state: ParticleState, next_positions: np.ndarray) -> ParticleState:
    """State at t+1 given all next positions (history bookkeeping only)."""
    return ParticleState(
        next_positions,
        _next_history(state, next_positions),
        state.materials,
        state.group_ids,
        state.frame_index + 1,
    )


def predict_step(
    state: ParticleState,
    actuated_next: np.ndarray,
    model: DynamicsModel,
    shapes: dict[int, CanonicalShape] | None = None,
    rigid: bool = True,
) -> ParticleState:
    nxt = predict_positions(state, actuated_next, model, shapes=shapes, rigid=rigid).value
    return advance(state, nxt)


def rollout(
    initial: ParticleState,
    actuated_trajectory: np.ndarray,
    model: DynamicsModel,
    shapes: dict[int, CanonicalShape] | None = None,
    rigid: bool = True,
) -> list[ParticleState]:
    """Open-loop prediction for ``len(actuated_trajectory)`` frames.

    ``actuated_trajectory[k]`` holds the driven particles' positions at
    frame ``initial.frame_index + k + 1``.  Shapes default to the rigid
    groups as they appear in ``initial``.
    """
    traj = np.asarray(actuated_trajectory, dtype=np.float64)
    if traj.ndim != 3 or traj.shape[0] < 1:
        raise ValueError("actuated_trajectory must be (T >= 1, n_actuated, 3)")
    if shapes is None and rigid:
        shapes = canonical_shapes(initial, Material.RIGID)
    out = []
    state = initial
    for k in range(traj.shape[0]):
        state = predict_step(state, traj[k], model, shapes, rigid)
        if not np.all(np.isfinite(state.positions)):
            raise FloatingPointError(f"non-finite positions at rollout step {k + 1}")
        out.append(state)
    return out
