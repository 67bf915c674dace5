import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intuit3d.graph import (
    GraphConfig,
    Material,
    ParticleState,
    build_graph,
    default_relation_table,
    mean_degree,
    neighbor_search,
    neighbor_search_brute,
)
from intuit3d.scenarios import default_params, simulate_shake

from conftest import make_state


def _pairs(edges):
    return {tuple(e) for e in np.asarray(edges).tolist()}


def test_collinear_edges():
    pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.2, 0, 0]])
    assert _pairs(neighbor_search(pts, 0.15)) == {(0, 1), (1, 0), (1, 2), (2, 1)}


def test_collinear_complete_graph():
    pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.2, 0, 0]])
    assert len(neighbor_search(pts, 0.25)) == 6


def test_threshold_is_strict():
    pts = np.array([[0.0, 0, 0], [0.5, 0, 0]])
    assert len(neighbor_search(pts, 0.5)) == 0
    assert len(neighbor_search_brute(pts, 0.5)) == 0


def test_non_finite_positions_rejected():
    with pytest.raises(ValueError):
        neighbor_search(np.array([[0.0, 0, np.nan]]), 0.1)


def test_hash_matches_brute_force_500():
    pts = np.random.default_rng(3).uniform(0, 1, size=(500, 3))
    np.testing.assert_array_equal(neighbor_search(pts, 0.12), neighbor_search_brute(pts, 0.12))


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(0, 1000),
    delta=st.floats(0.02, 0.6),
    seed=st.integers(0, 2**16),
    offset=st.floats(-50, 50),
)
def test_hash_equals_brute_property(n, delta, seed, offset):
    pts = np.random.default_rng(seed).uniform(-0.5, 0.5, size=(n, 3)) + offset
    np.testing.assert_array_equal(neighbor_search(pts, delta), neighbor_search_brute(pts, delta))


def test_hash_equals_brute_on_lattice_ties():
    # lattice points sit exactly delta apart: the strict rule must drop them identically
    g = np.arange(6) * 0.1
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    np.testing.assert_array_equal(neighbor_search(pts, 0.1), neighbor_search_brute(pts, 0.1))


def test_single_particle_graph():
    s = ParticleState(np.zeros((1, 3)), np.zeros((1, 3, 3)), [Material.FLUID], [0])
    g = build_graph(s, GraphConfig())
    assert g.n_vertices == 1 and g.n_edges == 0
    assert mean_degree(g) == 0.0


def test_fluid_actuated_relation_both_directions():
    s = ParticleState(
        np.array([[0.0, 0, 0], [0.05, 0, 0]]), np.zeros((2, 3, 3)), [Material.FLUID, Material.ACTUATED], [0, 10]
    )
    cfg = GraphConfig()
    g = build_graph(s, cfg)
    rel = cfg.relation_table[(Material.FLUID, Material.ACTUATED)]
    assert g.n_edges == 2
    assert np.all(g.relation == rel)
    nrel = cfg.n_relations
    assert np.all(g.edge_attr[:, rel] == 1.0) and np.all(g.edge_attr[:, :nrel].sum(axis=1) == 1.0)


def test_edge_attributes_displacement_and_distance():
    s = ParticleState(np.array([[0.0, 0, 0], [0.03, 0.04, 0]]), np.zeros((2, 3, 3)), [0, 0], [0, 0])
    cfg = GraphConfig()
    g = build_graph(s, cfg)
    nrel = cfg.n_relations
    first = np.flatnonzero((g.edge_i == 0) & (g.edge_j == 1))[0]
    np.testing.assert_allclose(g.edge_attr[first, nrel : nrel + 3], [0.03, 0.04, 0.0])
    assert g.edge_attr[first, nrel + 3] == pytest.approx(0.05)


def test_vertex_attributes_history_and_one_hot():
    s = make_state(n_free=2, n_act=1)
    g = build_graph(s, GraphConfig())
    np.testing.assert_array_equal(g.vertex_attr[:, :9], s.velocity_history.reshape(3, 9))
    np.testing.assert_array_equal(g.vertex_attr[:, 9:], np.eye(5)[s.materials])


def test_relation_table_covers_unordered_pairs():
    table = default_relation_table()
    assert len(table) == 15
    assert GraphConfig().n_relations == 16


def test_unknown_pair_maps_to_generic_type():
    cfg = GraphConfig(relation_table={(0, 0): 0})
    s = ParticleState(np.array([[0.0, 0, 0], [0.05, 0, 0]]), np.zeros((2, 3, 3)), [0, 3], [0, 1])
    g = build_graph(s, cfg)
    assert np.all(g.relation == 1)


def test_complete_graph_degree():
    pts = np.array([[0.0, 0, 0], [0.01, 0, 0], [0, 0.01, 0], [0, 0, 0.01]])
    s = ParticleState(pts, np.zeros((4, 3, 3)), [0] * 4, [0] * 4)
    assert mean_degree(build_graph(s, GraphConfig())) == 3.0


def test_collinear_mean_degree():
    pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.2, 0, 0]])
    s = ParticleState(pts, np.zeros((3, 3, 3)), [0] * 3, [0] * 3)
    assert mean_degree(build_graph(s, GraphConfig())) == pytest.approx(4 / 3)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), shift=st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_symmetry_and_translation_invariance(seed, shift):
    s = make_state(n_free=20, n_act=5, seed=seed)
    cfg = GraphConfig(delta=0.2)
    g = build_graph(s, cfg)
    edges = _pairs(np.stack([g.edge_i, g.edge_j], 1))
    assert edges == {(j, i) for i, j in edges}
    assert all(i != j for i, j in edges)
    # quarter-metre multiples keep the shift exact in binary
    t = np.round(np.asarray(shift) * 4) / 4
    g2 = build_graph(s.translated(t), cfg)
    np.testing.assert_array_equal(g.edge_i, g2.edge_i)
    np.testing.assert_array_equal(g.edge_j, g2.edge_j)
    np.testing.assert_allclose(g.edge_attr, g2.edge_attr, atol=1e-12)


def test_history_mismatch_rejected():
    s = make_state(history=2)
    with pytest.raises(ValueError):
        build_graph(s, GraphConfig(n_history=3))


def test_shake_scene_mean_degree_in_paper_range():
    traj = simulate_shake(default_params("shake"), seed=0, n_frames=12)
    degrees = [mean_degree(build_graph(traj.state_at(t), GraphConfig(delta=0.15))) for t in (0, 5, 11)]
    assert all(20 <= d <= 30 for d in degrees), degrees


def test_graph_dump(tmp_path):
    g = build_graph(make_state(), GraphConfig())
    g.dump(tmp_path / "g.json")
    import json

    data = json.loads((tmp_path / "g.json").read_text())
    assert data["n_vertices"] == 9 and len(data["edges"]) == g.n_edges
