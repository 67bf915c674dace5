import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intuit3d.numerics import autodiff as ad
from intuit3d.numerics import (
    AdamState,
    CheckpointError,
    ExprGraph,
    ShapeError,
    adam_step,
    backward,
    evaluate,
    finite_difference_gradient,
    load_params,
    relative_error,
    save_params,
)


def test_relu_forward():
    out = ad.relu(ad.const([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.value, [0.0, 0.0, 2.0])


def test_identity_linear():
    x = np.array([[1.5, -2.0, 3.0]])
    out = ad.linear(ad.leaf_input(x, "x"), np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(out.value, x)


def test_sum_of_sqnorm():
    assert ad.total(ad.sqnorm(ad.const([3.0, 4.0]))).value == 25.0


def test_square_derivative():
    x = ad.param([3.0], "x")
    g = ad.grad(ad.total(ad.mul(x, x)))
    assert g["x"][0] == 6.0


def test_inactive_relu_derivative():
    x = ad.param([-1.0], "x")
    assert ad.grad(ad.total(ad.relu(x)))["x"][0] == 0.0


def test_relu_subgradient_at_zero():
    x = ad.param([0.0], "x")
    assert ad.grad(ad.total(ad.relu(x)))["x"][0] == 0.0


def test_min_select_ties_route_to_lowest_index():
    x = ad.param([[2.0, 1.0, 1.0, 3.0]], "x")
    g = ad.grad(ad.total(ad.min_select(x, axis=1)))["x"]
    np.testing.assert_array_equal(g, [[0.0, 1.0, 0.0, 0.0]])


def test_min_select_exclude_diag():
    x = ad.param(np.array([[0.0, 5.0, 2.0], [5.0, 0.0, 1.0], [2.0, 1.0, 0.0]]), "x")
    out = ad.min_select(x, axis=1, exclude_diag=True)
    np.testing.assert_array_equal(out.value, [2.0, 1.0, 1.0])


def test_backward_rejects_non_scalar_seed():
    x = ad.param([1.0, 2.0], "x")
    g = ExprGraph({"y": ad.relu(x)})
    with pytest.raises(ValueError, match="not scalar"):
        backward(g, "y")


def test_shape_mismatch_names_node():
    with pytest.raises(ShapeError, match="add"):
        ad.add(ad.const([1.0, 2.0]), ad.const([1.0, 2.0, 3.0]))
    x = ad.leaf_input(np.ones((2, 3)), "x")
    y = ad.linear(x, np.ones((3, 4)))
    g = ExprGraph(y)
    with pytest.raises(ShapeError, match="leaf 'x'"):
        evaluate(g, {"x": np.ones((2, 5))})


def _two_layer(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 4))
    params = {
        "w1": rng.normal(size=(4, 7)),
        "b1": rng.normal(size=7),
        "w2": rng.normal(size=(7, 1)),
        "b2": rng.normal(size=1),
    }

    def build(p):
        h = ad.relu(ad.linear(ad.const(x), ad.param(p["w1"], "w1"), ad.param(p["b1"], "b1")))
        y = ad.linear(h, ad.param(p["w2"], "w2"), ad.param(p["b2"], "b2"))
        return ad.total(ad.mul(y, y))

    return params, build


def test_two_layer_network_matches_finite_differences():
    params, build = _two_layer()
    g = ad.grad(build(params))
    for name, value in params.items():

        def f(v, name=name):
            return build({**params, name: v}).value

        fd = finite_difference_gradient(f, value, eps=1e-5)
        assert relative_error(g[name], fd) < 1e-6, name


def test_evaluate_rebinds_and_is_deterministic():
    params, build = _two_layer()
    graph = ExprGraph({"loss": build(params)})
    first = evaluate(graph)["loss"]
    second = evaluate(graph)["loss"]
    assert first.tobytes() == second.tobytes()
    shifted = {**params, "b2": params["b2"] + 1.0}
    rebuilt = build(shifted).value
    assert evaluate(graph, shifted)["loss"] == rebuilt
    g = backward(graph, "loss")
    assert relative_error(g["b2"], ad.grad(build(shifted))["b2"]) == 0.0


# per-primitive gradient checks on random inputs away from kinks

def _check(build, x, tol=1e-6):
    g = ad.grad(build(ad.param(x, "x")))["x"]
    fd = finite_difference_gradient(lambda v: build(ad.const(v)).value, x, eps=1e-5)
    assert relative_error(g, fd) < tol


_rng = np.random.default_rng(42)
_W = _rng.normal(size=(4, 3))
_IDX = np.array([0, 2, 2, 1, 3, 0])
_WG_IDX = np.array([[0, 1], [2, 3], [3, 0]])
_WG_W = np.array([[0.25, 0.75], [0.5, 0.5], [0.9, 0.1]])

PRIMITIVE_CASES = {
    "linear": lambda x: ad.total(ad.mul(ad.linear(x, _W), ad.linear(x, _W))),
    "add": lambda x: ad.total(ad.mul(ad.add(x, x), x)),
    "sub": lambda x: ad.total(ad.mul(ad.sub(x, ad.scale(x, 0.3)), x)),
    "mul": lambda x: ad.total(ad.mul(x, ad.exp(x))),
    "relu": lambda x: ad.total(ad.mul(ad.relu(x), x)),
    "exp": lambda x: ad.total(ad.exp(x)),
    "sqrt": lambda x: ad.total(ad.mul(ad.sqrt(ad.add_const(ad.mul(x, x), 0.1)), x)),
    "softplus": lambda x: ad.total(ad.mul(ad.softplus(x), x)),
    "sigmoid": lambda x: ad.total(ad.mul(ad.sigmoid(x), x)),
    "sum_axis": lambda x: ad.total(ad.sqnorm(ad.sum_axis(x, 0))),
    "sqnorm": lambda x: ad.total(ad.exp(ad.scale(ad.sqnorm(x), 0.1))),
    "min_select": lambda x: ad.total(ad.mul(ad.min_select(x, axis=1), ad.min_select(x, axis=1))),
    "concat": lambda x: ad.total(ad.sqnorm(ad.concat([x, ad.exp(x)], axis=1))),
    "gather": lambda x: ad.total(ad.sqnorm(ad.gather(x, _IDX))),
    "segment_sum": lambda x: ad.total(ad.sqnorm(ad.segment_sum(ad.gather(x, _IDX), _IDX[::-1], 4))),
    "reshape": lambda x: ad.total(ad.sqnorm(ad.reshape(ad.exp(x), (2, -1)))),
    "scale_rows": lambda x: ad.total(ad.sqnorm(ad.scale_rows(x, ad.sum_axis(x, 1)))),
    "cumsum_exclusive": lambda x: ad.total(ad.exp(ad.cumsum_exclusive(x))),
    "weighted_gather": lambda x: ad.total(ad.sqnorm(ad.weighted_gather(x, _WG_IDX, _WG_W))),
    "mean": lambda x: ad.mean(ad.mul(x, ad.exp(x))),
    "scale": lambda x: ad.total(ad.exp(ad.scale(x, -0.7))),
    "add_const": lambda x: ad.total(ad.mul(ad.add_const(x, 0.4), x)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    x = np.random.default_rng(7).normal(size=(4, 4))
    # keep clear of the relu kink and min ties
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    _check(PRIMITIVE_CASES[name], x)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_composite_gradient_property(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5))
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    build = lambda v: ad.total(ad.mul(ad.softplus(ad.linear(v, _rng_w(seed))), ad.sigmoid(ad.linear(v, _rng_w(seed)))))
    _check(build, x)


def _rng_w(seed):
    return np.random.default_rng(seed + 1).normal(size=(5, 2))


def test_straight_through_identity_backward():
    x = ad.param([1.0, 2.0], "x")
    y = ad.straight_through(x, lambda v: v * 0.0 + 7.0)
    np.testing.assert_array_equal(y.value, [7.0, 7.0])
    np.testing.assert_array_equal(ad.grad(ad.total(y))["x"], [1.0, 1.0])


# Adam

def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([0.5, -0.5, 2.0])}
    g = {"w": np.array([3.0, -0.01, -1e3])}
    new, state = adam_step(p, g, AdamState(), lr=0.01)
    np.testing.assert_allclose(new["w"] - p["w"], -0.01 * np.sign(g["w"]), rtol=1e-5)
    assert state.step_count == 1


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([0.5, -0.5])}
    new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adam_zero_lr_leaves_params():
    p = {"w": np.array([0.5, -0.5])}
    new, _ = adam_step(p, {"w": np.array([1.0, 2.0])}, AdamState(), lr=0.0)
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adam_deterministic():
    p = {"w": np.array([0.5, -0.5])}
    g = {"w": np.array([0.3, 0.7])}
    s = AdamState()
    a, sa = adam_step(p, g, s, 1e-3)
    b, sb = adam_step(p, g, s, 1e-3)
    assert a["w"].tobytes() == b["w"].tobytes()
    assert sa.second_moment["w"].tobytes() == sb.second_moment["w"].tobytes()
    assert s.step_count == 0


def test_adam_rejects_nonfinite():
    with pytest.raises(FloatingPointError, match="'w'"):
        adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, AdamState(), 1e-3)


# finite differences

def test_fd_square():
    assert abs(finite_difference_gradient(lambda v: float(v[0] * v[0]), np.array([2.0]))[0] - 4.0) < 1e-8


def test_fd_constant():
    np.testing.assert_array_equal(finite_difference_gradient(lambda v: 3.0, np.ones(4)), np.zeros(4))


def test_fd_nonfinite():
    with pytest.raises(FloatingPointError):
        finite_difference_gradient(lambda v: float("nan"), np.ones(2))


# checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "c": np.array(1.5)}
    path = tmp_path / "p.ckpt"
    save_params(path, params, seed=3, step=17, meta={"hidden": 8})
    loaded, header = load_params(path)
    for k in params:
        assert loaded[k].tobytes() == params[k].tobytes()
    assert header["step"] == 17 and header["seed"] == 3 and header["meta"] == {"hidden": 8}


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "p.ckpt"
    save_params(path, {"a": np.ones(10), "b": np.ones(10)})
    data = path.read_bytes()
    path.write_bytes(data[:-20])
    with pytest.raises(CheckpointError, match="'b'"):
        load_params(path)


def test_checkpoint_corrupt_record(tmp_path):
    path = tmp_path / "p.ckpt"
    save_params(path, {"a": np.ones(10), "b": np.ones(10)})
    data = bytearray(path.read_bytes())
    data[-85] ^= 0xFF  # inside record 'a'
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="'a'"):
        load_params(path)
