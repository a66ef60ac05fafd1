import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iclcbf.neural import Mlp
from iclcbf.safety_filter import (
    AnalyticFunction,
    GridHeuristicPolicy,
    GridPolicySpec,
    HalfspaceBoxQp,
    cbf_qp_policy,
    constant_function,
    grid_heuristic_policy,
    solve_halfspace_box_qp,
    solve_qp_batch,
)
from iclcbf.scenarios import single_integrator_scenario

SI = single_integrator_scenario()
BOX = (np.array([-1.0, -1.0]), np.array([1.0, 1.0]))


def qp(a, b, u_ref, lo=BOX[0], hi=BOX[1]):
    return solve_halfspace_box_qp(HalfspaceBoxQp(np.array(a, float), float(b), np.array(u_ref, float), lo, hi))


def test_projection_example():
    u, ok = qp([1, 0], 0.5, [-1, 0])
    assert ok
    np.testing.assert_allclose(u, [-0.5, 0.0], atol=1e-15)


def test_feasible_reference_is_returned():
    u, ok = qp([1, 0], 2.0, [0, 0])
    assert ok and np.array_equal(u, [0.0, 0.0])


def test_infeasible_returns_least_violating_vertex():
    u, ok = qp([1, 0], -2.0, [0.3, 1.7])
    assert not ok
    np.testing.assert_array_equal(u, [1.0, 1.0])


def test_zero_normal_negative_offset_is_infeasible():
    u, ok = qp([0, 0], -0.1, [0.2, 0.2])
    assert not ok


def test_dimension_above_three_rejected():
    with pytest.raises(ValueError):
        qp(np.ones(4), 0.0, np.zeros(4), -np.ones(4), np.ones(4))


def test_qp_matches_brute_force_grid():
    rng = np.random.default_rng(2024)
    g = np.linspace(0.0, 1.0, 401)
    n_inst = 1000
    a = rng.normal(size=(n_inst, 2))
    b = rng.normal(size=n_inst)
    u_ref = rng.uniform(-2, 2, size=(n_inst, 2))
    lo = rng.uniform(-1.5, 0.0, size=(n_inst, 2))
    hi = lo + rng.uniform(0.1, 2.0, size=(n_inst, 2))
    u, ok = solve_qp_batch(a, b, u_ref, lo, hi)
    checked = 0
    for i in range(n_inst):
        xs = lo[i, 0] + g * (hi[i, 0] - lo[i, 0])
        ys = lo[i, 1] + g * (hi[i, 1] - lo[i, 1])
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        feas = a[i, 0] * X + a[i, 1] * Y + b[i] >= 0
        diam = np.hypot((hi[i, 0] - lo[i, 0]) / 400, (hi[i, 1] - lo[i, 1]) / 400)
        assert np.all(u[i] >= lo[i] - 1e-12) and np.all(u[i] <= hi[i] + 1e-12)
        if not feas.any():
            # at most a sliver thinner than a cell can be feasible
            best = np.maximum(a[i] * hi[i], a[i] * lo[i]).sum() + b[i]
            assert not ok[i] or best < np.abs(a[i]).sum() * diam
            continue
        assert ok[i]
        assert a[i] @ u[i] + b[i] >= -1e-9
        d_grid = np.sqrt(((X - u_ref[i, 0]) ** 2 + (Y - u_ref[i, 1]) ** 2)[feas].min())
        d_qp = np.linalg.norm(u[i] - u_ref[i])
        assert d_qp <= d_grid + 1e-9
        assert d_grid - d_qp <= diam
        checked += 1
    assert checked > 500  # the rest are infeasible instances, checked above


@settings(max_examples=300, deadline=None)
@given(
    a=st.tuples(st.floats(-3, 3), st.floats(-3, 3)),
    b=st.floats(-3, 3),
    u_ref=st.tuples(st.floats(-2, 2), st.floats(-2, 2)),
)
def test_feasible_solutions_satisfy_constraint_and_box(a, b, u_ref):
    u, ok = qp(a, b, u_ref)
    assert np.all(u >= -1 - 1e-12) and np.all(u <= 1 + 1e-12)
    if ok:
        assert np.dot(a, u) + b >= -1e-9


@settings(max_examples=200, deadline=None)
@given(a=st.tuples(st.floats(-3, 3), st.floats(-3, 3)), u_ref=st.tuples(st.floats(-1, 1), st.floats(-1, 1)))
def test_filter_inactive_when_reference_feasible(a, u_ref):
    b = -np.dot(a, u_ref) + 0.25
    u, ok = qp(a, b, u_ref)
    assert ok and np.array_equal(u, np.array(u_ref))


def test_one_dimensional_qp():
    lo, hi = np.array([-5.0]), np.array([5.0])
    u, ok = qp([2.0], 3.0, [-4.0], lo, hi)
    assert ok and u[0] == pytest.approx(-1.5)


def test_cbf_qp_policy_examples():
    pol = cbf_qp_policy(SI.system, SI.gt_cbf, 1.0, SI.reference)
    goal = np.array([[-2.0, 0.0]])
    np.testing.assert_allclose(pol(np.array([[2.0, 0.0]]), goal), [[-1.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(pol(np.array([[1.5, 0.0]]), goal), [[-0.5, 0.0]], atol=1e-12)
    assert pol.diagnostics.infeasible == 0


def test_constant_barrier_is_identity_filter():
    pol = cbf_qp_policy(SI.system, constant_function(1.0, 2), 1.0, SI.reference)
    rng = np.random.default_rng(0)
    x = rng.uniform(-6, 6, size=(50, 2))
    g = rng.uniform(-6, 6, size=(50, 2))
    assert np.array_equal(pol(x, g), SI.reference(x, g))


def test_cbf_qp_policy_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        cbf_qp_policy(SI.system, SI.gt_cbf, 0.0, SI.reference)


def test_ground_truth_filter_is_forward_invariant():
    pol = cbf_qp_policy(SI.system, SI.gt_cbf, 1.0, SI.reference)
    x0, goals = SI.sample_initial(np.random.default_rng(7), 500)
    batch = SI.rollout(pol, x0, goals)
    assert batch.terminations().count("failure") == 0
    assert min(np.linalg.norm(t.states, axis=1).min() for t in batch) >= 1.0 - 1e-6


# -- grid heuristic ---------------------------------------------------------


def _spec(cells=11):
    return GridPolicySpec((cells, cells), (-1.0, -1.0), (1.0, 1.0), 0.1)


def test_grid_centers():
    c = _spec(2).centers()
    np.testing.assert_allclose(c, [[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]])


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridPolicySpec((0, 3), (-1, -1), (1, 1), 0.1)


def test_grid_policy_with_permissive_constraint_picks_nearest_center():
    pol = grid_heuristic_policy(SI.system, constant_function(0.0, 2), 0.6, _spec(), SI.reference)
    x = np.array([[3.0, 0.4]])
    g = np.array([[0.0, 0.0]])
    u = pol(x, g)
    centers = _spec().centers()
    ref = SI.reference(x, g)[0]
    best = centers[np.argmin(np.linalg.norm(centers - ref, axis=1))]
    np.testing.assert_array_equal(u[0], best)
    assert pol.diagnostics.fallbacks == 0


def test_grid_policy_fallback_when_everything_violates():
    pol = grid_heuristic_policy(SI.system, constant_function(1.0, 2), 0.6, _spec(), SI.reference)
    pol(np.array([[3.0, 0.0]]), np.array([[0.0, 0.0]]))
    assert pol.diagnostics.fallbacks == 1


def _disk_indicator():
    # smooth indicator of the unit disk: ~1 inside, ~-1 outside
    def value(x):
        return np.tanh(20.0 * (1.0 - np.linalg.norm(np.atleast_2d(x), axis=1)))

    def grad(x):
        x = np.atleast_2d(x)
        r = np.linalg.norm(x, axis=1, keepdims=True)
        s = 1.0 - np.tanh(20.0 * (1.0 - r)) ** 2
        return -20.0 * s * x / np.maximum(r, 1e-12)

    return AnalyticFunction(value, grad, 2)


def test_grid_policy_deflects_and_matches_exhaustive_search():
    c = _disk_indicator()
    spec = _spec(21)
    pol = GridHeuristicPolicy(SI.system, c, 0.6, spec, SI.reference, first_chunk=4)
    x = np.array([[1.0, 0.0]])
    g = np.array([[-5.0, 0.5]])
    u = pol(x, g)[0]
    ref = SI.reference(x, g)[0]
    # exhaustive oracle: every center, one step, lowest flat index among nearest safe ones
    centers = spec.centers()
    succ = np.array([x[0] + 0.1 * cu for cu in centers])
    safe = c.forward(succ) < 0.6
    d = np.linalg.norm(centers - ref, axis=1)
    d[~safe] = np.inf
    oracle = centers[np.flatnonzero(d == d.min())[0]]
    np.testing.assert_array_equal(u, oracle)
    unfiltered = centers[np.argmin(np.linalg.norm(centers - ref, axis=1))]
    assert not np.array_equal(u, unfiltered)
    assert abs(u[1]) > abs(unfiltered[1]) or abs(u[0]) < abs(unfiltered[0])
    assert c.forward(x[0] + 0.1 * u) < 0.6


def test_grid_policy_tie_breaking_is_deterministic():
    c = _disk_indicator()
    pol = GridHeuristicPolicy(SI.system, c, 0.6, _spec(21), SI.reference)
    x = np.array([[1.05, 0.0]] * 3)
    g = np.array([[-5.0, 0.0]] * 3)
    u = pol(x, g)
    assert np.array_equal(u[0], u[1]) and np.array_equal(u[1], u[2])
    # a mirrored pair of equally close cells resolves to the lower flat index
    centers = _spec(21).centers()
    i = np.flatnonzero(np.all(centers == u[0], axis=1))[0]
    mirror = np.flatnonzero(np.all(np.isclose(centers, u[0] * [1, -1]), axis=1))[0]
    assert i <= mirror


def test_grid_policy_with_network_constraint():
    net = Mlp([2, 8, 1], "tanh", zero_output=True)
    pol = grid_heuristic_policy(SI.system, net, 0.6, _spec(), SI.reference)
    out = pol(np.zeros((4, 2)) + 3.0, np.zeros((4, 2)))
    assert out.shape == (4, 2)
