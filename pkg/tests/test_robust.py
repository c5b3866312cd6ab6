import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepc_damping.datamat import partition
from deepc_damping.errors import ShapeError, VertexLimitError
from deepc_damping.plant import StateSpaceModel, simulate
from deepc_damping.predictive import DeePCConfig, IniBuffer, deepc_solve
from deepc_damping.qp import QpSolver
from deepc_damping.robust import (DfMinMaxController, DfPolicy, DisturbanceBox, MinMaxConfig, MinMaxController,
                                  RobustProblem, df_minmax_formulate, df_minmax_solve, enumerate_vertices,
                                  feedback_map, interpolate_disturbance, interpolation_weights, minmax_formulate,
                                  minmax_solve, minmax_step, toeplitz_expand)

from conftest import random_system


def filled(T_ini, u, y, w):
    ini = IniBuffer(T_ini, u.shape[1], y.shape[1], w.shape[1])
    for t in range(u.shape[0]):
        ini.push(u[t], y[t], w[t])
    return ini


def random_instance(seed, w_half=0.5, M=4, noise=0.0, T_ini=4, **cfg_kw):
    """Small data-driven Min-Max instance on a random SISO plant with one measured disturbance."""
    rng = np.random.default_rng(seed)
    model = random_system(rng, 3, 1, 1, q=1, rho=0.8)
    T = 200
    u = rng.standard_normal((T, 1))
    w = rng.standard_normal((T, 1))
    y = simulate(model, np.zeros(3), u, w).data + noise * rng.standard_normal((T, 1))
    N = 8
    blocks = partition(u, y, w, T_ini, N)
    ini = filled(T_ini, u[-T_ini:], y[-T_ini:], w[-T_ini:])
    kw = dict(T_ini=T_ini, N=N, k=2, Q=10.0, R=1.0, lambda_g=1.0, u_min=-2.0, u_max=2.0)
    kw.update(cfg_kw)
    cfg = MinMaxConfig(**kw, box=DisturbanceBox(1, -w_half, w_half, N, M))
    return blocks, cfg, ini


# -- interpolation --------------------------------------------------------------

def test_interpolation_hand_example():
    np.testing.assert_array_equal(interpolate_disturbance([0.0, 2.0, 4.0], 4, 2), [0.0, 1.0, 2.0, 4.0])


def test_interpolation_first_and_last_only():
    box = DisturbanceBox(2, -1, 1, 40, 40)
    assert box.n_r == 4
    W = interpolation_weights(40, 40)
    assert W.shape == (40, 2)
    w_hat = interpolate_disturbance([1.0, -3.0, 5.0, 7.0], 40, 40, q=2).reshape(40, 2)
    np.testing.assert_allclose(w_hat[0], [1.0, -3.0])
    np.testing.assert_allclose(w_hat[-1], [5.0, 7.0])
    np.testing.assert_allclose(w_hat[:, 0], np.linspace(1.0, 5.0, 40))


def test_interpolation_of_constant_is_constant():
    np.testing.assert_allclose(interpolate_disturbance(np.full(4, 0.7), 10, 3), 0.7)


def test_interpolation_without_downsampling_uses_first_N_points():
    # M = 1 keeps N + 1 reduced points; the first branch covers the whole horizon
    w = np.arange(6.0)
    np.testing.assert_array_equal(interpolate_disturbance(w, 5, 1), w[:5])


def test_interpolation_length_check():
    with pytest.raises(ShapeError):
        interpolate_disturbance([0.0, 1.0], 4, 2)


@settings(max_examples=100, deadline=None)
@given(N=st.integers(2, 50), data=st.data(), q=st.integers(1, 3), seed=st.integers(0, 10**6))
def test_interpolation_preserves_endpoints(N, data, q, seed):
    M = data.draw(st.integers(2, N))
    K = int(N / M)
    w = np.random.default_rng(seed).uniform(-1, 1, q * (K + 1))
    w_hat = interpolate_disturbance(w, N, M, q).reshape(N, q)
    np.testing.assert_allclose(w_hat[0], w[:q], atol=1e-14)
    np.testing.assert_allclose(w_hat[-1], w[-q:], atol=1e-14)
    # samples at multiples of M up to the last full segment are hit exactly
    for j in range(K):
        np.testing.assert_allclose(w_hat[j * M], w[j * q:(j + 1) * q], atol=1e-14)
    # piecewise linear: values stay inside the hull of the reduced points
    assert np.all(w_hat <= w.max() + 1e-12) and np.all(w_hat >= w.min() - 1e-12)


# -- vertices -------------------------------------------------------------------------

def test_vertices_counts():
    # a box always keeps at least two points per channel; n_r = 1 only arises in hand-built problems
    assert enumerate_vertices(DisturbanceBox(1, -1, 1, 4, 4)).shape == (4, 2)
    assert enumerate_vertices(DisturbanceBox(1, -1, 1, 6, 2)).shape == (16, 4)
    V = enumerate_vertices(DisturbanceBox(2, -0.3, 0.3, 40, 40))
    assert V.shape == (16, 4)
    assert len({tuple(v) for v in V}) == 16


def test_degenerate_box_vertices_identical():
    V = enumerate_vertices(DisturbanceBox(1, 0.2, 0.2, 6, 3))
    assert np.all(V == 0.2)


def test_vertex_cap():
    with pytest.raises(VertexLimitError, match="M"):
        enumerate_vertices(DisturbanceBox(2, -1, 1, 40, 2))


def test_box_validation():
    with pytest.raises(ValueError):
        DisturbanceBox(1, 1.0, -1.0, 4, 2)
    with pytest.raises(ValueError):
        DisturbanceBox(1, -1.0, 1.0, 4, 5)
    with pytest.raises(ValueError):
        MinMaxConfig(T_ini=2, N=4)
    with pytest.raises(ValueError):
        MinMaxConfig(T_ini=2, N=4, box=DisturbanceBox(1, -1, 1, 5, 1))


# -- disturbance-feedback structure ----------------------------------------------

def test_toeplitz_two_steps():
    L = toeplitz_expand(np.array([[[2.0, 3.0]]]), 1, 2, 2)
    np.testing.assert_array_equal(L, [[0, 0, 0, 0], [2, 3, 0, 0]])


def test_toeplitz_zero_generator():
    assert not np.any(toeplitz_expand(np.zeros((4, 2, 3)), 2, 3, 5))


def test_policy_parameter_count():
    pol = DfPolicy(np.zeros(2 * 6), np.zeros(2 * 3 * 5), 2, 3, 6)
    assert pol.n_params == 2 * 3 * (6 - 1)


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 3), q=st.integers(1, 3), N=st.integers(1, 7), seed=st.integers(0, 10**6))
def test_toeplitz_causal_and_consistent(m, q, N, seed):
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(m * q * (N - 1))
    L = toeplitz_expand(theta, m, q, N)
    assert L.shape == (m * N, q * N)
    for i in range(N):
        for j in range(N):
            blk = L[i * m:(i + 1) * m, j * q:(j + 1) * q]
            if j >= i:
                assert not np.any(blk)
            else:
                np.testing.assert_array_equal(blk, theta.reshape(N - 1, m, q)[i - j - 1])
    w = rng.standard_normal(q * N)
    np.testing.assert_allclose(feedback_map(w, m, q, N) @ theta, L @ w, atol=1e-12)


# -- cutting-plane solver on explicit problems ------------------------------------

def test_two_vertex_symmetric_toy():
    prob = RobustProblem(J0=[[1.0]], e0=[0.0], ew=[[1.0]], vertices=[[-1.0], [1.0]])
    res = minmax_solve(prob)
    assert res.optimal
    assert abs(res.z[0]) <= 1e-6
    assert res.value == pytest.approx(1.0, abs=1e-6)
    assert res.gap <= 1e-6


def test_varying_curvature_toy():
    # f_w(z) = ((1 + 0.5 w) z + w)^2 for w = +-1; worst case is minimized where both branches meet
    prob = RobustProblem(J0=[[1.0]], e0=[0.0], ew=[[1.0]], vertices=[[-1.0], [1.0]], Jw=[[[0.5]]])
    res = minmax_solve(prob)
    grid = np.linspace(-3, 3, 600001)
    worst = np.maximum((1.5 * grid + 1) ** 2, (0.5 * grid - 1) ** 2)
    assert res.optimal
    assert res.value == pytest.approx(worst.min(), abs=1e-6)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("curved", [False, True])
def test_random_problem_matches_grid_search(seed, curved):
    rng = np.random.default_rng(seed)
    nres = 4
    W = np.array([[a, b] for a in (-1.0, 1.0) for b in (-0.5, 0.7)])
    prob = RobustProblem(J0=rng.standard_normal((nres, 1)), e0=rng.standard_normal(nres),
                         ew=rng.standard_normal((2, nres)), vertices=W,
                         Jw=0.3 * rng.standard_normal((2, nres, 1)) if curved else None,
                         C0=[[1.0], [-1.0]], d0=[2.0, 2.0])
    res = minmax_solve(prob)
    grid = np.arange(-2.0, 2.0 + 5e-4, 1e-3)
    vals = np.max([[prob.value(np.array([z]), w) for w in W] for z in grid], axis=1)
    assert res.optimal
    assert abs(res.value - vals.min()) <= 1e-2
    assert res.value <= vals.min() + 1e-6


# -- data-driven formulations -------------------------------------------------------

def test_degenerate_box_matches_deterministic_deepc():
    # T_ini equal to the plant order keeps H at full row rank on noise-free data
    blocks, cfg, ini = random_instance(1, w_half=0.0, T_ini=3, u_min=-np.inf, u_max=np.inf)
    res = minmax_step(blocks, cfg, ini)
    det = deepc_solve(blocks, DeePCConfig(T_ini=3, N=8, Q=10.0, R=1.0, lambda_g=1.0), ini, QpSolver(tol=1e-10))
    assert res.value == pytest.approx(det.cost, rel=1e-6)
    np.testing.assert_allclose(res.u, det.u, atol=1e-5)


def test_degenerate_box_with_free_null_component_on_noisy_data():
    blocks, cfg, ini = random_instance(2, w_half=0.0, noise=0.05, fix_x_to_zero=False,
                                       u_min=-np.inf, u_max=np.inf)
    res = minmax_step(blocks, cfg, ini)
    det = deepc_solve(blocks, DeePCConfig(T_ini=4, N=8, Q=10.0, R=1.0, lambda_g=1.0), ini, QpSolver(tol=1e-10))
    assert res.value == pytest.approx(det.cost, rel=1e-6)


def test_worst_case_dominates_nominal():
    blocks, cfg, ini = random_instance(3)
    prob = minmax_formulate(blocks, cfg, ini)
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.standard_normal(prob.nz)
        assert prob.worst_case(z)[0] >= prob.value(z, np.zeros(prob.n_r)) - 1e-12


def _static_plant():
    # y_t = u_t + w_{t-1}: the state simply stores the last disturbance
    return StateSpaceModel([[0.0]], [[0.0]], [[1.0]], D=[[1.0]], E=[[1.0]])


def _toy_instance(Q, R, w_bound=1.0):
    rng = np.random.default_rng(11)
    model = _static_plant()
    u = rng.standard_normal((80, 1))
    w = rng.standard_normal((80, 1))
    y = simulate(model, np.zeros(1), u, w).data
    blocks = partition(u, y, w, 1, 2)
    ini = filled(1, np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    cfg = MinMaxConfig(T_ini=1, N=2, k=1, Q=Q, R=R, lambda_g=0.0, lambda_y=1e8,
                       box=DisturbanceBox(1, -w_bound, w_bound, 2, 2))
    return blocks, cfg, ini


def test_data_driven_saddle_toy():
    # with a zero past, y_t = u_t is free of w and y_{t+1} = u_{t+1} + w_t; cost y^2 only
    blocks, cfg, ini = _toy_instance(Q=1.0, R=0.0)
    res = minmax_step(blocks, cfg, ini)
    assert np.max(np.abs(res.u)) <= 1e-6
    assert res.value == pytest.approx(1.0, abs=1e-6)


def test_two_step_feedback_cancels_disturbance():
    Q, R = 4.0, 1.0
    blocks, cfg, ini = _toy_instance(Q, R)
    open_loop = minmax_step(blocks, cfg, ini)
    df = df_minmax_solve(blocks, cfg, ini)
    # hand enumeration: any fixed u_{t+1} leaves max_w Q (u + w)^2 >= Q; the gain L = -1 cancels w_t
    # and, since only the nominal part v is charged with R, the worst case drops to zero
    assert open_loop.value == pytest.approx(Q, rel=1e-6)
    assert df.value == pytest.approx(0.0, abs=1e-6)
    assert df.policy.L_params.ravel()[0] == pytest.approx(-1.0, abs=1e-3)  # flat: Q (1 + L)^2 <= tol
    assert df.value < open_loop.value


@pytest.mark.parametrize("seed", range(5))
def test_df_no_worse_than_minmax(seed):
    blocks, cfg, ini = random_instance(seed, lambda_g=0.0)
    a = minmax_step(blocks, cfg, ini)
    b = df_minmax_solve(blocks, cfg, ini)
    assert b.value <= a.value + 2 * cfg.robust_tol * max(1.0, a.value)


def test_df_degenerate_box_recovers_deterministic_plan():
    blocks, cfg, ini = random_instance(4, w_half=0.0, lambda_g=0.0)
    df = df_minmax_solve(blocks, cfg, ini)
    plain = minmax_step(blocks, cfg, ini)
    np.testing.assert_allclose(df.policy.v, plain.u, atol=1e-4)
    assert df.value == pytest.approx(plain.value, rel=1e-6)


def test_df_ignores_lambda_g():
    blocks, cfg, ini = random_instance(5, lambda_g=50.0)
    prob = df_minmax_formulate(blocks, cfg, ini)
    assert prob.info["lambda_g"] == 0.0


@pytest.mark.parametrize("kind", ["minmax", "df"])
def test_vertex_sufficiency(kind):
    blocks, cfg, ini = random_instance(6, lambda_g=0.0 if kind == "df" else 1.0)
    res = minmax_step(blocks, cfg, ini) if kind == "minmax" else df_minmax_solve(blocks, cfg, ini)
    rng = np.random.default_rng(1)
    inner = rng.uniform(cfg.box.w_lo, cfg.box.w_hi, (1000, res.problem.n_r))
    assert np.max(res.problem.values_at(res.z, inner)) <= res.value + 1e-6 * max(1.0, res.value)
    # robust input constraints hold everywhere in the box
    if kind == "df":
        from deepc_damping.robust import interpolate_disturbance as interp
        for w in inner[:50]:
            u = res.policy.inputs(interp(w, cfg.N, cfg.box.M))
            assert np.all(np.abs(u) <= 2.0 + 1e-6)


def test_enlarging_box_never_lowers_value():
    vals = []
    for half in (0.0, 0.1, 0.3, 0.6):
        blocks, cfg, ini = random_instance(7, w_half=half)
        vals.append(minmax_step(blocks, cfg, ini).value)
    assert all(b >= a - 1e-6 * max(1.0, a) for a, b in zip(vals, vals[1:]))


def test_sigma_w_slack_adds_variables():
    blocks, cfg, ini = random_instance(8, sigma_w_weight=100.0)
    prob = minmax_formulate(blocks, cfg, ini)
    assert "sigma_w" in prob.slices
    assert minmax_step(blocks, cfg, ini).optimal


def test_controllers_return_k_inputs():
    blocks, cfg, ini = random_instance(9, lambda_g=0.0)
    assert MinMaxController(blocks, cfg).step(ini).shape == (2,)
    assert DfMinMaxController(blocks, cfg).step(ini).shape == (2,)


def test_box_size_must_match_data():
    blocks, cfg, ini = random_instance(10)
    from dataclasses import replace
    bad = replace(cfg, box=DisturbanceBox(2, -1, 1, 8, 4))
    with pytest.raises(ShapeError):
        minmax_formulate(blocks, bad, ini)
