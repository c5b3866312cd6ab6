from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepc_damping import harness
from deepc_damping.errors import PersistencyError, ScenarioError, SolverError
from deepc_damping.harness import (BatchResult, RunResult, Scenario, Subsystem, closed_loop_cost, collect_data,
                                   default_partition, draw_signals, estimate_damping, monte_carlo,
                                   run_closed_loop, run_decentralized, stream_rng, worker_count)
from deepc_damping.plant import default_four_machine_spec
from deepc_damping.predictive import DeePCConfig
from deepc_damping.robust import DisturbanceBox, MinMaxConfig

from conftest import random_system

ANGLES = (0.1, 0.08, -0.08, -0.1)


def small_scenario(seed=0, controller="deepc", **kw):
    """Random 4-state SISO-ish plant at Ts = 0.02; quick enough for unit tests."""
    rng = np.random.default_rng(seed)
    model = random_system(rng, 4, 1, 2, rho=0.97, Ts=0.02)
    cfg = DeePCConfig(T_ini=5, N=15, k=5, lambda_g=1e-3, Q=100.0, R=1.0)
    base = dict(plant=model, controller=controller, config=cfg, excitation_samples=300, total=600,
                activation=400, event=300, event_state=rng.standard_normal(4), n_assumed=4, seed=seed)
    base.update(kw)
    return Scenario(**base)


def fake_result(u, y, r=None, Q=400.0, R=1.0):
    u, y = np.atleast_2d(u), np.atleast_2d(y)
    T = u.shape[0]
    return RunResult(u=u, y=y, y_meas=y, w=np.zeros((T, 0)), r=np.zeros_like(y) if r is None else r, Ts=0.02,
                     controller="none", seed=0, window=(0, T), cost=0.0, solve_times=[], status_counts={},
                     failed_steps=[], Q=Q, R=R)


# -- scenario validation ---------------------------------------------------------

def test_activation_must_leave_room_for_ini():
    with pytest.raises(ScenarioError, match="T_ini"):
        small_scenario(activation=302)
    with pytest.raises(ScenarioError):
        small_scenario(activation=200)


def test_scenario_rejects_bad_fields():
    with pytest.raises(ScenarioError):
        small_scenario(controller="lqr")
    with pytest.raises(ScenarioError):
        small_scenario(delay=-1)
    with pytest.raises(ScenarioError):
        small_scenario(controller="minmax")
    with pytest.raises(ScenarioError):
        Scenario(event_angles=ANGLES, event_state=np.zeros(7))
    with pytest.raises(ScenarioError):
        Scenario(partition=(Subsystem((0,), (0,), ("y9",)),))
    with pytest.raises(ScenarioError):
        Scenario(partition=(Subsystem((0,), (0,)), Subsystem((0,), (1,))))
    with pytest.raises(ScenarioError):
        Subsystem((0,), (0,), ("p3",))


def test_default_timeline():
    sc = Scenario()
    assert (sc.excitation_samples, sc.activation, sc.total, sc.event) == (1500, 2000, 3000, 1500)
    assert sc.window() == (2000, 3000)


# -- data collection ---------------------------------------------------------------

def test_zero_excitation_is_not_persistently_exciting():
    with pytest.raises(PersistencyError, match="persistently exciting"):
        collect_data(small_scenario(excitation_power=0.0))


def test_short_excitation_rejected():
    with pytest.raises(PersistencyError, match="too short"):
        collect_data(small_scenario(excitation_samples=30, activation=100, event=30))


def test_surrogate_excitation_passes_check():
    sc = Scenario(controller="deepc", config=DeePCConfig(T_ini=30, N=60), n_assumed=10)
    (ds,) = collect_data(sc)
    assert ds.persistently_exciting and ds.order == 100
    assert ds.u.shape == (1500, 2) and ds.y.shape == (1500, 3)
    assert ds.report()["persistently_exciting"]


def test_collect_data_deterministic():
    a = collect_data(small_scenario(measurement_noise=1e-6))[0]
    b = collect_data(small_scenario(measurement_noise=1e-6))[0]
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.y, b.y)
    c = collect_data(small_scenario(seed=1, measurement_noise=1e-6))[0]
    assert not np.array_equal(a.u, c.u)


def test_noise_variance_is_power_over_Ts():
    x = stream_rng(3, "measurement").standard_normal(200_000) * np.sqrt(4e-6 / 0.02)
    assert np.var(x) == pytest.approx(4e-6 / 0.02, rel=0.02)
    sc = small_scenario(excitation_power=1e-4)
    assert np.var(draw_signals(sc).excitation) == pytest.approx(1e-4 / 0.02, rel=0.2)


def test_streams_are_independent_and_phase_split():
    a = stream_rng(0, "excitation").standard_normal(5)
    b = stream_rng(0, "measurement").standard_normal(5)
    assert not np.allclose(a, b)
    # a longer collection phase leaves the closed-loop noise untouched
    s1 = draw_signals(small_scenario(measurement_noise=1e-6))
    s2 = draw_signals(small_scenario(measurement_noise=1e-6, excitation_samples=350, event=350))
    np.testing.assert_array_equal(s1.measurement[300:550], s2.measurement[350:600])


# -- closed loop ------------------------------------------------------------------

def test_open_loop_surrogate_is_weakly_damped():
    sc = Scenario(event_angles=ANGLES)
    res = run_closed_loop(sc)
    est = estimate_damping(res.y[sc.event:, 2], sc.Ts)
    assert 0.2 <= est.frequency_hz <= 0.8
    assert 0 < est.damping_ratio < 0.05


def test_zero_everything_gives_all_zero_logs():
    sc = Scenario(excitation_power=0.0)
    res = run_closed_loop(sc)
    assert res.T == sc.total
    for arr in (res.u, res.y, res.y_meas, res.w):
        assert not np.any(arr)
    assert res.cost == 0.0


def test_deepc_decays_after_transient():
    for seed in range(3):
        sc = small_scenario(seed)
        res = run_closed_loop(sc)
        assert not res.flagged
        norms = np.linalg.norm(res.y[sc.activation:], axis=1)
        block_max = norms[sc.config.N:].reshape(-1, sc.config.k).max(axis=1)
        assert np.all(np.diff(block_max) <= 1e-12)
        assert res.cost < run_closed_loop(replace(sc, controller="none")).cost


def test_logged_lengths_and_status(tmp_path):
    sc = small_scenario(load_noise=1e-6, measurement_noise=1e-6)
    res = run_closed_loop(sc)
    for arr in (res.u, res.y, res.y_meas, res.r):
        assert arr.shape[0] == sc.total
    assert res.status_counts == {"optimal": (sc.total - sc.activation) // sc.config.k}
    assert len(res.solve_times) == res.status_counts["optimal"]
    s = res.summary()
    assert s["closed_loop_cost"] == res.cost and s["seed"] == 0
    res.to_csv(tmp_path / "run.csv")
    header = (tmp_path / "run.csv").read_text().splitlines()[0]
    assert header == "t,u0,y0,y1"


def test_buffer_holds_tail_of_logs_at_activation(monkeypatch):
    seen = []

    class Spy:
        def __init__(self, k):
            self.k = k

        def step(self, ini):
            seen.append((ini.u_ini.copy(), ini.y_ini.copy()))
            return np.zeros(self.k)

    monkeypatch.setattr(harness, "make_controller", lambda kind, cfg, data: Spy(cfg.k))
    sc = small_scenario(measurement_noise=1e-6, delay=2)
    res = run_closed_loop(sc)
    T_ini, a, k = sc.config.T_ini, sc.activation, sc.config.k
    np.testing.assert_array_equal(seen[0][0], res.u[a - T_ini:a].ravel())
    np.testing.assert_array_equal(seen[0][1], res.y_meas[a - T_ini:a].ravel())
    # one control period later the buffer holds the newest samples, still in order
    np.testing.assert_array_equal(seen[1][1], res.y_meas[a + k - T_ini:a + k].ravel())


def test_solver_failure_holds_zero_and_flags(monkeypatch):
    class Failing:
        def step(self, ini):
            raise SolverError("boom")

    monkeypatch.setattr(harness, "make_controller", lambda kind, cfg, data: Failing())
    sc = small_scenario()
    res = run_closed_loop(sc)
    assert res.flagged
    assert res.failed_steps[0] == sc.activation
    assert res.status_counts == {"SolverError": (sc.total - sc.activation) // sc.config.k}
    ol = run_closed_loop(replace(sc, controller="none"))
    np.testing.assert_array_equal(res.y, ol.y)


def test_deepc_before_activation_equals_open_loop():
    sc = small_scenario(measurement_noise=1e-6, load_noise=0.0, delay=3)
    on = run_closed_loop(sc)
    off = run_closed_loop(replace(sc, controller="none"))
    a = sc.activation
    for name in ("u", "y", "y_meas"):
        np.testing.assert_array_equal(getattr(on, name)[:a], getattr(off, name)[:a])


@settings(max_examples=10, deadline=None)
@given(d=st.integers(0, 12), seed=st.integers(0, 50))
def test_measurements_are_outputs_delayed_by_d(d, seed):
    sc = Scenario(event_angles=ANGLES, delay=d, seed=seed, excitation_samples=200, activation=300, total=500)
    res = run_closed_loop(sc)
    np.testing.assert_array_equal(res.y_meas[d:], res.y[: res.T - d])
    assert not np.any(res.y_meas[:d])
    noisy = run_closed_loop(replace(sc, measurement_noise=1e-6))
    noise = draw_signals(replace(sc, measurement_noise=1e-6)).measurement
    np.testing.assert_allclose(noisy.y_meas[d:] - noise[d:], noisy.y[: res.T - d], atol=1e-15)


def test_reproducible_runs():
    sc = small_scenario(measurement_noise=1e-6, load_noise=1e-6, delay=2)
    a, b = run_closed_loop(sc), run_closed_loop(sc)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.u, b.u)
    assert a.cost == b.cost


# -- cost ---------------------------------------------------------------------------

def test_cost_of_zero_logs():
    assert closed_loop_cost(fake_result(np.zeros((5, 2)), np.zeros((5, 3)))) == 0.0


def test_cost_single_sample_weight():
    assert closed_loop_cost(fake_result(np.zeros((1, 2)), [[1.0, 0.0, 0.0]])) == 400.0


def test_cost_hand_sum():
    u = np.array([[1.0, 0.0], [0.5, -0.5], [0.0, 2.0]])
    y = np.array([[0.1, 0.0, 0.0], [0.0, -0.2, 0.1], [0.0, 0.0, 0.3]])
    r = np.full((3, 3), 0.1)
    # |u|^2: 1, 0.5, 4; |y - r|^2: 0.02, 0.10, 0.06
    assert closed_loop_cost(fake_result(u, y, r)) == pytest.approx(5.5 + 400 * 0.18, rel=1e-14)
    # weighted: R-part 2 + 0.75 + 4, Q-part 0.05 + 0.19 + 0.15
    got = closed_loop_cost(fake_result(u, y, r, Q=[1.0, 2.0, 3.0], R=[2.0, 1.0]))
    assert got == pytest.approx(6.75 + 0.39, rel=1e-14)


def test_cost_window_bounds():
    with pytest.raises(ValueError):
        closed_loop_cost(fake_result(np.zeros((5, 1)), np.zeros((5, 1))), (2, 9))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 1000), data=st.data())
def test_cost_additive_over_adjacent_windows(seed, data):
    rng = np.random.default_rng(seed)
    res = fake_result(rng.standard_normal((40, 2)), rng.standard_normal((40, 3)))
    a = data.draw(st.integers(0, 40))
    b = data.draw(st.integers(a, 40))
    c = data.draw(st.integers(b, 40))
    total = closed_loop_cost(res, (a, c))
    assert closed_loop_cost(res, (a, b)) + closed_loop_cost(res, (b, c)) == pytest.approx(total, rel=1e-12, abs=1e-12)


# -- Monte Carlo --------------------------------------------------------------------

def test_single_trial_batch_equals_run():
    sc = small_scenario(measurement_noise=1e-6, seed=4)
    batch = monte_carlo(sc, 1, seed_base=4)
    assert batch.costs[0] == run_closed_loop(sc).cost
    assert batch.median == batch.costs[0]


def test_batch_is_reproducible_and_uses_seed_offsets():
    sc = small_scenario(measurement_noise=1e-6)
    a = monte_carlo(sc, 3, seed_base=10)
    b = monte_carlo(sc, 3, seed_base=10)
    np.testing.assert_array_equal(a.costs, b.costs)
    np.testing.assert_array_equal(a.seeds, [10, 11, 12])
    assert a.costs[1] == run_closed_loop(sc.with_seed(11)).cost


def test_parallel_batch_matches_serial():
    sc = small_scenario(measurement_noise=1e-6)
    np.testing.assert_array_equal(monte_carlo(sc, 2, workers=2).costs, monte_carlo(sc, 2, workers=1).costs)


def test_flagged_trials_leave_the_median():
    batch = BatchResult(np.arange(4), np.array([1.0, 2.0, 100.0, 3.0]), np.array([False, False, True, False]))
    assert batch.median == 2.0 and batch.n_failed == 1
    counts, _ = batch.histogram
    assert counts.sum() == 3
    assert batch.summary()["failed"] == 1


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("DEEPC_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("DEEPC_THREADS", "x")
    with pytest.raises(ScenarioError):
        worker_count()
    monkeypatch.delenv("DEEPC_THREADS")
    assert worker_count() == 1


def test_monte_carlo_rejects_zero_trials():
    with pytest.raises(ValueError):
        monte_carlo(small_scenario(), 0)


# -- damping estimate -------------------------------------------------------------------

@pytest.mark.parametrize("zeta", [0.01, 0.05, 0.2])
def test_damping_estimate_on_known_signal(zeta):
    Ts, f = 0.02, 0.5
    t = np.arange(2000) * Ts
    wn = 2 * np.pi * f / np.sqrt(1 - zeta**2)
    x = np.exp(-zeta * wn * t) * np.cos(2 * np.pi * f * t)
    est = estimate_damping(x, Ts, frequency_hz=f)
    assert est.damping_ratio == pytest.approx(zeta, rel=0.05)
    assert estimate_damping(x[:1000], Ts).frequency_hz == pytest.approx(f, abs=0.05)


def test_damping_estimate_needs_oscillation():
    with pytest.raises(ValueError):
        estimate_damping(np.ones(10), 0.02, frequency_hz=0.5)


# -- decentralized ------------------------------------------------------------------------

def minmax_scenario(kind="minmax", k=8, **kw):
    cfg = MinMaxConfig(T_ini=30, N=40, k=k, lambda_g=20.0, box=DisturbanceBox(0, -0.3, 0.3, 40, 40))
    base = dict(controller=kind, config=cfg, excitation_samples=500, total=2000, activation=1000,
                event_angles=ANGLES, partition=default_partition())
    base.update(kw)
    return Scenario(**base)


def test_centralized_minmax_needs_partition():
    sc = minmax_scenario(partition=None)
    sc.config = replace(sc.config, box=DisturbanceBox(1, -0.3, 0.3, 40, 40))
    with pytest.raises(ScenarioError, match="partition"):
        run_closed_loop(sc)


def test_decentralized_data_reports_joint_rank():
    sc = minmax_scenario()
    data = collect_data(sc)
    assert len(data) == 2
    for ds in data:
        assert ds.w.shape == (500, 2)
        assert "joint_uw_rank" in ds.report()


@pytest.mark.slow
def test_minmax_damps_interarea_flow():
    sc = minmax_scenario()
    ctrl = run_decentralized(sc)
    free = run_closed_loop(replace(sc, controller="none"))
    a = sc.activation
    on = estimate_damping(ctrl.y[a:, 2], sc.Ts, frequency_hz=0.52)
    off = estimate_damping(free.y[a:, 2], sc.Ts, frequency_hz=0.52)
    assert not ctrl.flagged
    assert on.decay_rate < off.decay_rate
    assert ctrl.cost < free.cost


@pytest.mark.slow
def test_df_minmax_with_doubled_k_still_damps():
    sc = minmax_scenario("df-minmax", k=16)
    ctrl = run_decentralized(sc)
    free = run_closed_loop(replace(sc, controller="none"))
    a = sc.activation
    on = estimate_damping(ctrl.y[a:, 2], sc.Ts, frequency_hz=0.52)
    off = estimate_damping(free.y[a:, 2], sc.Ts, frequency_hz=0.52)
    assert not ctrl.flagged
    assert on.decay_rate < off.decay_rate


def test_deepc_on_surrogate_reduces_output_variance():
    cfg = DeePCConfig(T_ini=30, N=60, k=30)
    sc = Scenario(controller="deepc", config=cfg, event_angles=ANGLES)
    res = run_closed_loop(sc)
    pre = res.y[sc.event:sc.activation]
    post = res.y[sc.activation:]
    assert np.var(post) < np.var(pre)
