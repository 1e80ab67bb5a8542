import numpy as np
import pytest

from fcdistill.converter import BOOST, NOMINAL, DivergenceError, SwitchMode
from fcdistill.mpc import MpcExpert
from fcdistill.scenario import (
    OuterLoopState,
    ScenarioConfig,
    StepEvent,
    Trajectory,
    event_step,
    n_steps,
    outer_current_reference,
    run_episode,
    sample_scenario,
    steady_state,
)


def test_pi_examples():
    i_ref, st = outer_current_reference(OuterLoopState(), 180.0, 180.0, 20e-6)
    assert i_ref == 0.0 and st.integral == 0.0
    i_ref, _ = outer_current_reference(OuterLoopState(kp=0.5, ki=0.0), 170.0, 180.0, 20e-6)
    assert i_ref == pytest.approx(5.0)
    st0 = OuterLoopState(kp=0.5, ki=1.0, integral=0.3)
    i_ref, st = outer_current_reference(st0, 0.0, 180.0, 20e-6)
    assert i_ref == st0.i_max and st.integral == 0.3
    i_ref, st = outer_current_reference(st0, 400.0, 180.0, 20e-6)
    assert i_ref == st0.i_min and st.integral == 0.3


def test_zero_duration_is_empty():
    traj = run_episode(ScenarioConfig("S1", 0.0, 180.0, 120.0, 36.0, ()), lambda z: 0, NOMINAL)
    assert len(traj) == 0


def test_always_no_ramps_current():
    cfg = ScenarioConfig("S1", 0.01, 180.0, 120.0, 36.0, ())
    traj = run_episode(cfg, lambda z: SwitchMode.NO, NOMINAL)
    d = np.diff(traj.i_l)
    assert np.all(d > 0)
    np.testing.assert_allclose(d, 2.4, rtol=1e-9)


def test_always_no_eventually_diverges_with_step():
    # an absurd input voltage overflows i_L within a few dozen steps
    cfg = ScenarioConfig("S1", 0.01, 180.0, 1e308, 36.0, ())
    with pytest.raises(DivergenceError) as err:
        run_episode(cfg, lambda z: SwitchMode.NO, NOMINAL)
    assert err.value.step is not None and len(err.value.partial) == err.value.step


def test_determinism_and_expert_fast_path(backend):
    cfg, p = sample_scenario("S3", np.random.default_rng(3))
    events = tuple(e for e in cfg.events if e.time <= 0.1)
    cfg = ScenarioConfig(cfg.kind, 0.1, cfg.v_ref, cfg.v_in, cfg.r, events, cfg.d_l, cfg.d_cf,
                         cfg.d_c, cfg.seed)
    ex = MpcExpert(p, backend=backend)
    a = run_episode(cfg, ex, p)
    b = run_episode(cfg, ex, p)
    generic = run_episode(cfg, lambda z: ex(z), p)
    for col in ("i_l", "v_cf", "v_o", "i_ref", "mode"):
        np.testing.assert_array_equal(getattr(a, col), getattr(b, col))
        np.testing.assert_array_equal(getattr(a, col), getattr(generic, col))


def test_events_applied_on_time():
    cfg = ScenarioConfig("S2", 0.01, 180.0, 120.0, 36.0,
                         (StepEvent(0.004, "v_in", 100.0), StepEvent(0.006, "load_r", 20.0)))
    traj = run_episode(cfg, MpcExpert(NOMINAL), NOMINAL)
    k1, k2 = event_step(0.004, NOMINAL.ts), event_step(0.006, NOMINAL.ts)
    assert traj.v_in[k1 - 1] == 120.0 and traj.v_in[k1] == 100.0
    assert traj.r[k2 - 1] == 36.0 and traj.r[k2] == 20.0
    assert len(traj) == n_steps(0.01, NOMINAL.ts) == 500


def test_s1_nominal():
    cfg, p = sample_scenario("S1", np.random.default_rng(0))
    assert (cfg.v_in, cfg.r, cfg.d_l, cfg.d_cf, cfg.d_c) == (120.0, 36.0, 0.0, 0.0, 0.0)
    assert p == NOMINAL
    assert [e.time for e in cfg.events] == [0.2, 0.3, 0.4]


def test_sampler_bounds():
    rng = np.random.default_rng(1)
    for _ in range(300):
        cfg, p = sample_scenario("S2", rng)
        vins = [cfg.v_in] + [e.value for e in cfg.events if e.target == "v_in"]
        rs = [cfg.r] + [e.value for e in cfg.events if e.target == "load_r"]
        assert all(80 <= v <= 140 for v in vins) and all(10 <= r <= 100 for r in rs)
        assert p == NOMINAL
        cfg, p = sample_scenario("S3", rng)
        assert all(-0.3 <= d <= 0.3 for d in (cfg.d_l, cfg.d_cf, cfg.d_c))
        assert p.l == pytest.approx(NOMINAL.l * (1 + cfg.d_l))


def test_intensity_shrinks_ranges():
    rng = np.random.default_rng(2)
    for _ in range(200):
        cfg, _ = sample_scenario("S3", rng, intensity=0.5)
        assert 95 <= cfg.v_in <= 125 and 32.5 <= cfg.r <= 77.5
        assert abs(cfg.d_l) <= 0.15


def test_steady_state_start():
    il, vcf, vo = steady_state(BOOST, 180.0, 120.0, 36.0)
    assert (il, vcf, vo) == (5.0, 90.0, 180.0)


def test_config_yaml_roundtrip(tmp_path):
    cfg, _ = sample_scenario("S3", np.random.default_rng(4))
    cfg.save(tmp_path / "s.yaml")
    assert ScenarioConfig.load(tmp_path / "s.yaml") == cfg


def test_trajectory_csv_roundtrip(tmp_path):
    cfg = ScenarioConfig("S1", 0.002, 180.0, 120.0, 36.0, ())
    traj = run_episode(cfg, MpcExpert(NOMINAL), NOMINAL)
    traj.to_csv(tmp_path / "t.csv")
    back = Trajectory.from_csv(tmp_path / "t.csv", NOMINAL.ts)
    for col in ("i_l", "v_cf", "v_o", "v_in", "i_o", "i_ref", "mode", "r"):
        np.testing.assert_array_equal(getattr(back, col), getattr(traj, col))
