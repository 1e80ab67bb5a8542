import numpy as np
import pytest

from fcdistill.converter import NOMINAL, SwitchMode
from fcdistill.metrics import MetricsReport, compute_metrics
from fcdistill.mpc import MpcConfig, MpcExpert
from fcdistill.scenario import ScenarioConfig, StepEvent, Trajectory, run_episode

TS = 20e-6


def make(vo=None, vcf=None, il=None, iref=None, vin=None, io=None, mode=None, n=None):
    n = n or len(next(a for a in (vo, vcf, il, mode) if a is not None))
    full = lambda a, v: np.full(n, v, dtype=float) if a is None else np.asarray(a, dtype=float)  # noqa: E731
    m = np.zeros(n, dtype=np.int8) if mode is None else np.asarray(mode, dtype=np.int8)
    return Trajectory(TS, full(il, 7.5), full(vcf, 90.0), full(vo, 180.0), full(vin, 120.0),
                      full(io, 5.0), full(iref, 7.5), m, np.full(n, 36.0))


def test_constant_trace_is_perfect():
    traj = make(n=1000)
    r = compute_metrics(traj)
    for k in ("mse_vo", "mse_vcf", "mse_il", "overshoot_vo", "overshoot_vcf", "mp_vo", "mp_vcf",
              "penalty_over", "penalty_sag", "sse_vo", "sse_vcf", "ripple_vo", "ripple_vcf",
              "j_sum", "n_il_viol", "switch_count"):
        assert getattr(r, k) == 0, k
    assert r.t_set_vo == 0.0 and r.t_set_vcf == 0.0


def test_overshoot_and_penalty_arithmetic():
    r = compute_metrics(make(vo=[180.0, 190.0, 180.0]))
    assert r.overshoot_vo == 10.0
    assert r.mp_vo == 100.0 * 10.0 / 180.0
    assert r.mp_vo == pytest.approx(5.5556, abs=1e-4)
    assert r.penalty_over == TS / 180.0 * 1.0
    assert r.penalty_sag == 0.0
    assert r.t_set_vo == TS  # last sample outside the 2% band
    assert r.mse_vo == 100.0 / 3.0


def test_sag_penalty():
    r = compute_metrics(make(vo=[180.0, 160.0, 180.0]))
    assert r.penalty_sag == TS / 180.0 * (171.0 - 160.0)
    assert r.overshoot_vo == 0.0


def test_switch_counts():
    mode = [SwitchMode.OP, SwitchMode.OP, SwitchMode.PO, SwitchMode.PO]
    r = compute_metrics(make(mode=mode))
    assert (r.switch_count, r.n_sa, r.n_sb, r.n_trans_total) == (1, 1, 1, 2)
    assert r.switch_freq == 1 / (4 * TS)
    r = compute_metrics(make(mode=[0, 3, 2, 1, 0]))
    # OP ON NO PO OP: s_a O O N P O, s_b P N O O P
    assert (r.switch_count, r.n_sa, r.n_sb) == (4, 3, 3)


def test_energy():
    n = 500
    r = compute_metrics(make(n=n, il=np.full(n, 7.5), io=np.full(n, 5.0)))
    assert r.e_in == pytest.approx(900.0 * n * TS, rel=1e-12)
    assert r.e_out == pytest.approx(900.0 * n * TS, rel=1e-12)
    assert r.eff_avg == pytest.approx(1.0, rel=1e-12)
    assert r.p_out_avg == pytest.approx(900.0, rel=1e-12)


def test_violations_and_sse():
    r = compute_metrics(make(il=[0.0, 26.0, -6.0, 7.0], vo=[180, 180, 180, 179.0]))
    assert r.n_il_viol == 2
    assert r.sse_vo == -1.0
    r = compute_metrics(make(il=[0.0, 26.0, -6.0, 7.0]), i_safe=(0.0, 30.0))
    assert r.n_il_viol == 1


def test_ripple_window_short_episode():
    vo = np.where(np.arange(100) % 2 == 0, 181.0, 179.0)
    r = compute_metrics(make(vo=vo))
    assert r.ripple_t0 == pytest.approx(80 * TS)
    assert r.ripple_vo == pytest.approx(1.0)


def test_j_matches_stage_cost_and_is_additive():
    cfg = ScenarioConfig("S1", 0.05, 180.0, 120.0, 36.0, (StepEvent(0.02, "load_r", 20.0),))
    traj = run_episode(cfg, MpcExpert(NOMINAL), NOMINAL)
    mpc = MpcConfig()
    whole = compute_metrics(traj, mpc_cfg=mpc)
    a = compute_metrics(traj.slice(0, 1000), mpc_cfg=mpc)
    b = compute_metrics(traj.slice(1000, len(traj)), mpc_cfg=mpc)
    assert whole.j_sum >= 0
    assert whole.j_sum == pytest.approx(a.j_sum + b.j_sum, rel=1e-12)
    assert whole.j_mean == whole.j_sum / len(traj)
    # recompute is a pure function of the records
    assert compute_metrics(traj, mpc_cfg=mpc) == whole
    for k, v in whole.to_dict().items():
        if k not in ("sse_vo", "sse_vcf"):
            assert v >= 0, k
    assert MetricsReport.from_dict(whole.to_dict()) == whole


def test_empty_trajectory_rejected():
    with pytest.raises(ValueError):
        compute_metrics(make(n=0, mode=[]))
