"""The twelve acceptance criteria, one test each.

Each test records a PASS/FAIL line (shown in the terminal summary) before
asserting.  The expensive artifacts (dataset, offline and refined students,
the random-label student) are built once per session.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from helpers import gradient_check, random_features

from fcdistill import _backend
from fcdistill.converter import NOMINAL, Exogenous, PlantState, SwitchMode, discrete_matrices, discrete_step
from fcdistill.dagger import disagreement_rate, run_dagger, sample_episodes
from fcdistill.experiments import (
    PipelineConfig,
    bench_decision_time,
    evaluate,
    rollout,
    run_pipeline,
    surrogate_labels,
    train_student,
)
from fcdistill.metrics import compute_metrics
from fcdistill.mpc import MpcConfig, MpcExpert, beam_search, exhaustive_search
from fcdistill.policy import accuracy
from fcdistill.scenario import Trajectory, event_step, sample_scenario
from fcdistill.transfer import TransferConfig, run_transfer_experiment

pytestmark = pytest.mark.slow


@pytest.fixture(scope="session")
def pipeline():
    cfg = PipelineConfig()
    t0 = time.perf_counter()
    trained = run_pipeline(cfg, ("FULL", "NO_DAGGER", "NO_EXPERT"))
    trained.elapsed = time.perf_counter() - t0
    trained.cfg = cfg
    return trained


def fresh_rollouts(n, seed):
    """``n`` rollouts per kind drawn away from every training seed."""
    return {kind: [(c, p) for _, c, p in sample_episodes(n, mix, seed + i)]
            for i, (kind, mix) in enumerate((("S1", (1, 0, 0)), ("S2", (0, 1, 0)), ("S3", (0, 0, 1))))}


# 1 -----------------------------------------------------------------------
def test_c01_beam_matches_exhaustive(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    mismatches = 0
    for n in (1, 2, 3):
        cfg = MpcConfig(horizon=n, beam_width=4 ** (n - 1))
        for z in random_features(rng, 1000):
            seq, cost, _ = exhaustive_search(z, NOMINAL, cfg)
            res = beam_search(z, NOMINAL, cfg)
            mismatches += (res.mode != seq[0]) or (res.cost != cost)
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 10
    report(1, ok, f"{mismatches} mismatches over 3x1000 states, {dt:.1f} s")
    assert ok


# 2 -----------------------------------------------------------------------
def test_c02_beam_suboptimality(report):
    rng = np.random.default_rng(2)
    cfg = MpcConfig()
    t0 = time.perf_counter()
    gaps, below, counts = [], 0, set()
    for z in random_features(rng, 1000):
        _, opt, count = exhaustive_search(z, NOMINAL, cfg)
        counts.add(count)
        b = beam_search(z, NOMINAL, cfg).cost
        below += b < opt
        gaps.append((b - opt) / opt if opt > 0 else 0.0)
    dt = time.perf_counter() - t0
    ok = below == 0 and counts == {1024} and dt < 60
    report(2, ok, f"beam cost >= optimum on all states ({below} below), mean relative gap "
                  f"{np.mean(gaps):.2e}, max {np.max(gaps):.2e}, {dt:.1f} s")
    assert ok


# 3 -----------------------------------------------------------------------
def test_c03_dynamics(report):
    x, w = PlantState(10.0, 90.0, 180.0), Exogenous(120.0, 5.0)
    want = {SwitchMode.NO: (12.4, 90.0, 179.2), SwitchMode.PO: (8.8, 90.0, 180.8),
            SwitchMode.OP: (10.6, 94.0, 180.8), SwitchMode.ON: (10.6, 86.0, 180.8)}
    worst_ex = max(abs(g - e) / abs(e) for m, exp in want.items()
                   for g, e in zip(discrete_step(x, w, m, NOMINAL), exp))
    rng = np.random.default_rng(3)
    n = 10_000
    x1 = np.column_stack([rng.uniform(-5, 25, n), rng.uniform(0, 150, n), rng.uniform(0, 250, n)])
    x2 = np.column_stack([rng.uniform(-5, 25, n), rng.uniform(0, 150, n), rng.uniform(0, 250, n)])
    ws = np.column_stack([rng.uniform(80, 140, n), rng.uniform(0, 20, n)])
    worst_aff, sym_fail = 0.0, 0
    for k in range(n):
        m = k % 4
        ad, _ = discrete_matrices(m, NOMINAL)
        s1 = np.array(discrete_step(PlantState(*x1[k]), Exogenous(*ws[k]), m, NOMINAL))
        s2 = np.array(discrete_step(PlantState(*x2[k]), Exogenous(*ws[k]), m, NOMINAL))
        ref = ad @ (x1[k] - x2[k])
        # relative to the operands: a difference of rounded states cannot do better
        scale = np.maximum(np.maximum(np.abs(s1), np.abs(s2)), 1e-9)
        worst_aff = max(worst_aff, float(np.max(np.abs((s1 - s2) - ref) / scale)))
        xs, wk = PlantState(*x1[k]), Exogenous(*ws[k])
        dv = {mm: discrete_step(xs, wk, mm, NOMINAL).v_cf - xs.v_cf for mm in SwitchMode}
        sym_fail += not (dv[SwitchMode.NO] == 0 and dv[SwitchMode.PO] == 0
                         and abs(dv[SwitchMode.OP] + dv[SwitchMode.ON]) <= 1e-12 * abs(dv[SwitchMode.OP]))
    ok = worst_ex <= 1e-12 and worst_aff <= 1e-12 and sym_fail == 0
    report(3, ok, f"example rel err {worst_ex:.1e}, affinity rel err {worst_aff:.1e}, "
                  f"{sym_fail} symmetry failures on 10k inputs")
    assert ok


# 4 -----------------------------------------------------------------------
def test_c04_expert_regulation(report):
    cfg, p = sample_scenario("S1", np.random.default_rng(0))
    t0 = time.perf_counter()
    rep, diverged, traj = rollout(MpcExpert(p), cfg, p)
    dt = time.perf_counter() - t0
    t = traj.t
    worst_vo = worst_vcf = 0.0
    for ev in cfg.events:
        # settled by event + 0.1 s: the 10 ms window ending there
        hi = event_step(ev.time + 0.1, p.ts)
        sel = slice(hi - event_step(0.01, p.ts), min(hi, len(t)))
        worst_vo = max(worst_vo, float(np.max(np.abs(traj.v_o[sel] - 180.0))))
        worst_vcf = max(worst_vcf, float(np.max(np.abs(traj.v_cf[sel] - 90.0))))
    ok = (not diverged and worst_vo <= 0.02 * 180.0 and worst_vcf <= 5.0 and rep.n_il_viol == 0
          and dt < 30)
    report(4, ok, f"max |v_o-180| {worst_vo:.3f} V, max |v_cf-90| {worst_vcf:.3f} V at event+0.1 s, "
                  f"N_viol {rep.n_il_viol}, MSE_vo {rep.mse_vo:.3f}, {dt:.2f} s")
    assert ok


# 5 -----------------------------------------------------------------------
def test_c05_gradient_check(report):
    t0 = time.perf_counter()
    errs = [gradient_check(seed) for seed in range(5)]
    dt = time.perf_counter() - t0
    ok = max(errs) <= 1e-4 and dt < 5
    report(5, ok, f"max relative error {max(errs):.2e} over 5 seeds (width 8), {dt:.2f} s")
    assert ok


# 6 -----------------------------------------------------------------------
def test_c06_distillation_accuracy(report, pipeline):
    tr, _, te = pipeline.splits["dr"]
    acc = accuracy(pipeline.models["NO_DAGGER"], te.z, te.y)
    acc_full = accuracy(pipeline.models["FULL"], te.z, te.y)
    ok = acc >= 0.85 and len(tr) >= 50_000 and pipeline.elapsed < 1800
    report(6, ok, f"offline student test accuracy {acc:.4f} (after DAgger {acc_full:.4f}); "
                  f"{len(tr)} train / {len(te)} test samples; pipeline {pipeline.elapsed:.0f} s")
    assert ok


# 7 -----------------------------------------------------------------------
def test_c07_student_safety(report, pipeline):
    model = pipeline.models["FULL"]
    rows = evaluate(lambda p: model, fresh_rollouts(10, 777), pipeline.cfg.mpc)
    viol = {k: int(r["n_il_viol"]) for k, r in rows.items()}
    div = {k: r["n_diverged"] for k, r in rows.items()}
    ok = all(v == 0 for v in viol.values()) and all(d == 0 for d in div.values())
    report(7, ok, f"FULL student N_viol {viol}, diverged {div}, "
                  f"MSE_vo " + ", ".join(f"{k} {r['mse_vo']:.3g}" for k, r in rows.items()))
    assert ok


# 8 -----------------------------------------------------------------------
def test_c08_dagger_reduces_disagreement(report, pipeline):
    offline = pipeline.models["NO_DAGGER"]
    tr = pipeline.splits["dr"][0]
    eval_set = sample_episodes(10, pipeline.cfg.dagger.mix, 1234)
    pre = disagreement_rate(offline, eval_set)
    post = []
    for seed in (0, 1, 2):
        if seed == pipeline.cfg.dagger.seed:
            model = pipeline.models["FULL"]
        else:
            model = run_dagger(offline, tr, replace(pipeline.cfg.dagger, seed=seed)).model
        post.append(disagreement_rate(model, eval_set))
    wins = sum(p < pre for p in post)
    ok = wins >= 2
    report(8, ok, f"disagreement {pre:.4f} -> " + ", ".join(f"{p:.4f}" for p in post)
                  + f" ({wins}/3 seeds lower)")
    assert ok


# 9 -----------------------------------------------------------------------
def test_c09_ablation_direction(report, pipeline):
    scen = fresh_rollouts(3, 909)
    mpc = pipeline.cfg.mpc
    full = evaluate(lambda p: pipeline.models["FULL"], scen, mpc)
    noexp = evaluate(lambda p: pipeline.models["NO_EXPERT"], scen, mpc)
    ratios = {k: noexp[k]["mse_vo"] / max(full[k]["mse_vo"], 1e-12) for k in scen}
    viol = {k: int(noexp[k]["n_il_viol"]) for k in scen}
    ok = all(r >= 100 for r in ratios.values()) and all(v > 0 for v in viol.values())

    # informational: a one-step greedy labeller instead of random labels
    tr = pipeline.splits["dr"][0]
    greedy, _ = train_student(surrogate_labels(tr, "greedy", mpc=mpc), None, pipeline.cfg)
    g = evaluate(lambda p: greedy, scen, mpc)
    report(9, ok, "NO_EXPERT/FULL MSE_vo ratio " + ", ".join(f"{k} {r:.3g}" for k, r in ratios.items())
                  + f"; NO_EXPERT N_viol {viol}; greedy-label student (info) MSE_vo "
                  + ", ".join(f"{k} {g[k]['mse_vo']:.3g}" for k in scen))
    assert ok


# 10 ----------------------------------------------------------------------
def test_c10_latency_ratio(report, pipeline):
    if _backend.compiled_kernels is None:
        report(10, False, "compiled kernels not built")
        pytest.fail("compiled kernels not built")
    expert = MpcExpert(NOMINAL, MpcConfig(), backend=_backend.compiled_kernels)
    model = pipeline.models["FULL"]
    res = bench_decision_time(expert, model, n=2000)
    ok = res.ratio >= 5
    report(10, ok, f"expert {res.expert_us:.2f} us, ANN {res.ann_us:.2f} us, ratio {res.ratio:.1f}x "
                   f"({res.backend} kernels, N=5 K=15)")
    assert ok


# 11 ----------------------------------------------------------------------
def test_c11_metrics(report):
    ts = 20e-6

    def traj(vo=None, mode=None, il=None, n=None):
        n = n or len(vo if vo is not None else mode)
        return Trajectory(ts, np.full(n, 7.5) if il is None else np.asarray(il, float),
                          np.full(n, 90.0), np.full(n, 180.0) if vo is None else np.asarray(vo, float),
                          np.full(n, 120.0), np.full(n, 5.0), np.full(n, 7.5),
                          np.zeros(n, np.int8) if mode is None else np.asarray(mode, np.int8),
                          np.full(n, 36.0))

    checks = {}
    r = compute_metrics(traj(n=200))
    checks["constant"] = (r.mse_vo == r.mse_vcf == r.mse_il == 0 and r.overshoot_vo == r.overshoot_vcf == 0
                          and r.penalty_over == r.penalty_sag == 0 and r.t_set_vo == 0.0)
    r = compute_metrics(traj([180.0, 190.0, 180.0]))
    checks["overshoot"] = (r.overshoot_vo == 10.0 and r.mp_vo == 100.0 * 10.0 / 180.0
                           and r.penalty_over == ts / 180.0)
    r = compute_metrics(traj(mode=[0, 0, 1, 1]))
    checks["switching"] = (r.switch_count, r.n_sa, r.n_sb, r.n_trans_total) == (1, 1, 1, 2)
    r = compute_metrics(traj(n=1000))
    checks["energy"] = abs(r.e_in - 900.0 * 1000 * ts) <= 1e-12 * 900.0 * 1000 * ts
    ok = all(checks.values())
    report(11, ok, ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok


# 12 ----------------------------------------------------------------------
def test_c12_transfer(report, pipeline):
    source = pipeline.models["FULL"]
    accs, s2 = [], []
    for seed in (0, 1, 2):
        out = run_transfer_experiment(TransferConfig(seed=seed, head_seed=seed + 1), source=source)
        accs.append((out["accuracy"]["scratch"], out["accuracy"]["transfer"]))
        sc = out["scenarios"]["S2"]
        s2.append((sc["scratch"]["mse_vo"], sc["transfer"]["mse_vo"]))
    acc = np.array(accs)
    gap = float(np.mean(acc[:, 1] - acc[:, 0]))
    mse = np.array(s2)
    ok = gap >= 0.03 and mse[:, 1].mean() < mse[:, 0].mean()
    report(12, ok, f"mean accuracy gap {gap:+.4f} (scratch/transfer per seed "
                   + ", ".join(f"{a:.3f}/{b:.3f}" for a, b in accs)
                   + f"); S2 MSE_vo scratch {mse[:, 0].mean():.4g} vs transfer {mse[:, 1].mean():.4g}")
    assert ok
