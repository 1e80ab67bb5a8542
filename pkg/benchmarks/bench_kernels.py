"""Compiled vs pure-Python kernels.

    python3 benchmarks/bench_kernels.py [--n 2000] [--duration 0.05]

Times one beam-search decision (N=5, K=15), one MLP decision and one
closed-loop expert episode on each available backend, and checks that the
two backends agree.
"""

import argparse
import time
from dataclasses import replace

import numpy as np

from fcdistill import _backend
from fcdistill.converter import NOMINAL
from fcdistill.mpc import MpcConfig, MpcExpert
from fcdistill.policy import init_model
from fcdistill.scenario import run_episode, sample_scenario


def per_call_us(f, zs, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for z in zs:
            f(z)
        best = min(best, (time.perf_counter() - t0) / len(zs))
    return best * 1e6


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000, help="decisions per timing")
    ap.add_argument("--duration", type=float, default=0.05, help="episode length (s)")
    args = ap.parse_args()

    backends = [k for k in (_backend.compiled_kernels, _backend.python_kernels) if k is not None]
    if len(backends) == 1:
        print("compiled extension not built; timing the Python fallback only")

    cfg, p = sample_scenario("S1", np.random.default_rng(0))
    cfg = replace(cfg, duration=args.duration, events=tuple(e for e in cfg.events if e.time <= args.duration))
    feats = run_episode(cfg, MpcExpert(p), p).features()
    zs = [tuple(map(float, feats[i])) for i in np.random.default_rng(1).choice(len(feats), args.n)]
    model = init_model(128, 0, feats.mean(axis=0), feats.std(axis=0) + 1e-9)

    rows, decisions = {}, {}
    for k in backends:
        ex = MpcExpert(NOMINAL, MpcConfig(), backend=k)
        mlp = k.MlpPolicy(model.mean, model.std, model.w1, model.b1, model.w2, model.b2)
        t0 = time.perf_counter()
        traj = run_episode(cfg, ex, p)
        ep = time.perf_counter() - t0
        rows[k.NAME] = (per_call_us(ex.decision_kernel(), zs), per_call_us(mlp, zs), ep * 1e3)
        decisions[k.NAME] = ([ex(z) for z in zs], [mlp(z) for z in zs], traj.mode.copy())

    print(f"{'backend':<10}{'beam us':>12}{'mlp us':>12}{'episode ms':>14}   ({len(zs)} decisions, "
          f"{len(feats)}-step episode)")
    for name, (b, m, e) in rows.items():
        print(f"{name:<10}{b:12.2f}{m:12.2f}{e:14.1f}")
    if len(rows) == 2:
        (cb, cm, ce), (pb, pm, pe) = rows["compiled"], rows["python"]
        print(f"{'speedup':<10}{pb / cb:11.1f}x{pm / cm:11.1f}x{pe / ce:13.1f}x")
        c, q = decisions["compiled"], decisions["python"]
        print(f"beam decisions identical: {c[0] == q[0]}; episode modes identical: "
              f"{np.array_equal(c[2], q[2])}; mlp agreement: {np.mean(np.equal(c[1], q[1])):.4f}")
    for name, (b, m, _) in rows.items():
        print(f"{name}: expert/ANN latency ratio {b / m:.1f}x")


if __name__ == "__main__":
    main()
