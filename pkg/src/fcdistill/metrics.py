"""Closed-loop rollout metrics: tracking, transient, penalty, switching, energy, cost."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from fcdistill.converter import BOOST, NOMINAL, SwitchedPlant
from fcdistill.mpc import MpcConfig
from fcdistill.scenario import Trajectory, event_step

RIPPLE_START = 0.4
NOMINAL_DURATION = 0.5


@dataclass
class MetricsReport:
    mse_vo: float
    mse_vcf: float
    mse_il: float
    sse_vo: float
    sse_vcf: float
    overshoot_vo: float
    overshoot_vcf: float
    mp_vo: float
    mp_vcf: float
    t_set_vo: float
    t_set_vcf: float
    ripple_vo: float
    ripple_vcf: float
    ripple_t0: float
    penalty_over: float
    penalty_sag: float
    n_il_viol: int
    switch_count: int
    switch_freq: float
    n_sa: int
    n_sb: int
    n_trans_total: int
    e_in: float
    e_out: float
    p_out_avg: float
    eff_avg: float
    j_sum: float
    j_mean: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def _settling_time(x: np.ndarray, ref, t: np.ndarray) -> float:
    outside = (x < 0.98 * ref) | (x > 1.02 * ref)
    if not outside.any():
        return float(t[0])
    return float(t[np.flatnonzero(outside)[-1]])


def _ripple_start(n: int, ts: float) -> tuple[int, float]:
    """Index and time where the ripple window opens.

    0.4 s for full-length episodes; the last 20% of shorter ones.
    """
    total = n * ts
    t0 = RIPPLE_START if total >= NOMINAL_DURATION - 0.5 * ts else 0.8 * total
    k0 = event_step(t0, ts)
    return k0, k0 * ts


def compute_metrics(traj: Trajectory, v_ref: float = 180.0, mpc_cfg: MpcConfig | None = None,
                    i_safe: tuple[float, float] | None = None,
                    plant: SwitchedPlant = BOOST) -> MetricsReport:
    """Every rollout metric over the full record stream.

    ``j_sum`` re-evaluates the MPC stage cost a posteriori on the realized
    ``(i_L, v_Cf)`` against the realized ``i_ref``.  Input energy counts the
    source current ``a_in(m)*i_L``, which is ``i_L`` for every boost mode.
    """
    n = len(traj)
    if n == 0:
        raise ValueError("cannot compute metrics of an empty trajectory")
    mpc_cfg = mpc_cfg or MpcConfig(v_ref=v_ref)
    lo, hi = i_safe if i_safe is not None else (NOMINAL.i_safe_lo, NOMINAL.i_safe_hi)
    ts = traj.ts
    t = traj.t
    total = n * ts
    vo, vcf, il = traj.v_o, traj.v_cf, traj.i_l
    vcf_ref = plant.cf_reference(v_ref, traj.v_in)
    vcf_ref0 = float(np.atleast_1d(vcf_ref)[0]) if np.ndim(vcf_ref) else float(vcf_ref)

    ev, ec, ei = vo - v_ref, vcf - vcf_ref, il - traj.i_ref
    overshoot_vo = max(float(vo.max()) - v_ref, 0.0)
    overshoot_vcf = max(float(ec.max()), 0.0)

    k0, t0 = _ripple_start(n, ts)
    tail = slice(k0, n)

    modes = np.asarray(traj.mode, dtype=np.int64)
    names = plant.mode_names
    sa = np.array([names[m][0] for m in modes])
    sb = np.array([names[m][1] for m in modes])
    switch_count = int(np.count_nonzero(modes[1:] != modes[:-1]))
    n_sa = int(np.count_nonzero(sa[1:] != sa[:-1]))
    n_sb = int(np.count_nonzero(sb[1:] != sb[:-1]))

    i_in = plant.table[modes, 0] * il
    e_in = ts * float(np.sum(traj.v_in * i_in))
    e_out = ts * float(np.sum(vo * traj.i_o))

    dc = vcf - vcf_ref
    j = mpc_cfg.lambda_i * (ei * ei) + mpc_cfg.lambda_cf * (dc * dc)
    j_sum = float(np.sum(j))

    return MetricsReport(
        mse_vo=float(np.mean(ev * ev)),
        mse_vcf=float(np.mean(ec * ec)),
        mse_il=float(np.mean(ei * ei)),
        sse_vo=float(ev[-1]),
        sse_vcf=float(ec[-1]),
        overshoot_vo=overshoot_vo,
        overshoot_vcf=overshoot_vcf,
        mp_vo=100.0 * overshoot_vo / v_ref,
        mp_vcf=100.0 * overshoot_vcf / vcf_ref0,
        t_set_vo=_settling_time(vo, v_ref, t),
        t_set_vcf=_settling_time(vcf, vcf_ref, t),
        ripple_vo=float(np.std(vo[tail])) if k0 < n else 0.0,
        ripple_vcf=float(np.std(vcf[tail])) if k0 < n else 0.0,
        ripple_t0=t0,
        penalty_over=ts / v_ref * float(np.sum(np.maximum(vo - 1.05 * v_ref, 0.0))),
        penalty_sag=ts / v_ref * float(np.sum(np.maximum(0.95 * v_ref - vo, 0.0))),
        n_il_viol=int(np.count_nonzero((il < lo) | (il > hi))),
        switch_count=switch_count,
        switch_freq=switch_count / total,
        n_sa=n_sa,
        n_sb=n_sb,
        n_trans_total=n_sa + n_sb,
        e_in=e_in,
        e_out=e_out,
        p_out_avg=e_out / total,
        eff_avg=e_out / e_in if e_in != 0 else float("nan"),
        j_sum=j_sum,
        j_mean=j_sum / n,
    )
