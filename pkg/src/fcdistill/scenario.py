"""Closed-loop episodes: outer PI voltage loop, inner switching policy, step events.

A switching policy is any callable mapping the 6-element feature vector
``(i_L, v_Cf, v_o, i_ref, V_in, i_o)`` to a mode index.  The load resistance
only enters through the measured output current ``i_o = v_o / R``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from fcdistill._backend import kernels
from fcdistill.converter import (
    BOOST,
    NOMINAL,
    ConverterParams,
    DivergenceError,
    SwitchedPlant,
    perturb_params,
)

Policy = Callable[[Sequence[float]], int]

V_IN_RANGE = (80.0, 140.0)
R_RANGE = (10.0, 100.0)
RHO = 0.3
SCENARIO_KINDS = ("S1", "S2", "S3")

# canonical nominal run: V_in 120 -> 100 -> 130 V, R 36 -> 20 ohm
S1_EVENTS = ((0.2, "v_in", 100.0), (0.3, "v_in", 130.0), (0.4, "load_r", 20.0))


@dataclass(frozen=True)
class StepEvent:
    time: float
    target: str  # "v_in" or "load_r"
    value: float

    def __post_init__(self):
        if self.target not in ("v_in", "load_r"):
            raise ValueError(f"unknown event target {self.target!r}")
        if not self.time >= 0:
            raise ValueError("event time must be >= 0")
        if self.target == "load_r" and not self.value > 0:
            raise ValueError("load resistance must stay positive")


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "S1"
    duration: float = 0.5
    v_ref: float = 180.0
    v_in: float = 120.0
    r: float = 36.0
    events: tuple[StepEvent, ...] = ()
    d_l: float = 0.0
    d_cf: float = 0.0
    d_c: float = 0.0
    seed: int = 0
    kp: float = 0.35
    ki: float = 120.0
    i_ref_lo: float = 0.0
    i_ref_hi: float = 23.0

    def __post_init__(self):
        if not self.duration >= 0:
            raise ValueError("duration must be non-negative")
        if not self.r > 0:
            raise ValueError("load resistance must be positive")
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise ValueError("events must be sorted by time")
        if any(t > self.duration for t in times):
            raise ValueError("event scheduled after the end of the episode")
        if not self.i_ref_lo < self.i_ref_hi:
            raise ValueError("i_ref_lo must be below i_ref_hi")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["events"] = [asdict(e) for e in self.events]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        d["events"] = tuple(StepEvent(**e) for e in d.get("events", ()))
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def n_steps(duration: float, ts: float) -> int:
    return int(round(duration / ts))


def event_step(time: float, ts: float) -> int:
    """Index of the first sample ``k`` with ``k*ts >= time``."""
    k = max(int(math.ceil(time / ts)), 0)
    while k > 0 and (k - 1) * ts >= time:
        k -= 1
    while k * ts < time:
        k += 1
    return k


@dataclass
class OuterLoopState:
    """Discrete PI voltage controller with clamping and conditional-integration anti-windup."""

    kp: float = 0.35
    ki: float = 120.0
    i_min: float = 0.0
    i_max: float = 25.0
    integral: float = 0.0


def outer_current_reference(state: OuterLoopState, v_o: float, v_ref: float,
                            ts: float) -> tuple[float, OuterLoopState]:
    if not ts > 0:
        raise ValueError("ts must be positive")
    e = v_ref - v_o
    cand = state.integral + e * ts
    u = state.kp * e + state.ki * cand
    if u > state.i_max:
        return state.i_max, state
    if u < state.i_min:
        return state.i_min, state
    return u, replace(state, integral=cand)


@dataclass
class Trajectory:
    ts: float
    i_l: np.ndarray
    v_cf: np.ndarray
    v_o: np.ndarray
    v_in: np.ndarray
    i_o: np.ndarray
    i_ref: np.ndarray
    mode: np.ndarray
    r: np.ndarray
    plant: str = "boost"

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self)) * self.ts

    def __len__(self) -> int:
        return len(self.mode)

    def features(self) -> np.ndarray:
        """``(n, 6)`` feature matrix in policy input order."""
        return np.column_stack([self.i_l, self.v_cf, self.v_o, self.i_ref, self.v_in, self.i_o])

    def slice(self, start: int, stop: int) -> "Trajectory":
        cols = {k: getattr(self, k)[start:stop] for k in _COLUMNS}
        return Trajectory(self.ts, plant=self.plant, **cols)

    def to_csv(self, path, mode_names: Sequence[str] | None = None) -> None:
        names = mode_names or BOOST.mode_names
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "i_L", "v_Cf", "v_o", "V_in", "i_o", "i_ref", "mode", "R"])
            t = self.t
            for k in range(len(self)):
                w.writerow([repr(float(t[k])), repr(float(self.i_l[k])), repr(float(self.v_cf[k])),
                            repr(float(self.v_o[k])), repr(float(self.v_in[k])),
                            repr(float(self.i_o[k])), repr(float(self.i_ref[k])),
                            names[int(self.mode[k])], repr(float(self.r[k]))])

    @classmethod
    def from_csv(cls, path, ts: float, mode_names: Sequence[str] | None = None,
                 plant: str = "boost") -> "Trajectory":
        names = list(mode_names or BOOST.mode_names)
        rows = list(csv.DictReader(open(path, newline="")))
        col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
        return cls(ts, col("i_L"), col("v_Cf"), col("v_o"), col("V_in"), col("i_o"),
                   col("i_ref"), np.array([names.index(r["mode"]) for r in rows], dtype=np.int8),
                   col("R"), plant)


_COLUMNS = ("i_l", "v_cf", "v_o", "v_in", "i_o", "i_ref", "mode", "r")


def steady_state(plant: SwitchedPlant, v_ref: float, v_in: float, r: float) -> tuple[float, float, float]:
    """Averaged operating point ``(i_L, v_Cf, v_o)`` with the output at its reference.

    In the boost table every mode except NO routes ``i_L`` to the output, so
    ``i_L = i_o`` unless ``V_in < v_ref/2`` forces a share ``d`` of NO to hold
    the inductor volt-second balance, giving ``i_L = i_o / (1 - d)``.
    """
    i_l = v_ref / r
    if plant.name == "boost" and v_in < 0.5 * v_ref:
        d = (0.5 * v_ref - v_in) / (0.5 * v_ref)
        i_l = i_l / (1.0 - d)
    return i_l, plant.cf_reference(v_ref, v_in), v_ref


def _event_arrays(cfg: ScenarioConfig, ts: float):
    steps = np.array([event_step(e.time, ts) for e in cfg.events], dtype=np.int64)
    kinds = np.array([0 if e.target == "v_in" else 1 for e in cfg.events], dtype=np.int8)
    values = np.array([e.value for e in cfg.events], dtype=np.float64)
    return steps, kinds, values


def _initial(cfg: ScenarioConfig, plant: SwitchedPlant, x0):
    if x0 is None:
        x0 = steady_state(plant, cfg.v_ref, cfg.v_in, cfg.r)
    integral0 = x0[0] / cfg.ki if cfg.ki > 0 else 0.0
    return tuple(float(v) for v in x0), integral0


def run_episode(cfg: ScenarioConfig, policy: Policy, p: ConverterParams,
                plant: SwitchedPlant = BOOST, x0=None) -> Trajectory:
    """Simulate one closed-loop episode of ``round(duration/ts)`` steps.

    Per step: apply due events, measure ``i_o = v_o/R``, update the PI
    current reference, query the policy, record, advance the plant.  An
    expert policy whose model matches ``p`` runs entirely in the compiled
    kernel when available; the result is identical to the generic loop.

    Raises:
        DivergenceError: a state became non-finite; ``.step`` is the index
            and ``.partial`` holds the trajectory recorded so far.
    """
    from fcdistill.mpc import MpcExpert

    if (isinstance(policy, MpcExpert) and hasattr(policy.backend, "expert_episode")
            and policy.params == p and policy.plant is plant):
        return _expert_episode(cfg, policy, p, plant, x0)
    return _generic_episode(cfg, policy, p, plant, x0)


def _generic_episode(cfg, policy, p, plant, x0):
    ts = p.ts
    n = n_steps(cfg.duration, ts)
    out = np.empty((n, 7))
    modes = np.empty(n, dtype=np.int8)
    ev_steps, ev_kinds, ev_values = _event_arrays(cfg, ts)
    (il, vcf, vo), integral = _initial(cfg, plant, x0)
    vin, r = float(cfg.v_in), float(cfg.r)
    kp, ki, lo, hi, v_ref = cfg.kp, cfg.ki, cfg.i_ref_lo, cfg.i_ref_hi, cfg.v_ref
    rows = [tuple(float(a) for a in plant.table[m]) for m in range(4)]
    l, cf, c = p.l, p.c_f, p.c
    isfinite = math.isfinite
    ev, n_ev = 0, len(ev_steps)
    for k in range(n):
        while ev < n_ev and ev_steps[ev] <= k:
            if ev_kinds[ev] == 0:
                vin = float(ev_values[ev])
            else:
                r = float(ev_values[ev])
            ev += 1
        io = vo / r
        e = v_ref - vo
        cand = integral + e * ts
        u = kp * e + ki * cand
        if u > hi:
            iref = hi
        elif u < lo:
            iref = lo
        else:
            iref = u
            integral = cand
        if not (isfinite(il) and isfinite(vcf) and isfinite(vo) and isfinite(io) and isfinite(iref)):
            raise _diverged(out, modes, k, ts, plant)
        m = int(policy((il, vcf, vo, iref, vin, io)))
        out[k] = (il, vcf, vo, vin, io, iref, r)
        modes[k] = m
        a_in, a_vo, a_cf, alpha, beta = rows[m]
        il, vcf, vo = (il + ts * (a_in * vin - a_vo * vo - a_cf * vcf) / l,
                       vcf + ts * (beta * il) / cf,
                       vo + ts * (alpha * il - io) / c)
    return _trajectory(out, modes, ts, plant)


def _expert_episode(cfg, expert, p, plant, x0):
    ts = p.ts
    n = n_steps(cfg.duration, ts)
    out = np.empty((n, 7))
    modes = np.empty(n, dtype=np.int8)
    ev_steps, ev_kinds, ev_values = _event_arrays(cfg, ts)
    x, integral = _initial(cfg, plant, x0)
    mc = expert.cfg
    done = expert.backend.expert_episode(
        np.array(x, dtype=np.float64), n, ts, p.l, p.c_f, p.c, plant.table,
        float(cfg.v_in), float(cfg.r), ev_steps, ev_kinds, ev_values,
        cfg.v_ref, cfg.kp, cfg.ki, cfg.i_ref_lo, cfg.i_ref_hi, integral,
        mc.horizon, mc.beam_width, mc.lambda_i, mc.lambda_cf,
        plant.cf_gain_ref, plant.cf_gain_in, out, modes)
    if done < n:
        raise _diverged(out, modes, done, ts, plant)
    return _trajectory(out, modes, ts, plant)


def _trajectory(out, modes, ts, plant):
    return Trajectory(ts, out[:, 0].copy(), out[:, 1].copy(), out[:, 2].copy(), out[:, 3].copy(),
                      out[:, 4].copy(), out[:, 5].copy(), modes, out[:, 6].copy(), plant.name)


def _diverged(out, modes, k, ts, plant):
    err = DivergenceError("closed-loop state became non-finite", step=k)
    err.partial = _trajectory(out[:k], modes[:k], ts, plant)
    return err


def _uniform_scaled(rng, lo, hi, intensity):
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * intensity
    return float(rng.uniform(mid - half, mid + half))


def sample_scenario(kind: str, rng: np.random.Generator, intensity: float = 1.0,
                    base: ConverterParams = NOMINAL, duration: float = 0.5,
                    n_events: int = 4) -> tuple[ScenarioConfig, ConverterParams]:
    """Draw one scenario of the given kind.

    S1 is the fixed nominal step sequence.  S2 samples the initial and
    stepped ``V_in``/``R`` uniformly; S3 additionally perturbs ``L``,
    ``C_f``, ``C``.  ``intensity`` shrinks every range about its midpoint.
    """
    if kind not in SCENARIO_KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    seed = int(rng.integers(0, 2**31 - 1))
    if kind == "S1":
        events = tuple(StepEvent(t, tgt, v) for t, tgt, v in S1_EVENTS)
        return ScenarioConfig("S1", 0.5, 180.0, 120.0, 36.0, events, seed=seed), base
    v_in = _uniform_scaled(rng, *V_IN_RANGE, intensity)
    r = _uniform_scaled(rng, *R_RANGE, intensity)
    times = np.sort(rng.uniform(0.05, duration - 0.05, size=n_events))
    events = []
    for t in times:
        if rng.random() < 0.5:
            events.append(StepEvent(float(t), "v_in", _uniform_scaled(rng, *V_IN_RANGE, intensity)))
        else:
            events.append(StepEvent(float(t), "load_r", _uniform_scaled(rng, *R_RANGE, intensity)))
    d = (0.0, 0.0, 0.0)
    if kind == "S3":
        rho = RHO * intensity
        d = tuple(float(v) for v in rng.uniform(-rho, rho, size=3))
    cfg = ScenarioConfig(kind, duration, 180.0, v_in, r, tuple(events), *d, seed=seed)
    return cfg, perturb_params(base, *d)


def params_for(cfg: ScenarioConfig, base: ConverterParams = NOMINAL) -> ConverterParams:
    return perturb_params(base, cfg.d_l, cfg.d_cf, cfg.d_c)
