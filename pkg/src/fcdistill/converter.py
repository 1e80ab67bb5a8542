"""Switched-affine model of the flying-capacitor three-level boost converter.

State ``x = (i_L, v_Cf, v_o)`` and measured exogenous input ``w = (V_in, i_o)``.
Each admissible switching mode selects one affine vector field; the simulator
and the predictive expert both use its forward-Euler discretization.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from fcdistill._backend import kernels


class SwitchMode(enum.IntEnum):
    """The four admissible (S_A, S_B) combinations.

    The integer value is also the fixed tie-break order used everywhere
    (OP < PO < NO < ON) and the class index of the neural policy.
    """

    OP = 0
    PO = 1
    NO = 2
    ON = 3

    @property
    def s_a(self) -> str:
        """Inductor terminal-voltage level (P, O or N)."""
        return self.name[0]

    @property
    def s_b(self) -> str:
        """Flying-capacitor charging direction (P, O or N)."""
        return self.name[1]

    @classmethod
    def from_levels(cls, s_a: str, s_b: str) -> "SwitchMode":
        try:
            return cls[s_a + s_b]
        except KeyError:
            raise ValueError(f"({s_a}, {s_b}) is not an admissible switching mode") from None


class ModeCoefficients(NamedTuple):
    a_vo: float
    a_cf: float
    alpha: float
    beta: float


_COEFFS = {
    SwitchMode.NO: ModeCoefficients(0.0, 0.0, 0.0, 0.0),
    SwitchMode.PO: ModeCoefficients(1.0, 0.0, 1.0, 0.0),
    SwitchMode.OP: ModeCoefficients(0.0, 1.0, 1.0, 1.0),
    SwitchMode.ON: ModeCoefficients(1.0, -1.0, 1.0, -1.0),
}


def mode_coefficients(m: SwitchMode) -> ModeCoefficients:
    return _COEFFS[SwitchMode(m)]


@dataclass(frozen=True)
class SwitchedPlant:
    """Mode table for a 4-mode converter sharing the boost rate equations.

    Row ``m`` of ``table`` is ``(a_in, a_vo, a_cf, alpha, beta)`` with

        di_L/dt  = (a_in*V_in - a_vo*v_o - a_cf*v_Cf) / L
        dv_Cf/dt = beta*i_L / C_f
        dv_o/dt  = (alpha*i_L - i_o) / C

    The internal-capacitor reference is ``cf_gain_ref*v_ref + cf_gain_in*V_in``.
    """

    name: str
    mode_names: tuple[str, str, str, str]
    table: np.ndarray
    cf_gain_ref: float
    cf_gain_in: float

    def cf_reference(self, v_ref: float, v_in: float) -> float:
        return self.cf_gain_ref * v_ref + self.cf_gain_in * v_in

    def input_current_gain(self, mode: int) -> float:
        return float(self.table[mode, 0])


def _boost_table() -> np.ndarray:
    table = np.zeros((4, 5))
    for m, co in _COEFFS.items():
        table[m] = (1.0, co.a_vo, co.a_cf, co.alpha, co.beta)
    table.setflags(write=False)
    return table


BOOST = SwitchedPlant(
    name="boost",
    mode_names=tuple(m.name for m in SwitchMode),
    table=_boost_table(),
    cf_gain_ref=0.5,
    cf_gain_in=0.0,
)


@dataclass(frozen=True)
class ConverterParams:
    """Passive components, control period and the hard inductor-current interval."""

    l: float = 1e-3
    c_f: float = 50e-6
    c: float = 125e-6
    ts: float = 20e-6
    i_safe_lo: float = 0.0
    i_safe_hi: float = 25.0

    def __post_init__(self):
        for name in ("l", "c_f", "c", "ts"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if not self.i_safe_lo < self.i_safe_hi:
            raise ValueError("i_safe_lo must be below i_safe_hi")


NOMINAL = ConverterParams()


class PlantState(NamedTuple):
    i_l: float
    v_cf: float
    v_o: float


class Exogenous(NamedTuple):
    v_in: float
    i_o: float


class DivergenceError(FloatingPointError):
    """Raised when a simulated state stops being finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


def discrete_step(x: PlantState, w: Exogenous, m: SwitchMode, p: ConverterParams,
                  plant: SwitchedPlant = BOOST) -> PlantState:
    """One forward-Euler step ``x + ts*(A_m x + B w)``."""
    if not all(math.isfinite(v) for v in (*x, *w)):
        raise DivergenceError("non-finite state or exogenous input")
    nxt = kernels.step(x[0], x[1], x[2], w[0], w[1], plant.table[int(m)],
                       p.l, p.c_f, p.c, p.ts)
    return PlantState(*nxt)


def continuous_matrices(m: SwitchMode, p: ConverterParams,
                        plant: SwitchedPlant = BOOST) -> tuple[np.ndarray, np.ndarray]:
    """``(A_m, B)`` of the continuous-time model; ``B`` is 3x2 with ``a_in`` folded in."""
    a_in, a_vo, a_cf, alpha, beta = plant.table[int(m)]
    a = np.array([
        [0.0, -a_cf / p.l, -a_vo / p.l],
        [beta / p.c_f, 0.0, 0.0],
        [alpha / p.c, 0.0, 0.0],
    ])
    b = np.array([
        [a_in / p.l, 0.0],
        [0.0, 0.0],
        [0.0, -1.0 / p.c],
    ])
    return a, b


def discrete_matrices(m: SwitchMode, p: ConverterParams,
                      plant: SwitchedPlant = BOOST) -> tuple[np.ndarray, np.ndarray]:
    a, b = continuous_matrices(m, p, plant)
    return np.eye(3) + p.ts * a, p.ts * b


def perturb_params(p: ConverterParams, d_l: float = 0.0, d_cf: float = 0.0,
                   d_c: float = 0.0) -> ConverterParams:
    """Scale L, C_f and C by ``(1 + d)``; ts and the current limits are kept."""
    for name, d in (("d_l", d_l), ("d_cf", d_cf), ("d_c", d_c)):
        if not d > -1.0:
            raise ValueError(f"{name}={d} gives a non-physical component (need d > -1)")
    return replace(p, l=(1.0 + d_l) * p.l, c_f=(1.0 + d_cf) * p.c_f, c=(1.0 + d_c) * p.c)
