"""N-step finite-control-set MPC expert.

The expert minimizes the summed current-tracking and capacitor-balancing cost
over mode sequences of length ``horizon`` and applies the first mode.  Two
solvers are provided: ``beam_decide`` (the production expert, backed by the
selected kernel) and ``exhaustive_decide`` (brute-force enumeration used as
the correctness oracle; it never touches the kernels' search code).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from fcdistill._backend import compiled_kernels, kernels, python_kernels
from fcdistill.converter import (
    BOOST,
    ConverterParams,
    Exogenous,
    PlantState,
    SwitchedPlant,
    SwitchMode,
    discrete_step,
)

MAX_EXHAUSTIVE_HORIZON = 10


class FeatureVector(NamedTuple):
    """Measured information vector, in the fixed order the policy sees it."""

    i_l: float
    v_cf: float
    v_o: float
    i_ref: float
    v_in: float
    i_o: float

    @property
    def state(self) -> PlantState:
        return PlantState(self.i_l, self.v_cf, self.v_o)

    @property
    def exogenous(self) -> Exogenous:
        return Exogenous(self.v_in, self.i_o)


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 5
    beam_width: int = 15
    lambda_i: float = 1.0
    lambda_cf: float = 0.007
    v_ref: float = 180.0

    def __post_init__(self):
        if self.horizon < 1 or self.beam_width < 1:
            raise ValueError("horizon and beam_width must be >= 1")
        if self.lambda_i < 0 or self.lambda_cf < 0:
            raise ValueError("cost weights must be non-negative")

    @property
    def v_cf_ref(self) -> float:
        """Flying-capacitor reference of the boost converter (half the output reference)."""
        return BOOST.cf_reference(self.v_ref, 0.0)


class Decision(NamedTuple):
    mode: SwitchMode
    cost: float


def stage_cost(x: PlantState, i_ref: float, cfg: MpcConfig, v_cf_ref: float | None = None) -> float:
    """``lambda_i*(i_L - i_ref)^2 + lambda_cf*(v_Cf - v_Cf_ref)^2``; ``v_o`` does not enter."""
    if v_cf_ref is None:
        v_cf_ref = cfg.v_cf_ref
    di = x[0] - i_ref
    dc = x[1] - v_cf_ref
    return cfg.lambda_i * (di * di) + cfg.lambda_cf * (dc * dc)


def sequence_cost(x: PlantState, w: Exogenous, i_ref: float, seq: Sequence[int],
                  p: ConverterParams, cfg: MpcConfig, plant: SwitchedPlant = BOOST) -> float:
    """Cost of rolling ``seq`` out from ``x``, counting from the first successor state.

    ``w`` and ``i_ref`` are held constant over the horizon.
    """
    if len(seq) > cfg.horizon:
        raise ValueError(f"sequence of length {len(seq)} exceeds horizon {cfg.horizon}")
    v_cf_ref = plant.cf_reference(cfg.v_ref, w[0])
    cost = 0.0
    for m in seq:
        x = discrete_step(x, w, m, p, plant)
        cost = cost + stage_cost(x, i_ref, cfg, v_cf_ref)
    return cost


def exhaustive_search(z: Sequence[float], p: ConverterParams, cfg: MpcConfig,
                      plant: SwitchedPlant = BOOST) -> tuple[tuple[int, ...], float, int]:
    """Global argmin over all ``4**horizon`` sequences.

    Returns ``(sequence, cost, n_sequences)``.  Sequences are visited in
    lexicographic mode order and only a strictly lower cost replaces the
    incumbent, which realizes the (cost, lexicographic) tie-break.
    """
    if cfg.horizon > MAX_EXHAUSTIVE_HORIZON:
        raise ValueError(f"exhaustive search refuses horizon > {MAX_EXHAUSTIVE_HORIZON}")
    z = FeatureVector(*z)
    x, w = z.state, z.exogenous
    best_seq, best_cost, count = None, float("inf"), 0
    for seq in itertools.product(range(4), repeat=cfg.horizon):
        count += 1
        cost = sequence_cost(x, w, z.i_ref, seq, p, cfg, plant)
        if cost < best_cost:
            best_seq, best_cost = seq, cost
    if best_seq is None:
        raise FloatingPointError("no finite sequence cost")
    return best_seq, best_cost, count


def exhaustive_decide(z: Sequence[float], p: ConverterParams, cfg: MpcConfig,
                      plant: SwitchedPlant = BOOST) -> Decision:
    seq, cost, _ = exhaustive_search(z, p, cfg, plant)
    return Decision(SwitchMode(seq[0]), cost)


class BeamResult(NamedTuple):
    mode: SwitchMode
    cost: float
    sequence: tuple[int, ...]
    n_evals: int


def beam_search(z: Sequence[float], p: ConverterParams, cfg: MpcConfig,
                plant: SwitchedPlant = BOOST, backend=None) -> BeamResult:
    """Beam search with the full winning sequence and the stage-evaluation count."""
    k = kernels if backend is None else backend
    v_cf_ref = plant.cf_reference(cfg.v_ref, z[4])
    first, cost, code, n_evals = k.beam_search(
        tuple(z), plant.table, p.l, p.c_f, p.c, p.ts, cfg.horizon, cfg.beam_width,
        cfg.lambda_i, cfg.lambda_cf, v_cf_ref)
    seq = tuple((code >> (2 * (cfg.horizon - 1 - j))) & 3 for j in range(cfg.horizon))
    return BeamResult(SwitchMode(first), cost, seq, n_evals)


def beam_decide(z: Sequence[float], p: ConverterParams, cfg: MpcConfig,
                plant: SwitchedPlant = BOOST) -> Decision:
    res = beam_search(z, p, cfg, plant)
    return Decision(res.mode, res.cost)


def greedy_decide(z: Sequence[float], p: ConverterParams, cfg: MpcConfig,
                  plant: SwitchedPlant = BOOST) -> Decision:
    """One-step argmin of the stage cost (no look-ahead)."""
    return exhaustive_decide(z, p, MpcConfig(1, 1, cfg.lambda_i, cfg.lambda_cf, cfg.v_ref), plant)


class MpcExpert:
    """Receding-horizon expert usable as a switching policy ``z -> mode``.

    ``params`` is the plant model the expert predicts with; for labelling it
    is the episode's true (possibly perturbed) plant.
    """

    def __init__(self, params: ConverterParams, cfg: MpcConfig | None = None,
                 plant: SwitchedPlant = BOOST, backend=None):
        self.params = params
        self.cfg = cfg or MpcConfig()
        self.plant = plant
        if isinstance(backend, str):
            backend = {k.NAME: k for k in (python_kernels, compiled_kernels) if k is not None}[backend]
        self.backend = kernels if backend is None else backend
        c = self.cfg
        self._policy = self.backend.BeamPolicy(
            plant.table, params.l, params.c_f, params.c, params.ts, c.horizon, c.beam_width,
            c.lambda_i, c.lambda_cf, plant.cf_gain_ref, plant.cf_gain_in, c.v_ref)

    def with_params(self, params: ConverterParams) -> "MpcExpert":
        return MpcExpert(params, self.cfg, self.plant, self.backend)

    def __call__(self, z: Sequence[float]) -> int:
        return self._policy(z)

    def decision_kernel(self):
        """Bare ``z -> mode`` callable."""
        return self._policy

    def __reduce__(self):
        return MpcExpert, (self.params, self.cfg, self.plant, self.backend.NAME)
