"""Cross-topology transfer: three-level buck environment, Scratch vs Transfer students.

Buck model (this package's own; two switching cells ``a`` outer, ``b`` inner):

    switch-node voltage  a*(V_in - v_c) + b*v_c
    L di/dt   = v_x - v_o
    C_f dv_c/dt = (a - b) * i_L
    C dv_o/dt = i_L - i_o

which maps onto the shared rate equations with rows
``(a_in, a_vo, a_cf, alpha, beta)``.  Mode names are the cell states
(``P`` on, ``O`` off).  Class indices follow the boost analogues: index 0
charges the internal capacitor, index 3 discharges it.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from fcdistill.converter import NOMINAL, ConverterParams, DivergenceError, PlantState, SwitchedPlant, discrete_step
from fcdistill.dataset import Dataset, ExpertLabeler, collect_expert_dataset, split
from fcdistill.metrics import compute_metrics
from fcdistill.mpc import MpcConfig, MpcExpert
from fcdistill.policy import MlpModel, TrainConfig, _init_layer, accuracy, init_model, normalizer, train
from fcdistill.scenario import ScenarioConfig, StepEvent, _uniform_scaled, run_episode

logger = logging.getLogger(__name__)


def _buck_table() -> np.ndarray:
    t = np.array([
        [1.0, 1.0, 1.0, 1.0, 1.0],    # PO upper-mid: V_in - v_c, charges v_c
        [1.0, 1.0, 0.0, 1.0, 0.0],    # PP full: V_in
        [0.0, 1.0, 0.0, 1.0, 0.0],    # OO freewheel: 0
        [0.0, 1.0, -1.0, 1.0, -1.0],  # OP lower-mid: v_c, discharges v_c
    ])
    t.setflags(write=False)
    return t


BUCK = SwitchedPlant(
    name="buck3l",
    mode_names=("PO", "PP", "OO", "OP"),
    table=_buck_table(),
    cf_gain_ref=0.0,
    cf_gain_in=0.5,
)

BUCK_V_REF = 80.0
BUCK_V_IN = 120.0
BUCK_V_IN_RANGE = (100.0, 140.0)
BUCK_R_RANGE = (8.0, 30.0)


def buck_discrete_step(x: PlantState, w, m: int, p: ConverterParams = NOMINAL) -> PlantState:
    return discrete_step(x, w, m, p, BUCK)


def buck_scenario(name: str) -> ScenarioConfig:
    """The two evaluation runs.

    ``S1``: load 20 -> 10 ohm at 0.25 s.  ``S2`` (strong disturbance): the
    same load step bracketed by input steps 120 -> 105 V at 0.15 s and
    105 -> 135 V at 0.35 s.
    """
    if name == "S1":
        events = (StepEvent(0.25, "load_r", 10.0),)
    elif name == "S2":
        events = (StepEvent(0.15, "v_in", 105.0), StepEvent(0.25, "load_r", 10.0),
                  StepEvent(0.35, "v_in", 135.0))
    else:
        raise ValueError(f"unknown buck scenario {name!r}")
    return ScenarioConfig(name, 0.5, BUCK_V_REF, BUCK_V_IN, 20.0, events)


@dataclass(frozen=True)
class BuckSampler:
    """``nom`` gives the S1 load step; other subsets randomize V_in and R with 4 steps."""

    intensity: float = 1.0

    def __call__(self, subset: str, rng: np.random.Generator):
        seed = int(rng.integers(0, 2**31 - 1))
        if subset == "nom":
            return replace(buck_scenario("S1"), seed=seed), NOMINAL
        v_in = _uniform_scaled(rng, *BUCK_V_IN_RANGE, self.intensity)
        r = _uniform_scaled(rng, *BUCK_R_RANGE, self.intensity)
        events = []
        for t in np.sort(rng.uniform(0.05, 0.45, size=4)):
            if rng.random() < 0.5:
                events.append(StepEvent(float(t), "v_in", _uniform_scaled(rng, *BUCK_V_IN_RANGE, self.intensity)))
            else:
                events.append(StepEvent(float(t), "load_r", _uniform_scaled(rng, *BUCK_R_RANGE, self.intensity)))
        return ScenarioConfig("B2", 0.5, BUCK_V_REF, v_in, r, tuple(events), seed=seed), NOMINAL


def buck_expert(params: ConverterParams = NOMINAL, mpc: MpcConfig | None = None) -> MpcExpert:
    return MpcExpert(params, mpc or MpcConfig(v_ref=BUCK_V_REF), BUCK)


@dataclass
class TransferConfig:
    source_model: str | None = None
    source_samples: int = 8203
    source_epochs: int = 60
    target_samples: int = 4053
    target_epochs: int = 40
    test_samples: int = 20000
    lr: float = 1e-4
    batch_size: int = 64  # 4053 samples at 2048 would give two updates per epoch
    seed: int = 0
    head_seed: int = 1
    mpc: MpcConfig = field(default_factory=lambda: MpcConfig(v_ref=BUCK_V_REF))

    def __post_init__(self):
        if min(self.source_samples, self.target_samples, self.test_samples) < 1:
            raise ValueError("sample counts must be positive")
        if min(self.source_epochs, self.target_epochs) < 0:
            raise ValueError("epoch counts must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def transfer_init(source: MlpModel, seed: int, target: Dataset | None = None,
                  hidden: int | None = None, mode_names=BUCK.mode_names) -> MlpModel:
    """Keep the hidden layer bit-exact, draw a fresh output layer, refit the normalizer."""
    if hidden is not None and hidden != source.hidden:
        raise ValueError(f"hidden width {hidden} does not match source width {source.hidden}")
    w2, b2 = _init_layer(np.random.default_rng(seed), source.hidden, source.w2.shape[0], source.dtype)
    mean, std = normalizer(target.z) if target is not None and len(target) else (source.mean, source.std)
    return MlpModel(source.w1.copy(), source.b1.copy(), w2, b2, mean, std, tuple(mode_names))


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """Uniform sample of ``n`` records (all of them if fewer), episode info kept."""
    if n >= len(ds):
        return ds
    pick = np.sort(np.random.default_rng(seed).choice(len(ds), size=n, replace=False))
    return Dataset(ds.z[pick], ds.y[pick], ds.episode[pick], ds.episodes, ds.seed, ds.plant,
                   ds.mode_names, ds.n_dropped)


def _closed_loop(policy, scenario: ScenarioConfig):
    try:
        traj = run_episode(scenario, policy, NOMINAL, BUCK)
    except DivergenceError as err:
        traj = err.partial
    return compute_metrics(traj, v_ref=scenario.v_ref, plant=BUCK), len(traj)


def train_source(cfg: TransferConfig) -> MlpModel:
    """Small boost-converter student used as the transfer source."""
    ds = collect_expert_dataset(1, 2, 2, seed=cfg.seed + 7919)
    ds = subsample(ds, cfg.source_samples, cfg.seed)
    mean, std = normalizer(ds.z)
    tc = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.source_epochs, seed=cfg.seed)
    model, _ = train(init_model(128, cfg.seed, mean, std), ds, None, tc, eval_every=0)
    return model


def run_transfer_experiment(cfg: TransferConfig | None = None, source: MlpModel | None = None) -> dict:
    """Scratch and Transfer students on one shared buck dataset, then closed-loop runs.

    Returns a dict with per-controller accuracy and per-scenario metrics.
    """
    cfg = cfg or TransferConfig()
    if source is None:
        source = MlpModel.load(cfg.source_model) if cfg.source_model else train_source(cfg)
    labeler = ExpertLabeler(cfg.mpc, BUCK)
    pool = collect_expert_dataset(1, 5, 0, seed=cfg.seed, sampler=BuckSampler(), labeler=labeler, plant=BUCK)
    pool_tr, _, pool_te = split(pool, (0.7, 0.0, 0.3), cfg.seed)
    target = subsample(pool_tr, cfg.target_samples, cfg.seed)
    test = subsample(pool_te, cfg.test_samples, cfg.seed + 1)

    # the buck expert may never use one of the modes (freewheel at these operating points)
    tc = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.target_epochs, seed=cfg.seed,
                     allow_empty_classes=True)
    mean, std = normalizer(target.z)
    scratch0 = init_model(source.hidden, cfg.head_seed + 1000, mean, std, BUCK.mode_names)
    transfer0 = transfer_init(source, cfg.head_seed, target)
    scratch, _ = train(scratch0, target, None, tc, eval_every=0)
    transfer, _ = train(transfer0, target, None, tc, eval_every=0)

    out = {"config": cfg.to_dict(), "target_samples": len(target), "test_samples": len(test),
           "accuracy": {"scratch": accuracy(scratch, test.z, test.y),
                        "transfer": accuracy(transfer, test.z, test.y)},
           "scenarios": {}}
    controllers = {"mpc": buck_expert(NOMINAL, cfg.mpc), "scratch": scratch, "transfer": transfer}
    for name in ("S1", "S2"):
        sc = buck_scenario(name)
        rows = {}
        for cname, pol in controllers.items():
            rep, n = _closed_loop(pol, sc)
            rows[cname] = {**rep.to_dict(), "steps_completed": n}
        out["scenarios"][name] = rows
    out["models"] = {"scratch": scratch, "transfer": transfer}
    return out
