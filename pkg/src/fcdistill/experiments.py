"""Experiment harness: distillation pipeline, scenario suite, ablations, sweeps, latency.

Every table row carries the build id and master seed.  Evaluation scenarios
are drawn once per run and shared by every configuration.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from fcdistill import __version__
from fcdistill.converter import BOOST, ConverterParams, DivergenceError
from fcdistill.dagger import DaggerConfig, run_dagger, sample_episodes
from fcdistill.dataset import (
    BoostSampler,
    Dataset,
    ExpertLabeler,
    collect_expert_dataset,
    split,
)
from fcdistill.metrics import MetricsReport, compute_metrics
from fcdistill.mpc import MpcConfig, MpcExpert
from fcdistill.policy import MlpModel, TrainConfig, accuracy, init_model, normalizer, train
from fcdistill.scenario import ScenarioConfig, run_episode

logger = logging.getLogger(__name__)

DAGGER_GRID = (0, 500, 1000, 2000, 4000, 8000, 12000)
DR_GRID = (0.1, 0.3, 0.5, 0.8, 1.0)


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass(frozen=True)
class AblationConfig:
    name: str
    expert_labels: bool
    dr: bool | None  # None: not applicable
    dagger: bool | None


ABLATIONS = {
    "FULL": AblationConfig("FULL", True, True, True),
    "NO_DAGGER": AblationConfig("NO_DAGGER", True, True, False),
    "NO_DR": AblationConfig("NO_DR", True, False, True),
    "NO_EXPERT": AblationConfig("NO_EXPERT", False, None, None),
}


@dataclass
class PipelineConfig:
    n_nom: int = 4
    n_op: int = 8
    n_par: int = 8
    data_seed: int = 0
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    hidden: int = 128
    model_seed: int = 0
    intensity: float = 1.0
    surrogate: str = "random"  # NO_EXPERT labels: "random" or "greedy"
    train: TrainConfig = field(default_factory=TrainConfig)
    dagger: DaggerConfig = field(default_factory=DaggerConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        tr = TrainConfig(**d.pop("train", {}))
        dg = dict(d.pop("dagger", {}))
        dg_train = TrainConfig(**dg.pop("train", {})) if "train" in dg else tr
        mpc = MpcConfig(**d.pop("mpc", {}))
        for k in ("fractions",):
            if k in d:
                d[k] = tuple(d[k])
        if "mix" in dg:
            dg["mix"] = tuple(dg["mix"])
        return cls(**d, train=tr, dagger=DaggerConfig(**dg, train=dg_train), mpc=mpc)


def build_dataset(cfg: PipelineConfig, dr: bool = True) -> Dataset:
    """DR mix of nom/op/par episodes, or the same episode count all nominal."""
    if dr:
        return collect_expert_dataset(cfg.n_nom, cfg.n_op, cfg.n_par, cfg.data_seed,
                                      sampler=BoostSampler(cfg.intensity),
                                      labeler=ExpertLabeler(cfg.mpc))
    n = cfg.n_nom + cfg.n_op + cfg.n_par
    return collect_expert_dataset(n, 0, 0, cfg.data_seed, labeler=ExpertLabeler(cfg.mpc))


def surrogate_labels(ds: Dataset, kind: str, seed: int = 0, mpc: MpcConfig | None = None) -> Dataset:
    """Replace the expert labels of ``ds``.

    ``random``: uniform over the four modes, independent of the state.
    ``greedy``: one-step argmin of the stage cost with the episode's plant.
    """
    if kind == "random":
        y = np.random.default_rng(seed).integers(0, 4, size=len(ds))
    elif kind == "greedy":
        mpc = mpc or MpcConfig()
        greedy = ExpertLabeler(replace(mpc, horizon=1, beam_width=1))
        y = np.empty(len(ds), dtype=np.int64)
        for e in range(len(ds.episodes)):
            idx = np.flatnonzero(ds.episode == e)
            pol = greedy(ds.episodes[e].converter_params())
            y[idx] = [pol(z) for z in ds.z[idx]]
    else:
        raise ValueError(f"unknown surrogate {kind!r}")
    return replace(ds, y=y.astype(np.int64))


def train_student(train_set: Dataset, val_set: Dataset | None, cfg: PipelineConfig,
                  eval_every: int = 0) -> tuple[MlpModel, list]:
    mean, std = normalizer(train_set.z)
    model = init_model(cfg.hidden, cfg.model_seed, mean, std)
    return train(model, train_set, val_set, cfg.train, eval_every=eval_every)


@dataclass
class TrainedModels:
    models: dict
    splits: dict
    dagger_stats: dict


def run_pipeline(cfg: PipelineConfig, configs: Sequence[str] = tuple(ABLATIONS)) -> TrainedModels:
    """Train the student of every requested ablation configuration.

    FULL and NO_DAGGER share the offline student; NO_EXPERT reuses the DR
    states with surrogate labels.
    """
    for name in configs:
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}")
    models, splits, stats = {}, {}, {}
    need_dr = any(ABLATIONS[c].dr is not False for c in configs)
    if need_dr:
        tr, va, te = split(build_dataset(cfg, dr=True), cfg.fractions, cfg.split_seed)
        splits["dr"] = (tr, va, te)
        if any(c in configs for c in ("FULL", "NO_DAGGER")):
            offline, _ = train_student(tr, va, cfg)
            if "NO_DAGGER" in configs:
                models["NO_DAGGER"] = offline
            if "FULL" in configs:
                res = run_dagger(offline, tr, cfg.dagger)
                models["FULL"] = res.model
                stats["FULL"] = res.stats
        if "NO_EXPERT" in configs:
            models["NO_EXPERT"], _ = train_student(
                surrogate_labels(tr, cfg.surrogate, cfg.model_seed, cfg.mpc),
                surrogate_labels(va, cfg.surrogate, cfg.model_seed + 1, cfg.mpc) if len(va) else None,
                cfg)
    if "NO_DR" in configs:
        tr, va, te = split(build_dataset(cfg, dr=False), cfg.fractions, cfg.split_seed)
        splits["nominal"] = (tr, va, te)
        offline, _ = train_student(tr, va if len(va) else None, cfg)
        nominal_dagger = replace(cfg.dagger, mix=(1.0, 0.0, 0.0))
        res = run_dagger(offline, tr, nominal_dagger)
        models["NO_DR"] = res.model
        stats["NO_DR"] = res.stats
    return TrainedModels(models, splits, stats)


# ---- evaluation ----------------------------------------------------------

def eval_scenarios(n_per_kind: int = 3, seed: int = 2024, kinds=("S1", "S2", "S3")) -> dict:
    """Fixed evaluation rollouts per scenario kind (S1 is the canonical run)."""
    subset = {"S1": "nom", "S2": "op", "S3": "par"}
    out = {}
    for i, kind in enumerate(kinds):
        n = 1 if kind == "S1" else n_per_kind
        mix = tuple(1.0 if s == subset[kind] else 0.0 for s in ("nom", "op", "par"))
        out[kind] = [(c, p) for _, c, p in sample_episodes(n, mix, seed + 101 * i)]
    return out


def save_scenarios(scenarios: dict, path) -> str:
    """Write the evaluation set as YAML; returns its sha256 for fairness checks."""
    doc = {k: [{"scenario": c.to_dict(), "params": asdict(p)} for c, p in v]
           for k, v in scenarios.items()}
    text = yaml.safe_dump(doc, sort_keys=True)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_scenarios(path) -> dict:
    doc = yaml.safe_load(Path(path).read_text())
    return {k: [(ScenarioConfig.from_dict(e["scenario"]), ConverterParams(**e["params"])) for e in v]
            for k, v in doc.items()}


def rollout(policy, cfg: ScenarioConfig, params: ConverterParams, mpc: MpcConfig | None = None):
    """Closed-loop metrics; a diverged run is scored on its partial record."""
    diverged = False
    try:
        traj = run_episode(cfg, policy, params)
    except DivergenceError as err:
        traj, diverged = err.partial, True
    if len(traj) == 0:
        return None, True, traj
    return compute_metrics(traj, v_ref=cfg.v_ref, mpc_cfg=mpc), diverged, traj


def summarize(reports: Sequence[MetricsReport]) -> dict:
    """Mean of every metric over rollouts (violation counts are summed)."""
    keys = MetricsReport.__dataclass_fields__
    out = {}
    for k in keys:
        vals = np.array([getattr(r, k) for r in reports], dtype=np.float64)
        out[k] = float(vals.sum()) if k == "n_il_viol" else float(vals.mean())
    return out


def evaluate(policy_factory, scenarios: dict, mpc: MpcConfig | None = None) -> dict:
    """``policy_factory(params) -> policy``; returns kind -> summary row."""
    rows = {}
    for kind, runs in scenarios.items():
        reps, div = [], 0
        for cfg, p in runs:
            rep, d, _ = rollout(policy_factory(p), cfg, p, mpc)
            div += int(d)
            if rep is not None:
                reps.append(rep)
        row = summarize(reps) if reps else {}
        row["n_rollouts"] = len(runs)
        row["n_diverged"] = div
        rows[kind] = row
    return rows


def _fixed(model):
    return lambda p: model


def run_scenario_suite(models: dict, scenarios: dict, mpc: MpcConfig | None = None,
                       seed: int = 0) -> list[dict]:
    """Expert and students on S1/S2; students only on S3."""
    mpc = mpc or MpcConfig()
    rows = []
    bid = build_id()
    controllers = {"MPC": lambda p: MpcExpert(p, mpc)}
    controllers.update({name: _fixed(m) for name, m in models.items()})
    for name, factory in controllers.items():
        sc = {k: v for k, v in scenarios.items() if not (name == "MPC" and k == "S3")}
        for kind, row in evaluate(factory, sc, mpc).items():
            rows.append({"scenario": kind, "controller": name, "build": bid, "seed": seed, **row})
    return rows


def run_ablation(trained: TrainedModels, scenarios: dict, mpc: MpcConfig | None = None,
                 seed: int = 0) -> list[dict]:
    rows = []
    bid = build_id()
    for name, model in trained.models.items():
        for kind, row in evaluate(_fixed(model), scenarios, mpc).items():
            rows.append({"config": name, "scenario": kind, "build": bid, "seed": seed, **row})
    return rows


# ---- sweeps --------------------------------------------------------------

@dataclass
class SweepSpec:
    axis: str = "dagger_budget"
    grid: tuple = ()
    epochs: int = 40
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.axis not in ("dagger_budget", "dr_intensity"):
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        if not self.grid:
            self.grid = DAGGER_GRID if self.axis == "dagger_budget" else DR_GRID
        if self.axis == "dr_intensity" and any(not 0 < r <= 1 for r in self.grid):
            raise ValueError("dr intensities must lie in (0, 1]")


def run_sweep(spec: SweepSpec, base: MlpModel, base_train: Dataset, cfg: PipelineConfig,
              scenarios: dict) -> list[dict]:
    """Refine or retrain the SAME pretrained base at every grid point.

    ``dagger_budget``: DAgger with that total mismatch budget and
    ``spec.epochs`` fine-tune epochs; budget 0 is the base model itself.
    ``dr_intensity``: regenerate the DR data with ranges scaled by ``r``
    about their midpoints and continue training the base for ``spec.epochs``.
    """
    rows = []
    bid = build_id()
    scenarios = {k: v for k, v in scenarios.items() if k in ("S2", "S3")}
    for value in spec.grid:
        for seed in spec.seeds:
            if spec.axis == "dagger_budget":
                if value == 0:
                    model = base
                else:
                    dcfg = replace(cfg.dagger, budget=int(value), finetune_epochs=spec.epochs, seed=seed)
                    model = run_dagger(base, base_train, dcfg).model
            else:
                dcfg = replace(cfg, intensity=float(value), data_seed=cfg.data_seed + 1000 * seed)
                tr, _, _ = split(build_dataset(dcfg, dr=True), cfg.fractions, cfg.split_seed)
                model, _ = train(base, tr, None, replace(cfg.train, epochs=spec.epochs, seed=seed),
                                 eval_every=0)
            for kind, row in evaluate(_fixed(model), scenarios, cfg.mpc).items():
                rows.append({"axis": spec.axis, "value": value, "seed": seed, "scenario": kind,
                             "build": bid, **row})
    return rows


def metric_spread(rows: Sequence[dict], metric: str) -> float:
    vals = [r[metric] for r in rows if metric in r]
    return float(max(vals) - min(vals)) if vals else 0.0


def rank_by_variance(rows: Sequence[dict], scenario: str, top: int = 8) -> list[str]:
    """Metrics of one scenario ordered by variance across sweep points."""
    sub = [r for r in rows if r["scenario"] == scenario]
    keys = [k for k in MetricsReport.__dataclass_fields__ if k != "ripple_t0"]
    var = {k: float(np.var([r[k] for r in sub])) for k in keys if sub and k in sub[0]}
    return sorted(var, key=var.get, reverse=True)[:top]


# ---- latency -------------------------------------------------------------

@dataclass
class LatencyResult:
    expert_us: float
    ann_us: float
    ratio: float
    n: int
    backend: str


def bench_decision_time(expert: MpcExpert, model: MlpModel, features: np.ndarray | None = None,
                        n: int = 2000, seed: int = 0, repeat: int = 10, warmup: int = 200) -> LatencyResult:
    """Median per-decision time of the bound expert and student kernels.

    Each feature vector is timed over ``repeat`` back-to-back calls to keep
    timer overhead out of the figure; warm-up calls are excluded.  Feature
    vectors come from recorded trajectories (an S2 expert run by default).
    """
    if n < 1000:
        raise ValueError("need n >= 1000 decisions")
    if features is None:
        cfg, p = sample_episodes(1, (0, 1, 0), seed)[0][1:]
        features = run_episode(cfg, MpcExpert(p, expert.cfg), p).features()
    rng = np.random.default_rng(seed)
    zs = [tuple(float(v) for v in features[i]) for i in rng.choice(len(features), size=n)]
    fe, fa = expert.decision_kernel(), model.astype(np.float32).decision_kernel()

    def median_us(f):
        for z in zs[:warmup]:
            f(z)
        clock = time.perf_counter_ns
        out = np.empty(n)
        for i, z in enumerate(zs):
            t0 = clock()
            for _ in range(repeat):
                f(z)
            out[i] = (clock() - t0) / repeat
        return float(np.median(out)) / 1000.0

    e_us, a_us = median_us(fe), median_us(fa)
    return LatencyResult(e_us, a_us, e_us / a_us, n, expert.backend.NAME)


# ---- output --------------------------------------------------------------

def write_rows(rows: Sequence[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0])
    for r in rows[1:]:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def held_out_accuracy(model: MlpModel, test_set: Dataset) -> float:
    return accuracy(model, test_set.z, test_set.y)
