"""Disagreement-filtered DAgger.

The student always drives the closed loop.  The expert, built for the
episode's true plant, is queried at every visited state and only the states
where the two disagree are kept, labelled by the expert.  Each iteration
aggregates those states and fine-tunes the student on the union.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from fcdistill.converter import BOOST, ConverterParams, DivergenceError, SwitchedPlant
from fcdistill.dataset import (
    SUBSETS,
    BoostSampler,
    Dataset,
    EpisodeInfo,
    ExpertLabeler,
    concat,
)
from fcdistill.policy import MlpModel, TrainConfig, train
from fcdistill.scenario import ScenarioConfig, run_episode

logger = logging.getLogger(__name__)


@dataclass
class DaggerConfig:
    iterations: int = 3
    episodes_per_iteration: int = 5
    budget: int = 12000  # mismatch states over all iterations
    finetune_epochs: int = 280  # over all iterations
    mix: tuple[float, float, float] = (0.2, 0.4, 0.4)
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.iterations < 0 or self.budget < 0 or self.episodes_per_iteration < 0:
            raise ValueError("iterations, budget and episode count must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class IterationStats(NamedTuple):
    iteration: int
    episodes: int
    visited: int
    disagreements: int
    mismatch_rate: float
    added: int
    aggregate_size: int
    diverged: int
    final_train_acc: float


class DaggerResult(NamedTuple):
    model: MlpModel
    stats: list[IterationStats]
    aggregate: Dataset


class MismatchResult(NamedTuple):
    samples: Dataset
    visited: int
    disagreements: int
    diverged: int

    @property
    def rate(self) -> float:
        return self.disagreements / self.visited if self.visited else 0.0


class _BudgetReached(Exception):
    pass


def _split_evenly(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (i < extra) for i in range(parts)]


def mix_counts(n: int, mix: Sequence[float]) -> dict[str, int]:
    """Largest-remainder allocation of ``n`` episodes over the subsets."""
    w = np.asarray(mix, dtype=np.float64)
    w = w / w.sum()
    raw = w * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return dict(zip(SUBSETS, counts.tolist()))


def sample_episodes(n: int, mix, seed: int, sampler=None) -> list[tuple[str, ScenarioConfig, ConverterParams]]:
    sampler = sampler or BoostSampler()
    counts = mix_counts(n, mix)
    subsets = [s for s in SUBSETS for _ in range(counts[s])]
    seqs = np.random.SeedSequence(seed).spawn(len(subsets))
    out = []
    for s, q in zip(subsets, seqs):
        cfg, params = sampler(s, np.random.default_rng(q))
        out.append((s, cfg, params))
    return out


def collect_mismatch(student, episodes, budget: int, labeler=None,
                     plant: SwitchedPlant = BOOST, stop_at_budget: bool = True) -> MismatchResult:
    """Roll out the student and keep expert-labelled disagreement states.

    ``episodes`` holds ``(subset, ScenarioConfig, ConverterParams)`` triples.
    The student is only called, never modified.  A diverged rollout keeps
    whatever it collected before the divergence.
    """
    labeler = labeler or ExpertLabeler(plant=plant)
    zs, ys, idx, infos = [], [], [], []
    visited = disagreements = diverged = 0
    for subset, cfg, params in episodes:
        if stop_at_budget and len(ys) >= budget:
            break
        expert = labeler(params)
        got = []

        def policy(z):
            nonlocal visited, disagreements
            a = student(z)
            e = expert(z)
            visited += 1
            if a != e:
                disagreements += 1
                if len(ys) + len(got) < budget:
                    got.append((tuple(z), e))
                elif stop_at_budget:
                    raise _BudgetReached
            return a

        try:
            run_episode(cfg, policy, params, plant)
        except _BudgetReached:
            pass
        except DivergenceError as err:
            diverged += 1
            logger.info("student diverged at step %s", err.step)
        if got:
            idx.extend([len(infos)] * len(got))
            infos.append(EpisodeInfo(subset, cfg.to_dict(), asdict(params), len(got), origin="dagger"))
            zs.extend(g[0] for g in got)
            ys.extend(g[1] for g in got)
    ds = Dataset(np.asarray(zs, dtype=np.float64).reshape(-1, 6), np.asarray(ys, dtype=np.int64),
                 np.asarray(idx, dtype=np.int64), infos, plant=plant.name, mode_names=plant.mode_names)
    return MismatchResult(ds, visited, disagreements, diverged)


def disagreement_rate(student, episodes, labeler=None, plant: SwitchedPlant = BOOST) -> float:
    """Fraction of student-visited states where the expert would act differently."""
    res = collect_mismatch(student, episodes, 0, labeler, plant, stop_at_budget=False)
    return res.rate


def run_dagger(student: MlpModel, base: Dataset, cfg: DaggerConfig | None = None,
               labeler=None, sampler=None, plant: SwitchedPlant = BOOST) -> DaggerResult:
    """Iterate: collect mismatches, aggregate, fine-tune on the aggregate.

    Budget and fine-tune epochs are totals split evenly over the
    iterations.  Class weights are recomputed on each aggregate; the
    student's input normalizer is kept.
    """
    cfg = cfg or DaggerConfig()
    if len(base) == 0:
        raise ValueError("base dataset is empty")
    model = student.copy()
    aggregate = base
    stats = []
    if cfg.iterations == 0:
        return DaggerResult(model, stats, aggregate)
    budgets = _split_evenly(cfg.budget, cfg.iterations)
    epochs = _split_evenly(cfg.finetune_epochs, cfg.iterations)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(2 * cfg.iterations)
    for it in range(cfg.iterations):
        eps = sample_episodes(cfg.episodes_per_iteration, cfg.mix, int(seeds[2 * it]), sampler)
        res = collect_mismatch(model, eps, budgets[it], labeler, plant)
        aggregate = concat([aggregate, res.samples])
        tcfg = replace(cfg.train, epochs=epochs[it], class_weights=None, seed=int(seeds[2 * it + 1]))
        model, hist = train(model, aggregate, None, tcfg, eval_every=max(epochs[it], 1))
        st = IterationStats(it + 1, len(eps), res.visited, res.disagreements, res.rate,
                            len(res.samples), len(aggregate), res.diverged,
                            hist[-1].train_acc if hist else float("nan"))
        logger.info("dagger iteration %d: %s", it + 1, st)
        stats.append(st)
    return DaggerResult(model, stats, aggregate)


def write_stats(stats: Sequence[IterationStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IterationStats._fields)
        for s in stats:
            w.writerow(s)
