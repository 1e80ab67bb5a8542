"""Expert-labelled datasets: domain-randomized collection, episode-disjoint splits, storage.

Three subsets are gathered and concatenated: ``nom`` (canonical S1 runs),
``op`` (randomized operating points, S2) and ``par`` (operating points plus
component perturbations, S3).  Every closed-loop step contributes one
``(z, label)`` pair; per-episode scenario and plant are kept in the meta so
labels can be audited and relabelled against the right plant.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fcdistill.converter import BOOST, NOMINAL, ConverterParams, DivergenceError, SwitchedPlant
from fcdistill.mpc import MpcConfig, MpcExpert
from fcdistill.scenario import ScenarioConfig, run_episode, sample_scenario

logger = logging.getLogger(__name__)

SUBSETS = ("nom", "op", "par")
SUBSET_KIND = {"nom": "S1", "op": "S2", "par": "S3"}
DATA_MAGIC = b"FCDS"
DATA_VERSION = 1
RECORD = np.dtype([("z", "<f4", (6,)), ("y", "u1")])
assert RECORD.itemsize == 25


@dataclass
class EpisodeInfo:
    subset: str
    scenario: dict
    params: dict
    n_samples: int
    diverged: bool = False
    origin: str = "expert"

    def scenario_config(self) -> ScenarioConfig:
        return ScenarioConfig.from_dict(self.scenario)

    def converter_params(self) -> ConverterParams:
        return ConverterParams(**self.params)

    def fingerprint(self) -> str:
        """Episodes with equal scenario and plant produce equal samples."""
        sc = {k: v for k, v in self.scenario.items() if k != "seed"}
        raw = json.dumps([sc, self.params], sort_keys=True).encode()
        return hashlib.sha1(raw).hexdigest()


@dataclass
class DatasetMeta:
    subset_counts: dict
    histogram: list
    n_samples: int
    n_episodes: int
    n_dropped: int
    seed: int | None
    plant: str
    mode_names: list
    split_sizes: dict = field(default_factory=dict)
    norm_mean: list | None = None
    norm_std: list | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    z: np.ndarray  # (n, 6) float64 in memory, float32 on disk
    y: np.ndarray  # (n,) int64
    episode: np.ndarray  # (n,) index into ``episodes``
    episodes: list[EpisodeInfo]
    seed: int | None = None
    plant: str = "boost"
    mode_names: tuple[str, ...] = BOOST.mode_names
    n_dropped: int = 0

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def empty(cls, **kw) -> "Dataset":
        return cls(np.empty((0, 6)), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), [], **kw)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.y, minlength=4)[:4]

    def meta(self) -> DatasetMeta:
        counts = {s: 0 for s in SUBSETS}
        for e in self.episodes:
            counts[e.subset] = counts.get(e.subset, 0) + e.n_samples
        return DatasetMeta(counts, self.histogram().tolist(), len(self), len(self.episodes),
                           self.n_dropped, self.seed, self.plant, list(self.mode_names))

    def select_episodes(self, keep: Sequence[int]) -> "Dataset":
        keep = list(keep)
        remap = np.full(len(self.episodes), -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        mask = remap[self.episode] >= 0 if len(self) else np.zeros(0, bool)
        return Dataset(self.z[mask], self.y[mask], remap[self.episode[mask]],
                       [self.episodes[i] for i in keep], self.seed, self.plant,
                       self.mode_names, 0)

    def subset(self, name: str) -> "Dataset":
        return self.select_episodes([i for i, e in enumerate(self.episodes) if e.subset == name])

    def save(self, path) -> None:
        save_dataset(self, path)

    @classmethod
    def load(cls, path) -> "Dataset":
        return load_dataset(path)


def concat(parts: Sequence[Dataset]) -> Dataset:
    """Plain multiset union; episode indices are renumbered."""
    parts = [p for p in parts if p is not None]
    if not parts:
        return Dataset.empty()
    offset, eps, idx = 0, [], []
    for p in parts:
        idx.append(p.episode + offset)
        eps.extend(p.episodes)
        offset += len(p.episodes)
    first = parts[0]
    return Dataset(np.concatenate([p.z for p in parts]).reshape(-1, 6),
                   np.concatenate([p.y for p in parts]).astype(np.int64),
                   np.concatenate(idx).astype(np.int64), eps, first.seed, first.plant,
                   first.mode_names, sum(p.n_dropped for p in parts))


Sampler = Callable[[str, np.random.Generator], tuple[ScenarioConfig, ConverterParams]]


@dataclass(frozen=True)
class BoostSampler:
    intensity: float = 1.0

    def __call__(self, subset: str, rng: np.random.Generator):
        return sample_scenario(SUBSET_KIND[subset], rng, self.intensity)


@dataclass(frozen=True)
class ExpertLabeler:
    """Builds the labelling policy for an episode's true plant."""

    mpc: MpcConfig = MpcConfig()
    plant: SwitchedPlant = BOOST

    def __call__(self, params: ConverterParams):
        return MpcExpert(params, self.mpc, self.plant)


def _collect_one(task):
    subset, seq, sampler, labeler, plant = task
    rng = np.random.default_rng(seq)
    cfg, params = sampler(subset, rng)
    info = EpisodeInfo(subset, cfg.to_dict(), asdict(params), 0)
    try:
        traj = run_episode(cfg, labeler(params), params, plant)
    except DivergenceError as err:
        logger.warning("episode (%s) diverged at step %s; dropped", subset, err.step)
        info.diverged = True
        return info, None, None
    info.n_samples = len(traj)
    return info, traj.features(), np.asarray(traj.mode, dtype=np.int64)


def collect_expert_dataset(n_nom: int = 2, n_op: int = 4, n_par: int = 4, seed: int = 0,
                           sampler: Sampler | None = None, labeler=None,
                           plant: SwitchedPlant = BOOST, jobs: int = 1) -> Dataset:
    """Run the labelling policy in closed loop on sampled scenarios and record every step.

    Episode ``i`` draws from its own generator spawned off ``seed``, so the
    result does not depend on ``jobs``.  Diverged episodes are dropped and
    counted.
    """
    counts = {"nom": n_nom, "op": n_op, "par": n_par}
    if any(c < 0 for c in counts.values()):
        raise ValueError("episode counts must be >= 0")
    sampler = sampler or BoostSampler()
    labeler = labeler or ExpertLabeler(plant=plant)
    subsets = [s for s in SUBSETS for _ in range(counts[s])]
    seqs = np.random.SeedSequence(seed).spawn(len(subsets))
    tasks = [(s, q, sampler, labeler, plant) for s, q in zip(subsets, seqs)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_collect_one, tasks))
    else:
        results = [_collect_one(t) for t in tasks]

    episodes, zs, ys, idx = [], [], [], []
    dropped = 0
    for info, z, y in results:
        if z is None:
            dropped += 1
            continue
        idx.append(np.full(len(y), len(episodes), dtype=np.int64))
        episodes.append(info)
        zs.append(z)
        ys.append(y)
    if not episodes:
        return Dataset.empty(seed=seed, plant=plant.name, mode_names=plant.mode_names,
                             n_dropped=dropped)
    return Dataset(np.concatenate(zs), np.concatenate(ys), np.concatenate(idx), episodes,
                   seed, plant.name, plant.mode_names, dropped)


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded episode-disjoint train/val/test partition.

    Episodes with identical scenario and plant (every canonical S1 run, for
    instance) are kept together so duplicates never straddle partitions.
    Groups are shuffled, then each goes to the partition its cumulative
    sample midpoint falls in.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    if len(ds) < 3:
        raise ValueError("need at least 3 samples to split")
    groups: dict[str, list[int]] = {}
    for i, e in enumerate(ds.episodes):
        groups.setdefault(e.fingerprint(), []).append(i)
    keys = list(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    bounds = np.cumsum(fr) * len(ds)
    parts: list[list[int]] = [[], [], []]
    acc = 0
    for g in order:
        members = groups[keys[g]]
        size = sum(ds.episodes[i].n_samples for i in members)
        mid = acc + 0.5 * size
        k = int(np.searchsorted(bounds, mid, side="right"))
        parts[min(k, 2)].extend(members)
        acc += size
    return tuple(ds.select_episodes(sorted(p)) for p in parts)


def class_weights(histogram, allow_empty: bool = False) -> np.ndarray:
    """Inverse-frequency weights ``total / (4 * count_c)``.

    With ``allow_empty`` a class the expert never uses gets weight 1 and the
    rule runs over the classes present (the weight of an absent class never
    touches the loss).
    """
    h = np.asarray(histogram, dtype=np.float64)
    if h.shape != (4,):
        raise ValueError("histogram must have 4 entries")
    present = h > 0
    if not present.all():
        empty = [i for i in range(4) if not present[i]]
        if not allow_empty or not present.any():
            raise ValueError(f"class(es) {empty} have no samples; collect more episodes")
        w = np.ones(4)
        w[present] = h.sum() / (present.sum() * h[present])
        return w
    return h.sum() / (4.0 * h)


def audit_labels(ds: Dataset, fraction: float = 0.01, seed: int = 0,
                 labeler=None) -> tuple[int, int]:
    """Replay a random subsample through the labeller with each episode's plant.

    Returns ``(n_checked, n_mismatched)``.  Meaningful on in-memory data;
    after a float32 round trip, near-tie states may legitimately flip.
    """
    labeler = labeler or ExpertLabeler()
    n = len(ds)
    if n == 0:
        return 0, 0
    k = max(1, int(round(fraction * n)))
    pick = np.sort(np.random.default_rng(seed).choice(n, size=min(k, n), replace=False))
    policies = {}
    bad = 0
    for i in pick:
        e = int(ds.episode[i])
        if e not in policies:
            policies[e] = labeler(ds.episodes[e].converter_params())
        if policies[e](ds.z[i]) != ds.y[i]:
            bad += 1
    return len(pick), bad


def _meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_dataset(ds: Dataset, path) -> None:
    """Binary records plus a JSON sidecar (``<path>.json``) holding the meta and episodes."""
    rec = np.empty(len(ds), dtype=RECORD)
    rec["z"] = ds.z
    rec["y"] = ds.y
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC + struct.pack("<HQ", DATA_VERSION, len(ds)))
        fh.write(rec.tobytes())
    meta = ds.meta().to_dict()
    meta["episodes"] = [asdict(e) for e in ds.episodes]
    _meta_path(path).write_text(json.dumps(meta, indent=1))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATA_MAGIC:
        raise ValueError(f"{path} is not a dataset file")
    version, n = struct.unpack_from("<HQ", raw, 4)
    if version != DATA_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    rec = np.frombuffer(raw, dtype=RECORD, count=n, offset=4 + struct.calcsize("<HQ"))
    meta = json.loads(_meta_path(path).read_text())
    episodes = [EpisodeInfo(**e) for e in meta["episodes"]]
    sizes = [e.n_samples for e in episodes]
    if sum(sizes) != n:
        raise ValueError("episode sizes in the meta do not match the record count")
    idx = np.repeat(np.arange(len(episodes), dtype=np.int64), sizes)
    return Dataset(rec["z"].astype(np.float64), rec["y"].astype(np.int64), idx, episodes,
                   meta.get("seed"), meta.get("plant", "boost"),
                   tuple(meta.get("mode_names", BOOST.mode_names)), meta.get("n_dropped", 0))


def export_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i_L", "v_Cf", "v_o", "i_ref", "V_in", "i_o", "mode", "episode"])
        for z, y, e in zip(ds.z, ds.y, ds.episode):
            w.writerow([*(repr(float(v)) for v in z), ds.mode_names[y], int(e)])
