"""Command-line entry point: ``fcdistill <subcommand>``.

A YAML config (``--config``) mirrors ``PipelineConfig``; ``--set a.b=value``
overrides single keys.  Outputs land in ``--run-dir``.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import yaml

from fcdistill.converter import NOMINAL
from fcdistill.dagger import DaggerConfig, run_dagger, sample_episodes, write_stats
from fcdistill.dataset import (
    BoostSampler,
    ExpertLabeler,
    audit_labels,
    collect_expert_dataset,
    export_csv,
    load_dataset,
    split,
)
from fcdistill.experiments import (
    DAGGER_GRID,
    DR_GRID,
    PipelineConfig,
    SweepSpec,
    bench_decision_time,
    build_id,
    eval_scenarios,
    held_out_accuracy,
    load_scenarios,
    rank_by_variance,
    rollout,
    run_ablation,
    run_pipeline,
    run_scenario_suite,
    run_sweep,
    save_scenarios,
    train_student,
    write_json,
    write_rows,
)
from fcdistill.mpc import MpcExpert
from fcdistill.policy import MlpModel, write_history
from fcdistill.transfer import TransferConfig, run_transfer_experiment

logger = logging.getLogger("fcdistill")


def _set_key(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def load_config(path: str | None, overrides=()) -> PipelineConfig:
    raw = yaml.safe_load(Path(path).read_text()) if path else {}
    raw = raw or {}
    for item in overrides:
        if "=" not in item:
            raise click.BadParameter(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        _set_key(raw, key.strip(), yaml.safe_load(val))
    try:
        return PipelineConfig.from_dict(raw)
    except TypeError as err:
        raise click.BadParameter(f"bad config: {err}") from None


class Ctx:
    def __init__(self, cfg: PipelineConfig, run_dir: Path):
        self.cfg = cfg
        self.run_dir = run_dir

    def path(self, name: str) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        return self.run_dir / name


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML pipeline config.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override one config key, e.g. train.epochs=40.")
@click.option("--run-dir", type=click.Path(file_okay=False), default="runs/default", show_default=True)
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, config_path, overrides, run_dir, verbose):
    """Distil a beam-search FCS-MPC expert into a neural switching policy."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(asctime)s %(name)s %(message)s")
    cfg = load_config(config_path, overrides)
    c = Ctx(cfg, Path(run_dir))
    ctx.obj = c


def _save_config(c: Ctx) -> None:
    doc = c.cfg.to_dict()
    doc["build"] = build_id()
    c.path("config.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))


@main.command("gen-data")
@click.option("--nom", type=int, default=None, help="Nominal (S1) episodes.")
@click.option("--op", type=int, default=None, help="Operating-point (S2) episodes.")
@click.option("--par", type=int, default=None, help="Parameter-randomized (S3) episodes.")
@click.option("--seed", type=int, default=None)
@click.option("--intensity", type=float, default=None, help="DR range scale in (0, 1].")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--audit", type=float, default=0.0, help="Fraction of samples to relabel as a check.")
@click.pass_obj
def gen_data(c: Ctx, nom, op, par, seed, intensity, out, csv_path, jobs, audit):
    """Collect an expert-labelled dataset."""
    cfg = c.cfg
    cfg = replace(cfg, n_nom=cfg.n_nom if nom is None else nom, n_op=cfg.n_op if op is None else op,
                  n_par=cfg.n_par if par is None else par,
                  data_seed=cfg.data_seed if seed is None else seed,
                  intensity=cfg.intensity if intensity is None else intensity)
    c.cfg = cfg
    ds = collect_expert_dataset(cfg.n_nom, cfg.n_op, cfg.n_par, cfg.data_seed,
                                sampler=BoostSampler(cfg.intensity), labeler=ExpertLabeler(cfg.mpc),
                                jobs=jobs)
    out = Path(out) if out else c.path("dataset.bin")
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    if csv_path:
        export_csv(ds, csv_path)
    _save_config(c)
    meta = ds.meta()
    click.echo(f"{len(ds)} samples from {meta.n_episodes} episodes ({meta.n_dropped} dropped) -> {out}")
    click.echo(f"subsets {meta.subset_counts} histogram {meta.histogram}")
    if audit > 0:
        n, bad = audit_labels(ds, audit, cfg.data_seed, ExpertLabeler(cfg.mpc))
        click.echo(f"label audit: {bad} mismatches in {n} replayed samples")


@main.command()
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--history", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def train(c: Ctx, data, out, epochs, lr, batch_size, seed, history):
    """Offline distillation on a stored dataset."""
    cfg = c.cfg
    tc = cfg.train
    tc = replace(tc, epochs=tc.epochs if epochs is None else epochs, lr=tc.lr if lr is None else lr,
                 batch_size=tc.batch_size if batch_size is None else batch_size,
                 seed=tc.seed if seed is None else seed)
    c.cfg = cfg = replace(cfg, train=tc)
    ds = load_dataset(data)
    tr, va, te = split(ds, cfg.fractions, cfg.split_seed)
    model, hist = train_student(tr, va if len(va) else None, cfg, eval_every=1)
    out = Path(out) if out else c.path("model.bin")
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    write_history(hist, history or c.path("train_history.csv"))
    _save_config(c)
    acc = held_out_accuracy(model, te) if len(te) else float("nan")
    click.echo(f"train {len(tr)} / val {len(va)} / test {len(te)}; test accuracy {acc:.4f} -> {out}")


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--budget", type=int, default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--epochs", type=int, default=None, help="Fine-tune epochs over all iterations.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.option("--stats", "stats_path", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def dagger(c: Ctx, model_path, data, budget, iterations, epochs, seed, out, stats_path):
    """Disagreement-filtered DAgger refinement of a trained student."""
    cfg = c.cfg
    d = cfg.dagger
    d = replace(d, budget=d.budget if budget is None else budget,
                iterations=d.iterations if iterations is None else iterations,
                finetune_epochs=d.finetune_epochs if epochs is None else epochs,
                seed=d.seed if seed is None else seed)
    c.cfg = cfg = replace(cfg, dagger=d)
    student = MlpModel.load(model_path)
    tr, _, _ = split(load_dataset(data), cfg.fractions, cfg.split_seed)
    res = run_dagger(student, tr, d, labeler=ExpertLabeler(cfg.mpc))
    out = Path(out) if out else c.path("model_dagger.bin")
    res.model.save(out)
    write_stats(res.stats, stats_path or c.path("dagger_stats.csv"))
    _save_config(c)
    for s in res.stats:
        click.echo(f"iteration {s.iteration}: mismatch rate {s.mismatch_rate:.4f}, "
                   f"added {s.added}, aggregate {s.aggregate_size}")
    click.echo(f"-> {out}")


def _parse_models(items) -> dict:
    models = {}
    for item in items:
        name, _, path = item.rpartition("=")
        models[name or Path(path).stem] = MlpModel.load(path)
    return models


@main.command("eval")
@click.option("--model", "models", multiple=True, required=True, metavar="[NAME=]PATH")
@click.option("--n-per-kind", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=2024, show_default=True)
@click.option("--scenarios", "scen_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Reuse a stored evaluation set.")
@click.option("--dump-trajectories/--no-dump-trajectories", default=False)
@click.pass_obj
def eval_cmd(c: Ctx, models, n_per_kind, seed, scen_path, dump_trajectories):
    """Scenario suite: expert and students on S1/S2, students on S3."""
    models = _parse_models(models)
    scenarios = load_scenarios(scen_path) if scen_path else eval_scenarios(n_per_kind, seed)
    digest = save_scenarios(scenarios, c.path("scenarios.yaml"))
    rows = run_scenario_suite(models, scenarios, c.cfg.mpc, seed)
    write_rows(rows, c.path("scenario_suite.csv"))
    write_json({"scenarios_sha256": digest, "rows": rows}, c.path("scenario_suite.json"))
    if dump_trajectories:
        tdir = c.path("trajectories")
        tdir.mkdir(exist_ok=True)
        for name, m in {"MPC": None, **models}.items():
            for kind, runs in scenarios.items():
                for i, (cfg, p) in enumerate(runs):
                    pol = MpcExpert(p, c.cfg.mpc) if m is None else m
                    _, _, traj = rollout(pol, cfg, p, c.cfg.mpc)
                    traj.to_csv(tdir / f"{name}_{kind}_{i}.csv")
    _echo_table(rows, ("scenario", "controller"), ("mse_vo", "mse_vcf", "n_il_viol", "eff_avg"))


def _echo_table(rows, keys, metrics):
    for r in rows:
        head = " ".join(f"{r[k]:<10}" for k in keys)
        vals = " ".join(f"{k}={r.get(k, float('nan')):.4g}" for k in metrics)
        click.echo(f"{head} {vals}")


@main.command()
@click.option("--n-per-kind", type=int, default=3, show_default=True)
@click.option("--eval-seed", type=int, default=2024, show_default=True)
@click.option("--only", multiple=True, type=click.Choice(["FULL", "NO_DAGGER", "NO_DR", "NO_EXPERT"]))
@click.pass_obj
def ablate(c: Ctx, n_per_kind, eval_seed, only):
    """Train every ablation configuration and score it on one shared evaluation set."""
    configs = only or ("FULL", "NO_DAGGER", "NO_DR", "NO_EXPERT")
    trained = run_pipeline(c.cfg, configs)
    for name, m in trained.models.items():
        m.save(c.path(f"model_{name}.bin"))
    scenarios = eval_scenarios(n_per_kind, eval_seed)
    digest = save_scenarios(scenarios, c.path("scenarios.yaml"))
    rows = run_ablation(trained, scenarios, c.cfg.mpc, c.cfg.data_seed)
    for r in rows:
        r["scenarios_sha256"] = digest
    write_rows(rows, c.path("ablation.csv"))
    _save_config(c)
    _echo_table(rows, ("config", "scenario"), ("mse_vo", "n_il_viol", "mse_vcf"))


def _floats(text: str | None):
    return tuple(float(v) for v in text.split(",")) if text else ()


@main.command()
@click.option("--axis", type=click.Choice(["dagger_budget", "dr_intensity"]), required=True)
@click.option("--grid", default=None, help="Comma-separated grid values.")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--epochs", type=int, default=40, show_default=True)
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--n-per-kind", type=int, default=3, show_default=True)
@click.option("--eval-seed", type=int, default=2024, show_default=True)
@click.pass_obj
def sweep(c: Ctx, axis, grid, model_path, data, epochs, seeds, n_per_kind, eval_seed):
    """Sensitivity sweep over the DAgger budget or the DR intensity."""
    values = _floats(grid) or (DAGGER_GRID if axis == "dagger_budget" else DR_GRID)
    if axis == "dagger_budget":
        values = tuple(int(v) for v in values)
    spec = SweepSpec(axis, values, epochs, tuple(int(s) for s in seeds.split(",")))
    base = MlpModel.load(model_path)
    tr, _, _ = split(load_dataset(data), c.cfg.fractions, c.cfg.split_seed)
    scenarios = eval_scenarios(n_per_kind, eval_seed, kinds=("S2", "S3"))
    save_scenarios(scenarios, c.path("scenarios.yaml"))
    rows = run_sweep(spec, base, tr, c.cfg, scenarios)
    write_rows(rows, c.path(f"sweep_{axis}.csv"))
    _save_config(c)
    for kind in ("S2", "S3"):
        click.echo(f"{kind} highest-variance metrics: {', '.join(rank_by_variance(rows, kind))}")


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--n", type=int, default=2000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_obj
def bench(c: Ctx, model_path, n, seed):
    """Per-decision latency of the expert and the student."""
    model = MlpModel.load(model_path)
    res = bench_decision_time(MpcExpert(NOMINAL, c.cfg.mpc), model, n=n, seed=seed)
    write_json({**res.__dict__, "build": build_id()}, c.path("bench.json"))
    click.echo(f"[{res.backend}] expert {res.expert_us:.2f} us, ANN {res.ann_us:.2f} us, "
               f"ratio {res.ratio:.1f}x over {res.n} decisions")


@main.command()
@click.option("--source-model", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", "seeds", type=int, multiple=True, default=(0,), show_default=True)
@click.option("--epochs", type=int, default=None)
@click.option("--samples", type=int, default=None)
@click.pass_obj
def transfer(c: Ctx, source_model, seeds, epochs, samples):
    """Buck-3L transfer: MPC vs Scratch vs Transfer."""
    results = []
    for seed in seeds:
        cfg = TransferConfig(source_model=source_model, seed=seed, head_seed=seed + 1)
        if epochs is not None:
            cfg = replace(cfg, target_epochs=epochs)
        if samples is not None:
            cfg = replace(cfg, target_samples=samples)
        out = run_transfer_experiment(cfg)
        models = out.pop("models")
        for name, m in models.items():
            m.save(c.path(f"buck_{name}_seed{seed}.bin"))
        out["build"] = build_id()
        results.append(out)
        acc = out["accuracy"]
        click.echo(f"seed {seed}: accuracy scratch {acc['scratch']:.4f} transfer {acc['transfer']:.4f}")
        for sc, rows in out["scenarios"].items():
            click.echo("  " + sc + " " + " ".join(f"{k}: mse_vo={v['mse_vo']:.4g}" for k, v in rows.items()))
    write_json(results, c.path("transfer.json"))


if __name__ == "__main__":
    main()
