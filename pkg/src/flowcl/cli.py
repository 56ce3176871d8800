"""Command-line experiment runner.

Subcommands: run, moons, toy, gradcheck, detect-demo.  Exit codes: 0 success,
2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import numeric
from .appendix import bound_probe, toy_losses_table
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataFormatError, gen_gaussian_tasks, gen_two_moons, load_embedding_dataset
from .detector import write_events
from .experiments import density_grid, run_two_moons
from .io import atomic_writer, save_checkpoint, write_csv, write_json
from .metrics import (
    avg_final_accuracy,
    avg_forgetting,
    overall_accuracy,
    relabel_from_creations,
    summarize,
)
from .numeric import rng_create
from .oracles import gradcheck_suite
from .trainer import NumericalFailure, TrainResult, build_stream, train_sequence

log = logging.getLogger("flowcl")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
GRADCHECK_TOL = 1e-5


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _pct(v):
    return None if v is None or np.isnan(v) else round(100.0 * float(v), 2)


def load_tasks(cfg: ExperimentConfig, seed: int, base_dir: Path | None = None):
    """Materialise the task list; embedding files are read here, before any training."""
    d = cfg.dataset
    rng = rng_create(seed, numeric.STREAM_DATA)
    if d.kind == "gaussian":
        return gen_gaussian_tasks(
            d.n_tasks, d.n_classes, d.dim, d.class_sep, d.task_shift, d.n_per_class, rng,
            n_test_per_class=d.n_test_per_class, std=d.std,
        )
    if d.kind == "moons":
        return list(gen_two_moons(d.n_per_moon, d.noise, rng))
    paths = [Path(p) for p in (d.path, d.test_path) if p is not None]
    if base_dir is not None:
        paths = [p if p.is_absolute() else base_dir / p for p in paths]
    for p in paths:
        if not p.is_file():
            raise CLIError(f"dataset file not found: {p}", EXIT_IO)
    test_path = paths[1] if len(paths) > 1 else None
    return load_embedding_dataset(paths[0], d.n_classes, rng, d.test_fraction, test_path)


def seed_metrics(result: TrainResult, stream, seed: int) -> dict:
    acc = result.acc
    tests = [(ds.x_test, ds.y_test, gt) for gt, ds in {gt: ds for gt, ds in stream}.items()]
    overall = overall_accuracy(result.model, result.registry, tests, relabel_from_creations(result.creations))
    finals = acc.final_column()
    return {
        "seed": seed,
        "avg_final_accuracy": _pct(avg_final_accuracy(acc)),
        "avg_forgetting": _pct(avg_forgetting(acc)),
        "overall_accuracy": _pct(overall),
        "final_accuracy_per_task": {
            stream_name: _pct(v) for stream_name, v in zip(_row_names(result, stream), finals)
        },
        "n_registered_tasks": result.registry.n_tasks,
        "transitions": [
            {"batch": t.batch, "kind": t.kind, "task": t.task, "truth": t.truth} for t in result.transitions
        ],
    }


def _row_names(result: TrainResult, stream):
    names = {gt: ds.name for gt, ds in stream}
    return [names[gt] for gt in result.task_order]


def write_seed_artifacts(out: Path, result: TrainResult, metrics: dict | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with atomic_writer(out / "acc_matrix.csv") as fh:
        fh.write(result.acc.to_csv())
    if result.losses:
        keys = list(result.losses[0])
        write_csv(out / "losses.csv", keys, [[row.get(k) for k in keys] for row in result.losses])
    else:
        write_csv(out / "losses.csv", ["step"], [])
    write_events(out / "detector_events.csv", result.detector_events)
    save_checkpoint(out / "model.npz", result.model, result.registry)
    if metrics is not None:
        write_json(out / "metrics.json", metrics)


def cmd_run(cfg: ExperimentConfig, base_dir: Path | None) -> int:
    out_root = Path(cfg.out)
    sequence = cfg.sequence_spec(base_dir)
    epochs = sequence.epochs if sequence is not None else None
    # Parse and load everything for every seed before the first gradient step.
    plans = []
    for seed in cfg.seeds:
        tasks = load_tasks(cfg, seed, base_dir)
        plans.append((seed, build_stream(tasks, sequence), cfg.trainer_config(seed, epochs)))

    per_seed = []
    for seed, stream, tcfg in plans:
        out = out_root / f"seed_{seed}"
        ckpt = out / "checkpoints"
        ckpt.mkdir(parents=True, exist_ok=True)

        def on_segment(seg, partial, ckpt=ckpt):
            save_checkpoint(ckpt / f"segment_{seg:02d}.npz", partial.model, partial.registry)

        log.info("seed %d: training %d segments (%s, %s)", seed, len(stream), tcfg.mode, tcfg.method)
        try:
            result = train_sequence(tcfg, stream, segment_callback=on_segment)
        except NumericalFailure as exc:
            write_seed_artifacts(out, exc.result, None)
            write_json(out / "failure.json", {"seed": seed, "error": str(exc)})
            raise CLIError(f"seed {seed}: non-finite training loss ({exc})", EXIT_NUMERIC) from None
        metrics = seed_metrics(result, stream, seed)
        write_seed_artifacts(out, result, metrics)
        per_seed.append(metrics)
        print(
            f"seed {seed}: avg acc {metrics['avg_final_accuracy']}  "
            f"forgetting {metrics['avg_forgetting']}  overall {metrics['overall_accuracy']}"
        )

    keys = ("avg_final_accuracy", "avg_forgetting", "overall_accuracy")
    aggregate = {}
    for k in keys:
        stats = summarize([m[k] for m in per_seed])
        aggregate[k] = {n: (round(v, 2) if isinstance(v, float) else v) for n, v in stats.items()}
    aggregate["seeds"] = list(cfg.seeds)
    write_json(out_root / "aggregate.json", aggregate)
    for k in keys:
        s = aggregate[k]
        if s["mean"] is not None:
            print(f"{k}: {s['mean']:.2f} +- {s['std']:.2f} (n={s['n']})")
    return EXIT_OK


def cmd_moons(cfg: ExperimentConfig, methods, epochs: int) -> int:
    out_root = Path(cfg.out)
    t = cfg.trainer
    flow = cfg.trainer_config(0)
    overrides = dict(
        alpha=t.alpha, batch_size=t.batch_size, lr=t.lr, mean_scale=t.mean_scale,
        flow_layers=flow.flow_layers, flow_hidden=flow.flow_hidden, clamp=flow.clamp,
    )
    d = cfg.dataset
    summaries = []
    for seed in cfg.seeds:
        for method in methods:
            try:
                res = run_two_moons(method, seed, epochs, d.n_per_moon, d.noise, **overrides)
            except FloatingPointError as exc:
                raise CLIError(f"moons {method} seed {seed}: {exc}", EXIT_NUMERIC) from None
            out = out_root / method / f"seed_{seed}"
            out.mkdir(parents=True, exist_ok=True)
            write_csv(
                out / "moons_latents.csv",
                ["point", "x0", "x1", "z0_snapshot", "z1_snapshot", "z0_final", "z1_final", "displacement"],
                res.latent_rows(),
            )
            write_csv(out / "moons_density.csv", ["x0", "x1", "task", "log_density"], density_grid(res.state))
            state = res.state
            task1 = state.registry.task_ids[0]
            rng = rng_create(seed, numeric.STREAM_PROBE)
            zs = state.snapshot.registry.mean(0, task1) + rng.standard_normal((256, 2))
            n = len(zs)
            probe = bound_probe(state.model, state.snapshot, state.registry, zs, np.zeros(n, int), np.full(n, task1))
            write_csv(out / "bound_probe.csv", ["sample", "gr_term", "fr_term"], probe.rows())
            summary = res.summary() | {
                "bound_probe_gr_mean": probe.gr_mean,
                "bound_probe_fr_mean": probe.fr_mean,
            }
            write_json(out / "moons_summary.json", summary)
            summaries.append(summary)
            print(
                f"{method} seed {seed}: max latent displacement {res.max_displacement:.4f}  "
                f"task-1 loglik deficit {res.ll_deficit:.4f} nats"
            )
    write_json(out_root / "moons_summary.json", summaries)
    return EXIT_OK


def cmd_toy(out: Path, gamma: float, n_samples: int, seed: int) -> int:
    thetas = np.unique(np.concatenate([np.logspace(-3, 1, 41), [gamma]]))
    zs = rng_create(seed, numeric.STREAM_PROBE).standard_normal(n_samples)
    rows = toy_losses_table(gamma, thetas, zs)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "toy_losses.csv", ["theta", "fr_loss", "gr_loss"], rows)
    print(f"wrote {len(rows)} rows to {out / 'toy_losses.csv'}")
    return EXIT_OK


def cmd_gradcheck(seed: int) -> int:
    checks = gradcheck_suite(seed=seed)
    worst = max(c.max_rel_error for c in checks)
    for c in checks:
        print(f"{c.name:>20}: max rel err {c.max_rel_error:.3e} over {c.n_checked} coordinates")
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


def cmd_detect_demo(cfg: ExperimentConfig, base_dir: Path | None) -> int:
    seed = cfg.seeds[0]
    tasks = load_tasks(cfg, seed, base_dir)
    sequence = cfg.sequence_spec(base_dir)
    stream = build_stream(tasks, sequence)
    tcfg = cfg.trainer_config(seed, sequence.epochs if sequence is not None else None)
    try:
        result = train_sequence(tcfg, stream)
    except NumericalFailure as exc:
        raise CLIError(str(exc), EXIT_NUMERIC) from None
    print("segments: " + ", ".join(ds.name for _, ds in stream))
    for t in result.transitions:
        label = "NewTask" if t.kind == "new" else f"Switch(T{_truth_of(result, t.task) + 1})"
        print(f"batch {t.batch}: {label} -> registry task {t.task} (ground truth T{t.truth + 1})")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_events(out / "detector_events.csv", result.detector_events)
    return EXIT_OK


def _truth_of(result: TrainResult, task: int) -> int:
    return relabel_from_creations(result.creations).get(task, task)


DEMO_DEFAULTS = [
    "dataset.n_tasks=2",
    "sequence.order=[1, 2, 1]",
    "sequence.epochs=3",
    'trainer.mode="task-agnostic"',
    'trainer.method="fr"',
    "trainer.mean_scale=3.0",
    'out="runs/detect-demo"',
]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment config")
    common.add_argument("--seed", type=int, action="append", help="seed (repeatable; replaces config seeds)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config key, value parsed as TOML (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="flowcl", description="Continual learning with normalizing flows.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="train a task sequence and write metrics")
    m = sub.add_parser("moons", parents=[common], help="two-moons FR vs GR with 4 fixed replay points")
    m.add_argument("--method", choices=["fr", "gr", "both"], default="both")
    m.add_argument("--epochs", type=int, default=100)
    t = sub.add_parser("toy", parents=[common], help="scalar-flow FR/GR loss table")
    t.add_argument("--gamma", type=float, default=1.0)
    t.add_argument("--samples", type=int, default=1000)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient oracle")
    sub.add_parser("detect-demo", parents=[common], help="task-agnostic run on a [T1,T2,T1] script")
    return p


def _config(args, defaults=()) -> tuple[ExperimentConfig, Path | None]:
    # Subcommand defaults stand in for a config file when none is given.
    overrides = (list(defaults) if args.config is None else []) + list(args.override)
    if args.seed:
        overrides.append(f"seeds={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out!r}".replace("'", '"'))
    cfg = load_config(args.config, overrides)
    return cfg, (args.config.parent if args.config is not None else None)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(*_config(args))
        if args.command == "moons":
            cfg, _ = _config(args, ['out="runs/moons"'])
            methods = ["fr", "gr"] if args.method == "both" else [args.method]
            return cmd_moons(cfg, methods, args.epochs)
        if args.command == "toy":
            cfg, _ = _config(args, ['out="runs/toy"'])
            return cmd_toy(Path(cfg.out), args.gamma, args.samples, cfg.seeds[0])
        if args.command == "gradcheck":
            cfg, _ = _config(args)
            return cmd_gradcheck(cfg.seeds[0])
        if args.command == "detect-demo":
            return cmd_detect_demo(*_config(args, DEMO_DEFAULTS))
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DataFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # Semantic config problems caught by library validation (sequence indices, shapes).
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
