"""Command-line surface: synth, train, evaluate, benchmark, ablate.

Every command writes its artifacts into --out plus a manifest.json that
references each emitted file. Reports are deterministic for a fixed
seed; timestamps live only in the manifest. Exit codes: 0 success,
2 usage error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, data, metrics, trainer
from .checkpoint import TrainedModel
from .optim import TrainingDivergedError
from .trainer import TrainConfig, stable_seed

METHODS = ("gditd", "softmax", "mahalanobis")

ABLATION_VARIANTS = [
    ("full", ("pull", "score", "efl1", "efl2")),
    ("only_pull", ("pull",)),
    ("only_score", ("score",)),
    ("only_efl1", ("efl1",)),
    ("only_efl2", ("efl2",)),
    ("no_pull", ("score", "efl1", "efl2")),
    ("no_score", ("pull", "efl1", "efl2")),
    ("no_efl1", ("pull", "score", "efl2")),
    ("no_efl2", ("pull", "score", "efl1")),
]


def _add_config_flags(p):
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--beta-literal", action="store_true",
                   help="use beta = 1/|B| instead of the effective 1 - 1/|B|")
    p.add_argument("--latent-dim", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="dataset CSV path")
    p.add_argument("--manifest", default=None,
                   help="dataset manifest JSON (default: CSV path with .json suffix)")


def build_parser():
    parser = argparse.ArgumentParser(prog="gaussood", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob benchmark CSV")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--n-per-class", type=int, default=300)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--separation", type=float, default=8.0)
    p.add_argument("--ood-offset", type=float, default=12.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="blobs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one method and evaluate a held-out fold")
    _add_data_flags(p)
    p.add_argument("--method", choices=METHODS, default="gditd")
    p.add_argument("--mdsr", type=float, default=1.0)
    p.add_argument("--folds", type=int, default=5)
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a dataset with a saved checkpoint")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="method x MDSR sweep with k-fold protocol")
    _add_data_flags(p)
    p.add_argument("--methods", default="gditd,softmax,mahalanobis",
                   help="comma-separated methods to compare")
    p.add_argument("--mdsr", default="1",
                   help="comma-separated minority down-sampling ratios")
    p.add_argument("--folds", type=int, default=5)
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("ablate", help="loss-term ablation study (9 variants)")
    _add_data_flags(p)
    p.add_argument("--mdsr", type=float, default=1.0)
    p.add_argument("--folds", type=int, default=5)
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def _config_from_args(args, **overrides):
    kwargs = dict(
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        learning_rate=args.lr,
        gamma=args.gamma,
        beta_mode="literal" if args.beta_literal else "effective",
        seed=args.seed,
        latent_dim=args.latent_dim,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def _load_dataset(args):
    manifest = args.manifest or str(Path(args.data).with_suffix(".json"))
    return data.load_with_manifest(args.data, manifest), manifest


class RunOutputs:
    """Collects files written by one command and emits the run manifest."""

    def __init__(self, out_dir, command, args_snapshot):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.args_snapshot = args_snapshot
        self.files = []

    def path(self, name):
        self.files.append(name)
        target = self.dir / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def write_json(self, name, payload):
        self.path(name).write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n")

    def write_manifest(self, dataset_path=None, dataset_manifest=None, seed=None):
        payload = {
            "command": self.command,
            "config": self.args_snapshot,
            "dataset": dataset_path,
            "dataset_manifest": dataset_manifest,
            "seed": seed,
            "output_dir": str(self.dir),
            "tool_version": __version__,
            "outputs": sorted(self.files),
            "created_unix": time.time(),
        }
        (self.dir / "manifest.json").write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_losses_csv(out: RunOutputs, model: TrainedModel):
    header = (["epoch", "pull", "score_loss", "efl1", "efl2", "net"]
              if model.kind == "gditd" else ["epoch", "cross_entropy"])
    with out.path("losses.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for epoch, row in enumerate(model.loss_history):
            writer.writerow([epoch] + [repr(float(v)) for v in row])


def _write_curves(out: RunOutputs, model: TrainedModel, dataset, eval_rows):
    """ROC and PR point dumps for the OOD detection task."""
    is_ood = dataset.ood_mask[eval_rows]
    if not is_ood.any() or is_ood.all():
        return
    _, confidence, _ = model.score_rows(dataset.features[eval_rows])
    scores = metrics.ood_positive_score(confidence)
    fpr, tpr = metrics.roc_points(scores, is_ood)
    with out.path("roc.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        writer.writerows([repr(float(a)), repr(float(b))] for a, b in zip(fpr, tpr))
    recall, precision = metrics.pr_points(scores, is_ood)
    with out.path("pr.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recall", "precision"])
        writer.writerows([repr(float(a)), repr(float(b))] for a, b in zip(recall, precision))


def _holdout_split(dataset, folds, seed, mdsr):
    """Fold 0 of the stratified plan is the validation fold."""
    plan = data.stratified_folds(dataset, folds, seed=seed, mdsr=mdsr)
    eval_rows = np.concatenate([plan.val_indices(0), plan.ood_rows])
    return plan.train_indices(0), eval_rows


def cmd_synth(args):
    dataset = data.make_blobs(
        k_id=args.k, n_per_class=args.n_per_class, dim=args.dim,
        separation=args.separation, ood_offset=args.ood_offset, seed=args.seed)
    out = RunOutputs(args.out, "synth", _args_snapshot(args))
    csv_path = out.path(f"{args.name}.csv")
    data.save_csv(dataset, csv_path)
    data.write_manifest(dataset, out.path(f"{args.name}.json"))
    out.write_manifest(dataset_path=str(csv_path), seed=args.seed)
    print(f"wrote {csv_path}")
    return 0


def _args_snapshot(args):
    snap = {k: v for k, v in vars(args).items() if k != "func"}
    return snap


def cmd_train(args):
    dataset, manifest = _load_dataset(args)
    config = _config_from_args(args)
    dataset = data.apply_mdsr(dataset, args.mdsr, seed=stable_seed(args.seed, "mdsr", args.mdsr))
    train_rows, eval_rows = _holdout_split(dataset, args.folds, args.seed, args.mdsr)
    model, report = trainer.run_split(
        dataset, train_rows, eval_rows, config, args.method,
        config_echo={"mdsr": args.mdsr})

    out = RunOutputs(args.out, "train", _args_snapshot(args))
    model.save(out.path("checkpoint.npz"))
    out.write_json("report.json", report.to_dict())
    _write_losses_csv(out, model)
    _write_curves(out, model, dataset, eval_rows)
    out.write_manifest(dataset_path=args.data, dataset_manifest=manifest, seed=args.seed)
    print(report.to_json(), end="")
    return 0


def cmd_evaluate(args):
    dataset, manifest = _load_dataset(args)
    model = TrainedModel.load(args.checkpoint)
    eval_rows = np.arange(dataset.n_rows)
    report = trainer.evaluate_model(
        model, dataset, eval_rows,
        config_echo={"checkpoint": str(args.checkpoint)})
    out = RunOutputs(args.out, "evaluate", _args_snapshot(args))
    out.write_json("report.json", report.to_dict())
    _write_curves(out, model, dataset, eval_rows)
    out.write_manifest(dataset_path=args.data, dataset_manifest=manifest)
    print(report.to_json(), end="")
    return 0


def _benchmark_cell(payload):
    """One (method, mdsr) cell; module-level so worker processes can run it."""
    dataset, config, folds, method, mdsr, master_seed = payload
    cell_seed = stable_seed(master_seed, method, mdsr)
    fold_seeds = [stable_seed(master_seed, method, mdsr, fold) for fold in range(folds)]
    cell_config = replace(config, seed=cell_seed)
    sampled = data.apply_mdsr(dataset, mdsr, seed=stable_seed(master_seed, "mdsr", mdsr))
    reports, mean = trainer.kfold_fit_eval(
        sampled, cell_config, folds=folds, method=method,
        fold_seeds=fold_seeds, mdsr=mdsr)
    return method, mdsr, mean.to_dict(), [r.to_dict() for r in reports]


def _worker_count(n_cells):
    raw = os.environ.get("GDITD_THREADS", "1")
    try:
        threads = max(1, int(raw))
    except ValueError:
        threads = 1
    return min(threads, n_cells)


HEADLINE_METRICS = ("id_accuracy", "minority_aupr", "ood_tnr_at_85tpr",
                    "ood_auroc", "ood_aupr")


def cmd_benchmark(args):
    dataset, manifest = _load_dataset(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
    mdsr_values = [float(v) for v in args.mdsr.split(",") if v.strip()]
    if any(not 0.0 < v <= 1.0 for v in mdsr_values):
        raise ValueError(f"mdsr values must lie in (0, 1], got {mdsr_values}")
    config = _config_from_args(args)

    cells = [(dataset, config, args.folds, method, mdsr, args.seed)
             for method in methods for mdsr in mdsr_values]
    workers = _worker_count(len(cells))
    results = {}
    failures = {}
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_benchmark_cell, cell): cell for cell in cells}
            for future in concurrent.futures.as_completed(futures):
                _, _, _, method, mdsr, _ = futures[future]
                try:
                    m, v, mean, folds = future.result()
                    results[(m, v)] = (mean, folds)
                except TrainingDivergedError as err:
                    failures[(method, mdsr)] = str(err)
    else:
        for cell in cells:
            method, mdsr = cell[3], cell[4]
            try:
                m, v, mean, folds = _benchmark_cell(cell)
                results[(m, v)] = (mean, folds)
            except TrainingDivergedError as err:
                failures[(method, mdsr)] = str(err)

    out = RunOutputs(args.out, "benchmark", _args_snapshot(args))
    for (method, mdsr), (mean, folds) in sorted(results.items()):
        stem = f"cells/{method}/mdsr_{mdsr:g}"
        out.write_json(f"{stem}/report.json", mean)
        out.write_json(f"{stem}/folds.json", folds)

    with out.path("table.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "method"] + [f"mdsr={v:g}" for v in mdsr_values])
        for metric in HEADLINE_METRICS:
            for method in methods:
                row = [metric, method]
                for mdsr in mdsr_values:
                    if (method, mdsr) in failures:
                        row.append("failed")
                    else:
                        value = results[(method, mdsr)][0][metric]
                        row.append("" if value is None else repr(value))
                writer.writerow(row)
    if failures:
        out.write_json("failures.json", {f"{m},{v}": msg for (m, v), msg in failures.items()})
    out.write_manifest(dataset_path=args.data, dataset_manifest=manifest, seed=args.seed)
    print(f"wrote {out.dir / 'table.csv'} ({len(results)} cells, {len(failures)} failed)")
    return 0


def cmd_ablate(args):
    dataset, manifest = _load_dataset(args)
    dataset = data.apply_mdsr(dataset, args.mdsr, seed=stable_seed(args.seed, "mdsr", args.mdsr))
    train_rows, eval_rows = _holdout_split(dataset, args.folds, args.seed, args.mdsr)

    out = RunOutputs(args.out, "ablate", _args_snapshot(args))
    rows = []
    for name, terms in ABLATION_VARIANTS:
        config = _config_from_args(args, loss_terms=terms)
        _, report = trainer.run_split(
            dataset, train_rows, eval_rows, config, "gditd",
            config_echo={"mdsr": args.mdsr, "variant": name})
        out.write_json(f"variants/{name}/report.json", report.to_dict())
        rows.append((name, report))

    with out.path("table.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "id_accuracy", "ood_aupr", "minority_aupr"])
        for name, report in rows:
            writer.writerow([
                name,
                repr(report.id_accuracy),
                "" if report.ood_aupr is None else repr(report.ood_aupr),
                "" if report.minority_aupr is None else repr(report.minority_aupr),
            ])
    out.write_manifest(dataset_path=args.data, dataset_manifest=manifest, seed=args.seed)
    print(f"wrote {out.dir / 'table.csv'} ({len(rows)} variants)")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as err:
        print(f"gaussood: numeric failure: {err}", file=sys.stderr)
        return 3
    except (ValueError, OSError, json.JSONDecodeError) as err:
        print(f"gaussood: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
