"""Command-line interface: train / eval / embed / retrieve-grid / sweep / report.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import evaluation, trainer
from .datasets import load_dataset, select_labeled_subset
from .errors import CheckpointError, ContractError, DataError, NumericalError, UsageError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tbigan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_flags(p):
        p.add_argument("--dataset", choices=("cifar10", "svhn", "synthetic"))
        p.add_argument("--data-root", help="archive directory (or set TBIGAN_DATA_ROOT)")

    def add_train_flags(p):
        p.add_argument("--model", choices=trainer.MODEL_TAGS)
        p.add_argument("--m", type=int, help="feature vector size")
        p.add_argument("--n-per-class", type=int)
        p.add_argument("--lambda", dest="lambda_", type=float, help="triplet loss weight")
        p.add_argument("--warmup-epochs", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--hard-negatives", action="store_const", const=True)
        p.add_argument("--width", type=int, help="first-layer channel width")
        p.add_argument("--checkpoint-every", type=int)
        p.add_argument("--no-deterministic", action="store_const", const=True)

    p_train = sub.add_parser("train", help="train a model")
    add_data_flags(p_train)
    add_train_flags(p_train)
    p_train.add_argument("--config", help="flat key-value config file; flags override")
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--k", type=int)
    p_train.add_argument("--query-split", choices=config_mod.QUERY_SPLITS)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    add_data_flags(p_eval)
    p_eval.add_argument("--k", type=int)
    p_eval.add_argument("--query-split", choices=config_mod.QUERY_SPLITS)
    p_eval.add_argument("--out", help="directory for report.json / report.txt")

    p_embed = sub.add_parser("embed", help="export embeddings as a text file")
    p_embed.add_argument("--checkpoint", required=True)
    add_data_flags(p_embed)
    p_embed.add_argument("--split", choices=("train-labeled", "train", "validation", "test"), default="test")
    p_embed.add_argument("--out-file", default="embeddings.tsv")

    p_grid = sub.add_parser("retrieve-grid", help="nearest-neighbor image montage")
    p_grid.add_argument("--checkpoint", required=True)
    add_data_flags(p_grid)
    p_grid.add_argument("--num-queries", type=int, default=5)
    p_grid.add_argument("--top", type=int, default=5)
    p_grid.add_argument("--out-file", default="retrieval_grid.png")

    p_sweep = sub.add_parser("sweep", help="train+eval over a (model, m, n) grid")
    add_data_flags(p_sweep)
    add_train_flags(p_sweep)
    p_sweep.add_argument("--models", default="triplet,bigan,triplet-bigan", help="comma-separated model tags")
    p_sweep.add_argument("--m-values", help="comma-separated feature sizes")
    p_sweep.add_argument("--n-values", help="comma-separated labels per class")
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--k", type=int)

    p_report = sub.add_parser("report", help="aggregate report.json files into tables")
    p_report.add_argument("--root", required=True, help="directory scanned recursively for report.json")
    p_report.add_argument("--out", help="write tables here as well as stdout")
    return parser


_FLAG_TO_KEY = {
    "dataset": "dataset",
    "data_root": "data_root",
    "model": "model",
    "m": "train.latent_dim",
    "n_per_class": "train.n_per_class",
    "lambda_": "train.lambda",
    "warmup_epochs": "train.warmup_epochs",
    "epochs": "train.total_epochs",
    "batch_size": "train.batch_size",
    "lr": "train.learning_rate",
    "seed": "train.seed",
    "hard_negatives": "train.hard_negatives",
    "checkpoint_every": "train.checkpoint_every",
    "width": "width",
    "out": "output_dir",
    "k": "eval.k",
    "query_split": "eval.query_split",
}


def _explicit_options(args) -> dict:
    options = {}
    for flag, key in _FLAG_TO_KEY.items():
        value = getattr(args, flag, None)
        if value is not None:
            options[key] = value
    if getattr(args, "no_deterministic", None):
        options["train.deterministic"] = False
    return options


@contextmanager
def run_lock(out_dir: Path):
    """One experiment process at a time per output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{out_dir} is locked by another run; remove {lock} if stale") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_split_and_index(exp: config_mod.ExperimentConfig):
    split = load_dataset(exp.dataset, exp.data_root or None)
    index = select_labeled_subset(split, exp.train.n_per_class, exp.train.seed)
    return split, index


def cmd_train(args) -> int:
    options = {}
    if getattr(args, "config", None):
        options = config_mod.load_kv_file(args.config)
    options.update(_explicit_options(args))

    if getattr(args, "resume", None):
        state = trainer.resume(args.resume)
        _check_resume_conflicts(options, state)
        exp = config_mod.ExperimentConfig(
            dataset=options.get("dataset", "synthetic"),
            data_root=str(options.get("data_root", "") or ""),
            model_tag=state.config.model_tag,
            arch=state.arch,
            train=state.config,
            k=options.get("eval.k") or 9,
            query_split=options.get("eval.query_split") or "test",
            output_dir=str(options.get("output_dir", "runs/run")),
        )
    else:
        state = None
        exp = config_mod.assemble_experiment(options)

    split, index = _load_split_and_index(exp)
    out_dir = Path(exp.output_dir)
    with run_lock(out_dir):
        (out_dir / "resolved_config.txt").write_text(exp.to_kv_text())
        trainer.fit(exp.train, exp.arch, split, index, out_dir=out_dir, state=state)
    print(f"training complete; outputs in {out_dir}")
    return 0


def _check_resume_conflicts(options: dict, state) -> None:
    checkpoint_values = {
        "train.latent_dim": state.config.latent_dim,
        "train.lambda": state.config.lambda_triplet,
        "train.warmup_epochs": state.config.warmup_epochs,
        "train.total_epochs": state.config.total_epochs,
        "train.batch_size": state.config.batch_size,
        "train.learning_rate": state.config.learning_rate,
        "train.n_per_class": state.config.n_per_class,
        "train.seed": state.config.seed,
        "train.hard_negatives": state.config.hard_negatives,
        "train.checkpoint_every": state.config.checkpoint_every,
        "model": state.config.model_tag,
        "width": state.arch.encoder_channels[0],
    }
    for key, have in checkpoint_values.items():
        want = options.get(key)
        if want is not None and want != have:
            raise UsageError(f"--resume takes {key} from the checkpoint ({have}); conflicting value {want} given")


def _load_checkpoint_context(args):
    """Checkpoint plus the dataset it was trained on.

    Dataset flags default to the resolved_config.txt of the run directory
    the checkpoint lives in.
    """
    state = trainer.resume(args.checkpoint)
    run_dir = Path(args.checkpoint).resolve().parent.parent
    file_opts = {}
    resolved = run_dir / "resolved_config.txt"
    if resolved.is_file():
        file_opts = config_mod.load_kv_file(resolved)
    dataset = getattr(args, "dataset", None) or file_opts.get("dataset")
    if dataset is None:
        raise UsageError("no --dataset given and no resolved_config.txt next to the checkpoint")
    data_root = getattr(args, "data_root", None) or file_opts.get("data_root") or None
    split = load_dataset(dataset, data_root)
    index = select_labeled_subset(split, state.config.n_per_class, state.config.seed)
    return state, split, index, dataset, run_dir, file_opts


def _split_arrays(split, name: str, index):
    if name == "train-labeled":
        flat = index.flattened()
        return split.train_images[flat], split.train_labels[flat]
    if name == "train":
        return split.train_images, split.train_labels
    if name == "validation":
        return split.validation_images, split.validation_labels
    return split.test_images, split.test_labels


def cmd_eval(args) -> int:
    state, split, index, dataset, run_dir, file_opts = _load_checkpoint_context(args)
    k = args.k or file_opts.get("eval.k") or 9
    query_split = args.query_split or file_opts.get("eval.query_split") or "test"
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    encoder = state.models.encoder
    db_images, db_labels = _split_arrays(split, "train-labeled", index)
    q_images, q_labels = _split_arrays(split, query_split, index)
    db = evaluation.embed(encoder, db_images, db_labels, source="train-labeled")
    queries = evaluation.embed(encoder, q_images, q_labels, source=query_split)
    report = evaluation.evaluate_embeddings(
        db,
        queries,
        k=k,
        n_per_class=state.config.n_per_class,
        model_tag=state.config.model_tag,
        dataset=dataset,
    )
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    text = evaluation.render_reports_table([report], "accuracy", "m") + "\n" + evaluation.render_reports_table([report], "map", "m")
    (out_dir / "report.txt").write_text(text)
    print(f"accuracy={report.accuracy:.4f} mAP={report.map:.4f} -> {out_dir / 'report.json'}")
    return 0


def cmd_embed(args) -> int:
    state, split, index, _, run_dir, _ = _load_checkpoint_context(args)
    images, labels = _split_arrays(split, args.split, index)
    embeddings = evaluation.embed(state.models.encoder, images, labels, source=args.split)
    out_file = Path(args.out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    evaluation.export_embeddings(embeddings, out_file)
    print(f"wrote {len(embeddings)} x {embeddings.m} embeddings to {out_file}")
    return 0


def cmd_grid(args) -> int:
    state, split, index, _, run_dir, file_opts = _load_checkpoint_context(args)
    query_split = file_opts.get("eval.query_split") or "test"
    encoder = state.models.encoder
    db_images, db_labels = _split_arrays(split, "train-labeled", index)
    q_images, q_labels = _split_arrays(split, query_split, index)
    rng = np.random.default_rng([state.config.seed, 5])
    chosen = rng.choice(len(q_images), size=min(args.num_queries, len(q_images)), replace=False)
    db = evaluation.embed(encoder, db_images, db_labels, source="train-labeled")
    queries = evaluation.embed(encoder, q_images[chosen], q_labels[chosen], source=query_split)
    grid = evaluation.retrieval_grid(db_images, db, q_images[chosen], queries, top=args.top)
    out_file = Path(args.out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    evaluation.save_image_grid(grid, out_file)
    print(f"wrote {grid.shape[0]}x{grid.shape[1]} montage to {out_file}")
    return 0


def cmd_sweep(args) -> int:
    base = _explicit_options(args)
    base.pop("output_dir", None)
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    m_values = [int(v) for v in args.m_values.split(",")] if args.m_values else [base.get("train.latent_dim", 64)]
    n_values = [int(v) for v in args.n_values.split(",")] if args.n_values else [base.get("train.n_per_class", 100)]
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)

    reports, failures = [], []
    for model in models:
        for m in m_values:
            for n in n_values:
                cell_dir = out_root / f"{model}_m{m}_n{n}"
                report_path = cell_dir / "report.json"
                if report_path.is_file():
                    reports.append(evaluation.EvalReport.from_dict(json.loads(report_path.read_text())))
                    continue
                options = dict(base)
                options.update({"model": model, "train.latent_dim": m, "train.n_per_class": n, "output_dir": str(cell_dir)})
                if model in ("bigan", "triplet"):
                    options.pop("train.lambda", None)
                if model == "triplet":
                    options.pop("train.warmup_epochs", None)
                try:
                    reports.append(_run_cell(options))
                except Exception as exc:  # record and continue with remaining cells
                    failures.append({"cell": cell_dir.name, "error": f"{type(exc).__name__}: {exc}"})
    if failures:
        (out_root / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    (out_root / "sweep_reports.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")

    tables = []
    if len(m_values) > 1 or len(n_values) <= 1:
        tables += [evaluation.render_reports_table(reports, metric, "m") for metric in ("accuracy", "map")]
    if len(n_values) > 1:
        tables += [evaluation.render_reports_table(reports, metric, "n") for metric in ("accuracy", "map")]
    text = "\n".join(tables)
    (out_root / "sweep_tables.txt").write_text(text)
    print(text, end="")
    if failures:
        print(f"{len(failures)} cell(s) failed; see {out_root / 'failures.json'}", file=sys.stderr)
    return 0


def _run_cell(options: dict) -> evaluation.EvalReport:
    exp = config_mod.assemble_experiment(options)
    split, index = _load_split_and_index(exp)
    out_dir = Path(exp.output_dir)
    with run_lock(out_dir):
        (out_dir / "resolved_config.txt").write_text(exp.to_kv_text())
        state = trainer.fit(exp.train, exp.arch, split, index, out_dir=out_dir)
    encoder = state.models.encoder
    db_images, db_labels = _split_arrays(split, "train-labeled", index)
    q_images, q_labels = _split_arrays(split, exp.query_split, index)
    db = evaluation.embed(encoder, db_images, db_labels, source="train-labeled")
    queries = evaluation.embed(encoder, q_images, q_labels, source=exp.query_split)
    report = evaluation.evaluate_embeddings(
        db, queries, k=exp.k, n_per_class=exp.train.n_per_class, model_tag=exp.model_tag, dataset=exp.dataset
    )
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report


def cmd_report(args) -> int:
    root = Path(args.root)
    paths = sorted(root.rglob("report.json"))
    if not paths:
        raise UsageError(f"no report.json files under {root}")
    reports = [evaluation.EvalReport.from_dict(json.loads(p.read_text())) for p in paths]
    tables = [evaluation.render_reports_table(reports, metric, axis) for metric in ("accuracy", "map") for axis in ("m", "n")]
    text = "\n".join(tables)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "retrieve-grid": cmd_grid,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, ContractError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
