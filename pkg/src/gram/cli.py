"""Command-line entry point: ``gram <subcommand> [options]``.

Every subcommand reads an optional ``key = value`` config file, lets flags
override it, writes its artifacts under ``--out`` and prints a one-line JSON
summary on stdout. Validation problems exit with status 1, anything
unexpected with status 2.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .ehr import DatasetSplit, GroupMap, PatientRecord, RecordError, label_frequencies, load_flags, load_group_map
from .ehr import load_records, split_dataset
from .embedding import build_cooccurrence, glove_fit, write_cooccurrence
from .evaluation import DEFAULT_KS, evaluate_state, export_attention, export_embeddings
from .ontology import OntologyDag, OntologyError, parse_ontology, read_labels
from .synth import SynthConfig, generate, write_dataset
from .training import (
    ATTENTION_KINDS,
    TrainConfig,
    build_input_spec,
    count_parameters,
    matched_embedding_dim,
    num_outputs_for,
    read_config,
    train,
)

logger = logging.getLogger("gram")

DATA_FILES = {
    "ontology": "ontology.tsv",
    "records": "records.csv",
    "groups": "groups.csv",
    "flags": "flags.csv",
    "labels": "labels.tsv",
}
PATH_KEYS = ("data", *DATA_FILES)
SPLIT_RATIOS = (0.75, 0.10, 0.15)

DEFAULT_SPACE: dict[str, list] = {
    "m": [100, 200, 300, 400, 500],
    "r": [100, 200, 300, 400, 500],
    "l": [100, 200, 300, 400, 500],
    "l2_coeff": [0.1, 0.01, 0.001, 0.0001],
    "dropout_rate": [0.0, 0.2, 0.4, 0.6, 0.8],
}


class UsageError(ValueError):
    """Bad command-line input; reported with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Config and data loading
# ---------------------------------------------------------------------------


def _train_keys() -> set[str]:
    return {f.name for f in dataclasses.fields(TrainConfig)}


def resolve_config(args) -> tuple[TrainConfig, dict[str, str]]:
    """Merge the config file with flag overrides; flags win."""
    raw = read_config(args.config) if getattr(args, "config", None) else {}
    paths = {k: raw.pop(k) for k in PATH_KEYS if k in raw}
    extra = set(raw) - _train_keys()
    if extra:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(extra))}")
    overrides = {
        "seed": getattr(args, "seed", None),
        "model_kind": getattr(args, "model", None),
        "init_mode": getattr(args, "init", None),
        "task": getattr(args, "task", None),
        "rollup_threshold": getattr(args, "threshold", None),
        "max_epochs": getattr(args, "epochs", None),
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "data", None):
        paths["data"] = args.data
    return TrainConfig.from_mapping(raw), paths


@dataclass
class Dataset:
    dag: OntologyDag
    records: list[PatientRecord]
    group_map: GroupMap | None
    flags: dict[str, int] | None
    categories: dict[str, str]


def _data_path(paths: dict[str, str], key: str) -> Path | None:
    if key in paths:
        return Path(paths[key])
    if "data" in paths:
        candidate = Path(paths["data"]) / DATA_FILES[key]
        return candidate if candidate.exists() else None
    return None


def load_dataset(paths: dict[str, str], task: str) -> Dataset:
    ontology = _data_path(paths, "ontology")
    records_path = _data_path(paths, "records")
    if ontology is None or records_path is None:
        raise UsageError("need --data DIR (or ontology/records paths in the config)")
    dag = parse_ontology(ontology)
    records = load_records(records_path, dag)
    groups = _data_path(paths, "groups")
    gm = load_group_map(groups, dag) if groups is not None else None
    if task == "sequential" and gm is None:
        raise UsageError("sequential task needs a group map (groups.csv)")
    flags_path = _data_path(paths, "flags")
    flags = load_flags(flags_path) if flags_path is not None else None
    if task == "binary" and flags is None:
        raise UsageError("binary task needs per-patient flags (flags.csv)")
    labels = _data_path(paths, "labels")
    categories = read_labels(labels) if labels is not None else {}
    return Dataset(dag, records, gm, flags, categories)


def make_split(records: Sequence[PatientRecord], seed: int) -> DatasetSplit:
    return split_dataset(records, SPLIT_RATIOS, seed)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise UsageError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k needs at least one positive integer")
    return ks


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _synth_config(args) -> SynthConfig:
    raw = read_config(args.config) if args.config else {}
    fields = {f.name: f for f in dataclasses.fields(SynthConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise UsageError(f"unknown synth config key {key!r}")
        default = getattr(SynthConfig, key)
        if isinstance(default, tuple):
            kwargs[key] = tuple(int(v) for v in value.split(","))
        else:
            kwargs[key] = type(default)(value)
    if args.seed is not None:
        kwargs["seed"] = args.seed
    if args.patients is not None:
        kwargs["num_patients"] = args.patients
    return SynthConfig(**kwargs)


def cmd_gen_synth(args) -> dict:
    config = _synth_config(args)
    ds = generate(config)
    out = _out_dir(args)
    files = write_dataset(ds, out, config)
    with open(files["stats"], encoding="utf-8") as fh:
        stats = json.load(fh)
    return {
        "command": "gen-synth",
        "out": str(out),
        "num_patients": stats["num_patients"],
        "num_visits": stats["num_visits"],
        "unique_codes": stats["unique_codes"],
        "positive_rate": stats["positive_rate"],
    }


def _cooc_for(config: TrainConfig, ds: Dataset, train_records):
    """Co-occurrence matching the configured initialisation."""
    if config.init_mode == "glove_augmented":
        spec = build_input_spec(config, ds.dag, train_records)
        return build_cooccurrence(train_records, spec.amap, spec.num_nodes), list(ds.dag.names)
    leaf_names = list(ds.dag.names[: ds.dag.num_leaves])
    return build_cooccurrence(train_records, None, ds.dag.num_leaves), leaf_names


def cmd_build_cooc(args) -> dict:
    config, paths = resolve_config(args)
    if config.init_mode == "random":
        config = dataclasses.replace(config, init_mode="glove_augmented")
    ds = load_dataset(paths, config.task)
    split = make_split(ds.records, config.seed)
    cooc, _ = _cooc_for(config, ds, split.train)
    out = _out_dir(args)
    write_cooccurrence(cooc, out / "cooc.tsv")
    return {"command": "build-cooc", "dim": cooc.dim, "entries": len(cooc), "init": config.init_mode}


def cmd_init_embeddings(args) -> dict:
    config, paths = resolve_config(args)
    if config.init_mode == "random":
        config = dataclasses.replace(config, init_mode="glove_augmented")
    ds = load_dataset(paths, config.task)
    split = make_split(ds.records, config.seed)
    cooc, names = _cooc_for(config, ds, split.train)
    emb = glove_fit(cooc, config.m, iters=config.glove_epochs, lr=config.glove_lr, seed=config.seed)
    out = _out_dir(args)
    with open(out / "basic_embeddings.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for name, row, bias in zip(names, emb.vectors, emb.biases):
            coords = "\t".join(repr(float(x)) for x in row)
            fh.write(f"{name}\t{float(bias)!r}\t{coords}\n")
    return {"command": "init-embeddings", "rows": len(names), "m": config.m, "init": config.init_mode}


def _write_split(path: Path, split: DatasetSplit) -> None:
    _write_json(
        path,
        {
            "train": [r.patient_id for r in split.train],
            "validation": [r.patient_id for r in split.validation],
            "test": [r.patient_id for r in split.test],
        },
    )


def cmd_train(args) -> dict:
    config, paths = resolve_config(args)
    ds = load_dataset(paths, config.task)
    split = make_split(ds.records, config.seed)
    state, report = train(config, split, ds.dag, ds.group_map, ds.flags)
    out = _out_dir(args)
    save_checkpoint(state, out / "model.ckpt")
    report.write_log(out / "train_log.csv")
    _write_split(out / "split.json", split)
    best = report.best_epoch - 1
    return {
        "command": "train",
        "model": config.model_kind,
        "init": config.init_mode,
        "epochs_run": report.epochs_run,
        "best_epoch": report.best_epoch,
        "best_valid_loss": report.valid_loss[best] if best >= 0 else None,
        "num_parameters": state.num_parameters(),
        "checkpoint": str(out / "model.ckpt"),
    }


def _checkpoint_config(state: M.ModelState) -> TrainConfig:
    return TrainConfig.from_mapping(state.meta["config"])


def cmd_evaluate(args) -> dict:
    state = load_checkpoint(args.checkpoint)
    config = _checkpoint_config(state)
    _, paths = resolve_config(argparse.Namespace(config=args.config, data=args.data))
    ds = load_dataset(paths, state.task)
    split = make_split(ds.records, config.seed)
    ks = _parse_ks(args.k)
    freq = label_frequencies(split.train, ds.group_map) if state.task == "sequential" else None
    records = split.validation if args.split == "validation" else split.test
    report = evaluate_state(state, records, ds.group_map, freq, ds.flags, ks)
    out = _out_dir(args)
    _write_json(out / "eval.json", report.to_dict())
    summary = {"command": "evaluate", "split": args.split, "patients": len(records)}
    if state.task == "binary":
        summary["auc"] = report.auc
    else:
        summary["accuracy_at_k"] = {str(k): v for k, v in report.accuracy_at_k.items()}
        summary["bins"] = {str(k): v for k, v in report.bins.items()}
    return summary


def cmd_export_embeddings(args) -> dict:
    state = load_checkpoint(args.checkpoint)
    categories = {}
    if args.labels:
        categories = read_labels(args.labels)
    elif args.data and (Path(args.data) / DATA_FILES["labels"]).exists():
        categories = read_labels(Path(args.data) / DATA_FILES["labels"])
    out = _out_dir(args)
    rows = export_embeddings(state, out / "embeddings.tsv", categories)
    return {"command": "export-embeddings", "rows": rows, "path": str(out / "embeddings.tsv")}


def cmd_export_attention(args) -> dict:
    state = load_checkpoint(args.checkpoint)
    if not state.use_attention:
        raise UsageError("checkpoint has no attention (model is not gram or random_dag)")
    leaves = [s for s in args.leaves.split(",") if s] if args.leaves else None
    entries = export_attention(state, leaves, drop_root=args.drop_root)
    out = _out_dir(args)
    _write_json(out / "attention.json", entries)
    return {"command": "export-attention", "leaves": len(entries), "path": str(out / "attention.json")}


def param_counts(config: TrainConfig, ds: Dataset) -> dict:
    """Parameter count of the configured model plus a budget-matched RNN size."""
    spec = build_input_spec(config, ds.dag, ds.records)
    n_out = num_outputs_for(config, ds.group_map)
    total = count_parameters(
        config.model_kind,
        num_nodes=spec.num_nodes,
        num_inputs=spec.num_inputs,
        num_outputs=n_out,
        m=config.m,
        r=config.r,
        l=config.l,
    )
    result = {"model": config.model_kind, "num_parameters": total, "num_inputs": spec.num_inputs}
    if config.model_kind in ATTENTION_KINDS:
        rnn_m = matched_embedding_dim(total, num_inputs=ds.dag.num_leaves, num_outputs=n_out, r=config.r)
        result["matched_rnn_m"] = rnn_m
        result["matched_rnn_parameters"] = count_parameters(
            "rnn",
            num_nodes=ds.dag.num_leaves,
            num_inputs=ds.dag.num_leaves,
            num_outputs=n_out,
            m=rnn_m,
            r=config.r,
        )
    return result


def cmd_param_count(args) -> dict:
    config, paths = resolve_config(args)
    ds = load_dataset(paths, config.task)
    return {"command": "param-count", **param_counts(config, ds)}


def read_space(path) -> dict[str, list]:
    """Candidate values per hyperparameter from a ``key = v1, v2, ...`` file."""
    raw = read_config(path)
    keys = _train_keys()
    space = {}
    for key, text in raw.items():
        if key not in keys:
            raise UsageError(f"unknown hyperparameter {key!r} in space file")
        kind = type(getattr(TrainConfig, key))
        values = [kind(v.strip()) for v in text.split(",") if v.strip()]
        if not values:
            raise UsageError(f"hyperparameter {key!r} has no candidate values")
        space[key] = values
    if not space:
        raise UsageError("search space is empty")
    return space


def sample_trials(space: dict[str, list], trials: int, seed: int) -> list[dict]:
    """Draw each hyperparameter uniformly from its list, trial by trial."""
    if not space or any(len(v) == 0 for v in space.values()):
        raise UsageError("search space is empty")
    rng = np.random.default_rng(seed)
    keys = sorted(space)
    return [{k: space[k][int(rng.integers(len(space[k])))] for k in keys} for _ in range(trials)]


def hpo_search(
    base: TrainConfig,
    space: dict[str, list],
    trials: int,
    seed: int,
    split: DatasetSplit,
    dag: OntologyDag,
    gm: GroupMap | None,
    flags: dict[str, int] | None = None,
) -> list[dict]:
    """Random search; returns trial results ranked by best validation loss."""
    results = []
    for index, params in enumerate(sample_trials(space, trials, seed)):
        config = dataclasses.replace(base, **params)
        _, report = train(config, split, dag, gm, flags)
        best = min(report.valid_loss) if report.valid_loss else float("inf")
        results.append({"trial": index, **params, "valid_loss": best, "best_epoch": report.best_epoch})
    return sorted(results, key=lambda r: (r["valid_loss"], r["trial"]))


def cmd_hpo_search(args) -> dict:
    config, paths = resolve_config(args)
    space = read_space(args.space) if args.space else DEFAULT_SPACE
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    ds = load_dataset(paths, config.task)
    split = make_split(ds.records, config.seed)
    ranked = hpo_search(config, space, args.trials, config.seed, split, ds.dag, ds.group_map, ds.flags)
    out = _out_dir(args)
    fields = ["rank", "trial", *sorted(space), "valid_loss", "best_epoch"]
    with open(out / "hpo.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for rank, row in enumerate(ranked, 1):
            writer.writerow({"rank": rank, **{k: repr(v) if isinstance(v, float) else v for k, v in row.items()}})
    best = dataclasses.replace(config, **{k: ranked[0][k] for k in space})
    with open(out / "best.cfg", "w", encoding="utf-8", newline="\n") as fh:
        for key, value in dataclasses.asdict(best).items():
            fh.write(f"{key} = {value}\n")
    return {
        "command": "hpo-search",
        "trials": len(ranked),
        "best": {k: ranked[0][k] for k in sorted(space)},
        "best_valid_loss": ranked[0]["valid_loss"],
    }


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gram", description="Ontology-attention models for EHR sequences.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, *, data=True, train_flags=True):
        p.add_argument("--config", help="key = value config file; flags override it")
        p.add_argument("--out", default=".", help="output directory")
        if data:
            p.add_argument("--data", help="directory holding ontology.tsv, records.csv, groups.csv, ...")
        if train_flags:
            p.add_argument("--seed", type=int)
            p.add_argument("--model", choices=["gram", "random_dag", "rnn", "simple_rollup", "rollup_rare"])
            p.add_argument("--init", choices=["random", "glove_augmented", "glove_leaf_only"])
            p.add_argument("--task", choices=["sequential", "binary"])
            p.add_argument("--threshold", type=int, help="RollUpRare frequency threshold")
            p.add_argument("--epochs", type=int, help="maximum training epochs")

    p = sub.add_parser("gen-synth", help="write a synthetic dataset")
    common(p, data=False, train_flags=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--patients", type=int, help="number of patients")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("build-cooc", help="co-occurrence counts of the training split")
    common(p)
    p.set_defaults(func=cmd_build_cooc)

    p = sub.add_parser("init-embeddings", help="fit GloVe basic embeddings")
    common(p)
    p.set_defaults(func=cmd_init_embeddings)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Accuracy@k or AUC of a checkpoint")
    common(p, train_flags=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", default=",".join(str(k) for k in DEFAULT_KS), help="comma-separated k values")
    p.add_argument("--split", choices=["validation", "test"], default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-embeddings", help="final representations as TSV")
    common(p, train_flags=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labels", help="name<TAB>category sidecar")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("export-attention", help="attention weights per leaf as JSON")
    common(p, data=False, train_flags=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--leaves", help="comma-separated leaf names (default: all)")
    p.add_argument("--drop-root", action="store_true", help="leave the root out and report its weight as residual")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("param-count", help="trainable parameter count and a matched RNN size")
    common(p)
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("hpo-search", help="random hyperparameter search")
    common(p)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--space", help="space file: key = v1, v2, ...")
    p.set_defaults(func=cmd_hpo_search)
    return parser


VALIDATION_ERRORS = (UsageError, ValueError, KeyError, FileNotFoundError, OntologyError, RecordError, CheckpointError)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        summary = args.func(args)
    except VALIDATION_ERRORS as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"gram {args.command}: error: {message}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        print(f"gram {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
