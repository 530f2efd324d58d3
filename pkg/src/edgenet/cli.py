"""Command-line entry point.

Subcommands: ingest, graph-stats, train, eval, sweep-cutoff, export-filters.
A JSON config file provides defaults; every field has a flag override. The
effective configuration is written next to the outputs so a run can be
reproduced from its artifacts. Exit codes: 0 success, 1 usage error, 2 data
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .elements import NOBLE_GAS_NUMBERS, atomic_number
from .errors import DataError, EdgeNetError, GraphError, NumericalError
from .graphs import (
    CutoffPolicy,
    RbfConfig,
    build_graph,
    graph_statistics,
    write_statistics_csv,
)
from .model import (
    ModelConfig,
    export_filters,
    load_checkpoint,
    save_checkpoint,
)
from .structures import (
    PROPERTY_REGISTRY,
    load_records,
    parse_crystal_json,
    parse_xyz,
    save_records,
)
from .training import (
    GraphDataset,
    NormalizationStats,
    TrainConfig,
    evaluate,
    train,
    training_log_csv,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

_DEFAULTS = {
    "records": None,
    "format": "records",
    "target": "U0",
    "policy": "distance:5",
    "rbf": {"mu_min": 0.0, "delta": 0.1, "k_max": 150},
    "model": {
        "hidden_dim": 64,
        "steps": 3,
        "edge_updates": True,
        "message_agg": "sum",
        "readout_agg": None,  # derived from the target when unset
    },
    "train": {
        "lr0": 5e-4,
        "decay_factor": 0.96,
        "decay_every": 100_000,
        "batch_size": 32,
        "max_steps": 10_000_000,
        "eval_every": 50_000,
        "patience_steps": 1_000_000,
    },
    "unit_scale": 1.0,
    "seed": 0,
    "output_dir": "run",
    "splits": None,
    "n_species": 104,
}


def _deep_update(base: dict, overlay: dict) -> dict:
    out = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    config = dict(_DEFAULTS)
    if path:
        with open(path, encoding="utf-8") as fh:
            config = _deep_update(config, json.load(fh))
    return _deep_update(config, overrides)


def _config_overrides(args) -> dict:
    over: dict = {}
    model: dict = {}
    trainc: dict = {}
    if getattr(args, "target", None):
        over["target"] = args.target
    if getattr(args, "policy", None):
        over["policy"] = args.policy
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "output_dir", None):
        over["output_dir"] = args.output_dir
    if getattr(args, "records", None):
        over["records"] = args.records
    if getattr(args, "splits", None):
        over["splits"] = args.splits
    if getattr(args, "unit_scale", None) is not None:
        over["unit_scale"] = args.unit_scale
    if getattr(args, "hidden_dim", None) is not None:
        model["hidden_dim"] = args.hidden_dim
    if getattr(args, "steps", None) is not None:
        model["steps"] = args.steps
    if getattr(args, "no_edge_updates", False):
        model["edge_updates"] = False
    if getattr(args, "message_agg", None):
        model["message_agg"] = args.message_agg
    if getattr(args, "readout_agg", None):
        model["readout_agg"] = args.readout_agg
    if getattr(args, "lr0", None) is not None:
        trainc["lr0"] = args.lr0
    if getattr(args, "batch_size", None) is not None:
        trainc["batch_size"] = args.batch_size
    if getattr(args, "max_steps", None) is not None:
        trainc["max_steps"] = args.max_steps
    if getattr(args, "eval_every", None) is not None:
        trainc["eval_every"] = args.eval_every
    if getattr(args, "patience_steps", None) is not None:
        trainc["patience_steps"] = args.patience_steps
    if model:
        over["model"] = model
    if trainc:
        over["train"] = trainc
    return over


def _model_config(config: dict) -> ModelConfig:
    target = config["target"]
    if target not in PROPERTY_REGISTRY:
        raise DataError(f"unknown target property {target!r}")
    readout = config["model"].get("readout_agg")
    if readout is None:
        readout = "sum" if PROPERTY_REGISTRY[target].extensive else "mean"
    return ModelConfig(
        hidden_dim=config["model"]["hidden_dim"],
        steps=config["model"]["steps"],
        edge_updates=config["model"]["edge_updates"],
        message_agg=config["model"]["message_agg"],
        readout_agg=readout,
        rbf=RbfConfig(**config["rbf"]),
        n_species=config["n_species"],
    )


def _train_config(config: dict) -> TrainConfig:
    return TrainConfig(seed=config["seed"], **config["train"])


def _write_effective_config(config: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_dataset(config: dict, policy: CutoffPolicy, rbf: RbfConfig, split: str):
    records = load_records(config["records"])
    by_id = {r.id: r for r in records}
    if config.get("splits"):
        ids_path = Path(config["splits"]) / f"{split}.ids"
        wanted = [line.strip() for line in open(ids_path, encoding="utf-8") if line.strip()]
        try:
            subset = [by_id[i] for i in wanted]
        except KeyError as exc:
            raise DataError(f"split id {exc} not present in records") from None
    else:
        subset = records
    target = config["target"]
    graphs, targets, ids = [], [], []
    for record in subset:
        if target not in record.targets:
            raise DataError(f"record {record.id!r} missing target {target!r}")
        graphs.append(build_graph(record.structure, policy, rbf))
        targets.append(record.targets[target])
        ids.append(record.id)
    return GraphDataset(graphs, np.array(targets), ids)


def cmd_ingest(args) -> int:
    config = load_config(args.config, _config_overrides(args))
    out_dir = Path(config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    text = Path(args.input).read_text(encoding="utf-8")
    if args.format == "xyz":
        records = parse_xyz(text)
    elif args.format == "crystal-json":
        records = parse_crystal_json(text)
    else:
        raise DataError(f"unknown input format {args.format!r}")
    report = {"parsed": len(records), "excluded_noble_gas": 0, "excluded_energy": 0}
    kept = []
    for record in records:
        if args.exclude_noble_gases and any(
            int(z) in NOBLE_GAS_NUMBERS for z in record.structure.species
        ):
            report["excluded_noble_gas"] += 1
            continue
        if args.max_formation_energy is not None:
            value = record.targets.get("formation_energy_per_atom")
            if value is not None and value > args.max_formation_energy:
                report["excluded_energy"] += 1
                continue
        kept.append(record)
    report["kept"] = len(kept)
    save_records(out_dir / "records.jsonl", kept)

    rng = np.random.default_rng(config["seed"])
    ids = [r.id for r in kept]
    order = rng.permutation(len(ids))
    n_train = args.n_train if args.n_train is not None else int(0.8 * len(ids))
    n_val = args.n_val if args.n_val is not None else int(0.1 * len(ids))
    if n_train + n_val > len(ids):
        raise DataError(
            f"split sizes {n_train}+{n_val} exceed {len(ids)} kept records"
        )
    splits = {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }
    for name, idx in splits.items():
        with open(out_dir / f"{name}.ids", "w", encoding="utf-8") as fh:
            for i in idx:
                fh.write(ids[i] + "\n")
        report[f"n_{name}"] = len(idx)
    with open(out_dir / "ingest_report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_effective_config(config, out_dir)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_graph_stats(args) -> int:
    config = load_config(args.config, _config_overrides(args))
    records = load_records(config["records"])
    rbf = RbfConfig(**config["rbf"])
    rows = []
    for policy_text in args.policies:
        policy = CutoffPolicy.parse(policy_text)
        graphs = [build_graph(r.structure, policy, rbf) for r in records]
        rows.append((policy.kind, policy.param_label(), graph_statistics(graphs)))
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_statistics_csv(out, rows)
    for kind, param, stats in rows:
        print(
            f"{kind}:{param} mean={stats.mean_incoming_edges:.3f} "
            f"stddev={stats.stddev_incoming_edges:.3f} isolated={stats.isolated_atom_count}"
        )
    return EXIT_OK


def _run_training(config: dict, out_dir: Path):
    policy = CutoffPolicy.parse(config["policy"])
    rbf = RbfConfig(**config["rbf"])
    model_config = _model_config(config)
    train_config = _train_config(config)
    train_set = _load_dataset(config, policy, rbf, "train")
    val_set = _load_dataset(config, policy, rbf, "val")
    result = train(train_set, val_set, model_config, train_config)
    extra = {
        "target": config["target"],
        "policy": str(policy),
        "normalization": result.stats.to_dict(),
        "best_step": result.best_step,
        "best_val_mae": result.best_val_mae,
        "steps_run": result.steps_run,
        "aborted": result.aborted,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint.bin", result.params, extra)
    training_log_csv(out_dir / "training_log.csv", result.log)
    return result, extra


def cmd_train(args) -> int:
    config = load_config(args.config, _config_overrides(args))
    out_dir = Path(config["output_dir"])
    _write_effective_config(config, out_dir)
    result, extra = _run_training(config, out_dir)
    print(json.dumps({k: extra[k] for k in ("best_step", "best_val_mae", "steps_run", "aborted")}))
    if result.aborted:
        print("training aborted on non-finite loss; last good checkpoint kept", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args.config, _config_overrides(args))
    params, extra = load_checkpoint(args.checkpoint)
    stats = NormalizationStats.from_dict(extra["normalization"])
    policy = CutoffPolicy.parse(extra.get("policy", config["policy"]))
    config["target"] = extra.get("target", config["target"])
    dataset = _load_dataset(config, policy, params.config.rbf, args.split)
    metrics = evaluate(
        params,
        params.config,
        stats,
        dataset,
        unit_scale=config["unit_scale"],
        bootstrap_samples=args.bootstrap_samples,
        seed=config["seed"],
    )
    metrics["unit"] = PROPERTY_REGISTRY[config["target"]].unit
    out = json.dumps(metrics, sort_keys=True)
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(out + "\n", encoding="utf-8")
    print(out)
    return EXIT_OK


def cmd_sweep_cutoff(args) -> int:
    config = load_config(args.config, _config_overrides(args))
    out_dir = Path(config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_effective_config(config, out_dir)
    rows = []
    failures = {}
    for policy_text in args.policies:
        sub = dict(config)
        sub["policy"] = policy_text
        policy = CutoffPolicy.parse(policy_text)
        run_dir = out_dir / str(policy).replace(":", "_")
        try:
            result, extra = _run_training(sub, run_dir)
            rbf = RbfConfig(**sub["rbf"])
            test_set = _load_dataset(sub, policy, rbf, "test")
            metrics = evaluate(
                result.params, result.params.config, result.stats, test_set,
                unit_scale=sub["unit_scale"], bootstrap_samples=1000, seed=sub["seed"],
            )
            train_graphs = _load_dataset(sub, policy, rbf, "train").graphs
            stats = graph_statistics(train_graphs)
            rows.append(
                (policy.kind, policy.param_label(), result.best_val_mae,
                 metrics["mae"], stats.mean_incoming_edges)
            )
        except EdgeNetError as exc:
            failures[policy_text] = str(exc)
    with open(out_dir / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("policy,param,val_mae,test_mae,mean_incoming_edges\n")
        for kind, param, val_mae, test_mae, mean_in in rows:
            fh.write(f"{kind},{param},{val_mae!r},{test_mae!r},{mean_in!r}\n")
    if failures:
        with open(out_dir / "failures.json", "w", encoding="utf-8") as fh:
            json.dump(failures, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"sweep complete: {len(rows)} policies, {len(failures)} failures")
    return EXIT_OK


def cmd_export_filters(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    species = []
    for sym in args.species.split(","):
        sym = sym.strip()
        species.append(atomic_number(sym) if not sym.isdigit() else int(sym))
    d_grid = np.arange(args.d_min, args.d_max + 0.5 * args.d_step, args.d_step)
    d_grid = d_grid[d_grid > 0]
    pairs = [(zv, zw) for zv in species for zw in species]
    table = export_filters(params, params.config, d_grid, pairs)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(out)
    print(
        f"wrote {table.n_filters * len(pairs) * len(d_grid)} rows "
        f"({table.n_filters} filters, {len(pairs)} pairs, {len(d_grid)} distances)"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgenet",
        description="Graph network experiments on molecular and crystal datasets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, records=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir")
        if records:
            p.add_argument("--records", help="records.jsonl dataset cache")

    p = sub.add_parser("ingest", help="parse, filter and split a raw dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("xyz", "crystal-json"), required=True)
    p.add_argument("--exclude-noble-gases", action="store_true")
    p.add_argument("--max-formation-energy", type=float, default=None,
                   help="drop records with formation energy above this (eV/atom)")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    common(p, records=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("graph-stats", help="incoming-edge statistics per cutoff policy")
    p.add_argument("--policy", dest="policies", action="append", required=True,
                   help="distance:R | knearest:K | voronoi (repeatable)")
    p.add_argument("--output", required=True, help="CSV output path")
    common(p)
    p.set_defaults(func=cmd_graph_stats)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--target")
    p.add_argument("--policy")
    p.add_argument("--splits", help="directory with train.ids/val.ids/test.ids")
    p.add_argument("--no-edge-updates", action="store_true")
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--message-agg", choices=("sum", "mean"))
    p.add_argument("--readout-agg", choices=("sum", "mean"))
    p.add_argument("--lr0", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--patience-steps", type=int)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--splits", help="directory with split id files")
    p.add_argument("--bootstrap-samples", type=int, default=100_000)
    p.add_argument("--unit-scale", type=float)
    p.add_argument("--output", help="metrics JSON path")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-cutoff", help="train one model per cutoff policy")
    p.add_argument("--policy", dest="policies", action="append", required=True)
    p.add_argument("--target")
    p.add_argument("--splits")
    p.add_argument("--no-edge-updates", action="store_true")
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--message-agg", choices=("sum", "mean"))
    p.add_argument("--readout-agg", choices=("sum", "mean"))
    p.add_argument("--lr0", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--patience-steps", type=int)
    p.add_argument("--unit-scale", type=float)
    common(p)
    p.set_defaults(func=cmd_sweep_cutoff)

    p = sub.add_parser("export-filters", help="first-layer filter responses to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--species", default="H,C,N,O,F",
                   help="comma separated symbols or atomic numbers")
    p.add_argument("--d-min", type=float, default=0.05)
    p.add_argument("--d-max", type=float, default=4.0)
    p.add_argument("--d-step", type=float, default=0.05)
    p.add_argument("--output", required=True)
    common(p, records=False)
    p.set_defaults(func=cmd_export_filters)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except (DataError, GraphError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except EdgeNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
