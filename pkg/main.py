"""faultflow command-line entry point: synth, split, gen-perms, train, eval, report."""
import argparse
import sys
import traceback
from pathlib import Path
from typing import Literal, get_args, get_origin

import pandas as pd

from config import Config, build_model, load_model, read_json, write_json
from data import (CorpusConfig, SplitPlan, eps_relations, load_directory, plan_splits, synth_corpus, write_csv,
                  write_sidecar)
from errors import ConfigError, DataError, FaultFlowError
from losses import write_relations
from manifest import finalize_manifest, relocate_manifest, write_manifest
from metrics import render_summary, write_report_csv
from selfsup import generate_set, read_permutation_set, write_permutation_set
from train import (CellSpec, ExperimentConfig, TrainConfig, cell_dir, perms_path, rescore_cell, run_experiment,
                   tee_stdout, train_cell)


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports bad flags as ConfigError instead of exiting."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_train_flags(parser: argparse.ArgumentParser):
    """One flag per TrainConfig field; unset flags stay None so config files keep precedence."""
    group = parser.add_argument_group("training hyperparameters")
    for name, field in TrainConfig.model_fields.items():
        annotation = field.annotation
        kwargs = {"dest": name, "default": None, "help": f"default: {field.default}"}
        if get_origin(annotation) is Literal:
            kwargs["choices"] = list(get_args(annotation))
        else:
            kwargs["type"] = annotation
        group.add_argument(_flag(name), **kwargs)


def resolve_train_config(args) -> TrainConfig:
    """Model defaults < --config JSON < explicit flags."""
    values = read_json(args.config) if args.config else {}
    for name in TrainConfig.model_fields:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            values[name] = flag_value
    return build_model(TrainConfig, values)


def _print_header(title: str):
    print("\n" + "=" * 60)
    print(f"🛰️  faultflow {title}")
    print("=" * 60)


# ===== Subcommands =====

def cmd_synth(args) -> int:
    """Generate a synthetic EPS corpus, its linear relations and per-file sidecars."""
    out = Path(args.out or Config.OUT_DIR / "data")
    values = read_json(args.config) if args.config else {}
    if args.files is not None:
        values["files"] = args.files
    if args.rows is not None:
        values.setdefault("base", {})["rows"] = args.rows
    cfg = build_model(CorpusConfig, values)
    manifest = write_manifest(out, "synth", cfg.model_dump(), [args.seed], [args.config])
    try:
        tables = synth_corpus(cfg, args.seed)
        for table in tables:
            path = out / f"{table.source_ids[0]}.csv"
            write_csv(table, path)
            write_sidecar(path, seed=args.seed, generator="synth_corpus", config=cfg.model_dump())
        write_relations(out / "relations.txt", eps_relations(cfg.base))
        faulty = sum(1 for table in tables if table.faults.any())
        print(f"✅ [synth] Wrote {len(tables)} files ({faulty} with faults) and relations.txt to {out}")
    except FaultFlowError as e:
        finalize_manifest(manifest, "failed", error=str(e))
        raise
    finalize_manifest(manifest, "ok", [out])
    return 0


def cmd_split(args) -> int:
    """Assign source files to train/test sides for k splits."""
    data = Path(args.data)
    out = Path(args.out) if args.out else data / "splits.json"
    config = {"k": args.splits, "seed": args.seed, "test_fraction": args.test_fraction}
    manifest = write_manifest(out.parent, "split", config, [args.seed], [data])
    tables = load_directory(data)
    plan = plan_splits([source for table in tables for source in table.source_ids], args.splits, args.seed,
                       args.test_fraction)
    write_json(out, plan.model_dump())
    write_sidecar(out, seed=args.seed)
    print(f"✅ [split] {len(plan.splits)} splits of {len(plan.files)} files -> {out}")
    finalize_manifest(manifest, "ok", [out])
    return 0


def cmd_gen_perms(args) -> int:
    """Generate a permutation set and write it in the versioned text format."""
    out = Path(args.out or f"perms-n{args.n}-p{args.p}-s{args.seed}.txt")
    config = {"n": args.n, "P": args.p, "seed": args.seed, "pool_factor": args.pool_factor}
    manifest = write_manifest(out.parent, "gen-perms", config, [args.seed])
    perms = generate_set(args.n, args.p, args.pool_factor, args.seed)
    write_permutation_set(out, perms)
    print(f"✅ [gen-perms] {perms.size} permutations of {perms.n} sensors, D={perms.score} -> {out}")
    finalize_manifest(manifest, "ok", [out])
    return 0


def _load_plan(args, tables) -> SplitPlan:
    if args.split_file:
        return load_model(SplitPlan, args.split_file)
    files = [source for table in tables for source in table.source_ids]
    return plan_splits(files, args.splits, args.split_seed, args.test_fraction)


def _train_matrix(args) -> int:
    values = read_json(args.matrix)
    if args.data:
        values["data"] = args.data
    if args.relations:
        values["relations"] = args.relations
    exp = build_model(ExperimentConfig, values)
    out = Path(args.out or Config.OUT_DIR)
    jobs = args.jobs or Config.JOBS
    manifest = write_manifest(out, "train", exp.model_dump(), exp.seeds, [args.matrix, exp.data, exp.relations])
    try:
        frame = run_experiment(exp, out, jobs)
    except FaultFlowError as e:
        finalize_manifest(manifest, "failed", error=str(e))
        raise
    failed = int((frame["status"] != "ok").sum())
    finalize_manifest(manifest, "ok" if failed == 0 else "partial", [out])
    return 0


def cmd_train(args) -> int:
    """Train one cell, or a whole experiment matrix with --matrix."""
    if args.matrix:
        return _train_matrix(args)
    if not args.data:
        raise ConfigError("train: --data is required without --matrix")
    cfg = resolve_train_config(args)
    out = Path(args.out or Config.OUT_DIR)
    spec = CellSpec(setting=cfg.setting, scope=cfg.scope, n_perms=cfg.n_perms)
    directory = cell_dir(out, spec, args.split, cfg.seed)
    manifest = write_manifest(directory, "train", cfg.model_dump(), [cfg.seed],
                              [args.data, args.perms, args.config, args.relations, args.split_file])
    try:
        perms = None
        if cfg.uses_perms and args.perms:
            perms = read_permutation_set(args.perms)
            if args.n_perms is None and perms.size != cfg.n_perms:
                # the cell directory is labelled by P, so the manifest follows the file's count
                cfg = cfg.model_copy(update={"n_perms": perms.size})
                spec = CellSpec(setting=cfg.setting, scope=cfg.scope, n_perms=cfg.n_perms)
                directory = cell_dir(out, spec, args.split, cfg.seed)
                manifest = relocate_manifest(manifest, directory, cfg.model_dump(), stop=out)
        tables = load_directory(args.data)
        if cfg.uses_perms and perms is None:
            path = perms_path(out, tables[0].n_sensors, cfg.n_perms, args.perm_seed)
            perms = generate_set(tables[0].n_sensors, cfg.n_perms, cfg.pool_factor, args.perm_seed)
            write_permutation_set(path, perms)
            print(f"✅ [train] Generated {path}")
        plan = _load_plan(args, tables)
        with tee_stdout(directory / "train.log"):
            print(f"🚀 [train] {spec.label} split {args.split} seed {cfg.seed}")
            train_cell(cfg, tables, plan, args.split, directory, perms, args.relations, str(args.data))
    except FaultFlowError as e:
        finalize_manifest(manifest, "failed", error=str(e))
        raise
    finalize_manifest(manifest, "ok", [directory])
    return 0


def _cell_dirs(run: Path):
    cells = sorted(path.parent for path in run.rglob("cell.json"))
    if not cells:
        raise DataError(f"{run}: no trained cells found")
    return cells


def _cell_record(directory: Path, report: dict) -> dict:
    cell = read_json(directory / "cell.json")
    train = cell["train"]
    return {"setting": train["setting"], "scope": train["scope"],
            "n_perms": None if train["setting"] == "baseline" else train["n_perms"],
            "split": cell["split"], "seed": train["seed"], "status": "ok", "error": "", **report}


def cmd_eval(args) -> int:
    """Re-score every stored cell from its checkpoint; a failing cell is recorded and skipped."""
    run = Path(args.run)
    manifest = write_manifest(run, "eval", {"run": str(run), "data": args.data}, [], [args.data])
    try:
        tables = load_directory(args.data) if args.data else None
        records = []
        for directory in _cell_dirs(run):
            try:
                report = rescore_cell(directory, tables)
            except Exception as e:
                error = f"{type(e).__name__}: {e}"
                records.append({**_cell_record(directory, {}), "status": "failed", "error": error})
                print(f"❌ [eval] {directory}: {error}")
                continue
            records.append(_cell_record(directory, report))
            print(f"🎯 [eval] {directory}: AUROC {report['auroc']:.4f}, FPR95 {report['fpr95']:.4f}, "
                  f"F1 {report['f1']:.4f}, AP {report['average_precision']:.4f}")
        write_report_csv(run / "metrics.csv", records)
    except FaultFlowError as e:
        finalize_manifest(manifest, "failed", error=str(e))
        raise
    failed = sum(record["status"] != "ok" for record in records)
    if failed:
        print(f"⚠️  [eval] {failed} of {len(records)} cells failed")
    finalize_manifest(manifest, "ok" if failed == 0 else "partial", [run / "metrics.csv"])
    return 0


def cmd_report(args) -> int:
    """Render the per-setting mean ± std table from stored cell metrics."""
    run = Path(args.run)
    manifest = write_manifest(run, "report", {"run": str(run)}, [], [])
    try:
        records, failures = [], []
        for directory in _cell_dirs(run):
            metrics = directory / "metrics.json"
            if metrics.exists():
                records.append(_cell_record(directory, read_json(metrics)))
            else:
                failures.append(f"{directory}: no metrics.json")
        summary = render_summary(pd.DataFrame.from_records(records), failures)
        (run / "summary.txt").write_text(summary)
    except FaultFlowError as e:
        finalize_manifest(manifest, "failed", error=str(e))
        raise
    print(summary)
    finalize_manifest(manifest, "ok" if not failures else "partial", [run / "summary.txt"])
    return 0


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="faultflow", description="Flow-based fault detection with self-supervision")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic EPS telemetry corpus")
    synth.add_argument("--out", help="output directory (default: $FAULTFLOW_OUT_DIR/data)")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--files", type=int)
    synth.add_argument("--rows", type=int, help="rows per file")
    synth.add_argument("--config", help="corpus config JSON")
    synth.set_defaults(handler=cmd_synth)

    split = commands.add_parser("split", help="plan file-level train/test splits")
    split.add_argument("--data", required=True, help="directory of telemetry CSV files")
    split.add_argument("--splits", type=int, default=Config.SPLITS)
    split.add_argument("--seed", type=int, default=0)
    split.add_argument("--test-fraction", type=float, default=1 / 3)
    split.add_argument("--out", help="split plan JSON (default: <data>/splits.json)")
    split.set_defaults(handler=cmd_split)

    perms = commands.add_parser("gen-perms", help="generate a permutation set")
    perms.add_argument("--n", type=int, required=True, help="number of sensors")
    perms.add_argument("--p", type=int, required=True, help="number of permutations")
    perms.add_argument("--seed", type=int, default=0)
    perms.add_argument("--pool-factor", type=int, default=10)
    perms.add_argument("--out", help="output file (default: perms-n<n>-p<p>-s<seed>.txt)")
    perms.set_defaults(handler=cmd_gen_perms)

    train = commands.add_parser("train", help="train one cell or an experiment matrix")
    train.add_argument("--data", help="directory of telemetry CSV files")
    train.add_argument("--out", help="output directory (default: $FAULTFLOW_OUT_DIR)")
    train.add_argument("--config", help="TrainConfig JSON; flags override it")
    train.add_argument("--perms", help="permutation set file")
    train.add_argument("--perm-seed", type=int, default=0, help="seed when generating a missing permutation set")
    train.add_argument("--relations", help="linear relations file for the physics penalty")
    train.add_argument("--split", type=int, default=0, help="split index to train on")
    train.add_argument("--splits", type=int, default=Config.SPLITS, help="number of planned splits")
    train.add_argument("--split-seed", type=int, default=0)
    train.add_argument("--split-file", help="split plan JSON from `split`")
    train.add_argument("--test-fraction", type=float, default=1 / 3)
    train.add_argument("--matrix", help="experiment matrix JSON")
    train.add_argument("--jobs", type=int, help="parallel cells (default: $FAULTFLOW_JOBS)")
    add_train_flags(train)
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="re-score stored checkpoints")
    evaluate.add_argument("--run", required=True, help="output directory of a train run")
    evaluate.add_argument("--data", help="override the data directory recorded in each cell")
    evaluate.set_defaults(handler=cmd_eval)

    report = commands.add_parser("report", help="summarize stored metrics")
    report.add_argument("--run", required=True)
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv=None) -> int:
    """Main entry point; returns the process exit code."""
    try:
        Config.validate()
        args = build_parser().parse_args(argv)
        _print_header(args.command)
        return args.handler(args)
    except FaultFlowError as e:
        print(f"❌ [cli] {type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        print("\n\nExiting...")
        return 1
    except (FloatingPointError, OverflowError) as e:
        print(f"❌ [cli] numeric failure: {e}")
        traceback.print_exc()
        return 3
    except Exception as e:
        print(f"❌ [cli] {type(e).__name__}: {e}")
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
