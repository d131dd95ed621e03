"""Command-line pipeline: generate, decompose, train, evaluate, report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import random
import sys
from pathlib import Path

from .env import Instruction
from .harness import (
    emit_report,
    evaluate,
    evaluate_flat,
    load_rows,
    run_ablations,
    save_rows,
)
from .policy import build_vocab, init_policy, load_checkpoint, save_checkpoint
from .subgoals import (
    IDENTITY_REMAP,
    build_phi,
    load_phi,
    load_remap,
    sample_item_remap,
    save_phi,
    save_remap,
)
from .taskgen import (
    UniverseConfig,
    build_recipe_universe,
    generate_dataset,
    load_records,
    load_universe,
    save_universe,
)
from .training import (
    TrainConfig,
    finetune_employee,
    finetune_manager,
    make_employee_validator,
    pretrain_employee,
    pretrain_manager,
)


def _load_config(args) -> TrainConfig:
    if args.config:
        return TrainConfig.from_file(Path(args.config))
    return TrainConfig()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _instruction_items(instructions: list[Instruction]) -> tuple[str, ...]:
    names: set[str] = set()
    for instr in instructions:
        names.add(instr.goal)
        for recipe in instr.commands:
            names.add(recipe.out_item)
            names.update(item for _, item in recipe.ingredients)
    return tuple(sorted(names))


def _load_decomposed(path: Path):
    datasets = load_phi(path / "phi.jsonl", path / "phi0.jsonl")
    remap_path = path / "remap.tsv"
    remap = load_remap(remap_path) if remap_path.exists() else IDENTITY_REMAP
    return datasets, remap


def cmd_gen_universe(args) -> int:
    out = _out_dir(args)
    cfg = UniverseConfig(n_items=args.items, max_depth=args.depth)
    universe = build_recipe_universe(cfg, args.seed)
    path = out / "universe.json"
    save_universe(universe, path)
    print(
        f"universe: {len(universe.items)} items, {len(universe.recipes)} recipes, "
        f"depth {universe.depth} -> {path}"
    )
    return 0


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    universe = load_universe(Path(args.universe))
    paths = generate_dataset(
        universe, args.train, args.val, args.test, args.seed, out, noise_rate=args.noise
    )
    for split, path in zip(("train", "val", "test"), paths):
        print(f"{split}: {path}")
    return 0


def cmd_decompose(args) -> int:
    out = _out_dir(args)
    cfg = _load_config(args)
    records = load_records(Path(args.records))
    remap = IDENTITY_REMAP
    if cfg.remap_p > 0:
        items = _instruction_items([r.instruction() for r in records])
        remap = sample_item_remap(items, cfg.remap_p, random.Random(args.seed))
        save_remap(remap, out / "remap.tsv")
    datasets, stats = build_phi(records, cfg.mode, remap)
    save_phi(datasets, out / "phi.jsonl", out / "phi0.jsonl")
    print(
        f"mode={cfg.mode} records={stats.records_in} aligned={stats.aligned} "
        f"dropped_unalignable={stats.dropped_unalignable} dropped_empty={stats.dropped_empty} "
        f"phi={len(datasets.phi)} phi0={len(datasets.phi0)}"
    )
    return 0


def cmd_pretrain(args) -> int:
    out = _out_dir(args)
    cfg = _load_config(args)
    datasets, remap = _load_decomposed(Path(args.decomposed))
    val_datasets = None
    if args.val:
        val_datasets, _ = _load_decomposed(Path(args.val))
    vocab = build_vocab(_instruction_items(datasets.tasks))
    params = init_policy(args.role, vocab, args.seed, cfg.temperature, cfg.epsilon, cfg.tau)
    log = out / f"pretrain-{args.role}.csv"
    if args.role == "employee":
        stats = pretrain_employee(params, datasets, cfg, args.seed, log, val_datasets)
    else:
        stats = pretrain_manager(params, datasets, cfg, args.seed, log, val_datasets, remap)
    path = out / f"{args.role}-pretrained.npz"
    save_checkpoint(params, path)
    print(
        f"{args.role}: {stats.examples_used} examples "
        f"({stats.dropped_no_candidate} dropped), final loss {stats.final_loss:.4f}, "
        f"probe accuracy {stats.final_accuracy:.3f} -> {path}"
    )
    return 0


def cmd_finetune(args) -> int:
    out = _out_dir(args)
    cfg = _load_config(args)
    datasets, remap = _load_decomposed(Path(args.decomposed))
    params = load_checkpoint(Path(args.checkpoint))
    log = out / f"finetune-{args.role}.csv"
    if args.role == "employee":
        val_datasets = None
        val_fn = None
        if args.val:
            val_datasets, _ = _load_decomposed(Path(args.val))
            val_fn = make_employee_validator(val_datasets, cfg)
        stats = finetune_employee(
            params, datasets, cfg, args.seed, log,
            val_fn=val_fn, snapshot_prefix=out / "employee",
        )
    else:
        if not args.employee:
            print("finetune manager requires --employee", file=sys.stderr)
            return 2
        employee = load_checkpoint(Path(args.employee))
        stats = finetune_manager(
            params, employee, datasets, cfg, args.seed, log, remap=remap
        )
    path = out / f"{args.role}.npz"
    save_checkpoint(params, path)
    print(
        f"{args.role}: {stats.waves} waves, {stats.update_steps} update steps, "
        f"{stats.skipped_updates} skipped, last wave success {stats.last_success_rate:.3f} "
        f"-> {path}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    records = load_records(Path(args.tasks))
    instructions = [r.instruction() for r in records]
    employee = load_checkpoint(Path(args.employee))
    remap = load_remap(Path(args.remap)) if args.remap else IDENTITY_REMAP
    if args.manager:
        manager = load_checkpoint(Path(args.manager))
        metrics = evaluate(manager, employee, instructions, cfg, (args.seed,), remap)
    else:
        metrics = evaluate_flat(employee, instructions, cfg, (args.seed,))
    payload = dataclasses.asdict(metrics)
    print(json.dumps(payload, indent=2))
    if args.out:
        out = _out_dir(args)
        with open(out / "eval.json", "w") as fh:
            json.dump(payload, fh, indent=2)
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    cfg = _load_config(args)
    data = Path(args.data)
    train_records = load_records(data / "train.jsonl")
    val_records = load_records(data / "val.jsonl")
    test_records = load_records(data / "test.jsonl")
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows, curves = run_ablations(train_records, val_records, test_records, cfg, seeds, out)
    save_rows(rows, curves, out / "rows.json")
    for path in emit_report(rows, curves, out):
        print(path)
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    rows, curves = load_rows(Path(args.rows))
    for path in emit_report(rows, curves, out):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="craftbench",
        description="Hierarchical crafting-agent pipeline: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=str, default=None, help="flat key = value file")
        p.add_argument("--out", type=str, required=out_required, help="output directory")

    p = sub.add_parser("gen-universe", help="sample a recipe universe")
    common(p)
    p.add_argument("--items", type=int, default=20)
    p.add_argument("--depth", type=int, default=3)
    p.set_defaults(fn=cmd_gen_universe)

    p = sub.add_parser("gen-data", help="generate demonstration splits")
    common(p)
    p.add_argument("--universe", required=True)
    p.add_argument("--train", type=int, default=5000)
    p.add_argument("--val", type=int, default=200)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("decompose", help="extract subgoal datasets from records")
    common(p)
    p.add_argument("--records", required=True)
    p.set_defaults(fn=cmd_decompose)

    p = sub.add_parser("pretrain", help="supervised pretraining")
    p.add_argument("role", choices=("employee", "manager"))
    common(p)
    p.add_argument("--decomposed", required=True, help="dir with phi.jsonl/phi0.jsonl")
    p.add_argument("--val", default=None, help="decomposed dir for validation")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="rollout fine-tuning")
    p.add_argument("role", choices=("employee", "manager"))
    common(p)
    p.add_argument("--decomposed", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--employee", default=None, help="frozen employee (manager role)")
    p.add_argument("--val", default=None)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="hierarchical evaluation on a task file")
    common(p, out_required=False)
    p.add_argument("--tasks", required=True)
    p.add_argument("--employee", required=True)
    p.add_argument("--manager", default=None, help="omit for the flat agent")
    p.add_argument("--remap", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every ablation condition")
    common(p)
    p.add_argument("--data", required=True, help="dir with train/val/test.jsonl")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="re-emit report files from saved rows")
    common(p)
    p.add_argument("--rows", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
