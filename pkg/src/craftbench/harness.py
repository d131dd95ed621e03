"""Hierarchical evaluation, the ablation suite, and report emission.

Episode success is always the true-environment ultimate-goal predicate on the
final state; world models never decide outcomes here. Subgoal success is
counted per proposal (the alternative, per-episode-first-subgoal, is noted in
the report header).
"""

from __future__ import annotations

import dataclasses
import random
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from .env import Instruction, Inventory, ultimate_goal_achieved
from .subgoals import (
    IDENTITY_REMAP,
    ItemRemap,
    PhiDatasets,
    Subgoal,
    build_phi,
    decompose_hand,
    sample_item_remap,
)
from .policy import (
    PolicyParams,
    build_vocab,
    candidate_dynamic_features,
    context_weights,
    greedy_index,
    init_policy,
    load_checkpoint,
    policy_distribution,
    sample_index,
)
from .taskgen import TrajectoryRecord
from .training import (
    EmployeeCache,
    ManagerCache,
    TrainConfig,
    finetune_employee,
    finetune_manager,
    make_employee_validator,
    pretrain_employee,
    pretrain_manager,
    rollout_subgoal,
)

import numpy as np

ManagerFn = Callable[[Inventory, tuple[Inventory, Inventory], Instruction], Subgoal]
# employee_runner(state, subgoal, instruction, step_limit) -> (state, achieved, steps)
EmployeeRunner = Callable[[Inventory, Subgoal, Instruction, int], tuple[Inventory, bool, int]]


# --------------------------------------------------------------------------
# episodes
# --------------------------------------------------------------------------

@dataclass
class EpisodeResult:
    success: bool
    subgoals_proposed: int
    subgoals_achieved: int
    primitive_steps: int
    trace: list[tuple[Subgoal, bool, int]] = field(default_factory=list)


def make_manager_fn(
    params: PolicyParams,
    cfg: TrainConfig,
    remap: ItemRemap = IDENTITY_REMAP,
    rng: random.Random | None = None,
) -> ManagerFn:
    """Manager proposal callable. rng None selects greedily from the shadow
    arrays (evaluation); otherwise samples from the live exploration mix."""
    cache = ManagerCache(params.vocab, cfg.mode, remap)

    def fn(state, history, instruction):
        candidates, emb_w, rest8 = cache.entry(instruction, state)
        goal_counts = {instruction.goal: 1}
        ctx_w = context_weights(cache.vocab, state, history, goal_counts)
        dyn = candidate_dynamic_features(candidates, state, goal_counts, instruction)
        rest = np.concatenate([rest8, dyn], axis=1)
        probs = policy_distribution(
            params, ctx_w, emb_w, rest, use_shadow=rng is None, training=rng is not None
        )
        idx = greedy_index(probs) if rng is None else sample_index(probs, rng)
        return candidates[idx].subgoal_dict()

    return fn


def make_employee_runner(params: PolicyParams, cfg: TrainConfig) -> EmployeeRunner:
    """Greedy shadow-policy employee with the shared one-retry step rule."""
    cache = EmployeeCache(params.vocab)

    def runner(state, subgoal, instruction, step_limit):
        _, final, achieved, used = rollout_subgoal(
            params, cache, instruction, state, subgoal, step_limit, cfg, None,
            use_shadow=True,
        )
        return final, achieved, used

    return runner


def run_hierarchical_episode(
    manager_fn: ManagerFn,
    employee_runner: EmployeeRunner,
    instruction: Instruction,
    cfg: TrainConfig,
    start_state: Inventory | None = None,
) -> EpisodeResult:
    """Manager-employee loop: propose, pursue, return control; terminate on
    the ultimate goal, manager-budget exhaustion, or the episode step budget.
    A successful episode's active subgoal is credited as achieved."""
    state: Inventory = dict(start_state or {})
    history: tuple[Inventory, Inventory] = ({}, {})
    result = EpisodeResult(ultimate_goal_achieved(state, instruction.goal), 0, 0, 0)
    while (
        not result.success
        and result.subgoals_proposed < cfg.manager_budget
        and result.primitive_steps < cfg.episode_budget
    ):
        subgoal = manager_fn(state, history, instruction)
        result.subgoals_proposed += 1
        remaining = min(cfg.rollout_length, cfg.episode_budget - result.primitive_steps)
        new_state, achieved, used = employee_runner(state, subgoal, instruction, remaining)
        history = (state, history[0])
        state = new_state
        result.primitive_steps += used
        result.success = ultimate_goal_achieved(state, instruction.goal)
        if result.success:
            achieved = True
        result.subgoals_achieved += int(achieved)
        result.trace.append((subgoal, achieved, used))
    return result


def run_fixed_sequence_episode(
    subgoals: list[Subgoal],
    employee_runner: EmployeeRunner,
    instruction: Instruction,
    cfg: TrainConfig,
) -> EpisodeResult:
    """Manager bypassed: feed a pre-extracted subgoal list in order, once."""
    state: Inventory = {}
    result = EpisodeResult(ultimate_goal_achieved(state, instruction.goal), 0, 0, 0)
    for subgoal in subgoals:
        if result.success or result.primitive_steps >= cfg.episode_budget:
            break
        result.subgoals_proposed += 1
        remaining = min(cfg.rollout_length, cfg.episode_budget - result.primitive_steps)
        state, achieved, used = employee_runner(state, subgoal, instruction, remaining)
        result.primitive_steps += used
        result.success = ultimate_goal_achieved(state, instruction.goal)
        if result.success:
            achieved = True
        result.subgoals_achieved += int(achieved)
        result.trace.append((subgoal, achieved, used))
    return result


def run_flat_episode(
    employee_runner: EmployeeRunner, instruction: Instruction, cfg: TrainConfig
) -> EpisodeResult:
    """Non-hierarchical: one pursuit of {goal: 1} with the episode budget."""
    goal_sg = {instruction.goal: 1}
    state, achieved, used = employee_runner({}, goal_sg, instruction, cfg.episode_budget)
    success = ultimate_goal_achieved(state, instruction.goal)
    return EpisodeResult(success, 1, int(achieved or success), used, [(goal_sg, achieved, used)])


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class EvalMetrics:
    episodes: int
    ultimate_success: float
    subgoal_success: float  # achieved / proposed, over all proposals
    mean_steps: float
    mean_subgoals: float
    wall_time: float


def evaluate_episodes(
    instructions: list[Instruction],
    episode_fn: Callable[[Instruction, random.Random], EpisodeResult],
    seeds: tuple[int, ...] = (0,),
) -> EvalMetrics:
    start = time.perf_counter()
    n = successes = steps = proposed = achieved = 0
    for seed in seeds:
        rng = random.Random(seed)
        for instruction in instructions:
            res = episode_fn(instruction, rng)
            n += 1
            successes += int(res.success)
            steps += res.primitive_steps
            proposed += res.subgoals_proposed
            achieved += res.subgoals_achieved
    return EvalMetrics(
        episodes=n,
        ultimate_success=successes / n if n else 0.0,
        subgoal_success=achieved / proposed if proposed else 0.0,
        mean_steps=steps / n if n else 0.0,
        mean_subgoals=proposed / n if n else 0.0,
        wall_time=time.perf_counter() - start,
    )


def evaluate(
    manager: PolicyParams,
    employee: PolicyParams,
    instructions: list[Instruction],
    cfg: TrainConfig,
    seeds: tuple[int, ...] = (0,),
    remap: ItemRemap = IDENTITY_REMAP,
) -> EvalMetrics:
    """Greedy hierarchical evaluation; deterministic per seed."""
    if not instructions:
        raise ValueError("evaluation needs at least one task")
    manager_fn = make_manager_fn(manager, cfg, remap)
    runner = make_employee_runner(employee, cfg)

    def episode(instruction, rng):
        return run_hierarchical_episode(manager_fn, runner, instruction, cfg)

    return evaluate_episodes(instructions, episode, seeds)


def evaluate_fixed_sequence(
    sequences: dict[str, list[Subgoal]],
    employee: PolicyParams,
    instructions: list[Instruction],
    cfg: TrainConfig,
    seeds: tuple[int, ...] = (0,),
) -> EvalMetrics:
    runner = make_employee_runner(employee, cfg)

    def episode(instruction, rng):
        seq = sequences.get(instruction.goal)
        if seq is None:
            return EpisodeResult(False, 0, 0, 0)  # no demonstration to follow
        return run_fixed_sequence_episode(seq, runner, instruction, cfg)

    return evaluate_episodes(instructions, episode, seeds)


def evaluate_flat(
    employee: PolicyParams,
    instructions: list[Instruction],
    cfg: TrainConfig,
    seeds: tuple[int, ...] = (0,),
) -> EvalMetrics:
    runner = make_employee_runner(employee, cfg)

    def episode(instruction, rng):
        return run_flat_episode(runner, instruction, cfg)

    return evaluate_episodes(instructions, episode, seeds)


def fixed_sequences_from_records(records: list[TrajectoryRecord]) -> dict[str, list[Subgoal]]:
    """First matching-goal record's hand decomposition, per goal."""
    sequences: dict[str, list[Subgoal]] = {}
    for record in records:
        if record.goal in sequences:
            continue
        try:
            sequences[record.goal] = decompose_hand(record)
        except ValueError:
            continue
    return sequences


# --------------------------------------------------------------------------
# condition training
# --------------------------------------------------------------------------

def collect_item_names(records: list[TrajectoryRecord]) -> tuple[str, ...]:
    names: set[str] = set()
    for record in records:
        instr = record.instruction()
        names.add(instr.goal)
        for recipe in instr.commands:
            names.add(recipe.out_item)
            names.update(item for _, item in recipe.ingredients)
    return tuple(sorted(names))


def clone_params(params: PolicyParams) -> PolicyParams:
    return PolicyParams(
        params.role,
        params.vocab,
        params.temperature,
        params.epsilon,
        params.tau,
        {k: v.copy() for k, v in params.live.items()},
        {k: v.copy() for k, v in params.shadow.items()},
    )


@dataclass
class TrainedCondition:
    name: str
    cfg: TrainConfig
    remap: ItemRemap
    employee: PolicyParams
    pretrained_employee: PolicyParams
    manager: PolicyParams | None
    pretrained_manager: PolicyParams | None
    phi_stats: object
    manager_val_curve: list[tuple[int, float]] = field(default_factory=list)
    employee_snapshots: dict[int, Path] = field(default_factory=dict)


def train_condition(
    name: str,
    train_records: list[TrajectoryRecord],
    val_records: list[TrajectoryRecord],
    cfg: TrainConfig,
    seed: int,
    out_dir: Path | None = None,
    val_instructions: list[Instruction] | None = None,
) -> TrainedCondition:
    """Full training pipeline for one ablation condition: sample the remap,
    decompose, pretrain both agents, fine-tune employee then manager."""
    items = collect_item_names(train_records)
    remap = (
        sample_item_remap(items, cfg.remap_p, random.Random(seed * 7919 + 13))
        if cfg.remap_p > 0
        else IDENTITY_REMAP
    )
    phi_train, phi_stats = build_phi(train_records, cfg.mode, remap)
    phi_val, _ = build_phi(val_records, cfg.mode, remap)
    vocab = build_vocab(items)

    log = (lambda stem: out_dir / f"{name}-{stem}.csv") if out_dir else (lambda stem: None)
    snap_prefix = out_dir / f"{name}-employee" if out_dir else None

    employee = init_policy("employee", vocab, seed, cfg.temperature, cfg.epsilon, cfg.tau)
    pretrain_employee(employee, phi_train, cfg, seed, log("pretrain-employee"), phi_val)
    pretrained_employee = clone_params(employee)
    emp_stats = finetune_employee(
        employee, phi_train, cfg, seed, log("finetune-employee"),
        val_fn=make_employee_validator(phi_val, cfg),
        snapshot_prefix=snap_prefix,
    )

    manager = pretrained_manager = None
    manager_val_curve: list[tuple[int, float]] = []
    if cfg.mode != "ultimate":
        manager = init_policy("manager", vocab, seed + 1, cfg.temperature, cfg.epsilon, cfg.tau)
        pretrain_manager(
            manager, phi_train, cfg, seed, log("pretrain-manager"), phi_val, remap
        )
        pretrained_manager = clone_params(manager)
        probe_tasks = (val_instructions or [])[: cfg.val_episodes]

        def manager_val(params: PolicyParams) -> float:
            if not probe_tasks:
                return 0.0
            metrics = evaluate(params, employee, probe_tasks, cfg, remap=remap)
            manager_val_curve.append((len(manager_val_curve), metrics.ultimate_success))
            return metrics.ultimate_success

        finetune_manager(
            manager, employee, phi_train, cfg, seed, log("finetune-manager"),
            val_fn=manager_val, remap=remap,
        )

    return TrainedCondition(
        name, cfg, remap, employee, pretrained_employee, manager, pretrained_manager,
        phi_stats, manager_val_curve, emp_stats.snapshots,
    )


# --------------------------------------------------------------------------
# ablations and report
# --------------------------------------------------------------------------

@dataclass
class AblationRow:
    condition: str
    metrics: EvalMetrics | None  # None marks an absent variant
    note: str = ""


@dataclass
class CurvePoint:
    curve: str
    seed: int
    x: float
    value: float


CONDITION_SPECS = (
    ("full", "llm", 0.0),
    ("hand", "hand", 0.0),
    ("no-quantity", "no-quantity", 0.0),
    ("non-hier", "ultimate", 0.0),
    ("remap-p0.25", "llm", 0.25),
    ("remap-p0.5", "llm", 0.5),
    ("remap-p1.0", "llm", 1.0),
)


def _mean_metrics(per_seed: list[EvalMetrics]) -> EvalMetrics:
    n = len(per_seed)
    return EvalMetrics(
        episodes=sum(m.episodes for m in per_seed),
        ultimate_success=sum(m.ultimate_success for m in per_seed) / n,
        subgoal_success=sum(m.subgoal_success for m in per_seed) / n,
        mean_steps=sum(m.mean_steps for m in per_seed) / n,
        mean_subgoals=sum(m.mean_subgoals for m in per_seed) / n,
        wall_time=sum(m.wall_time for m in per_seed),
    )


def run_ablations(
    train_records: list[TrajectoryRecord],
    val_records: list[TrajectoryRecord],
    test_records: list[TrajectoryRecord],
    cfg: TrainConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
    out_dir: Path | None = None,
) -> tuple[list[AblationRow], list[CurvePoint]]:
    """Train every condition per seed, evaluate on the test tasks, and
    aggregate seed means into one row per condition."""
    test_instructions = [r.instruction() for r in test_records]
    val_instructions = [r.instruction() for r in val_records]
    sequences = fixed_sequences_from_records(val_records)

    collected: dict[str, list[EvalMetrics]] = {}
    notes: dict[str, str] = {}
    curves: list[CurvePoint] = []

    def add(name: str, metrics: EvalMetrics | None, note: str = "") -> None:
        if metrics is None:
            notes[name] = note or "absent"
            collected.setdefault(name, [])
            return
        collected.setdefault(name, []).append(metrics)
        if note:
            notes[name] = note

    for seed in seeds:
        for name, mode, remap_p in CONDITION_SPECS:
            cond_cfg = replace(cfg, mode=mode, remap_p=remap_p)
            try:
                cond = train_condition(
                    name, train_records, val_records, cond_cfg, seed, out_dir,
                    val_instructions,
                )
                if cond.cfg.mode == "ultimate":
                    metrics = evaluate_flat(cond.employee, test_instructions, cond_cfg, (seed,))
                else:
                    metrics = evaluate(
                        cond.manager, cond.employee, test_instructions, cond_cfg, (seed,),
                        remap=cond.remap,
                    )
                add(name, metrics)

                if name == "full":
                    add(
                        "full-pretrained",
                        evaluate(
                            cond.pretrained_manager, cond.pretrained_employee,
                            test_instructions, cond_cfg, (seed,),
                        ),
                    )
                    add("remap-p0.0", metrics, note="identity remap equals full")
                    for i, (_, v) in enumerate(cond.manager_val_curve):
                        curves.append(CurvePoint("manager-val-success", seed, i, v))
                    for pct, path in sorted(cond.employee_snapshots.items()):
                        partial = load_checkpoint(path)
                        pm = evaluate(
                            cond.manager, partial, test_instructions, cond_cfg, (seed,)
                        )
                        curves.append(
                            CurvePoint("partial-employee-subgoal", seed, pct, pm.subgoal_success)
                        )
                        curves.append(
                            CurvePoint("partial-employee-ultimate", seed, pct, pm.ultimate_success)
                        )
                if name == "hand":
                    add(
                        "fixed-sequence",
                        evaluate_fixed_sequence(
                            sequences, cond.employee, test_instructions, cond_cfg, (seed,)
                        ),
                    )
            except (OSError, ValueError) as exc:
                # a variant that cannot train or load leaves an absent row
                add(name, None, f"absent: {exc}")

    order = [
        "full", "full-pretrained", "hand", "fixed-sequence", "no-quantity", "non-hier",
        "remap-p0.0", "remap-p0.25", "remap-p0.5", "remap-p1.0",
    ]
    rows = []
    for name in order:
        per_seed = collected.get(name, [])
        if not per_seed:
            rows.append(AblationRow(name, None, notes.get(name, "absent")))
        else:
            rows.append(AblationRow(name, _mean_metrics(per_seed), notes.get(name, "")))
    return rows, curves


def emit_report(rows: list[AblationRow], curves: list[CurvePoint], out_dir: Path) -> list[Path]:
    """Stable-order CSV table plus curve file. Wall time is excluded so
    reruns over identical inputs are byte-identical."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "ablation_table.csv"
    curve_file = out_dir / "curves.csv"
    with open(table, "w") as fh:
        fh.write("# subgoal_success is per-proposal; per-episode-first-subgoal is the alternative\n")
        fh.write("condition,episodes,ultimate_success,subgoal_success,mean_steps,mean_subgoals,note\n")
        for row in rows:
            if row.metrics is None:
                fh.write(f"{row.condition},,,,,,{row.note or 'absent'}\n")
            else:
                m = row.metrics
                fh.write(
                    f"{row.condition},{m.episodes},{m.ultimate_success:.6f},"
                    f"{m.subgoal_success:.6f},{m.mean_steps:.6f},{m.mean_subgoals:.6f},"
                    f"{row.note}\n"
                )
    with open(curve_file, "w") as fh:
        fh.write("curve,seed,x,value\n")
        for p in curves:
            fh.write(f"{p.curve},{p.seed},{p.x:g},{p.value:.6f}\n")
    return [table, curve_file]


def save_rows(rows: list[AblationRow], curves: list[CurvePoint], path: Path) -> None:
    import json

    payload = {
        "rows": [
            {
                "condition": r.condition,
                "metrics": dataclasses.asdict(r.metrics) if r.metrics else None,
                "note": r.note,
            }
            for r in rows
        ],
        "curves": [dataclasses.asdict(p) for p in curves],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def load_rows(path: Path) -> tuple[list[AblationRow], list[CurvePoint]]:
    import json

    with open(path) as fh:
        payload = json.load(fh)
    rows = [
        AblationRow(
            r["condition"],
            EvalMetrics(**r["metrics"]) if r["metrics"] else None,
            r.get("note", ""),
        )
        for r in payload["rows"]
    ]
    curves = [CurvePoint(**p) for p in payload["curves"]]
    return rows, curves
