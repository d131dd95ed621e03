"""Training loops: supervised pretraining and rollout fine-tuning.

Fine-tuning is iterated sample-filter-refit. Rollout waves start from stored
segment-head tuples: the employee re-pursues subgoals from their recorded
start states, the manager proposes its own subgoal chains from those states
against the employee-backed world model. Successful trajectories become
weighted imitation targets (weight 1/length per transition); failures are
mostly discarded, with a fixed fraction retained at zero loss weight. An
iteration whose wave has no successes applies no update at all.
"""

from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .env import Instruction, Inventory, apply_action, ultimate_goal_achieved
from .subgoals import (
    ItemRemap,
    IDENTITY_REMAP,
    PhiDatasets,
    Subgoal,
    subgoal_achieved,
)
from .grammar import parse_action
from .policy import (
    Batch,
    PolicyParams,
    Vocab,
    candidate_dynamic_features,
    candidate_static_features,
    context_weights,
    enumerate_employee_candidates,
    enumerate_manager_candidates,
    greedy_index,
    nll_and_grads,
    pack_batch,
    policy_distribution,
    sample_index,
    save_checkpoint,
    sgd_step,
)
from .worldmodel import mwm_step


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    pretrain_lr: float = 1e-4  # supervised phase only; lr drives fine-tuning
    temperature: float = 1.0
    epsilon: float = 0.1
    tau: float = 0.1
    employee_batch: int = 256
    manager_batch: int = 16
    employee_rollouts: int = 8  # rollouts per employee fine-tune wave
    manager_rollouts: int = 8
    rollout_length: int = 8  # employee steps per subgoal; manager proposals per rollout
    rollout_period: int = 10  # update steps between rollout waves
    grad_steps_per_iter: int = 4
    replay_capacity: int = 10_000
    replay_mix: float = 0.9
    replay_enable_after: int = 4096  # collected transitions before mixing starts
    failed_keep_fraction: float = 0.15
    manager_budget: int = 10
    episode_budget: int = 30
    non_hier_rollout_length: int = 30
    retry_mode: str = "resample"  # or "next-best"
    pretrain_steps: int = 1500
    finetune_iters: int = 300
    val_interval: int = 50
    val_episodes: int = 100
    log_interval: int = 50
    mode: str = "llm"  # llm | hand | no-quantity | ultimate
    remap_p: float = 0.0

    @classmethod
    def from_file(cls, path: Path) -> "TrainConfig":
        """Flat ``key = value`` file; # starts a comment, blank lines ignored."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in fields:
                    raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
                ftype = fields[key].type
                if ftype == "int":
                    kwargs[key] = int(value)
                elif ftype == "float":
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = value
        return cls(**kwargs)

    def write(self, path: Path) -> None:
        with open(path, "w") as fh:
            for f in dataclasses.fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")


class TrainLog:
    """CSV training log: iter,phase,success_rate,loss,buffer_size,seed."""

    HEADER = "iter,phase,success_rate,loss,buffer_size,seed"

    def __init__(self, path: Path | None):
        self._fh = None
        if path is not None:
            self._fh = open(path, "w")
            self._fh.write(self.HEADER + "\n")

    def row(
        self,
        iteration: int,
        phase: str,
        success_rate: float,
        loss: float,
        buffer_size: int,
        seed: int,
    ) -> None:
        if self._fh is None:
            return
        self._fh.write(
            f"{iteration},{phase},{success_rate:.6f},{loss:.6f},{buffer_size},{seed}\n"
        )
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------------------
# featurizer caches and examples
# --------------------------------------------------------------------------

class EmployeeCache:
    """Per-instruction employee candidates and their static features."""

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        self._entries: dict[Instruction, tuple] = {}

    def entry(self, instruction: Instruction):
        cached = self._entries.get(instruction)
        if cached is None:
            candidates = enumerate_employee_candidates(instruction)
            emb_w, rest8 = candidate_static_features(self.vocab, candidates)
            action_index = {c.action: i for i, c in enumerate(candidates)}
            cached = (candidates, action_index, emb_w, rest8)
            self._entries[instruction] = cached
        return cached


class ManagerCache:
    """Per-instruction manager candidates for state-independent modes."""

    def __init__(self, vocab: Vocab, mode: str, remap: ItemRemap = IDENTITY_REMAP):
        self.vocab = vocab
        self.mode = mode
        self.remap = remap
        self._entries: dict[Instruction, tuple] = {}

    def entry(self, instruction: Instruction, state: Inventory):
        if self.mode == "hand":
            # snapshot candidates depend on the state; no caching
            candidates = enumerate_manager_candidates(state, instruction, self.mode, self.remap)
            emb_w, rest8 = candidate_static_features(self.vocab, candidates)
            return candidates, emb_w, rest8
        cached = self._entries.get(instruction)
        if cached is None:
            candidates = enumerate_manager_candidates({}, instruction, self.mode, self.remap)
            emb_w, rest8 = candidate_static_features(self.vocab, candidates)
            cached = (candidates, emb_w, rest8)
            self._entries[instruction] = cached
        return cached


@dataclass
class Example:
    """One scoring example. ``cand_w``/``rest8`` are usually references to an
    instruction cache's shared arrays, so replayed examples stay small."""

    instruction: Instruction
    ctx_w: np.ndarray
    dyn: np.ndarray
    target: int
    cand_w: np.ndarray
    rest8: np.ndarray
    weight: float = 1.0
    loss_w: float = 1.0


def assemble_batch(items: list[Example]) -> Batch:
    rows = []
    for it in items:
        rest = np.concatenate([it.rest8, it.dyn], axis=1)
        rows.append((it.ctx_w, it.cand_w, rest, it.target, it.loss_w))
    return pack_batch(rows)


# --------------------------------------------------------------------------
# replay buffer
# --------------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity transition store with reciprocal trajectory weights.

    Every transition of a pushed trajectory gets weight 1/len, used both as
    its sampling weight and (for successes) its loss weight, so a successful
    trajectory's weights sum to exactly 1. A full buffer evicts uniformly
    random slots.
    """

    def __init__(self, capacity: int, rng: random.Random):
        self.capacity = capacity
        self.rng = rng
        self.items: list[Example] = []
        self.total_collected = 0

    def __len__(self) -> int:
        return len(self.items)

    def push_trajectory(self, items: list[Example], success: bool) -> None:
        if not items:
            return
        w = 1.0 / len(items)
        for it in items:
            it.weight = w
            it.loss_w = w if success else 0.0
            if len(self.items) < self.capacity:
                self.items.append(it)
            else:
                self.items[self.rng.randrange(self.capacity)] = it
            self.total_collected += 1

    def sample(self, n: int) -> list[Example]:
        weights = [it.weight for it in self.items]
        return self.rng.choices(self.items, weights=weights, k=n)

    def draw_mixed(
        self, n: int, fresh: list[Example], mix: float, enable_after: int
    ) -> tuple[list[Example], int]:
        """Batch of n items. Before ``enable_after`` transitions have been
        collected the batch is all-fresh; afterwards each slot draws from
        replay with probability ``mix`` and from the latest wave otherwise."""
        fresh_weights = [it.weight for it in fresh]
        if self.total_collected < enable_after or not self.items:
            return self.rng.choices(fresh, weights=fresh_weights, k=n), 0
        if not fresh:
            return self.sample(n), n
        out: list[Example] = []
        from_buffer = 0
        for _ in range(n):
            if self.rng.random() < mix:
                out.extend(self.sample(1))
                from_buffer += 1
            else:
                out.extend(self.rng.choices(fresh, weights=fresh_weights, k=1))
        return out, from_buffer


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------

@dataclass
class PretrainStats:
    examples_in: int = 0
    examples_used: int = 0
    dropped_no_candidate: int = 0
    final_loss: float = 0.0
    final_accuracy: float = 0.0


def _featurize_phi_employee(
    datasets: PhiDatasets, cache: EmployeeCache
) -> tuple[list[Example], int]:
    examples: list[Example] = []
    dropped = 0
    for t in datasets.phi:
        instruction = datasets.instruction_for(t.task_key)
        candidates, action_index, emb_w, rest8 = cache.entry(instruction)
        try:
            action = parse_action(t.action)
        except ValueError:
            dropped += 1
            continue
        target = action_index.get(action)
        if target is None:
            dropped += 1
            continue
        ctx_w = context_weights(cache.vocab, t.state, t.history, t.subgoal)
        dyn = candidate_dynamic_features(candidates, t.state, t.subgoal, instruction)
        examples.append(Example(instruction, ctx_w, dyn, target, emb_w, rest8))
    return examples, dropped


def _featurize_phi_manager(
    datasets: PhiDatasets, cache: ManagerCache
) -> tuple[list[Example], int]:
    examples: list[Example] = []
    dropped = 0
    for head in datasets.phi0:
        instruction = datasets.instruction_for(head.task_key)
        candidates, emb_w, rest8 = cache.entry(instruction, head.state)
        wanted = tuple(sorted(head.subgoal.items()))
        target = next((i for i, c in enumerate(candidates) if c.subgoal == wanted), None)
        if target is None:
            dropped += 1
            continue
        goal_counts = {head.goal: 1}
        ctx_w = context_weights(cache.vocab, head.state, head.history, goal_counts)
        dyn = candidate_dynamic_features(candidates, head.state, goal_counts, instruction)
        examples.append(Example(instruction, ctx_w, dyn, target, emb_w, rest8))
    return examples, dropped


def _probe_accuracy(params: PolicyParams, examples: list[Example], limit: int = 512) -> float:
    probe = examples[:limit]
    if not probe:
        return 0.0
    hits = 0
    for it in probe:
        rest = np.concatenate([it.rest8, it.dyn], axis=1)
        probs = policy_distribution(params, it.ctx_w, it.cand_w, rest, use_shadow=True)
        if greedy_index(probs) == it.target:
            hits += 1
    return hits / len(probe)


def _run_pretrain(
    params: PolicyParams,
    examples: list[Example],
    val_examples: list[Example],
    batch_size: int,
    cfg: TrainConfig,
    seed: int,
    log: TrainLog,
    phase: str,
) -> tuple[float, float]:
    rng = random.Random(seed)
    loss = 0.0
    probe = val_examples if val_examples else examples
    for step in range(cfg.pretrain_steps):
        batch_items = rng.sample(examples, min(batch_size, len(examples)))
        batch = assemble_batch(batch_items)
        loss, grads = nll_and_grads(params.live, batch, params.temperature)
        sgd_step(params, grads, cfg.pretrain_lr)
        if (step + 1) % cfg.log_interval == 0 or step + 1 == cfg.pretrain_steps:
            acc = _probe_accuracy(params, probe)
            log.row(step + 1, phase, acc, loss, len(examples), seed)
    return loss, _probe_accuracy(params, probe)


def pretrain_employee(
    params: PolicyParams,
    datasets: PhiDatasets,
    cfg: TrainConfig,
    seed: int,
    log_path: Path | None = None,
    val_datasets: PhiDatasets | None = None,
) -> PretrainStats:
    cache = EmployeeCache(params.vocab)
    examples, dropped = _featurize_phi_employee(datasets, cache)
    if not examples:
        raise ValueError("no employee pretraining examples survived featurization")
    val_examples = (
        _featurize_phi_employee(val_datasets, cache)[0] if val_datasets is not None else []
    )
    with TrainLog(log_path) as log:
        loss, acc = _run_pretrain(
            params, examples, val_examples, cfg.employee_batch, cfg, seed, log,
            "pretrain-employee",
        )
    return PretrainStats(len(datasets.phi), len(examples), dropped, loss, acc)


def pretrain_manager(
    params: PolicyParams,
    datasets: PhiDatasets,
    cfg: TrainConfig,
    seed: int,
    log_path: Path | None = None,
    val_datasets: PhiDatasets | None = None,
    remap: ItemRemap = IDENTITY_REMAP,
) -> PretrainStats:
    cache = ManagerCache(params.vocab, cfg.mode, remap)
    examples, dropped = _featurize_phi_manager(datasets, cache)
    if not examples:
        raise ValueError("no manager pretraining examples survived featurization")
    val_examples = (
        _featurize_phi_manager(val_datasets, cache)[0] if val_datasets is not None else []
    )
    with TrainLog(log_path) as log:
        loss, acc = _run_pretrain(
            params, examples, val_examples, cfg.manager_batch, cfg, seed, log,
            "pretrain-manager",
        )
    return PretrainStats(len(datasets.phi0), len(examples), dropped, loss, acc)


# --------------------------------------------------------------------------
# rollout helpers
# --------------------------------------------------------------------------

def _retry_index(probs: np.ndarray, first: int, retry_mode: str, rng: random.Random | None) -> int:
    """Second pick after an invalid action. Greedy callers (rng None) take the
    runner-up; sampling callers resample or take next-best per config."""
    if rng is None or retry_mode == "next-best":
        order = np.argsort(-probs)
        for idx in order:
            if int(idx) != first:
                return int(idx)
        return first
    return sample_index(probs, rng)


def employee_step(
    params: PolicyParams,
    cache: EmployeeCache,
    instruction: Instruction,
    state: Inventory,
    history: tuple[Inventory, Inventory],
    subgoal: Subgoal,
    cfg: TrainConfig,
    rng: random.Random | None,
    use_shadow: bool,
):
    """Pick and apply one employee action, retrying once if it bounces.

    rng None selects greedily (evaluation); otherwise samples from the
    exploration-mixed distribution (training). Only the final attempt is
    recorded: returns (example, outcome).
    """
    candidates, _, emb_w, rest8 = cache.entry(instruction)
    ctx_w = context_weights(cache.vocab, state, history, subgoal)
    dyn = candidate_dynamic_features(candidates, state, subgoal, instruction)
    rest = np.concatenate([rest8, dyn], axis=1)
    probs = policy_distribution(
        params, ctx_w, emb_w, rest, use_shadow=use_shadow, training=rng is not None
    )
    idx = greedy_index(probs) if rng is None else sample_index(probs, rng)
    outcome = apply_action(state, candidates[idx].action, instruction)
    if not outcome.valid:
        idx = _retry_index(probs, idx, cfg.retry_mode, rng)
        outcome = apply_action(state, candidates[idx].action, instruction)
    example = Example(instruction, ctx_w, dyn, idx, emb_w, rest8)
    return example, outcome


def rollout_subgoal(
    params: PolicyParams,
    cache: EmployeeCache,
    instruction: Instruction,
    state: Inventory,
    subgoal: Subgoal,
    step_limit: int,
    cfg: TrainConfig,
    rng: random.Random | None,
    use_shadow: bool,
) -> tuple[list[Example], Inventory, bool, int]:
    """Employee pursuit of one subgoal in the real dynamics.

    Returns (trajectory, final state, achieved, steps used). A subgoal already
    satisfied at entry returns an empty trajectory.
    """
    if subgoal_achieved(state, subgoal):
        return [], state, True, 0
    history: tuple[Inventory, Inventory] = ({}, {})
    trajectory: list[Example] = []
    current = state
    for step in range(step_limit):
        example, outcome = employee_step(
            params, cache, instruction, current, history, subgoal, cfg, rng, use_shadow
        )
        trajectory.append(example)
        history = (current, history[0])
        current = outcome.next_state
        if subgoal_achieved(current, subgoal):
            return trajectory, current, True, step + 1
    return trajectory, current, False, step_limit


def make_employee_validator(datasets: PhiDatasets, cfg: TrainConfig) -> "ValFn":
    """Greedy shadow-policy subgoal success over held-out segment heads."""

    def val(params: PolicyParams) -> float:
        cache = EmployeeCache(params.vocab)
        heads = datasets.phi0[: cfg.val_episodes]
        if not heads:
            return 0.0
        step_limit = (
            cfg.non_hier_rollout_length if cfg.mode == "ultimate" else cfg.rollout_length
        )
        ok = 0
        for head in heads:
            instruction = datasets.instruction_for(head.task_key)
            _, _, achieved, _ = rollout_subgoal(
                params, cache, instruction, head.state, head.subgoal, step_limit, cfg,
                None, use_shadow=True,
            )
            ok += int(achieved)
        return ok / len(heads)

    return val


def make_employee_fn(
    params: PolicyParams,
    cache: EmployeeCache,
    rng: random.Random | None,
    use_shadow: bool = True,
):
    """Employee policy as a plain callable for the manager world model.
    rng None means greedy; otherwise softmax sampling without exploration."""

    def fn(state, history, subgoal, instruction):
        candidates, _, emb_w, rest8 = cache.entry(instruction)
        ctx_w = context_weights(cache.vocab, state, history, subgoal)
        dyn = candidate_dynamic_features(candidates, state, subgoal, instruction)
        rest = np.concatenate([rest8, dyn], axis=1)
        probs = policy_distribution(params, ctx_w, emb_w, rest, use_shadow=use_shadow)
        idx = greedy_index(probs) if rng is None else sample_index(probs, rng)
        return candidates[idx].action

    return fn


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------

ValFn = Callable[[PolicyParams], float]


@dataclass
class FinetuneStats:
    iterations: int = 0
    waves: int = 0
    skipped_updates: int = 0
    update_steps: int = 0
    last_success_rate: float = 0.0
    last_val: float = 0.0
    snapshots: dict[int, Path] = dataclasses.field(default_factory=dict)


def _push_wave(
    buffer: ReplayBuffer,
    trajectories: list[tuple[list[Example], bool]],
    cfg: TrainConfig,
    rng: random.Random,
) -> list[Example]:
    fresh: list[Example] = []
    for items, success in trajectories:
        if not items:
            continue
        if success:
            buffer.push_trajectory(items, success=True)
            fresh.extend(items)
        elif rng.random() < cfg.failed_keep_fraction:
            buffer.push_trajectory(items, success=False)
            fresh.extend(items)
    return fresh


def _employee_wave(
    params: PolicyParams,
    cache: EmployeeCache,
    datasets: PhiDatasets,
    cfg: TrainConfig,
    rng: random.Random,
) -> tuple[list[tuple[list[Example], bool]], int, int]:
    """One collection wave: each rollout re-pursues a randomly drawn segment
    head's subgoal from its recorded start state."""
    step_limit = (
        cfg.non_hier_rollout_length if cfg.mode == "ultimate" else cfg.rollout_length
    )
    trajectories: list[tuple[list[Example], bool]] = []
    successes = attempts = 0
    for _ in range(cfg.employee_rollouts):
        head = datasets.phi0[rng.randrange(len(datasets.phi0))]
        instruction = datasets.instruction_for(head.task_key)
        traj, _, achieved, _ = rollout_subgoal(
            params, cache, instruction, head.state, head.subgoal, step_limit, cfg, rng,
            use_shadow=False,
        )
        if not traj:
            continue  # head already satisfies its subgoal; nothing pursued
        attempts += 1
        successes += int(achieved)
        trajectories.append((traj, achieved))
    return trajectories, successes, attempts


def _finetune_loop(
    params: PolicyParams,
    wave_fn,
    batch_size: int,
    cfg: TrainConfig,
    seed: int,
    log_path: Path | None,
    phase: str,
    val_fn: ValFn | None,
    snapshot_prefix: Path | None = None,
) -> FinetuneStats:
    rng = random.Random(seed)
    buffer = ReplayBuffer(cfg.replay_capacity, rng)
    stats = FinetuneStats()
    fresh: list[Example] = []
    steps_since_wave = cfg.rollout_period  # roll immediately
    force_wave = True
    success_rate = 0.0
    snapshot_points = {}
    if snapshot_prefix is not None:
        snapshot_points = {
            max(1, round(cfg.finetune_iters * f / 100)): f for f in (25, 50, 75, 100)
        }
    with TrainLog(log_path) as log:
        for iteration in range(cfg.finetune_iters):
            stats.iterations = iteration + 1
            did_update = False
            loss = 0.0
            if force_wave or steps_since_wave >= cfg.rollout_period:
                trajectories, successes, attempts = wave_fn(params, rng)
                wave_fresh = _push_wave(buffer, trajectories, cfg, rng)
                if wave_fresh:
                    fresh = wave_fresh
                stats.waves += 1
                steps_since_wave = 0
                success_rate = successes / attempts if attempts else 0.0
                stats.last_success_rate = success_rate
                force_wave = successes == 0
                if force_wave:
                    # empty success set: skip the update, leave arrays untouched
                    stats.skipped_updates += 1
            if not force_wave and fresh:
                for _ in range(cfg.grad_steps_per_iter):
                    items, _ = buffer.draw_mixed(
                        batch_size, fresh, cfg.replay_mix, cfg.replay_enable_after
                    )
                    batch = assemble_batch(items)
                    loss, grads = nll_and_grads(params.live, batch, params.temperature)
                    sgd_step(params, grads, cfg.lr)
                    stats.update_steps += 1
                    steps_since_wave += 1
                did_update = True
            log.row(iteration, phase, success_rate, loss if did_update else 0.0, len(buffer), seed)
            if val_fn is not None and (iteration + 1) % cfg.val_interval == 0:
                stats.last_val = val_fn(params)
                log.row(iteration, f"val-{phase}", stats.last_val, 0.0, len(buffer), seed)
            point = snapshot_points.get(iteration + 1)
            if point is not None:
                path = Path(f"{snapshot_prefix}-pct{point}.npz")
                save_checkpoint(params, path)
                stats.snapshots[point] = path
    return stats


def finetune_employee(
    params: PolicyParams,
    datasets: PhiDatasets,
    cfg: TrainConfig,
    seed: int,
    log_path: Path | None = None,
    val_fn: ValFn | None = None,
    snapshot_prefix: Path | None = None,
) -> FinetuneStats:
    """Rollout fine-tuning of the employee on segment-head subgoal pursuits."""
    if not datasets.phi0:
        raise ValueError("employee fine-tuning needs a non-empty segment-head set")
    cache = EmployeeCache(params.vocab)

    def wave(p: PolicyParams, rng: random.Random):
        return _employee_wave(p, cache, datasets, cfg, rng)

    return _finetune_loop(
        params, wave, cfg.employee_batch, cfg, seed, log_path,
        "finetune-employee", val_fn, snapshot_prefix,
    )


def _manager_wave(
    manager: PolicyParams,
    employee: PolicyParams,
    mcache: ManagerCache,
    ecache: EmployeeCache,
    datasets: PhiDatasets,
    cfg: TrainConfig,
    rng: random.Random,
) -> tuple[list[tuple[list[Example], bool]], int, int]:
    """One manager wave: from a drawn segment head's state, propose subgoals
    (the head's own label is unused) and simulate pursuit with the frozen
    employee inside the world model until the ultimate goal or the rollout
    length runs out."""
    employee_fn = make_employee_fn(employee, ecache, rng, use_shadow=True)
    trajectories: list[tuple[list[Example], bool]] = []
    successes = episodes = 0
    for _ in range(cfg.manager_rollouts):
        head = datasets.phi0[rng.randrange(len(datasets.phi0))]
        instruction = datasets.instruction_for(head.task_key)
        goal_counts = {instruction.goal: 1}
        state = head.state
        history = head.history
        traj: list[Example] = []
        success = ultimate_goal_achieved(state, instruction.goal)
        for _ in range(cfg.rollout_length):
            if success:
                break
            candidates, emb_w, rest8 = mcache.entry(instruction, state)
            ctx_w = context_weights(mcache.vocab, state, history, goal_counts)
            dyn = candidate_dynamic_features(candidates, state, goal_counts, instruction)
            rest = np.concatenate([rest8, dyn], axis=1)
            probs = policy_distribution(
                manager, ctx_w, emb_w, rest, use_shadow=False, training=True
            )
            idx = sample_index(probs, rng)
            traj.append(Example(instruction, ctx_w, dyn, idx, emb_w, rest8))
            subgoal = candidates[idx].subgoal_dict()
            result = mwm_step(state, subgoal, employee_fn, instruction, cfg.rollout_length)
            history = (state, history[0])
            state = result.final_state
            success = ultimate_goal_achieved(state, instruction.goal)
        episodes += 1
        successes += int(success)
        if traj:
            trajectories.append((traj, success))
    return trajectories, successes, episodes


def finetune_manager(
    manager: PolicyParams,
    employee: PolicyParams,
    datasets: PhiDatasets,
    cfg: TrainConfig,
    seed: int,
    log_path: Path | None = None,
    val_fn: ValFn | None = None,
    remap: ItemRemap = IDENTITY_REMAP,
) -> FinetuneStats:
    """Rollout fine-tuning of the manager against the frozen employee."""
    if not datasets.phi0:
        raise ValueError("manager fine-tuning needs a non-empty segment-head set")
    mcache = ManagerCache(manager.vocab, cfg.mode, remap)
    ecache = EmployeeCache(employee.vocab)

    def wave(p: PolicyParams, rng: random.Random):
        return _manager_wave(p, employee, mcache, ecache, datasets, cfg, rng)

    return _finetune_loop(
        manager, wave, cfg.manager_batch, cfg, seed, log_path,
        "finetune-manager", val_fn,
    )
