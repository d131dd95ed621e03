"""Synthetic recipe universes, tasks, optimal plans, and noisy demonstrations.

A universe is a DAG of recipes over invented two-word item names. Tasks pair a
goal with the recipes needed to craft it plus distractor recipes. Plans come
from pooled requirement propagation down the recipe tree, and demonstrations
are plans with validity-preserving noise injected at a configurable rate.
"""

from __future__ import annotations

import json
import math
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .env import (
    Instruction,
    Inventory,
    Recipe,
    apply_action,
    normalize_inventory,
    ultimate_goal_achieved,
)
from .grammar import Action, parse_action, render_action

_ADJECTIVES = (
    "amber", "basalt", "cedar", "copper", "dusk", "ember", "fern", "glacier",
    "hazel", "iron", "jade", "kelp", "lunar", "moss", "night", "ochre",
    "pine", "quartz", "river", "slate", "tidal", "umber", "velvet", "willow",
)

_NOUNS = (
    "gear", "ingot", "plank", "rod", "cloth", "brick", "lens", "bolt",
    "stone", "resin", "fiber", "shard", "pearl", "orb", "hide", "wax",
    "coil", "tile", "beam", "cord", "flask", "plate", "spool", "wedge",
)


class ConfigError(ValueError):
    pass


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class UniverseConfig:
    n_items: int = 20
    max_depth: int = 3
    max_ingredients: int = 3
    out_qty_min: int = 1
    out_qty_max: int = 4
    base_fraction: float = 0.4
    max_ingredient_qty: int = 3


@dataclass(frozen=True)
class RecipeUniverse:
    items: tuple[str, ...]
    recipes: tuple[Recipe, ...]
    depth: int

    @property
    def craftable_items(self) -> tuple[str, ...]:
        return tuple(r.out_item for r in self.recipes)

    @property
    def base_items(self) -> tuple[str, ...]:
        crafted = {r.out_item for r in self.recipes}
        return tuple(i for i in self.items if i not in crafted)

    def recipe_for(self, item: str) -> Recipe:
        for r in self.recipes:
            if r.out_item == item:
                return r
        raise KeyError(item)


@dataclass(frozen=True)
class Task:
    instruction: Instruction
    n_distractors: int


@dataclass(frozen=True)
class TrajectoryRecord:
    """One demonstration: goal, command strings, and (action, post-state) steps."""

    goal: str
    commands: tuple[str, ...]
    steps: tuple[tuple[str, Inventory], ...]

    def instruction(self) -> Instruction:
        from .env import parse_recipe

        return Instruction(self.goal, tuple(parse_recipe(c) for c in self.commands))

    def to_json(self) -> str:
        payload = {
            "goal": self.goal,
            "commands": list(self.commands),
            "steps": [[action, dict(state)] for action, state in self.steps],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, line: str) -> "TrajectoryRecord":
        payload = json.loads(line)
        steps = tuple(
            (action, normalize_inventory(state)) for action, state in payload["steps"]
        )
        return cls(payload["goal"], tuple(payload["commands"]), steps)


def save_universe(universe: RecipeUniverse, path: Path) -> None:
    payload = {
        "items": list(universe.items),
        "recipes": [r.render() for r in universe.recipes],
        "depth": universe.depth,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_universe(path: Path) -> RecipeUniverse:
    from .env import parse_recipe

    with open(path) as fh:
        payload = json.load(fh)
    return RecipeUniverse(
        tuple(payload["items"]),
        tuple(parse_recipe(line) for line in payload["recipes"]),
        payload["depth"],
    )


def item_depths(universe: RecipeUniverse) -> dict[str, int]:
    """Longest ingredient-chain length per item (base items are depth 0)."""
    recipes = {r.out_item: r for r in universe.recipes}
    depths: dict[str, int] = {}

    def depth_of(item: str, trail: tuple[str, ...] = ()) -> int:
        if item in trail:
            raise PlanningError(f"recipe cycle through {item!r}")
        if item not in recipes:
            return 0
        if item not in depths:
            depths[item] = 1 + max(
                depth_of(ing, trail + (item,)) for _, ing in recipes[item].ingredients
            )
        return depths[item]

    for item in universe.items:
        depth_of(item)
    return depths


def build_recipe_universe(cfg: UniverseConfig, seed: int) -> RecipeUniverse:
    """Sample an acyclic recipe universe. Same seed, same universe, byte for byte."""
    if cfg.n_items < 2:
        raise ConfigError("need at least 2 items")
    if cfg.max_depth < 1:
        raise ConfigError("max_depth must be >= 1")
    if cfg.max_ingredients < 1:
        raise ConfigError("max_ingredients must be >= 1")

    n_base = max(1, round(cfg.n_items * cfg.base_fraction))
    n_craft = cfg.n_items - n_base
    if n_craft < cfg.max_depth:
        raise ConfigError(
            f"cannot place a depth-{cfg.max_depth} chain with {n_craft} craftables"
        )

    rng = random.Random(seed)
    pool = [f"{a} {n}" for a in _ADJECTIVES for n in _NOUNS]
    rng.shuffle(pool)
    names = pool[: cfg.n_items]

    base = names[:n_base]
    craftables = names[n_base:]
    # guarantee the full chain length: one craftable pinned per depth level
    depths = list(range(1, cfg.max_depth + 1))
    depths += [rng.randint(1, cfg.max_depth) for _ in range(n_craft - cfg.max_depth)]

    by_depth: dict[int, list[str]] = {0: list(base)}
    for item, d in zip(craftables, depths):
        by_depth.setdefault(d, []).append(item)

    recipes = []
    for d in range(1, cfg.max_depth + 1):
        shallower = [i for dd in range(0, d) for i in by_depth.get(dd, [])]
        prev_level = by_depth.get(d - 1, [])
        for item in by_depth.get(d, []):
            k = rng.randint(1, cfg.max_ingredients)
            anchor = rng.choice(prev_level)  # forces chain length exactly d
            others = [i for i in shallower if i != anchor]
            rng.shuffle(others)
            chosen = [anchor] + others[: k - 1]
            ingredients = tuple(
                (rng.randint(1, cfg.max_ingredient_qty), ing) for ing in chosen
            )
            out_qty = rng.randint(cfg.out_qty_min, cfg.out_qty_max)
            recipes.append(Recipe(item, out_qty, ingredients))

    universe = RecipeUniverse(tuple(names), tuple(recipes), cfg.max_depth)
    assert max(item_depths(universe).values()) == cfg.max_depth
    return universe


def closure_recipes(recipes_by_item: dict[str, Recipe], goal: str) -> list[Recipe]:
    """Recipes reachable from the goal, in breadth-first discovery order."""
    if goal not in recipes_by_item:
        return []
    seen = {goal}
    order = [recipes_by_item[goal]]
    queue = deque([goal])
    while queue:
        item = queue.popleft()
        for _, ing in recipes_by_item[item].ingredients:
            if ing in recipes_by_item and ing not in seen:
                seen.add(ing)
                order.append(recipes_by_item[ing])
                queue.append(ing)
    return order


def make_task(
    universe: RecipeUniverse,
    goal: str,
    rng: random.Random,
    distractor_range: tuple[int, int] = (5, 15),
) -> Task:
    recipes_by_item = {r.out_item: r for r in universe.recipes}
    if goal not in recipes_by_item:
        raise ConfigError(f"goal {goal!r} is not craftable in this universe")
    needed = closure_recipes(recipes_by_item, goal)
    needed_items = {r.out_item for r in needed}
    pool = [r for r in universe.recipes if r.out_item not in needed_items]
    lo, hi = distractor_range
    n_distract = min(len(pool), rng.randint(lo, hi))
    commands = needed + rng.sample(pool, n_distract)
    rng.shuffle(commands)
    return Task(Instruction(goal, tuple(commands)), n_distract)


def plan_requirements(
    recipes_by_item: dict[str, Recipe], goal: str
) -> tuple[dict[str, int], dict[str, int], list[str], list[str]]:
    """Pooled requirement propagation from {goal: 1} down the recipe DAG.

    Each item's total demand is pooled across all consumers before the
    ceil-division into craft counts, so shared ingredients are not overcounted.
    Returns (need, crafts, base_order, craft_order) where craft_order lists
    craftables ingredients-first.
    """
    if goal not in recipes_by_item:
        return {goal: 1}, {}, [goal], []

    # closure nodes and consumer -> ingredient edges
    nodes = [goal]
    seen = {goal}
    queue = deque([goal])
    edges: dict[str, set[str]] = {}
    while queue:
        item = queue.popleft()
        if item not in recipes_by_item:
            continue
        for _, ing in recipes_by_item[item].ingredients:
            edges.setdefault(item, set()).add(ing)
            if ing not in seen:
                seen.add(ing)
                nodes.append(ing)
                if ing in recipes_by_item:
                    queue.append(ing)

    indeg = {n: 0 for n in nodes}
    for item in nodes:
        for ing in edges.get(item, ()):
            indeg[ing] += 1

    need: dict[str, int] = {goal: 1}
    crafts: dict[str, int] = {}
    base_order: list[str] = []
    craft_order_consumers_first: list[str] = []
    ready = deque([n for n in nodes if indeg[n] == 0])
    processed = 0
    while ready:
        item = ready.popleft()
        processed += 1
        if item in recipes_by_item:
            recipe = recipes_by_item[item]
            count = math.ceil(need.get(item, 0) / recipe.out_qty)
            crafts[item] = count
            craft_order_consumers_first.append(item)
            for qty, ing in recipe.ingredients:
                need[ing] = need.get(ing, 0) + qty * count
                indeg[ing] -= 1
                if indeg[ing] == 0:
                    ready.append(ing)
        else:
            base_order.append(item)
    if processed != len(nodes):
        raise PlanningError(f"recipe cycle blocks planning for {goal!r}")
    return need, crafts, base_order, list(reversed(craft_order_consumers_first))


def optimal_plan_for(commands: tuple[Recipe, ...], goal: str) -> list[Action]:
    """Minimal plan: one pooled get per base item, then crafts ingredients-first."""
    recipes_by_item = {r.out_item: r for r in commands}
    need, crafts, base_order, craft_order = plan_requirements(recipes_by_item, goal)
    plan = [Action("get", need[b], b) for b in base_order]
    for item in craft_order:
        plan.extend([recipes_by_item[item].to_action()] * crafts[item])
    return plan


def optimal_plan(task: Task) -> list[Action]:
    plan = optimal_plan_for(task.instruction.commands, task.instruction.goal)
    # sanity: the plan must replay to success
    state: Inventory = {}
    for action in plan:
        outcome = apply_action(state, action, task.instruction)
        if not outcome.valid:
            raise PlanningError(f"planned action invalid: {render_action(action)}")
        state = outcome.next_state
    if not ultimate_goal_achieved(state, task.instruction.goal):
        raise PlanningError(f"plan does not reach {task.instruction.goal!r}")
    return plan


def inject_noise(
    plan: list[Action],
    rate: float,
    instruction: Instruction,
    rng: random.Random,
) -> list[Action]:
    """Insert noise before each planned action with probability ``rate``.

    Noise is either a redundant get of a base item (70%) or a craft attempt
    whose ingredients are currently missing (30%), so replay success is
    preserved: gets only add items and the crafts are rejected no-ops.
    """
    if not 0 <= rate < 1:
        raise ValueError("rate must be in [0, 1)")
    if rate == 0:
        return list(plan)
    noisy: list[Action] = []
    state: Inventory = {}
    for action in plan:
        if rng.random() < rate:
            noise = _sample_noise_action(state, instruction, rng)
            noisy.append(noise)
            state = apply_action(state, noise, instruction).next_state
        noisy.append(action)
        state = apply_action(state, action, instruction).next_state
    return noisy


def _sample_noise_action(
    state: Inventory, instruction: Instruction, rng: random.Random
) -> Action:
    from .env import inventory_contains

    if rng.random() >= 0.7:
        invalid = [
            r for r in instruction.commands if not inventory_contains(state, r.ingredients)
        ]
        if invalid:
            return rng.choice(invalid).to_action()
    return Action("get", 1, rng.choice(instruction.base_items))


def record_from_plan(instruction: Instruction, plan: list[Action]) -> TrajectoryRecord:
    state: Inventory = {}
    steps = []
    for action in plan:
        state = apply_action(state, action, instruction).next_state
        steps.append((render_action(action), state))
    if not ultimate_goal_achieved(state, instruction.goal):
        raise PlanningError("trajectory does not reach the goal")
    return TrajectoryRecord(instruction.goal, instruction.render_commands(), tuple(steps))


def replay_record(record: TrajectoryRecord) -> bool:
    """Replay from empty inventory; True when every post-state matches and the
    final state holds the goal item."""
    instruction = record.instruction()
    state: Inventory = {}
    for action_text, expected in record.steps:
        action = parse_action(action_text)
        state = apply_action(state, action, instruction).next_state
        if state != expected:
            return False
    return ultimate_goal_achieved(state, record.goal)


@dataclass
class DatasetStats:
    skipped_full_split: int = 0
    signatures: int = 0


def generate_records(
    universe: RecipeUniverse,
    counts: tuple[int, int, int],
    seed: int,
    noise_rate: float = 0.1,
    distractor_range: tuple[int, int] = (5, 15),
) -> tuple[list[list[TrajectoryRecord]], DatasetStats]:
    """Generate train/val/test records with disjoint task signatures.

    A signature is (goal, set of command strings). New signatures fill splits
    in order, so later splits hold tasks never seen earlier; repeats of a known
    signature stay inside its original split.
    """
    rng = random.Random(seed)
    splits: list[list[TrajectoryRecord]] = [[], [], []]
    sig_to_split: dict[tuple, int] = {}
    stats = DatasetStats()
    craftables = universe.craftable_items
    total = sum(counts)
    attempts = 0
    while sum(len(s) for s in splits) < total:
        attempts += 1
        if attempts > 100 * total:
            raise ConfigError("task signature space too small for requested sizes")
        goal = rng.choice(craftables)
        task = make_task(universe, goal, rng, distractor_range)
        sig = (goal, tuple(sorted(task.instruction.render_commands())))
        if sig in sig_to_split:
            idx = sig_to_split[sig]
            if len(splits[idx]) >= counts[idx]:
                stats.skipped_full_split += 1
                continue
        else:
            idx = next(
                (i for i in range(3) if len(splits[i]) < counts[i]),
                None,
            )
            if idx is None:
                break
            sig_to_split[sig] = idx
            stats.signatures += 1
        plan = optimal_plan(task)
        noisy = inject_noise(plan, noise_rate, task.instruction, rng)
        splits[idx].append(record_from_plan(task.instruction, noisy))
    return splits, stats


def write_records(records: list[TrajectoryRecord], path: Path) -> None:
    try:
        with open(path, "w") as fh:
            for record in records:
                fh.write(record.to_json() + "\n")
    except OSError as exc:
        raise OSError(f"failed writing trajectory file {path}: {exc}") from exc


def load_records(path: Path) -> list[TrajectoryRecord]:
    try:
        with open(path) as fh:
            return [TrajectoryRecord.from_json(line) for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"failed reading trajectory file {path}: {exc}") from exc


def generate_dataset(
    universe: RecipeUniverse,
    n_train: int,
    n_val: int,
    n_test: int,
    seed: int,
    out_dir: Path,
    noise_rate: float = 0.1,
    distractor_range: tuple[int, int] = (5, 15),
) -> tuple[Path, Path, Path]:
    for n in (n_train, n_val, n_test):
        if n < 1:
            raise ConfigError("split sizes must be >= 1")
    splits, _ = generate_records(
        universe, (n_train, n_val, n_test), seed, noise_rate, distractor_range
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = (out_dir / "train.jsonl", out_dir / "val.jsonl", out_dir / "test.jsonl")
    for records, path in zip(splits, paths):
        write_records(records, path)
    return paths
