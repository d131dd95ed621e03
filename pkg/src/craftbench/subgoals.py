"""Subgoal decomposition, completion checking, and training-set extraction.

Four decomposition modes over demonstration trajectories:

* ``llm``: a transcription of a fixed program that parses the action lines,
  propagates ingredient requirements breadth-first from the goal with ceil
  division, and emits one single-item threshold per node in topological
  order. Its quirks (per-push requirement accumulation, last-recipe-wins) are
  preserved deliberately; do not "fix" them.
* ``hand``: the full inventory snapshot after every state-changing craft.
* ``no-quantity``: the llm mode with every threshold collapsed to 1.
* ``ultimate``: the single subgoal {goal: 1}, used by the non-hierarchical
  ablation.

Segmenting a trajectory against its subgoal list yields the transition-level
dataset (phi) and the segment-head dataset (phi0) used for training.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
import json
import random

from .env import Instruction, Inventory, normalize_inventory
from .grammar import CRAFT_RE, GET_RE, INGREDIENT_RE, strip_state_annotation
from .taskgen import TrajectoryRecord

Subgoal = dict[str, int]


# --------------------------------------------------------------------------
# tolerant demonstration-line parser (skips anything off-grammar)
# --------------------------------------------------------------------------

def parse_demo_line(line: str) -> dict:
    """Parse one demonstration line into a kind-tagged dict.

    Unlike the strict grammar parser this never raises: unparseable lines come
    back as {"kind": None} and malformed ingredient parts are skipped.
    """
    line = strip_state_annotation(line)
    m = CRAFT_RE.match(line)
    if m:
        ingredients = []
        for part in m.group(3).strip().rstrip(".").split(","):
            part = part.strip()
            pm = INGREDIENT_RE.match(part)
            if not pm:
                part = part.rstrip(".,;:")
                pm = INGREDIENT_RE.match(part)
            if pm:
                ingredients.append((int(pm.group(1)), pm.group(2).strip()))
        return {
            "kind": "craft",
            "out_qty": int(m.group(1)),
            "out_item": m.group(2).strip(),
            "ing": ingredients,
        }
    m = GET_RE.match(line)
    if m:
        return {"kind": "get", "qty": int(m.group(1)), "item": m.group(2).strip()}
    return {"kind": None}


# --------------------------------------------------------------------------
# decomposition modes
# --------------------------------------------------------------------------

def trajectory_requirements(
    recipes: dict[str, tuple[int, list[tuple[int, str]]]],
    goal_item: str,
    appearance: dict[str, int],
) -> tuple[dict[str, int], list[str]]:
    """Per-push requirement propagation plus topological node order.

    Requirements accumulate on every frontier push, so an ingredient consumed
    by several products counts each visit separately. Ties in the topological
    order break by first appearance in ``appearance``.
    """
    total_required: dict[str, int] = {goal_item: 1}
    frontier = deque([(goal_item, 1)])
    edges: dict[str, set[str]] = {}
    nodes: set[str] = set()
    pushes = 0
    while frontier:
        pushes += 1
        if pushes > 100_000:
            raise ValueError("recipe cycle in trajectory, requirements diverge")
        item, need_qty = frontier.popleft()
        nodes.add(item)
        if item in recipes:
            out_qty, ingredients = recipes[item]
            crafts_needed = math.ceil(need_qty / out_qty)
            for qty, ing_item in ingredients:
                req = qty * crafts_needed
                total_required[ing_item] = total_required.get(ing_item, 0) + req
                edges.setdefault(ing_item, set()).add(item)
                nodes.add(ing_item)
                if ing_item in recipes:
                    frontier.append((ing_item, req))

    def order_key(name: str) -> tuple[int, str]:
        return (appearance.get(name, len(appearance)), name)

    indeg = {n: 0 for n in nodes}
    for src in edges:
        for dst in edges[src]:
            indeg[dst] += 1
    queue = deque(sorted((n for n in nodes if indeg[n] == 0), key=order_key))
    topo: list[str] = []
    while queue:
        node = queue.popleft()
        topo.append(node)
        for nxt in sorted(edges.get(node, ()), key=order_key):
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                queue.append(nxt)
    return total_required, topo


def decompose_llm(goal_item: str, action_lines: list[str]) -> list[Subgoal]:
    """Derive single-item threshold subgoals from a trajectory's action lines.

    Returns one {item: total_required} per non-goal node of the goal's recipe
    closure in topological order, then {goal: 1}. A goal with no craft line in
    the trajectory short-circuits to [{goal: 1}].
    """
    recipes: dict[str, tuple[int, list[tuple[int, str]]]] = {}
    appearance: dict[str, int] = {}

    def note(name: str) -> None:
        if name not in appearance:
            appearance[name] = len(appearance)

    for line in action_lines:
        parsed = parse_demo_line(line)
        if parsed["kind"] == "craft":
            note(parsed["out_item"])
            for _, ing_item in parsed["ing"]:
                note(ing_item)
            recipes[parsed["out_item"]] = (parsed["out_qty"], parsed["ing"])
        elif parsed["kind"] == "get":
            note(parsed["item"])

    if goal_item not in recipes:
        return [{goal_item: 1}]

    total_required, topo = trajectory_requirements(recipes, goal_item, appearance)
    subgoals = [
        {name: total_required[name]}
        for name in topo
        if name != goal_item and total_required.get(name, 0) > 0
    ]
    subgoals.append({goal_item: 1})
    return subgoals


def subgoal_achieved(current_state: dict[str, int], subgoal_state: dict[str, int]) -> int:
    """1 when every item threshold in ``subgoal_state`` is met, else 0."""
    for item, req_qty in subgoal_state.items():
        if current_state.get(item, 0) < req_qty:
            return 0
    return 1


class EmptyDecompositionError(ValueError):
    pass


def decompose_hand(record: TrajectoryRecord) -> list[Subgoal]:
    """Snapshot subgoals: the full inventory after each state-changing craft.

    Crafts that left the state unchanged were rejected and contribute nothing.
    """
    prev: Inventory = {}
    subgoals: list[Subgoal] = []
    for action_text, post_state in record.steps:
        parsed = parse_demo_line(action_text)
        if parsed["kind"] == "craft" and post_state != prev:
            subgoals.append(dict(post_state))
        prev = post_state
    if not subgoals:
        raise EmptyDecompositionError(f"no crafting steps in record for {record.goal!r}")
    return subgoals


def strip_quantities(subgoal: Subgoal) -> Subgoal:
    """Collapse every threshold to 1 (presence only). Idempotent."""
    return {item: 1 for item in subgoal}


# --------------------------------------------------------------------------
# item-name remapping
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ItemRemap:
    """A fixed permutation over a p-fraction of item names. p=0 is identity."""

    p: float
    mapping: tuple[tuple[str, str], ...]

    def as_dict(self) -> dict[str, str]:
        return dict(self.mapping)

    def apply(self, name: str) -> str:
        return self.as_dict().get(name, name)


IDENTITY_REMAP = ItemRemap(0.0, ())


def sample_item_remap(items: tuple[str, ...], p: float, rng: random.Random) -> ItemRemap:
    """Sample the remap once; derangement over the chosen subset so every
    remapped name differs from its source."""
    if not 0 <= p <= 1:
        raise ValueError("p must be in [0, 1]")
    k = round(p * len(items))
    if p > 0 and k == 1:
        k = 2  # a single item cannot be deranged
    k = min(k, len(items))
    if k < 2:
        return ItemRemap(p, ())
    chosen = rng.sample(list(items), k)
    # single rotation cycle: no fixed points by construction
    mapping = tuple(
        sorted((chosen[i], chosen[(i + 1) % k]) for i in range(k))
    )
    return ItemRemap(p, mapping)


def remap_subgoal(subgoal: Subgoal, remap: ItemRemap) -> Subgoal:
    table = remap.as_dict()
    return {table.get(item, item): qty for item, qty in subgoal.items()}


def remap_subgoals(subgoals: list[Subgoal], remap: ItemRemap) -> list[Subgoal]:
    return [remap_subgoal(sg, remap) for sg in subgoals]


def save_remap(remap: ItemRemap, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# p={remap.p}\n")
        for source, target in remap.mapping:
            fh.write(f"{source}\t{target}\n")


def load_remap(path: Path) -> ItemRemap:
    p = 0.0
    mapping = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                p = float(line.split("=", 1)[1])
                continue
            source, target = line.split("\t")
            mapping.append((source, target))
    return ItemRemap(p, tuple(mapping))


# --------------------------------------------------------------------------
# trajectory segmentation and phi extraction
# --------------------------------------------------------------------------

def decompose_record(record: TrajectoryRecord, mode: str) -> list[Subgoal]:
    """True (environment-aligned) subgoals for a record under a mode."""
    if mode == "llm":
        return decompose_llm(record.goal, [a for a, _ in record.steps])
    if mode == "no-quantity":
        return [
            strip_quantities(sg)
            for sg in decompose_llm(record.goal, [a for a, _ in record.steps])
        ]
    if mode == "hand":
        return decompose_hand(record)
    if mode == "ultimate":
        return [{record.goal: 1}]
    raise ValueError(f"unknown decomposition mode {mode!r}")


def segment_trajectory(record: TrajectoryRecord, subgoals: list[Subgoal]) -> list[int] | None:
    """Boundary indices i_0=0 < i_1 < ... < i_N = M, or None if unalignable.

    Each subgoal claims the first state index at or after the previous
    boundary where it holds; a hit exactly at the previous boundary cannot
    grow the strictly increasing chain, so the record is unalignable.
    """
    states: list[Inventory] = [{}] + [post for _, post in record.steps]
    last = len(record.steps)
    boundaries = [0]
    for sg in subgoals:
        start = boundaries[-1]
        hit = None
        for i in range(start, last + 1):
            if subgoal_achieved(states[i], sg):
                hit = i
                break
        if hit is None or hit == start:
            return None
        boundaries.append(hit)
    if boundaries[-1] != last:
        return None
    return boundaries


@dataclass(frozen=True)
class PhiTransition:
    state: Inventory
    history: tuple[Inventory, Inventory]  # previous states, most recent first
    action: str
    subgoal: Subgoal
    task_key: int


@dataclass(frozen=True)
class PhiSegmentHead:
    state: Inventory
    history: tuple[Inventory, Inventory]  # previous boundary states
    subgoal: Subgoal
    goal: str
    task_key: int


@dataclass
class PhiDatasets:
    phi: list[PhiTransition] = field(default_factory=list)
    phi0: list[PhiSegmentHead] = field(default_factory=list)
    tasks: list[Instruction] = field(default_factory=list)

    def instruction_for(self, task_key: int) -> Instruction:
        return self.tasks[task_key]


@dataclass
class DecomposeStats:
    records_in: int = 0
    aligned: int = 0
    dropped_unalignable: int = 0
    dropped_empty: int = 0


def build_phi(
    records: list[TrajectoryRecord],
    mode: str = "llm",
    remap: ItemRemap = IDENTITY_REMAP,
) -> tuple[PhiDatasets, DecomposeStats]:
    """Segment every record with its true subgoals and compile phi and phi0.

    Segment boundaries always come from environment-aligned subgoals; the
    remap only rewrites the stored subgoal labels, which is what makes the
    remapped labels misleading downstream while boundaries stay well defined.
    Unalignable records are skipped and counted.
    """
    datasets = PhiDatasets()
    stats = DecomposeStats()
    task_index: dict[tuple, int] = {}
    for record in records:
        stats.records_in += 1
        try:
            true_subgoals = decompose_record(record, mode)
        except EmptyDecompositionError:
            stats.dropped_empty += 1
            continue
        boundaries = segment_trajectory(record, true_subgoals)
        if boundaries is None:
            stats.dropped_unalignable += 1
            continue
        stats.aligned += 1

        key = (record.goal, record.commands)
        if key not in task_index:
            task_index[key] = len(datasets.tasks)
            datasets.tasks.append(record.instruction())
        task_key = task_index[key]

        labels = remap_subgoals(true_subgoals, remap) if remap.mapping else true_subgoals
        states: list[Inventory] = [{}] + [post for _, post in record.steps]
        boundary_states = [states[i] for i in boundaries]
        for k, label in enumerate(labels):
            start, end = boundaries[k], boundaries[k + 1]
            head_history = (
                boundary_states[k - 1] if k >= 1 else {},
                boundary_states[k - 2] if k >= 2 else {},
            )
            datasets.phi0.append(
                PhiSegmentHead(states[start], head_history, dict(label), record.goal, task_key)
            )
            for j in range(start, end):
                history = (
                    states[j - 1] if j - 1 >= start else {},
                    states[j - 2] if j - 2 >= start else {},
                )
                datasets.phi.append(
                    PhiTransition(states[j], history, record.steps[j][0], dict(label), task_key)
                )
    return datasets, stats


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def save_phi(datasets: PhiDatasets, phi_path: Path, phi0_path: Path) -> None:
    commands = [instr.render_commands() for instr in datasets.tasks]
    goals = [instr.goal for instr in datasets.tasks]
    with open(phi_path, "w") as fh:
        for t in datasets.phi:
            fh.write(
                json.dumps(
                    {
                        "state": t.state,
                        "history": list(t.history),
                        "action": t.action,
                        "subgoal": t.subgoal,
                        "goal": goals[t.task_key],
                        "commands": list(commands[t.task_key]),
                    }
                )
                + "\n"
            )
    with open(phi0_path, "w") as fh:
        for h in datasets.phi0:
            fh.write(
                json.dumps(
                    {
                        "state": h.state,
                        "history": list(h.history),
                        "subgoal": h.subgoal,
                        "goal": h.goal,
                        "commands": list(commands[h.task_key]),
                    }
                )
                + "\n"
            )


def load_phi(phi_path: Path, phi0_path: Path) -> PhiDatasets:
    from .env import parse_recipe

    datasets = PhiDatasets()
    task_index: dict[tuple, int] = {}

    def task_key_for(goal: str, commands: tuple[str, ...]) -> int:
        key = (goal, commands)
        if key not in task_index:
            task_index[key] = len(datasets.tasks)
            datasets.tasks.append(Instruction(goal, tuple(parse_recipe(c) for c in commands)))
        return task_index[key]

    with open(phi_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            key = task_key_for(row["goal"], tuple(row["commands"]))
            datasets.phi.append(
                PhiTransition(
                    normalize_inventory(row["state"]),
                    tuple(normalize_inventory(h) for h in row["history"]),
                    row["action"],
                    row["subgoal"],
                    key,
                )
            )
    with open(phi0_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            key = task_key_for(row["goal"], tuple(row["commands"]))
            datasets.phi0.append(
                PhiSegmentHead(
                    normalize_inventory(row["state"]),
                    tuple(normalize_inventory(h) for h in row["history"]),
                    row["subgoal"],
                    row["goal"],
                    key,
                )
            )
    return datasets
