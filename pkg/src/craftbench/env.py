"""Deterministic crafting environment: inventory dynamics and goal detection.

State is an inventory, a mapping from item name to positive count. All
operations are pure: they take an inventory and return a new one, never
mutating the input. Insertion order of the returned dicts is first-acquisition
order, which keeps rendered states stable for golden files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

from .grammar import Action, render_action

Inventory = dict[str, int]


def normalize_inventory(counts: dict[str, int]) -> Inventory:
    """Copy ``counts`` dropping zero entries; rejects negative counts."""
    out: Inventory = {}
    for item, qty in counts.items():
        if qty < 0:
            raise ValueError(f"negative count for {item!r}")
        if qty > 0:
            out[item] = qty
    return out


def inventory_contains(inv: Inventory, needs: tuple[tuple[int, str], ...]) -> bool:
    return all(inv.get(item, 0) >= qty for qty, item in needs)


@dataclass(frozen=True)
class Recipe:
    """One crafting rule: consume ``ingredients``, produce ``out_qty`` of ``out_item``."""

    out_item: str
    out_qty: int
    ingredients: tuple[tuple[int, str], ...]

    def __post_init__(self):
        if self.out_qty < 1:
            raise ValueError("recipe output quantity must be >= 1")
        if not self.ingredients:
            raise ValueError("recipe requires at least one ingredient")
        for qty, item in self.ingredients:
            if qty < 1:
                raise ValueError("ingredient quantity must be >= 1")
            if item == self.out_item:
                raise ValueError("recipe output cannot be its own ingredient")

    def to_action(self) -> Action:
        return Action("craft", self.out_qty, self.out_item, self.ingredients)

    def render(self) -> str:
        return render_action(self.to_action())

    # ingredient multiset, for order-insensitive matching
    def ingredient_key(self) -> frozenset[tuple[str, int]]:
        totals: dict[str, int] = {}
        for qty, item in self.ingredients:
            totals[item] = totals.get(item, 0) + qty
        return frozenset(totals.items())


def recipe_from_action(action: Action) -> Recipe:
    if action.kind != "craft":
        raise ValueError("only craft actions describe recipes")
    return Recipe(action.item, action.qty, action.ingredients)


def parse_recipe(text: str) -> Recipe:
    from .grammar import parse_action

    return recipe_from_action(parse_action(text))


@dataclass(frozen=True)
class Instruction:
    """A task: the goal item plus the ordered crafting commands available."""

    goal: str
    commands: tuple[Recipe, ...]

    def __post_init__(self):
        if not any(r.out_item == self.goal for r in self.commands):
            raise ValueError(f"goal {self.goal!r} is not craftable from the commands")

    @cached_property
    def out_items(self) -> frozenset[str]:
        return frozenset(r.out_item for r in self.commands)

    @cached_property
    def base_items(self) -> tuple[str, ...]:
        """Gettable items: mentioned as an ingredient somewhere, never crafted.

        Order is first mention across commands, scanning ingredient lists in
        order, so downstream enumerations stay deterministic.
        """
        seen: list[str] = []
        for recipe in self.commands:
            for _, item in recipe.ingredients:
                if item not in self.out_items and item not in seen:
                    seen.append(item)
        return tuple(seen)

    @cached_property
    def _craft_index(self) -> frozenset[tuple[str, int, frozenset[tuple[str, int]]]]:
        return frozenset((r.out_item, r.out_qty, r.ingredient_key()) for r in self.commands)

    @cached_property
    def recipe_by_item(self) -> dict[str, "Recipe"]:
        """First listed recipe per output item."""
        table: dict[str, Recipe] = {}
        for recipe in self.commands:
            table.setdefault(recipe.out_item, recipe)
        return table

    def has_matching_command(self, action: Action) -> bool:
        """True when an identical recipe (item, qty, ingredient multiset) is listed."""
        key = (action.item, action.qty, recipe_from_action(action).ingredient_key())
        return key in self._craft_index

    def render_commands(self) -> tuple[str, ...]:
        return tuple(r.render() for r in self.commands)


@dataclass(frozen=True)
class StepOutcome:
    next_state: Inventory
    valid: bool
    done: bool
    reward: int


def ultimate_goal_achieved(state: Inventory, goal: str) -> bool:
    return state.get(goal, 0) >= 1


def apply_action(state: Inventory, action: Action, instruction: Instruction) -> StepOutcome:
    """Apply one action with exact set-operation dynamics.

    A craft is valid when an identical command is listed and every ingredient
    is stocked; a get is valid when the item is a base item. Invalid actions
    return the input state unchanged with valid=False.
    """
    if action.kind == "craft":
        if instruction.has_matching_command(action) and inventory_contains(
            state, action.ingredients
        ):
            nxt = dict(state)
            for qty, item in action.ingredients:
                remaining = nxt[item] - qty
                if remaining:
                    nxt[item] = remaining
                else:
                    del nxt[item]
            nxt[action.item] = nxt.get(action.item, 0) + action.qty
            done = ultimate_goal_achieved(nxt, instruction.goal)
            return StepOutcome(nxt, True, done, int(done))
    elif action.kind == "get":
        if action.item in instruction.base_items:
            nxt = dict(state)
            nxt[action.item] = nxt.get(action.item, 0) + action.qty
            done = ultimate_goal_achieved(nxt, instruction.goal)
            return StepOutcome(nxt, True, done, int(done))

    done = ultimate_goal_achieved(state, instruction.goal)
    return StepOutcome(dict(state), False, done, int(done))


DEFAULT_STEP_BUDGET = 30


@dataclass(frozen=True)
class EpisodeState:
    """Episode wrapper: inventory plus step accounting against a budget."""

    instruction: Instruction
    inventory: Inventory = field(default_factory=dict)
    steps_taken: int = 0
    budget: int = DEFAULT_STEP_BUDGET
    terminal: bool = False
    reward: int = 0


def new_episode(instruction: Instruction, budget: int = DEFAULT_STEP_BUDGET) -> EpisodeState:
    if budget < 0:
        raise ValueError("budget must be >= 0")
    done = ultimate_goal_achieved({}, instruction.goal)
    return EpisodeState(instruction, {}, 0, budget, done or budget == 0, int(done))


def run_episode_step(episode: EpisodeState, action: Action) -> EpisodeState:
    if episode.terminal:
        raise RuntimeError("cannot step a terminal episode")
    outcome = apply_action(episode.inventory, action, episode.instruction)
    steps = episode.steps_taken + 1
    terminal = outcome.done or steps >= episode.budget
    return EpisodeState(
        episode.instruction,
        outcome.next_state,
        steps,
        episode.budget,
        terminal,
        outcome.reward,
    )
