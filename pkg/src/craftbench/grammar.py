"""Action grammar for the crafting environment.

Two action forms exist, rendered canonically as:

    get <uint> <item>
    craft <uint> <item> using <uint> <item>(, <uint> <item>)*

where ``<item>`` matches ``[a-z][a-z ]*`` with single internal spaces and no
leading or trailing whitespace. The parser tolerates a trailing inventory
annotation (", {...}") and stray trailing punctuation, which appear in
demonstration transcripts, but rendering always emits the canonical form so
that parse and render round-trip exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

CRAFT_RE = re.compile(r"^craft\s+(\d+)\s+([a-z ]+?)\s+using\s+(.+)$")
GET_RE = re.compile(r"^get\s+(\d+)\s+([a-z ]+?)$")
INGREDIENT_RE = re.compile(r"^(\d+)\s+([a-z ]+?)$")

# canonical item names: lowercase words, single spaces, no edge spaces
ITEM_NAME_RE = re.compile(r"^[a-z]+(?: [a-z]+)*$")


class ParseError(ValueError):
    """Raised for text that does not match the action grammar."""

    def __init__(self, text: str, reason: str = "unparseable action"):
        self.text = text
        self.reason = reason
        super().__init__(f"{reason}: {text!r}")


@dataclass(frozen=True)
class Action:
    """A primitive command: ``get`` fetches a base item, ``craft`` applies a recipe.

    For ``get``, ``qty``/``item`` are the fetched count and item. For ``craft``
    they are the produced count and item, and ``ingredients`` lists the
    consumed (qty, item) pairs in recipe order.
    """

    kind: str  # "get" or "craft"
    qty: int
    item: str
    ingredients: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        if self.kind not in ("get", "craft"):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.qty < 1:
            raise ValueError("action quantity must be >= 1")
        if self.kind == "craft" and not self.ingredients:
            raise ValueError("craft action requires ingredients")
        if self.kind == "get" and self.ingredients:
            raise ValueError("get action takes no ingredients")


def strip_state_annotation(line: str) -> str:
    """Drop a trailing ", {...}" inventory annotation, if present."""
    line = line.strip()
    idx = line.find(", {")
    if idx >= 0:
        line = line[:idx].strip()
    return line


def render_action(action: Action) -> str:
    if action.kind == "get":
        return f"get {action.qty} {action.item}"
    parts = ", ".join(f"{q} {item}" for q, item in action.ingredients)
    return f"craft {action.qty} {action.item} using {parts}"


def _parse_item_name(name: str, text: str) -> str:
    name = name.strip()
    if not ITEM_NAME_RE.match(name):
        raise ParseError(text, f"bad item name {name!r}")
    return name


def parse_action(text: str) -> Action:
    """Parse one action line; raises ParseError on anything off-grammar.

    Trailing state annotations and trailing punctuation are stripped first.
    Quantities must be positive integers; a craft line must carry at least one
    well-formed ingredient and every comma-separated part must parse.
    """
    line = strip_state_annotation(text).rstrip(".,;:").strip()

    m = CRAFT_RE.match(line)
    if m:
        out_qty = int(m.group(1))
        out_item = _parse_item_name(m.group(2), text)
        if out_qty < 1:
            raise ParseError(text, "craft quantity must be >= 1")
        ingredients = []
        for part in m.group(3).split(","):
            part = part.strip().rstrip(".,;:")
            pm = INGREDIENT_RE.match(part)
            if not pm:
                raise ParseError(text, f"bad ingredient {part!r}")
            qty = int(pm.group(1))
            if qty < 1:
                raise ParseError(text, "ingredient quantity must be >= 1")
            ingredients.append((qty, _parse_item_name(pm.group(2), text)))
        return Action("craft", out_qty, out_item, tuple(ingredients))

    m = GET_RE.match(line)
    if m:
        qty = int(m.group(1))
        if qty < 1:
            raise ParseError(text, "get quantity must be >= 1")
        return Action("get", qty, _parse_item_name(m.group(2), text))

    raise ParseError(text)


def render_state(counts: dict[str, int]) -> str:
    """Render an inventory as "{'item': n, ...}" in insertion order."""
    inner = ", ".join(f"'{item}': {qty}" for item, qty in counts.items())
    return "{" + inner + "}"
