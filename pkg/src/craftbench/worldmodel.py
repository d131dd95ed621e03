"""World models: exact environment dynamics and an employee-backed model.

The environment world model is the crafting dynamics themselves; keeping it
as a thin wrapper preserves the seam where a learned model could be swapped
in. The manager world model answers "what state results from pursuing this
subgoal" by rolling the employee policy inside the environment model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .env import Instruction, Inventory, apply_action
from .grammar import Action
from .subgoals import Subgoal, subgoal_achieved

EMPLOYEE_STEP_LIMIT = 8

# employee_fn(state, history, subgoal, instruction) -> Action
EmployeeFn = Callable[[Inventory, tuple[Inventory, Inventory], Subgoal, Instruction], Action]


def ewm_step(state: Inventory, action: Action, instruction: Instruction) -> Inventory:
    """Predicted next state; exact by construction."""
    return apply_action(state, action, instruction).next_state


@dataclass(frozen=True)
class MwmResult:
    final_state: Inventory
    achieved: bool
    steps_used: int
    trace: tuple[tuple[Action, Inventory], ...]


def mwm_step(
    state: Inventory,
    subgoal: Subgoal,
    employee_fn: EmployeeFn,
    instruction: Instruction,
    step_limit: int = EMPLOYEE_STEP_LIMIT,
) -> MwmResult:
    """Roll the employee toward ``subgoal`` inside the environment model.

    Returns the reached state when the subgoal is achieved within the step
    limit, otherwise the initial state (the attempt is predicted to be a
    no-op). The trace records the attempt either way.
    """
    if subgoal_achieved(state, subgoal):
        return MwmResult(state, True, 0, ())
    current = state
    history: tuple[Inventory, Inventory] = ({}, {})
    trace: list[tuple[Action, Inventory]] = []
    for step in range(step_limit):
        action = employee_fn(current, history, subgoal, instruction)
        nxt = ewm_step(current, action, instruction)
        trace.append((action, nxt))
        history = (current, history[0])
        current = nxt
        if subgoal_achieved(current, subgoal):
            return MwmResult(current, True, step + 1, tuple(trace))
    return MwmResult(state, False, step_limit, tuple(trace))


class ValidityClassifier:
    """Logistic model over named transition features.

    Not load-bearing for control (the environment model is exact); it exists
    to quantify how linearly separable valid and invalid transitions are.
    """

    def __init__(self, lr: float = 0.5, epochs: int = 200, l2: float = 1e-4):
        self.lr = lr
        self.epochs = epochs
        self.l2 = l2
        self.feature_names: list[str] | None = None
        self.weights: np.ndarray | None = None
        self.bias: float = 0.0

    @staticmethod
    def featurize(
        state: Inventory, action: Action, instruction: Instruction
    ) -> tuple[list[str], np.ndarray]:
        names = [
            "is_craft",
            "is_get",
            "qty",
            "have_item_count",
            "ingredients_stocked",
            "command_listed",
            "is_base_item",
            "missing_ingredient_total",
        ]
        if action.kind == "craft":
            stocked = all(state.get(i, 0) >= q for i, q in action.ingredients)
            listed = instruction.has_matching_command(action)
            missing = sum(max(0, q - state.get(i, 0)) for i, q in action.ingredients)
            feats = [1.0, 0.0, action.qty, state.get(action.item, 0), float(stocked), float(listed), 0.0, float(missing)]
        else:
            feats = [
                0.0,
                1.0,
                action.qty,
                state.get(action.item, 0),
                0.0,
                0.0,
                float(action.item in instruction.base_items),
                0.0,
            ]
        return names, np.asarray(feats, dtype=np.float64)

    def fit(self, X: np.ndarray, y: Sequence[int]) -> "ValidityClassifier":
        X = np.asarray(X, dtype=np.float64)
        y_arr = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != y_arr.shape[0]:
            raise ValueError("X must be 2d with one label per row")
        if len(np.unique(y_arr)) < 2:
            raise ValueError("training labels contain a single class")
        mu, sigma = X.mean(axis=0), X.std(axis=0)
        sigma[sigma == 0] = 1.0
        self._mu, self._sigma = mu, sigma
        Xn = (X - mu) / sigma
        w = np.zeros(X.shape[1])
        b = 0.0
        n = X.shape[0]
        for _ in range(self.epochs):
            z = Xn @ w + b
            p = 1.0 / (1.0 + np.exp(-z))
            err = p - y_arr
            w -= self.lr * (Xn.T @ err / n + self.l2 * w)
            b -= self.lr * float(err.mean())
        self.weights, self.bias = w, b
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if self.weights is None:
            raise ValueError("classifier is not fitted")
        Xn = (np.asarray(X, dtype=np.float64) - self._mu) / self._sigma
        return 1.0 / (1.0 + np.exp(-(Xn @ self.weights + self.bias)))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    def save(self, path) -> None:
        if self.weights is None:
            raise ValueError("classifier is not fitted")
        np.savez(
            path,
            weights=self.weights,
            bias=np.asarray([self.bias]),
            mu=self._mu,
            sigma=self._sigma,
            feature_names=np.asarray(self.feature_names or [], dtype=object),
        )

    @classmethod
    def load(cls, path) -> "ValidityClassifier":
        blob = np.load(path, allow_pickle=True)
        clf = cls()
        clf.weights = blob["weights"]
        clf.bias = float(blob["bias"][0])
        clf._mu = blob["mu"]
        clf._sigma = blob["sigma"]
        clf.feature_names = [str(n) for n in blob["feature_names"]]
        return clf
