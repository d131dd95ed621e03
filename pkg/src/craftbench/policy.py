"""Candidate-scoring policies for the employee and manager agents.

Both agents share one architecture: featurize the context (inventory, two
previous states, goal side) and every candidate, score each candidate with a
small two-layer network, and take a temperature softmax over the scores.
Candidates replace free-form generation, so the action space is always the
finite set enumerated from the instruction.

Gradients are written out by hand; the whole model is a few dense numpy
arrays, which keeps single-core training fast and checkpoints portable.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import Instruction, Inventory
from .grammar import Action
from .subgoals import (
    ItemRemap,
    IDENTITY_REMAP,
    Subgoal,
    remap_subgoal,
    subgoal_achieved,
    trajectory_requirements,
)

D_EMB = 16
N_CTX_BLOCKS = 4  # state, previous state, state before that, goal side
D_CTX = N_CTX_BLOCKS * D_EMB
D_CAND_STATIC = D_EMB + 6 + 2  # embedding, qty bucket one-hot, kind one-hot
D_CAND_DYNAMIC = 4  # satisfied, goal membership, normalized deficit, availability
D_CAND = D_CAND_STATIC + D_CAND_DYNAMIC
D_HIDDEN = 64
COUNT_CAP = 8

ARRAY_NAMES = ("embeddings", "layer1_W_ctx", "layer1_W_cand", "layer1_b", "layer2_w")
CHECKPOINT_VERSION = 1
UNK = "<unk>"


# --------------------------------------------------------------------------
# vocabulary and count encoding
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocab:
    items: tuple[str, ...]

    def __post_init__(self):
        if not self.items or self.items[0] != UNK:
            raise ValueError("vocab must start with the unknown token")

    @property
    def size(self) -> int:
        return len(self.items)

    def index(self, name: str) -> int:
        try:
            return self.items.index(name)
        except ValueError:
            return 0

    def weights(self, counts: dict[str, int]) -> np.ndarray:
        """Count-capped mixing weights: w[item] = min(count, 8) / 8."""
        row = np.zeros(self.size)
        for name, qty in counts.items():
            row[self._table.get(name, 0)] += min(qty, COUNT_CAP) / COUNT_CAP
        return row

    @property
    def _table(self) -> dict[str, int]:
        table = self.__dict__.get("_table_cache")
        if table is None:
            table = {name: i for i, name in enumerate(self.items)}
            self.__dict__["_table_cache"] = table
        return table


def build_vocab(item_names) -> Vocab:
    return Vocab((UNK, *sorted(set(item_names))))


def qty_bucket_onehot(qty: int) -> np.ndarray:
    # buckets: 1, 2, 3, 4, 5-8, 9+
    onehot = np.zeros(6)
    if qty <= 4:
        onehot[qty - 1] = 1.0
    elif qty <= 8:
        onehot[4] = 1.0
    else:
        onehot[5] = 1.0
    return onehot


# --------------------------------------------------------------------------
# candidates
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    """One scoreable option: a primitive action or a subgoal proposal."""

    kind: str  # "get" | "craft" | "subgoal"
    action: Action | None = None
    subgoal: tuple[tuple[str, int], ...] = ()

    @classmethod
    def from_action(cls, action: Action) -> "Candidate":
        return cls(action.kind, action=action)

    @classmethod
    def from_subgoal(cls, subgoal: Subgoal) -> "Candidate":
        return cls("subgoal", subgoal=tuple(sorted(subgoal.items())))

    def counts(self) -> dict[str, int]:
        if self.action is not None:
            return {self.action.item: self.action.qty}
        return dict(self.subgoal)

    def subgoal_dict(self) -> Subgoal:
        return dict(self.subgoal)

    def max_qty(self) -> int:
        return max(self.counts().values())


def enumerate_employee_candidates(instruction: Instruction) -> list[Candidate]:
    """All primitive actions the employee scores. State-independent.

    Crafts come verbatim from the instruction in listed order; gets cover each
    base item with every quantity that appears as a requirement for that item
    plus 1, ascending.
    """
    candidates = [Candidate.from_action(r.to_action()) for r in instruction.commands]
    qty_by_item: dict[str, set[int]] = {item: {1} for item in instruction.base_items}
    for recipe in instruction.commands:
        for qty, item in recipe.ingredients:
            if item in qty_by_item:
                qty_by_item[item].add(qty)
    for item in instruction.base_items:
        for qty in sorted(qty_by_item[item]):
            candidates.append(Candidate.from_action(Action("get", qty, item)))
    return candidates


def _instruction_appearance(instruction: Instruction) -> dict[str, int]:
    order: dict[str, int] = {}

    def note(name: str) -> None:
        if name not in order:
            order[name] = len(order)

    for recipe in instruction.commands:
        note(recipe.out_item)
        for _, item in recipe.ingredients:
            note(item)
    return order


def closure_subgoal_candidates(instruction: Instruction) -> list[Subgoal]:
    """Threshold subgoals from the instruction's requirement propagation.

    One {item: total_required} per node of the goal closure in topological
    order, with a {item: 1} variant when the total differs, ending in
    {goal: 1}.
    """
    recipes = {r.out_item: (r.out_qty, list(r.ingredients)) for r in instruction.commands}
    appearance = _instruction_appearance(instruction)
    if instruction.goal not in recipes:
        return [{instruction.goal: 1}]
    total_required, topo = trajectory_requirements(recipes, instruction.goal, appearance)
    out: list[Subgoal] = []
    for name in topo:
        if name == instruction.goal or total_required.get(name, 0) <= 0:
            continue
        out.append({name: total_required[name]})
        if total_required[name] != 1:
            out.append({name: 1})
    out.append({instruction.goal: 1})
    return out


def snapshot_subgoal_candidates(state: Inventory, instruction: Instruction) -> list[Subgoal]:
    """Reachable inventory snapshots: one recipe application from ``state``
    after fetching whatever base ingredients are missing. Recipes missing a
    craftable ingredient are skipped; {goal: 1} is always offered."""
    out: list[Subgoal] = []
    seen: set[tuple[tuple[str, int], ...]] = set()
    for recipe in instruction.commands:
        staged = dict(state)
        feasible = True
        for need, item in recipe.ingredients:
            if staged.get(item, 0) >= need:
                continue
            if item in instruction.base_items:
                staged[item] = need
            else:
                feasible = False
                break
        if not feasible:
            continue
        for need, item in recipe.ingredients:
            staged[item] -= need
            if staged[item] == 0:
                del staged[item]
        staged[recipe.out_item] = staged.get(recipe.out_item, 0) + recipe.out_qty
        key = tuple(sorted(staged.items()))
        if key not in seen:
            seen.add(key)
            out.append(staged)
    goal_sg = {instruction.goal: 1}
    key = tuple(sorted(goal_sg.items()))
    if key not in seen:
        out.append(goal_sg)
    return out


def enumerate_manager_candidates(
    state: Inventory,
    instruction: Instruction,
    mode: str = "llm",
    remap: ItemRemap = IDENTITY_REMAP,
) -> list[Candidate]:
    if mode in ("llm", "ultimate"):
        subgoals = closure_subgoal_candidates(instruction)
    elif mode == "no-quantity":
        subgoals = []
        seen = set()
        for sg in closure_subgoal_candidates(instruction):
            stripped = {item: 1 for item in sg}
            key = tuple(sorted(stripped.items()))
            if key not in seen:
                seen.add(key)
                subgoals.append(stripped)
    elif mode == "hand":
        subgoals = snapshot_subgoal_candidates(state, instruction)
    else:
        raise ValueError(f"unknown manager candidate mode {mode!r}")
    if remap.mapping:
        subgoals = [remap_subgoal(sg, remap) for sg in subgoals]
    return [Candidate.from_subgoal(sg) for sg in subgoals]


# --------------------------------------------------------------------------
# featurization
# --------------------------------------------------------------------------

def context_weights(
    vocab: Vocab,
    state: Inventory,
    history: tuple[Inventory, Inventory],
    goal_counts: dict[str, int],
) -> np.ndarray:
    """(4, V) mixing weights whose product with the embedding table is the
    context blocks: state, previous state, one before that, goal side."""
    return np.stack(
        [
            vocab.weights(state),
            vocab.weights(history[0]),
            vocab.weights(history[1]),
            vocab.weights(goal_counts),
        ]
    )


def candidate_static_features(
    vocab: Vocab, candidates: list[Candidate]
) -> tuple[np.ndarray, np.ndarray]:
    """State-independent candidate parts: (K, V) embedding weights and (K, 8)
    qty-bucket plus kind one-hots. Cacheable per instruction."""
    K = len(candidates)
    emb_w = np.zeros((K, vocab.size))
    rest = np.zeros((K, 8))
    for k, cand in enumerate(candidates):
        emb_w[k] = vocab.weights(cand.counts())
        rest[k, :6] = qty_bucket_onehot(cand.max_qty())
        if cand.kind == "get":
            rest[k, 6] = 1.0
        elif cand.kind == "craft":
            rest[k, 7] = 1.0
    return emb_w, rest


def _stocked_fraction(state: Inventory, ingredients: tuple[tuple[int, str], ...]) -> float:
    fracs = [min(state.get(item, 0), qty) / qty for qty, item in ingredients]
    return sum(fracs) / len(fracs)


def candidate_dynamic_features(
    candidates: list[Candidate],
    state: Inventory,
    goal_counts: dict[str, int],
    instruction: Instruction,
) -> np.ndarray:
    """(K, 4) per-example parts: satisfied, goal membership, normalized
    deficit, ingredient availability."""
    K = len(candidates)
    feats = np.zeros((K, 4))
    for k, cand in enumerate(candidates):
        if cand.action is not None:
            action = cand.action
            if action.kind == "craft":
                feats[k, 0] = float(
                    all(state.get(item, 0) >= qty for qty, item in action.ingredients)
                )
                feats[k, 3] = _stocked_fraction(state, action.ingredients)
            else:
                feats[k, 0] = 1.0
                feats[k, 3] = 1.0
            if action.item in goal_counts:
                feats[k, 1] = 1.0
                need = goal_counts[action.item]
                feats[k, 2] = max(0, need - state.get(action.item, 0)) / need
        else:
            sg = cand.subgoal_dict()
            feats[k, 0] = float(subgoal_achieved(state, sg))
            feats[k, 1] = float(any(item in goal_counts for item in sg))
            deficits = [max(0, q - state.get(i, 0)) / q for i, q in sg.items()]
            feats[k, 2] = sum(deficits) / len(deficits)
            avails = []
            for item in sg:
                recipe = instruction.recipe_by_item.get(item)
                avails.append(
                    1.0 if recipe is None else _stocked_fraction(state, recipe.ingredients)
                )
            feats[k, 3] = sum(avails) / len(avails)
    return feats


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass
class PolicyParams:
    role: str  # "employee" | "manager"
    vocab: Vocab
    temperature: float = 1.0
    epsilon: float = 0.1
    tau: float = 0.1
    live: dict[str, np.ndarray] = field(default_factory=dict)
    shadow: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self, use_shadow: bool) -> dict[str, np.ndarray]:
        return self.shadow if use_shadow else self.live

    def ema_update(self) -> None:
        for name in ARRAY_NAMES:
            self.shadow[name] = (1 - self.tau) * self.shadow[name] + self.tau * self.live[name]


def init_policy(
    role: str,
    vocab: Vocab,
    seed: int,
    temperature: float = 1.0,
    epsilon: float = 0.1,
    tau: float = 0.1,
) -> PolicyParams:
    rng = np.random.default_rng(seed)
    live = {
        "embeddings": rng.normal(0.0, 0.5, (vocab.size, D_EMB)),
        "layer1_W_ctx": rng.normal(0.0, 1.0 / np.sqrt(D_CTX), (D_HIDDEN, D_CTX)),
        "layer1_W_cand": rng.normal(0.0, 1.0 / np.sqrt(D_CAND), (D_HIDDEN, D_CAND)),
        "layer1_b": np.zeros(D_HIDDEN),
        "layer2_w": rng.normal(0.0, 1.0 / np.sqrt(D_HIDDEN), D_HIDDEN),
    }
    shadow = {name: arr.copy() for name, arr in live.items()}
    return PolicyParams(role, vocab, temperature, epsilon, tau, live, shadow)


def save_checkpoint(params: PolicyParams, path: Path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "role": params.role,
        "temperature": params.temperature,
        "epsilon": params.epsilon,
        "tau": params.tau,
        "vocab": list(params.vocab.items),
    }
    arrays = {name: params.live[name] for name in ARRAY_NAMES}
    arrays.update({f"shadow_{name}": params.shadow[name] for name in ARRAY_NAMES})
    np.savez(path, meta=np.asarray(json.dumps(meta)), **arrays)


def load_checkpoint(path: Path) -> PolicyParams:
    blob = np.load(path, allow_pickle=False)
    meta = json.loads(str(blob["meta"]))
    if meta["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['version']}")
    live = {name: blob[name] for name in ARRAY_NAMES}
    shadow = {name: blob[f"shadow_{name}"] for name in ARRAY_NAMES}
    return PolicyParams(
        meta["role"],
        Vocab(tuple(meta["vocab"])),
        meta["temperature"],
        meta["epsilon"],
        meta["tau"],
        live,
        shadow,
    )


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------

def softmax_probs(scores: np.ndarray, temperature: float, mask: np.ndarray | None = None) -> np.ndarray:
    """Temperature softmax, shifted by the row max so equal score differences
    give bitwise-equal distributions. Masked slots get probability zero."""
    scores = np.asarray(scores, dtype=np.float64)
    if mask is None:
        mask = np.ones(scores.shape, dtype=bool)
    shifted = np.where(mask, scores, -np.inf)
    z = (shifted - shifted.max(axis=-1, keepdims=True)) / temperature
    expz = np.where(mask, np.exp(z), 0.0)
    return expz / expz.sum(axis=-1, keepdims=True)


def score_candidates(
    arrays: dict[str, np.ndarray],
    ctx_w: np.ndarray,
    cand_w: np.ndarray,
    cand_rest: np.ndarray,
) -> np.ndarray:
    """Scores for one example: ctx_w (4, V), cand_w (K, V), cand_rest (K, 12)."""
    E = arrays["embeddings"]
    ctx = (ctx_w @ E).reshape(D_CTX)
    cand = np.concatenate([cand_w @ E, cand_rest], axis=1)
    pre = arrays["layer1_W_ctx"] @ ctx + cand @ arrays["layer1_W_cand"].T + arrays["layer1_b"]
    return np.maximum(pre, 0.0) @ arrays["layer2_w"]


def policy_distribution(
    params: PolicyParams,
    ctx_w: np.ndarray,
    cand_w: np.ndarray,
    cand_rest: np.ndarray,
    use_shadow: bool = False,
    training: bool = False,
) -> np.ndarray:
    """Candidate distribution. Training mode mixes in epsilon-uniform
    exploration; the loss always uses the pure (training=False) softmax."""
    scores = score_candidates(params.arrays(use_shadow), ctx_w, cand_w, cand_rest)
    probs = softmax_probs(scores, params.temperature)
    if training and params.epsilon > 0:
        probs = (1 - params.epsilon) * probs + params.epsilon / len(probs)
    return probs


def sample_index(probs: np.ndarray, rng: random.Random) -> int:
    r = rng.random()
    acc = 0.0
    for i, p in enumerate(probs):
        acc += p
        if r < acc:
            return i
    return len(probs) - 1


def greedy_index(probs: np.ndarray) -> int:
    return int(np.argmax(probs))


# --------------------------------------------------------------------------
# batched loss and gradients
# --------------------------------------------------------------------------

@dataclass
class Batch:
    """Padded candidate-scoring batch.

    ctx_w (B, 4, V), cand_w (B, Kmax, V), cand_rest (B, Kmax, 12),
    mask (B, Kmax) valid-candidate flags, target (B,) candidate index,
    loss_w (B,) per-example loss weights (0 filters an example out).
    """

    ctx_w: np.ndarray
    cand_w: np.ndarray
    cand_rest: np.ndarray
    mask: np.ndarray
    target: np.ndarray
    loss_w: np.ndarray


def pack_batch(examples: list[tuple[np.ndarray, np.ndarray, np.ndarray, int, float]]) -> Batch:
    """examples: (ctx_w, cand_w, cand_rest, target_index, loss_weight)."""
    B = len(examples)
    V = examples[0][0].shape[1]
    kmax = max(e[1].shape[0] for e in examples)
    ctx_w = np.zeros((B, N_CTX_BLOCKS, V))
    cand_w = np.zeros((B, kmax, V))
    cand_rest = np.zeros((B, kmax, D_CAND_STATIC - D_EMB + D_CAND_DYNAMIC))
    mask = np.zeros((B, kmax), dtype=bool)
    target = np.zeros(B, dtype=np.int64)
    loss_w = np.zeros(B)
    for b, (cw, kw, kr, t, w) in enumerate(examples):
        k = kw.shape[0]
        ctx_w[b] = cw
        cand_w[b, :k] = kw
        cand_rest[b, :k] = kr
        mask[b, :k] = True
        target[b] = t
        loss_w[b] = w
    return Batch(ctx_w, cand_w, cand_rest, mask, target, loss_w)


def nll_and_grads(
    arrays: dict[str, np.ndarray], batch: Batch, temperature: float
) -> tuple[float, dict[str, np.ndarray]]:
    """Batch-mean weighted NLL and gradients for every array:
    loss = (1/B) * sum_k w_k * -log p(chosen_k).

    The loss is on the pure softmax (no exploration mixing). Zero-weight
    examples flow forward but contribute nothing; an all-zero-weight batch
    returns zero loss and zero gradients (the caller's skip signal).
    """
    E = arrays["embeddings"]
    W_ctx, W_cand = arrays["layer1_W_ctx"], arrays["layer1_W_cand"]
    b1, w2 = arrays["layer1_b"], arrays["layer2_w"]
    B = batch.ctx_w.shape[0]

    ctx_blocks = batch.ctx_w @ E  # (B, 4, 16)
    ctx = ctx_blocks.reshape(B, D_CTX)
    cand = np.concatenate([batch.cand_w @ E, batch.cand_rest], axis=2)  # (B, K, 28)
    pre = ctx @ W_ctx.T  # (B, 64)
    pre = pre[:, None, :] + cand @ W_cand.T + b1  # (B, K, 64)
    h = np.maximum(pre, 0.0)
    scores = h @ w2  # (B, K)
    probs = softmax_probs(scores, temperature, batch.mask)

    total_w = float(batch.loss_w.sum())
    zero = {name: np.zeros_like(arrays[name]) for name in ARRAY_NAMES}
    if total_w <= 0:
        return 0.0, zero

    rows = np.arange(B)
    p_target = probs[rows, batch.target]
    nll = -np.log(np.maximum(p_target, 1e-300))
    loss = float((batch.loss_w * nll).sum() / B)

    dscore = probs.copy()
    dscore[rows, batch.target] -= 1.0
    dscore *= (batch.loss_w / B)[:, None] / temperature
    dscore[~batch.mask] = 0.0

    dh = dscore[:, :, None] * w2  # (B, K, 64)
    dpre = dh * (pre > 0)
    grads = dict(zero)
    grads["layer2_w"] = np.einsum("bk,bkh->h", dscore, h)
    grads["layer1_b"] = dpre.sum(axis=(0, 1))
    grads["layer1_W_cand"] = np.einsum("bkh,bkc->hc", dpre, cand)
    dctx_pre = dpre.sum(axis=1)  # (B, 64)
    grads["layer1_W_ctx"] = np.einsum("bh,bc->hc", dctx_pre, ctx)
    dctx = (dctx_pre @ W_ctx).reshape(B, N_CTX_BLOCKS, D_EMB)
    dcand = np.einsum("bkh,hc->bkc", dpre, W_cand)
    grads["embeddings"] = np.einsum("bqv,bqe->ve", batch.ctx_w, dctx) + np.einsum(
        "bkv,bke->ve", batch.cand_w, dcand[:, :, :D_EMB]
    )
    return loss, grads


def sgd_step(params: PolicyParams, grads: dict[str, np.ndarray], lr: float) -> None:
    """One plain SGD step on the live arrays followed by the shadow update."""
    for name in ARRAY_NAMES:
        params.live[name] -= lr * grads[name]
    params.ema_update()
