"""Hierarchical agents for a text crafting environment.

A manager proposes subgoals toward an ultimate goal; an employee executes
primitive get/craft actions toward each subgoal. Demonstration trajectories
are decomposed into subgoal-aligned segments, policies are pretrained on the
segments and fine-tuned with rollouts against simulated world dynamics.
"""

from .env import (
    Instruction,
    Recipe,
    apply_action,
    normalize_inventory,
    parse_recipe,
    ultimate_goal_achieved,
)
from .grammar import Action, ParseError, parse_action, render_action, render_state
from .harness import (
    EvalMetrics,
    evaluate,
    evaluate_fixed_sequence,
    evaluate_flat,
    run_ablations,
    run_hierarchical_episode,
    train_condition,
)
from .policy import (
    PolicyParams,
    build_vocab,
    init_policy,
    load_checkpoint,
    policy_distribution,
    save_checkpoint,
)
from .subgoals import (
    ItemRemap,
    build_phi,
    decompose_hand,
    decompose_llm,
    sample_item_remap,
    segment_trajectory,
    subgoal_achieved,
)
from .taskgen import (
    RecipeUniverse,
    TrajectoryRecord,
    UniverseConfig,
    build_recipe_universe,
    generate_dataset,
    load_records,
)
from .training import (
    TrainConfig,
    finetune_employee,
    finetune_manager,
    pretrain_employee,
    pretrain_manager,
)
from .worldmodel import ValidityClassifier, ewm_step, mwm_step

__version__ = "0.1.0"

__all__ = [
    "Action",
    "EvalMetrics",
    "Instruction",
    "ItemRemap",
    "ParseError",
    "PolicyParams",
    "Recipe",
    "RecipeUniverse",
    "TrainConfig",
    "TrajectoryRecord",
    "UniverseConfig",
    "ValidityClassifier",
    "apply_action",
    "build_phi",
    "build_recipe_universe",
    "build_vocab",
    "decompose_hand",
    "decompose_llm",
    "evaluate",
    "evaluate_fixed_sequence",
    "evaluate_flat",
    "ewm_step",
    "finetune_employee",
    "finetune_manager",
    "generate_dataset",
    "init_policy",
    "load_checkpoint",
    "load_records",
    "mwm_step",
    "normalize_inventory",
    "parse_action",
    "parse_recipe",
    "policy_distribution",
    "pretrain_employee",
    "pretrain_manager",
    "render_action",
    "render_state",
    "run_ablations",
    "run_hierarchical_episode",
    "sample_item_remap",
    "save_checkpoint",
    "segment_trajectory",
    "subgoal_achieved",
    "train_condition",
    "ultimate_goal_achieved",
]
