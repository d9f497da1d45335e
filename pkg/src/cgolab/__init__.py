"""Tabular toolkit for contextual goal-oriented offline RL with goal-data augmentation."""
from .coda import AugmentedBatchSampler, LabeledDataset, augment_compact, augment_full
from .mdp import AugmentedMdp, ContextualMdp, PolicyTable, build_augmented, extend_policy, restrict_policy
from .oracle import QTable, expected_return, policy_eval_exact, solve_optimal

__version__ = "0.1.0"

__all__ = [
    "AugmentedBatchSampler",
    "AugmentedMdp",
    "ContextualMdp",
    "LabeledDataset",
    "PolicyTable",
    "QTable",
    "augment_compact",
    "augment_full",
    "build_augmented",
    "expected_return",
    "extend_policy",
    "policy_eval_exact",
    "restrict_policy",
    "solve_optimal",
]
