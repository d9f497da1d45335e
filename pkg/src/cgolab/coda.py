"""Contextual goal-oriented data augmentation.

Context-goal pairs become fictitious reward-1 transitions into s+ under the
action a+, and every dynamics transition is paired with every context of the
goal dataset as a reward-0 transition with its original action. The result
is a fully labeled dataset of the action-augmented MDP.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import DynDataset, GoalDataset

EAGER_LIMIT = 10_000_000


class LabeledTransition(NamedTuple):
    s: int
    c: int
    a: int
    r: float
    s_next: int
    terminal: bool

    @property
    def x(self) -> tuple:
        return (self.s, self.c)

    @property
    def x_next(self) -> tuple:
        return (self.s_next, self.c)


@dataclass(eq=False)
class LabeledDataset:
    """Column-oriented labeled transitions with a multiplicity weight per row.

    ``a == n_actions`` is a+ and ``s_next == n_states`` is s+.
    """

    s: np.ndarray
    c: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray
    weight: np.ndarray
    n_states: int
    n_actions: int
    n_contexts: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.int64)
        self.c = np.asarray(self.c, dtype=np.int64)
        self.a = np.asarray(self.a, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.s_next = np.asarray(self.s_next, dtype=np.int64)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        n = len(self.s)
        for name in ("c", "a", "r", "s_next", "terminal", "weight"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.s)

    @property
    def plus_action(self) -> int:
        return self.n_actions

    @property
    def total_weight(self) -> float:
        return float(self.weight.sum())

    def records(self) -> list:
        return [
            LabeledTransition(int(s), int(c), int(a), float(r), int(s2), bool(t))
            for s, c, a, r, s2, t in zip(self.s, self.c, self.a, self.r, self.s_next, self.terminal)
        ]

    def take(self, mask) -> "LabeledDataset":
        return LabeledDataset(
            self.s[mask], self.c[mask], self.a[mask], self.r[mask], self.s_next[mask],
            self.terminal[mask], self.weight[mask], self.n_states, self.n_actions, self.n_contexts,
            dict(self.meta),
        )

    def split_by_kind(self):
        """(zero-reward real-action rows, fictitious a+ rows)."""
        plus = self.a == self.plus_action
        return self.take(~plus), self.take(plus)

    @classmethod
    def concat(cls, parts) -> "LabeledDataset":
        first = parts[0]
        cols = {k: np.concatenate([getattr(p, k) for p in parts]) for k in ("s", "c", "a", "r", "s_next", "terminal", "weight")}
        return cls(**cols, n_states=first.n_states, n_actions=first.n_actions, n_contexts=first.n_contexts, meta=dict(first.meta))


def _check_sources(dyn: DynDataset, goal: GoalDataset) -> None:
    if len(goal) == 0:
        raise ValueError("goal dataset is empty; there are no contexts to pair with")
    if len(dyn) == 0:
        raise ValueError("dynamics dataset is empty")
    if dyn.n_states != goal.n_states:
        raise ValueError("dyn and goal datasets disagree on the number of states")


def _goal_part(dyn: DynDataset, goal: GoalDataset, weight) -> LabeledDataset:
    n = len(goal)
    return LabeledDataset(
        s=goal.s,
        c=goal.c,
        a=np.full(n, dyn.n_actions),
        r=np.ones(n),
        s_next=np.full(n, dyn.n_states),
        terminal=np.ones(n, dtype=bool),
        weight=np.broadcast_to(np.asarray(weight, dtype=np.float64), (n,)).copy(),
        n_states=dyn.n_states,
        n_actions=dyn.n_actions,
        n_contexts=goal.n_contexts,
        meta={"kind": "coda_goal"},
    )


def augment_full(dyn: DynDataset, goal: GoalDataset):
    """Materialize (D-bar_dyn, D-bar_goal) tuple by tuple.

    D-bar_dyn is the full cross product in record order: for each dynamics
    record, one tuple per goal-dataset row (duplicate contexts kept).
    """
    _check_sources(dyn, goal)
    n_dyn, n_goal = len(dyn), len(goal)
    if n_dyn * n_goal > EAGER_LIMIT:
        raise ValueError(
            f"|D_dyn| * |D_goal| = {n_dyn * n_goal} exceeds {EAGER_LIMIT}; use augment_compact or the sampler"
        )
    rows = n_dyn * n_goal
    dyn_bar = LabeledDataset(
        s=np.repeat(dyn.s, n_goal),
        c=np.tile(goal.c, n_dyn),
        a=np.repeat(dyn.a, n_goal),
        r=np.zeros(rows),
        s_next=np.repeat(dyn.s_next, n_goal),
        terminal=np.zeros(rows, dtype=bool),
        weight=np.ones(rows),
        n_states=dyn.n_states,
        n_actions=dyn.n_actions,
        n_contexts=goal.n_contexts,
        meta={"kind": "coda_dyn"},
    )
    return dyn_bar, _goal_part(dyn, goal, 1.0)


def augment_compact(dyn: DynDataset, goal: GoalDataset) -> LabeledDataset:
    """Same multiset as :func:`augment_full`, with duplicates folded into weights.

    Unique (s, a, s') triples are crossed with unique contexts; each row's
    weight is count(s, a, s') * count(c). Goal rows are folded the same way.
    """
    _check_sources(dyn, goal)
    triples, t_count = np.unique(np.stack([dyn.s, dyn.a, dyn.s_next], axis=1), axis=0, return_counts=True)
    ctx, c_count = np.unique(goal.c, return_counts=True)
    nt, nc = len(triples), len(ctx)
    dyn_part = LabeledDataset(
        s=np.repeat(triples[:, 0], nc),
        c=np.tile(ctx, nt),
        a=np.repeat(triples[:, 1], nc),
        r=np.zeros(nt * nc),
        s_next=np.repeat(triples[:, 2], nc),
        terminal=np.zeros(nt * nc, dtype=bool),
        weight=np.outer(t_count, c_count).ravel().astype(np.float64),
        n_states=dyn.n_states,
        n_actions=dyn.n_actions,
        n_contexts=goal.n_contexts,
    )
    pairs, p_count = np.unique(np.stack([goal.c, goal.s], axis=1), axis=0, return_counts=True)
    folded = GoalDataset(pairs[:, 0], pairs[:, 1], goal.n_states, goal.n_contexts)
    out = LabeledDataset.concat([dyn_part, _goal_part(dyn, folded, p_count)])
    out.meta = {"kind": "coda_compact", "n_dyn": len(dyn), "n_goal": len(goal)}
    return out


class AugmentedBatchSampler:
    """Lazy minibatch form of the augmentation.

    Each slot is a fictitious goal tuple with probability ``goal_ratio``,
    otherwise a uniform dynamics record paired with the context of a uniform
    goal-dataset row.
    """

    def __init__(self, dyn: DynDataset, goal: GoalDataset, goal_ratio: float = 0.5, rng=None):
        _check_sources(dyn, goal)
        if not 0.0 < goal_ratio < 1.0:
            raise ValueError(
                f"goal_ratio must lie strictly between 0 and 1, got {goal_ratio}; "
                "0 leaves no supervision signal and 1 leaves no dynamics"
            )
        self.dyn = dyn
        self.goal = goal
        self.goal_ratio = float(goal_ratio)
        self.rng = rng if rng is not None else np.random.default_rng()

    def spawn(self, n: int = 1) -> list:
        """Independent clones sharing the (read-only) sources."""
        out = []
        for child in self.rng.spawn(n):
            clone = copy.copy(self)
            clone.rng = child
            out.append(clone)
        return out

    def sample(self, batch_size: int) -> LabeledDataset:
        if batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        rng = self.rng
        dyn, goal = self.dyn, self.goal
        is_goal = rng.random(batch_size) < self.goal_ratio
        n_goal = int(is_goal.sum())
        n_dyn = batch_size - n_goal
        gi = rng.integers(len(goal), size=n_goal)
        di = rng.integers(len(dyn), size=n_dyn)
        ci = rng.integers(len(goal), size=n_dyn)

        s = np.empty(batch_size, dtype=np.int64)
        c = np.empty(batch_size, dtype=np.int64)
        a = np.empty(batch_size, dtype=np.int64)
        s2 = np.empty(batch_size, dtype=np.int64)
        s[is_goal], c[is_goal] = goal.s[gi], goal.c[gi]
        a[is_goal], s2[is_goal] = dyn.n_actions, dyn.n_states
        s[~is_goal], a[~is_goal], s2[~is_goal] = dyn.s[di], dyn.a[di], dyn.s_next[di]
        c[~is_goal] = goal.c[ci]
        out = LabeledDataset(
            s, c, a, is_goal.astype(np.float64), s2, is_goal.copy(), np.ones(batch_size),
            dyn.n_states, dyn.n_actions, goal.n_contexts,
        )
        out.meta = {"kind": "coda_batch", "dyn_index": di, "context_index": ci}
        return out

    def distribution(self) -> LabeledDataset:
        """The exact per-tuple sampling probabilities as a weighted dataset."""
        compact = augment_compact(self.dyn, self.goal)
        plus = compact.a == compact.plus_action
        w = compact.weight.copy()
        w[plus] *= self.goal_ratio / w[plus].sum()
        w[~plus] *= (1.0 - self.goal_ratio) / w[~plus].sum()
        compact.weight = w
        compact.meta = dict(compact.meta, kind="coda_distribution", goal_ratio=self.goal_ratio)
        return compact


def sample_batch(sampler: AugmentedBatchSampler, batch_size: int) -> list:
    return sampler.sample(batch_size).records()


__all__ = [
    "AugmentedBatchSampler",
    "EAGER_LIMIT",
    "LabeledDataset",
    "LabeledTransition",
    "augment_compact",
    "augment_full",
    "sample_batch",
]
