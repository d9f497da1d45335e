"""Comparison pipelines: reward prediction (RP, UDS+RP, PDS), goal prediction
with a hindsight-relabeled goal-conditioned policy, and the oracle-reward skyline.

Reward models are tabular stand-ins for learned networks: each member scores
(c, s) by kernel-smoothed evidence from its training pairs, so predictions
generalize to nearby cells (and nearby contexts for random_cells).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .coda import LabeledDataset
from .data import DynDataset, GoalDataset
from .envs import STAY, CgoEnv
from .mdp import PolicyTable

log = logging.getLogger(__name__)

SMOOTHING = 0.01
BANDWIDTH = 1.0
RP_PERCENTILE = 5.0
PDS_PERCENTILE = 15.0
PDS_ENSEMBLE = 10
PDS_KAPPA = 15.0
HER_RELABELS = 4


@dataclass(eq=False)
class RewardModel:
    """Ensemble of reward tables r_i(c, s) in [0, 1] with a labeling threshold."""

    members: np.ndarray  # (k, C, S)
    threshold: float
    kappa: float = 0.0
    name: str = ""

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.float64)
        if self.members.ndim != 3 or self.members.shape[0] < 1:
            raise ValueError("reward model needs a (k, C, S) member stack with k >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")

    @property
    def k(self) -> int:
        return self.members.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.members.std(axis=0) if self.k > 1 else np.zeros(self.members.shape[1:])

    @property
    def pessimistic(self) -> np.ndarray:
        return self.mean - self.kappa * self.std

    def labels(self) -> np.ndarray:
        """Positive where r_pess reaches the threshold (and is above zero)."""
        r = self.pessimistic
        return (r >= self.threshold) & (r > 0.0)

    def false_positive_rate(self, goal_member: np.ndarray, pairs=None) -> float:
        """Fraction of non-goal (c, s) pairs labeled positive (optionally a held-out subset)."""
        lab = self.labels()
        if pairs is None:
            neg = ~goal_member
            return float(lab[neg].mean()) if neg.any() else 0.0
        c, s = pairs
        return float(lab[c, s].mean()) if len(c) else 0.0


def _similarity(env: CgoEnv, bandwidth: float):
    """Kernel matrices over states (S, S) and contexts (C, C)."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    coords = np.array(env.state_cells, dtype=np.float64)
    d2 = ((coords[:, None] - coords[None]) ** 2).sum(-1)
    k_state = np.exp(-d2 / (2 * bandwidth**2))
    if env.relation.kind == "random_cells":
        anchors = np.array(env.context_cells, dtype=np.float64)
        c2 = ((anchors[:, None] - anchors[None]) ** 2).sum(-1)
        k_ctx = np.exp(-c2 / (2 * bandwidth**2))
    else:
        k_ctx = np.eye(env.n_contexts)
    return k_state, k_ctx


def _evidence(env: CgoEnv, c: np.ndarray, s: np.ndarray, bandwidth: float) -> np.ndarray:
    """Kernel-summed evidence E(c, s) of the given pairs, shape (C, S)."""
    k_state, k_ctx = _similarity(env, bandwidth)
    counts = np.zeros((env.n_contexts, env.mdp.n_states))
    np.add.at(counts, (c, s), 1.0)
    return k_ctx @ counts @ k_state


def _percentile_threshold(table: np.ndarray, goal: GoalDataset, q: float) -> float:
    return float(np.percentile(table[goal.c, goal.s], q))


def _check_goal(goal: GoalDataset) -> None:
    if len(goal) == 0:
        raise ValueError("goal dataset is empty")


def _member(E_pos: np.ndarray, E_neg, prior: np.ndarray, smoothing: float) -> np.ndarray:
    """Evidence-weighted average of the labels, smoothed toward a per-cell prior.

    Far from any training pair the prediction falls back to ``prior``, the
    member's analog of a randomly initialized network output.
    """
    return (E_pos + smoothing * prior) / (E_pos + E_neg + smoothing)


def fit_rp(
    env: CgoEnv,
    goal: GoalDataset,
    rng: np.random.Generator,
    smoothing: float = SMOOTHING,
    percentile: float = RP_PERCENTILE,
    bandwidth: float = BANDWIDTH,
) -> RewardModel:
    """Single positive-only reward table."""
    _check_goal(goal)
    E = _evidence(env, goal.c, goal.s, bandwidth)
    r = _member(E, 0.0, rng.random(E.shape), smoothing)
    return RewardModel(r[None], _percentile_threshold(r, goal, percentile), 0.0, "rp")


def fit_uds_rp(
    env: CgoEnv,
    goal: GoalDataset,
    dyn: DynDataset,
    rng: np.random.Generator,
    smoothing: float = SMOOTHING,
    percentile: float = RP_PERCENTILE,
    bandwidth: float = BANDWIDTH,
) -> RewardModel:
    """RP plus an equal number of zero-labeled (dyn state, goal context) pairs."""
    _check_goal(goal)
    if len(dyn) == 0:
        raise ValueError("UDS needs a non-empty pool of dynamics states for negatives")
    n = len(goal)
    neg_s = dyn.s[rng.integers(len(dyn), size=n)]
    neg_c = goal.c[rng.integers(n, size=n)]
    E_pos = _evidence(env, goal.c, goal.s, bandwidth)
    E_neg = _evidence(env, neg_c, neg_s, bandwidth)
    r = _member(E_pos, E_neg, rng.random(E_pos.shape), smoothing)
    return RewardModel(r[None], _percentile_threshold(r, goal, percentile), 0.0, "uds_rp")


def fit_pds(
    env: CgoEnv,
    goal: GoalDataset,
    rng: np.random.Generator,
    k_ensemble: int = PDS_ENSEMBLE,
    kappa: float = PDS_KAPPA,
    percentile: float = PDS_PERCENTILE,
    smoothing: float = SMOOTHING,
    bandwidth: float = BANDWIDTH,
) -> RewardModel:
    """Ensemble of RP tables, each on a bootstrap resample with its own prior,
    scored pessimistically by mean - kappa * std."""
    _check_goal(goal)
    if k_ensemble < 2:
        raise ValueError("PDS needs an ensemble of at least 2 members")
    n = len(goal)
    members = []
    for _ in range(k_ensemble):
        idx = rng.integers(n, size=n)
        E = _evidence(env, goal.c[idx], goal.s[idx], bandwidth)
        members.append(_member(E, 0.0, rng.random(E.shape), smoothing))
    model = RewardModel(np.stack(members), 0.0, kappa, "pds")
    model.threshold = _percentile_threshold(model.pessimistic, goal, percentile)
    return model


def _pair_contexts(dyn: DynDataset, contexts: np.ndarray):
    """Compact cross product of dyn triples with the context multiset."""
    if len(contexts) == 0:
        raise ValueError("no contexts to pair with")
    if len(dyn) == 0:
        raise ValueError("dynamics dataset is empty")
    triples, t_count = np.unique(np.stack([dyn.s, dyn.a, dyn.s_next], axis=1), axis=0, return_counts=True)
    ctx, c_count = np.unique(np.asarray(contexts, dtype=np.int64), return_counts=True)
    nt, nc = len(triples), len(ctx)
    return (
        np.repeat(triples[:, 0], nc),
        np.tile(ctx, nt),
        np.repeat(triples[:, 1], nc),
        np.repeat(triples[:, 2], nc),
        np.outer(t_count, c_count).ravel().astype(np.float64),
    )


def _label_table(table: np.ndarray, dyn: DynDataset, contexts, name: str) -> LabeledDataset:
    s, c, a, s2, w = _pair_contexts(dyn, contexts)
    pos = table[c, s2]
    return LabeledDataset(
        s, c, a, pos.astype(np.float64), s2, pos, w, dyn.n_states, dyn.n_actions, table.shape[0],
        meta={"kind": name, "positive_fraction": float(np.average(pos, weights=w))},
    )


def label_with_reward(model: RewardModel, dyn: DynDataset, contexts) -> LabeledDataset:
    """Pair every dyn record with the context multiset; r = 1 and terminal on predicted goals."""
    return _label_table(model.labels(), dyn, contexts, f"labeled_{model.name}")


def oracle_reward_label(env: CgoEnv, dyn: DynDataset, contexts) -> LabeledDataset:
    """Same pairing as :func:`label_with_reward` with the true goal membership."""
    return _label_table(env.mdp.goal_member, dyn, contexts, "labeled_oracle")


# ---------------------------------------------------------------------------
# goal prediction
# ---------------------------------------------------------------------------


def her_relabel(dyn: DynDataset, rng: np.random.Generator, relabels: int = HER_RELABELS) -> LabeledDataset:
    """Goal-conditioned tuples: each transition gets ``relabels`` future achieved states as goals.

    The "context" of the output is the goal state index; reward 1 and
    terminal when s' equals the goal.
    """
    if not dyn.has_episodes:
        raise ValueError("hindsight relabeling needs episode/step columns in the dynamics dataset")
    order = np.lexsort((dyn.step, dyn.episode))
    ep = dyn.episode[order]
    # last index (exclusive) of each record's episode in sorted order
    bounds = np.flatnonzero(np.diff(ep)) + 1
    ends = np.searchsorted(np.append(bounds, len(ep)), np.arange(len(ep)), side="right")
    end_of = np.append(bounds, len(ep))[ends]
    pos = np.arange(len(ep))
    span = end_of - pos
    j = pos[:, None] + (rng.random((len(ep), relabels)) * span[:, None]).astype(np.int64)
    s = np.repeat(dyn.s[order], relabels)
    a = np.repeat(dyn.a[order], relabels)
    s2 = np.repeat(dyn.s_next[order], relabels)
    g = dyn.s_next[order][j.ravel()]
    hit = s2 == g
    return LabeledDataset(
        s, g, a, hit.astype(np.float64), s2, hit, np.ones(len(s)), dyn.n_states, dyn.n_actions, dyn.n_states,
        meta={"kind": "her", "relabels": relabels},
    )


@dataclass(eq=False)
class GoalPredictor:
    """Smoothed conditional g(s | c) plus a goal-conditioned policy over (goal, s)."""

    goal_probs: np.ndarray  # (C, S)
    gc_policy: PolicyTable  # contexts are goal states
    stay_action: int | None = STAY
    meta: dict = field(default_factory=dict)

    def sample_goals(self, contexts, rng: np.random.Generator) -> np.ndarray:
        cum = np.cumsum(self.goal_probs[np.asarray(contexts)], axis=1)
        u = rng.random(len(cum))[:, None]
        return np.minimum((u > cum).sum(axis=1), self.goal_probs.shape[1] - 1)

    def infeasible(self, env: CgoEnv, contexts, goals) -> np.ndarray:
        """True where the sampled goal is outside the context's goal set."""
        return ~env.mdp.goal_member[np.asarray(contexts), np.asarray(goals)]


def fit_goal_prediction(
    goal: GoalDataset,
    dyn: DynDataset,
    solver,
    rng: np.random.Generator,
    smoothing: float = SMOOTHING,
    relabels: int = HER_RELABELS,
) -> GoalPredictor:
    """``solver`` maps a LabeledDataset to (QTable, PolicyTable)."""
    _check_goal(goal)
    counts = np.zeros((goal.n_contexts, goal.n_states))
    np.add.at(counts, (goal.c, goal.s), 1.0)
    probs = (counts + smoothing) / (counts + smoothing).sum(axis=1, keepdims=True)
    _, policy = solver(her_relabel(dyn, rng, relabels))
    return GoalPredictor(probs, policy, meta={"relabels": relabels, "smoothing": smoothing})


class GoalPredictionAgent:
    """Samples one goal per episode and follows the goal-conditioned policy toward it."""

    def __init__(self, predictor: GoalPredictor, env: CgoEnv | None = None):
        self.predictor = predictor
        self.env = env
        self.goals = np.zeros(0, dtype=np.int64)
        self.infeasible_count = 0

    def begin(self, contexts: np.ndarray, rng: np.random.Generator) -> None:
        self.goals = self.predictor.sample_goals(contexts, rng)
        if self.env is not None:
            self.infeasible_count += int(self.predictor.infeasible(self.env, contexts, self.goals).sum())

    def action_probs(self, states: np.ndarray, contexts: np.ndarray) -> np.ndarray:
        goals = self.goals
        probs = self.predictor.gc_policy.probs[goals, states].copy()
        stay = self.predictor.stay_action
        if stay is not None:
            at_goal = states == goals
            probs[at_goal] = 0.0
            probs[at_goal, stay] = 1.0
        return probs


def act_goal_prediction(agent: GoalPredictionAgent, context: int, state: int, episode_seed: int) -> int:
    """Single-step convenience: sample the episode goal from ``episode_seed`` and act greedily."""
    rng = np.random.default_rng(episode_seed)
    agent.begin(np.array([context]), rng)
    return int(np.argmax(agent.action_probs(np.array([state]), np.array([context]))[0]))


__all__ = [
    "GoalPredictionAgent",
    "GoalPredictor",
    "RewardModel",
    "act_goal_prediction",
    "fit_goal_prediction",
    "fit_pds",
    "fit_rp",
    "fit_uds_rp",
    "her_relabel",
    "label_with_reward",
    "oracle_reward_label",
]
