"""Exact dynamic-programming ground truth and equivalence checks.

Everything here works on the full transition tables; nothing is estimated.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mdp import (
    AugmentedMdp,
    ContextualMdp,
    MdpError,
    Model,
    NORM_TOL,
    PolicyTable,
    build_augmented,
    extend_policy,
    restrict_policy,
)

LINEAR_SOLVE_MAX_STATES = 2000
RESIDUAL_TOL = 1e-10
TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class QTable:
    """Action values Q(c, s, a) laid out as ``(C, S+1, n_actions)``."""

    values: np.ndarray
    augmented: bool = False

    def state_values(self, pi: PolicyTable) -> np.ndarray:
        """V(x) = Q(x, pi), shape ``(C, S+1)``."""
        return np.einsum("csa,csa->cs", self.values, pi.probs)

    def to_dict(self) -> dict:
        return {
            "augmented": self.augmented,
            "shape": list(self.values.shape),
            "values": self.values.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "QTable":
        return cls(np.asarray(doc["values"], dtype=np.float64).reshape(doc["shape"]), bool(doc["augmented"]))


# ---------------------------------------------------------------------------
# policy evaluation
# ---------------------------------------------------------------------------


def _system(model: Model, pi: PolicyTable):
    """Per-context linear system V = b + gamma * M V over the real states."""
    base = model.base if isinstance(model, AugmentedMdp) else model
    P = base.transition
    S, A = base.n_states, base.n_actions
    goal = base.goal_member.astype(np.float64)
    probs = pi.probs[:, :S, :]
    M = np.einsum("csa,sat->cst", probs[:, :, :A], P)
    if isinstance(model, AugmentedMdp):
        b = probs[:, :, A] * goal
    else:
        # goal states collect R = 1 and then leave for s+
        M = M * (1.0 - goal)[:, :, None]
        b = goal
    return M, b


def _q_from_v(model: Model, V: np.ndarray) -> np.ndarray:
    base = model.base if isinstance(model, AugmentedMdp) else model
    S, A = base.n_states, base.n_actions
    gamma = base.discount
    goal = base.goal_member.astype(np.float64)
    nxt = gamma * np.einsum("sat,ct->csa", base.transition, V)
    Q = np.zeros((base.n_contexts, S + 1, model.n_actions))
    if isinstance(model, AugmentedMdp):
        Q[:, :S, :A] = nxt
        Q[:, :S, A] = goal
    else:
        Q[:, :S, :] = goal[:, :, None] + (1.0 - goal)[:, :, None] * nxt
    return Q


def _value_iteration(M: np.ndarray, b: np.ndarray, gamma: float, tol: float) -> np.ndarray:
    V = np.zeros_like(b)
    for _ in range(1_000_000):
        V_new = b + gamma * np.einsum("cst,ct->cs", M, V)
        if np.abs(V_new - V).max() <= tol * (1.0 - gamma):
            return V_new
        V = V_new
    raise RuntimeError("value iteration did not converge")


def policy_eval_exact(model: Model, pi: PolicyTable, method: str = "auto") -> QTable:
    """Q^pi by a per-context linear solve (or value iteration for large state spaces)."""
    pi.check_compatible(model)
    base = model.base if isinstance(model, AugmentedMdp) else model
    M, b = _system(model, pi)
    if method == "auto":
        method = "solve" if base.n_states <= LINEAR_SOLVE_MAX_STATES else "iterate"
    if method == "solve":
        eye = np.eye(base.n_states)[None]
        V = np.linalg.solve(eye - base.discount * M, b[..., None])[..., 0]
    elif method == "iterate":
        V = _value_iteration(M, b, base.discount, RESIDUAL_TOL * 1e-2)
    else:
        raise ValueError(f"unknown method {method!r}")
    return QTable(_q_from_v(model, V), augmented=isinstance(model, AugmentedMdp))


def bellman_residual(model: Model, pi: PolicyTable, q: QTable) -> float:
    """Max-norm residual of Q against its policy Bellman equation."""
    V = np.einsum("csa,csa->cs", q.values, pi.probs)[:, : model.n_states]
    target = _q_from_v(model, V)
    return float(np.abs(target - q.values).max())


def optimality_residual(model: Model, q: QTable) -> float:
    V = q.values[:, : model.n_states].max(axis=2)
    return float(np.abs(_q_from_v(model, V) - q.values).max())


def greedy_policy(q_values: np.ndarray, augmented: bool, tol: float = TIE_TOL) -> PolicyTable:
    """Deterministic greedy policy; ties go to the lowest action index."""
    best = q_values.max(axis=2, keepdims=True)
    idx = np.argmax(q_values >= best - tol, axis=2)
    probs = np.zeros_like(q_values)
    np.put_along_axis(probs, idx[..., None], 1.0, axis=2)
    if augmented:
        probs[:, -1, :] = 0.0
        probs[:, -1, -1] = 1.0
    return PolicyTable(probs, augmented)


def solve_optimal(model: Model, max_iter: int = 1000):
    """Optimal (QTable, greedy PolicyTable) via policy iteration.

    Each iterate is evaluated exactly, so the result is the Bellman optimality
    fixed point; the residual is asserted before returning.
    """
    augmented = isinstance(model, AugmentedMdp)
    pi = PolicyTable.uniform(model)
    pi = greedy_policy(np.zeros(pi.probs.shape), augmented)
    for _ in range(max_iter):
        q = policy_eval_exact(model, pi)
        new_pi = greedy_policy(q.values, augmented)
        if np.array_equal(new_pi.probs, pi.probs):
            break
        pi = new_pi
    residual = optimality_residual(model, q)
    if residual > RESIDUAL_TOL:
        raise RuntimeError(f"optimal solve residual {residual:.3g} exceeds {RESIDUAL_TOL}")
    return q, pi


def expected_return(model: Model, pi: PolicyTable) -> float:
    """J(pi) = V^pi(d0)."""
    base = model.base if isinstance(model, AugmentedMdp) else model
    V = policy_eval_exact(model, pi).state_values(pi)[:, : base.n_states]
    return float(np.sum(base.init_dist.T * V))


# ---------------------------------------------------------------------------
# random instances for property checks
# ---------------------------------------------------------------------------


def random_cgo(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    n_contexts: int,
    discount: float = 0.9,
    goal_prob: float = 0.15,
    resolution: int | None = None,
) -> ContextualMdp:
    """Dirichlet(1) kernel rows; each (c, s) is a goal with probability goal_prob.

    With ``resolution`` the rows are multinomial counts over that many trials,
    so every probability is a multiple of 1 / resolution.
    """
    if resolution is None:
        P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    else:
        P = rng.multinomial(resolution, rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))) / resolution
    goal = rng.random((n_contexts, n_states)) < goal_prob
    # every context keeps at least one non-goal start
    for c in range(n_contexts):
        if goal[c].all():
            goal[c, rng.integers(n_states)] = False
    weights = rng.random((n_states, n_contexts)) * (~goal.T)
    if weights.sum() == 0.0:
        s, c = np.argwhere(~goal.T)[0]
        weights[s, c] = 1.0
    return ContextualMdp(P, goal, discount, weights / weights.sum())


def random_policy(rng: np.random.Generator, model: Model) -> PolicyTable:
    shape = (model.n_contexts, model.n_states, model.n_actions)
    rows = rng.dirichlet(np.ones(model.n_actions), size=shape[:2])
    return PolicyTable.from_state_rows(rows, augmented=isinstance(model, AugmentedMdp))


# ---------------------------------------------------------------------------
# verification suite
# ---------------------------------------------------------------------------


@dataclass
class VerificationReport:
    claim: str
    tol: float
    violations: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.violations.values())

    def to_dict(self) -> dict:
        return {
            "claim": self.claim,
            "tol": self.tol,
            "passed": self.passed,
            "max_violation": {k: float(v) for k, v in self.violations.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _augmented_for(mdp: ContextualMdp, augmented: AugmentedMdp | None) -> AugmentedMdp:
    return build_augmented(mdp) if augmented is None else augmented


def verify_value_equivalence(
    mdp: ContextualMdp,
    pi: PolicyTable,
    tol: float = 1e-8,
    augmented: AugmentedMdp | None = None,
) -> VerificationReport:
    """V^pi = V-bar^{pi-bar} on X and Q^pi >= Q-bar^{pi-bar} on X x A."""
    if pi.augmented:
        raise MdpError("verify_value_equivalence expects an original-space policy")
    aug = _augmented_for(mdp, augmented)
    pi_bar = extend_policy(pi, mdp)
    S, A = mdp.n_states, mdp.n_actions
    q = policy_eval_exact(mdp, pi)
    q_bar = policy_eval_exact(aug, pi_bar)
    V = q.state_values(pi)[:, :S]
    V_bar = q_bar.state_values(pi_bar)[:, :S]
    excess = q_bar.values[:, :S, :A] - q.values[:, :S, :A]
    return VerificationReport(
        "value_equivalence",
        tol,
        {
            "value_gap": float(np.abs(V - V_bar).max()),
            "q_dominance": float(max(excess.max(), 0.0)),
        },
    )


def verify_regret_equivalence(
    mdp: ContextualMdp,
    pi: PolicyTable,
    tol: float = 1e-8,
    xi: PolicyTable | None = None,
    rng: np.random.Generator | None = None,
    augmented: AugmentedMdp | None = None,
) -> VerificationReport:
    """Regret(pi) = Regret-bar(pi-bar), and restriction never increases regret.

    If ``xi`` is omitted a random augmented policy is drawn from ``rng``.
    """
    aug = _augmented_for(mdp, augmented)
    if xi is None:
        xi = random_policy(rng if rng is not None else np.random.default_rng(0), aug)
    d0 = mdp.init_dist.T
    S = mdp.n_states

    def J(model, policy):
        return float(np.sum(d0 * policy_eval_exact(model, policy).state_values(policy)[:, :S]))

    q_star, _ = solve_optimal(mdp)
    q_bar_star, _ = solve_optimal(aug)
    J_star = float(np.sum(d0 * q_star.values[:, :S].max(axis=2)))
    J_bar_star = float(np.sum(d0 * q_bar_star.values[:, :S].max(axis=2)))
    regret = J_star - J(mdp, pi)
    regret_bar = J_bar_star - J(aug, extend_policy(pi, mdp))
    regret_xi_bar = J_bar_star - J(aug, xi)
    regret_xi = J_star - J(mdp, restrict_policy(xi, mdp))
    return VerificationReport(
        "regret_equivalence",
        tol,
        {
            "optimal_value_gap": abs(J_star - J_bar_star),
            "regret_gap": abs(regret - regret_bar),
            "restriction_excess": max(regret_xi - regret_xi_bar, 0.0),
        },
    )


def verify_bellman_reformulation(
    mdp: ContextualMdp,
    pi: PolicyTable,
    tol: float = 1e-8,
    augmented: AugmentedMdp | None = None,
) -> VerificationReport:
    """Augmented Bellman equation rewritten through max(R, Q^pi)."""
    aug = _augmented_for(mdp, augmented)
    pi_bar = extend_policy(pi, mdp)
    S, A, C = mdp.n_states, mdp.n_actions, mdp.n_contexts
    q = policy_eval_exact(mdp, pi)
    q_bar = policy_eval_exact(aug, pi_bar)
    R = mdp.goal_rewards()
    V = q.state_values(pi)
    lifted = np.maximum(R, V)  # (C, S+1); s+ entry is 0
    V_bar = q_bar.state_values(pi_bar)

    # target built from the augmented kernel itself, so a corrupted kernel shows up here
    target = np.zeros((C, S, A))
    for c in range(C):
        for s in range(S):
            for a in range(A):
                target[c, s, a] = aug.discount * aug.kernel(s, c, a) @ lifted[c]
    plus_rewards = np.array([[aug.reward(s, c, A) for s in range(S)] for c in range(C)])
    return VerificationReport(
        "bellman_reformulation",
        tol,
        {
            "real_action_residual": float(np.abs(q_bar.values[:, :S, :A] - target).max()),
            "plus_action_reward": float(np.abs(q_bar.values[:, :S, A] - R[:, :S]).max()),
            "plus_reward_definition": float(np.abs(plus_rewards - R[:, :S]).max()),
            "absorbing_zero": float(np.abs(q_bar.values[:, S, :]).max()),
            "max_q_and_r": float(np.abs(V_bar[:, :S] - lifted[:, :S]).max()),
        },
    )


def verify_all(
    mdp: ContextualMdp,
    rng: np.random.Generator,
    n_policies: int = 10,
    tol: float = 1e-8,
    augmented: AugmentedMdp | None = None,
) -> list[VerificationReport]:
    """Run the three claims on random policies, keeping the worst violation of each."""
    merged: dict[str, VerificationReport] = {}
    aug = _augmented_for(mdp, augmented)
    for _ in range(n_policies):
        pi = random_policy(rng, mdp)
        xi = random_policy(rng, aug)
        for rep in (
            verify_value_equivalence(mdp, pi, tol, aug),
            verify_regret_equivalence(mdp, pi, tol, xi=xi, augmented=aug),
            verify_bellman_reformulation(mdp, pi, tol, aug),
        ):
            acc = merged.setdefault(rep.claim, VerificationReport(rep.claim, tol))
            for k, v in rep.violations.items():
                acc.violations[k] = max(acc.violations.get(k, 0.0), v)
    return list(merged.values())


def check_row_stochastic(table: np.ndarray) -> float:
    return float(np.abs(table.sum(axis=-1) - 1.0).max())


__all__ = [
    "QTable",
    "VerificationReport",
    "bellman_residual",
    "expected_return",
    "greedy_policy",
    "optimality_residual",
    "policy_eval_exact",
    "random_cgo",
    "random_policy",
    "solve_optimal",
    "verify_all",
    "verify_bellman_reformulation",
    "verify_regret_equivalence",
    "verify_value_equivalence",
    "NORM_TOL",
]
